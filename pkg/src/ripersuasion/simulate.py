"""Synthetic markets from a known data-generating process.

Each market draws its characteristic level, its demographic weights (Dirichlet
per level, independent of everything else), one shock atom from the finite
prior ``G`` and, in persuasion markets, one signal per demographic group.
Shares are exact population choice probabilities unless a finite voter count
is configured.

Random numbers come from a counter-based generator: market ``i`` uses Philox
keyed by the root seed with ``i`` in the high counter word, so every market's
draws are fixed by ``(seed, i)`` alone and generation can be split across any
number of workers without changing a single bit of output.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import roots_jacobi

from .exceptions import InputError
from .gmm import MomentVector, gmm_objective, stage1_contributions, stage1_tags, stage2_contributions, stage2_tags, h_table
from .inversion import invert_batch
from .model import Belief, ChoiceSpec, MarketPanel, PreferenceParams, utilities
from .persuasion import PersuasionStrategy, signal_prob
from .solver import SolverOptions, conditional_choice_prob, solve_weighted


@dataclass(frozen=True)
class DgpSpec:
    """Truth for one simulated data set.

    Parameters
    ----------
    alpha : (J, K, L) array
        Mean utilities, outside option last and zero.
    prior : Belief
        Finite shock distribution ``G``. Moment conditions with a constant
        instrument presume ``E[eps] = 0``.
    dirichlet : (L, K) array
        Dirichlet concentration of the demographic weights at each level.
    n_markets, n_persuasion : int
        Counts of no-persuasion and persuasion markets. No-persuasion markets
        come first in the output.
    level_probs : (L,) array, optional
        Level probabilities, uniform by default.
    strategy : PersuasionStrategy, optional
        Required when ``n_persuasion > 0``.
    voters : int, optional
        If set, shares are multinomial frequencies from this many voters.
    """

    alpha: np.ndarray
    prior: Belief
    dirichlet: np.ndarray
    n_markets: int = 1000
    n_persuasion: int = 0
    level_probs: np.ndarray | None = None
    strategy: PersuasionStrategy | None = None
    seed: int = 0
    voters: int | None = None
    choice: ChoiceSpec | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim == 1:
            alpha = alpha[:, None, None]
        object.__setattr__(self, "alpha", alpha)
        J, K, L = alpha.shape
        choice = self.choice or ChoiceSpec(J, K, L)
        if (choice.J, choice.K, choice.L) != (J, K, L):
            raise InputError(f"choice spec {(choice.J, choice.K, choice.L)} does not match alpha shape {alpha.shape}")
        object.__setattr__(self, "choice", choice)
        dirichlet = np.atleast_2d(np.asarray(self.dirichlet, dtype=float))
        if dirichlet.shape == (1, K) and L > 1:
            dirichlet = np.repeat(dirichlet, L, axis=0)
        if dirichlet.shape != (L, K) or np.any(dirichlet <= 0):
            raise InputError(f"dirichlet must be a positive ({L}, {K}) array")
        object.__setattr__(self, "dirichlet", dirichlet)
        lp = np.full(L, 1.0 / L) if self.level_probs is None else np.asarray(self.level_probs, dtype=float)
        if lp.shape != (L,) or np.any(lp < 0) or abs(lp.sum() - 1) > 1e-12:
            raise InputError("level_probs must be a probability vector of length L")
        object.__setattr__(self, "level_probs", lp)
        if self.prior.J != J:
            raise InputError(f"prior has dimension {self.prior.J}, expected J={J}")
        if self.n_markets < 0 or self.n_persuasion < 0 or self.n_markets + self.n_persuasion == 0:
            raise InputError("need at least one market (n_markets + n_persuasion >= 1)")
        if self.n_persuasion > 0 and self.strategy is None:
            raise InputError("persuasion markets require a strategy")
        if self.strategy is not None and self.strategy.K != K:
            raise InputError(f"strategy covers {self.strategy.K} groups, expected K={K}")
        if self.voters is not None and self.voters < 1:
            raise InputError("voters must be a positive integer")
        PreferenceParams(alpha, np.full(alpha.shape, 1.0 / J))  # validates alpha

    @property
    def M(self) -> int:
        return self.n_markets + self.n_persuasion


@dataclass(frozen=True)
class SimulationTruth:
    """Hidden draws aligned with the simulated markets."""

    eps: np.ndarray  # (M, J)
    atoms: np.ndarray  # (M,) index into the prior's support
    signals: np.ndarray  # (M, K) signal index, -1 where chi = 0
    params: PreferenceParams
    p0_signal: np.ndarray | None = None  # (S, J, K, L)


@dataclass(frozen=True)
class SimulatedData:
    panel: MarketPanel
    truth: SimulationTruth
    spec: DgpSpec


def _solve(V, w, options):
    keep = w > 0
    return solve_weighted(V[keep], w[keep] / w[keep].sum(), options).p0


def true_params(spec: DgpSpec) -> PreferenceParams:
    """Unconditional choice probabilities implied by ``(alpha, G)`` at every (group, level)."""
    J, K, L = spec.alpha.shape
    p0 = np.zeros((J, K, L))
    for k in range(K):
        for l in range(L):
            p0[:, k, l] = _solve(utilities(spec.alpha[:, k, l], spec.prior.support), spec.prior.weights, spec.solver)
    return PreferenceParams(spec.alpha, p0)


def signal_p0(spec: DgpSpec, strategy: PersuasionStrategy | None = None) -> tuple:
    """Per-signal unconditional choice probabilities ``(S, J, K, L)`` and signal likelihoods ``(K, n, S)``.

    Zero-probability signals get NaN rows; they are never drawn.
    """
    strategy = strategy or spec.strategy
    J, K, L = spec.alpha.shape
    G = spec.prior
    S = len(strategy.signals)
    lik = np.stack([np.atleast_2d(signal_prob(strategy, k, G.support)) for k in range(K)])
    out = np.full((S, J, K, L), np.nan)
    for k in range(K):
        for s in range(S):
            w = G.weights * lik[k, :, s]
            if not w.sum() > 0:
                continue
            for l in range(L):
                out[s, :, k, l] = _solve(utilities(spec.alpha[:, k, l], G.support), w, spec.solver)
    return out, lik


def _choice_table(p0, alpha, support):
    """``P[k, l, i, :]``: conditional choice probabilities at each atom."""
    J, K, L = alpha.shape
    out = np.zeros((K, L, support.shape[0], J))
    for k in range(K):
        for l in range(L):
            out[k, l] = conditional_choice_prob(p0[:, k, l], utilities(alpha[:, k, l], support))
    return out


def market_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for one market: Philox keyed by ``seed``, ``index`` in the high counter word."""
    return np.random.Generator(np.random.Philox(key=int(seed) % 2**128, counter=[0, 0, 0, int(index)]))


def _draw_chunk(spec: DgpSpec, indices, table0, table_s, lik):
    J, K, L = spec.alpha.shape
    level_cdf = np.cumsum(spec.level_probs)
    atom_cdf = np.cumsum(spec.prior.weights)
    n = len(indices)
    shares = np.zeros((n, J))
    demo = np.zeros((n, K))
    level = np.zeros(n, dtype=int)
    atoms = np.zeros(n, dtype=int)
    signals = np.full((n, K), -1, dtype=int)
    for r, i in enumerate(indices):
        rng = market_rng(spec.seed, i)
        chi = int(i >= spec.n_markets)
        l = min(int(np.searchsorted(level_cdf, rng.random(), side="right")), L - 1)
        d = rng.dirichlet(spec.dirichlet[l])
        a = min(int(np.searchsorted(atom_cdf, rng.random(), side="right")), atom_cdf.size - 1)
        if chi:
            u = rng.random(K)
            s = np.array([min(int(np.searchsorted(np.cumsum(lik[k, a]), u[k], side="right")), lik.shape[2] - 1) for k in range(K)])
            probs = np.stack([table_s[s[k]][k, l, a] for k in range(K)])
            signals[r] = s
        else:
            probs = table0[:, l, a]
        sh = d @ probs
        if spec.voters is not None:
            sh = rng.multinomial(spec.voters, sh / sh.sum()) / spec.voters
        shares[r], demo[r], level[r], atoms[r] = sh, d, l, a
    return shares, demo, level, atoms, signals


def simulate_markets(spec: DgpSpec, jobs: int = 1, chunk: int = 500) -> SimulatedData:
    """Simulate ``spec.M`` markets; output is identical for every ``jobs``."""
    params = true_params(spec)
    G = spec.prior
    table0 = _choice_table(params.p0, spec.alpha, G.support)
    table_s, lik, p0_sig = None, None, None
    if spec.n_persuasion:
        p0_sig, lik = signal_p0(spec)
        table_s = []
        for s in range(p0_sig.shape[0]):
            if np.all(np.isnan(p0_sig[s])):
                table_s.append(None)
                continue
            # groups for which signal s is null get placeholder rows; they are never drawn
            filled = np.where(np.isnan(p0_sig[s]), params.p0, p0_sig[s])
            table_s.append(_choice_table(filled, spec.alpha, G.support))
    blocks = [range(a, min(a + chunk, spec.M)) for a in range(0, spec.M, chunk)]
    if jobs == 1 or len(blocks) == 1:
        parts = [_draw_chunk(spec, b, table0, table_s, lik) for b in blocks]
    else:
        parts = Parallel(n_jobs=jobs)(delayed(_draw_chunk)(spec, b, table0, table_s, lik) for b in blocks)
    shares, demo, level, atoms, signals = (np.concatenate(x) for x in zip(*parts))
    chi = (np.arange(spec.M) >= spec.n_markets).astype(int)
    ids = tuple(f"m{i:06d}" for i in range(spec.M))
    panel = MarketPanel(ids, chi, shares, demo, level)
    truth = SimulationTruth(G.support[atoms], atoms, signals, params, p0_sig)
    return SimulatedData(panel, truth, spec)


# --------------------------------------------------------------------------- exact expectations


def dirichlet_quadrature(a, n: int = 8) -> tuple:
    """Product Gauss-Jacobi rule for a Dirichlet(a) distribution via stick breaking.

    Returns nodes ``(Q, K)`` and weights ``(Q,)`` summing to one. Exact for
    polynomials of degree ``2n - 1`` in each stick coordinate.
    """
    a = np.asarray(a, dtype=float)
    K = a.size
    if K == 1:
        return np.ones((1, 1)), np.ones(1)
    rules = []
    for i in range(K - 1):
        b = a[i + 1:].sum()
        t, w = roots_jacobi(n, b - 1, a[i] - 1)
        rules.append(((1 + t) / 2, w / w.sum()))
    nodes, weights = [], []
    for combo in itertools.product(*(range(n) for _ in rules)):
        rest, d, wt = 1.0, np.zeros(K), 1.0
        for i, c in enumerate(combo):
            x, w = rules[i]
            d[i] = rest * x[c]
            rest -= d[i]
            wt *= w[c]
        d[-1] = rest
        nodes.append(d)
        weights.append(wt)
    return np.array(nodes), np.array(weights)


def population_panel(spec: DgpSpec, persuasion: bool = False, nodes: int = 8, strategy: PersuasionStrategy | None = None):
    """Weighted synthetic panel whose weighted means are exact population expectations.

    Enumerates levels x Dirichlet quadrature nodes x prior atoms (x signal
    profiles for persuasion markets).
    """
    J, K, L = spec.alpha.shape
    G = spec.prior
    params = true_params(spec)
    if persuasion:
        strategy = strategy or spec.strategy
        p0_sig, lik = signal_p0(spec, strategy)
        S = p0_sig.shape[0]
        tables = [
            None if np.all(np.isnan(p0_sig[s])) else _choice_table(np.where(np.isnan(p0_sig[s]), params.p0, p0_sig[s]), spec.alpha, G.support)
            for s in range(S)
        ]
        profiles = list(itertools.product(range(S), repeat=K))
    else:
        table0 = _choice_table(params.p0, spec.alpha, G.support)
        profiles = [None]
    shares, demo, level, weights = [], [], [], []
    for l in range(L):
        D, wd = dirichlet_quadrature(spec.dirichlet[l], nodes)
        for q in range(D.shape[0]):
            for a in range(len(G)):
                for prof in profiles:
                    if prof is None:
                        pw, probs = 1.0, table0[:, l, a]
                    else:
                        pw = float(np.prod([lik[k, a, prof[k]] for k in range(K)]))
                        if pw == 0:
                            continue
                        probs = np.stack([tables[prof[k]][k, l, a] for k in range(K)])
                    w = spec.level_probs[l] * wd[q] * G.weights[a] * pw
                    if w == 0:
                        continue
                    shares.append(D[q] @ probs)
                    demo.append(D[q])
                    level.append(l)
                    weights.append(w)
    n = len(weights)
    panel = MarketPanel(
        tuple(f"q{i:06d}" for i in range(n)), np.full(n, int(persuasion)),
        np.array(shares), np.array(demo), np.array(level, dtype=int),
    )
    return panel, np.array(weights)


@dataclass(frozen=True)
class OracleMoments:
    stage1: MomentVector
    stage2: MomentVector | None
    objective1: float
    objective2: float | None


def exact_moment_oracle(
    spec: DgpSpec,
    params: PreferenceParams | None = None,
    theta=None,
    nodes: int = 8,
    instruments="reduced",
    options: SolverOptions | None = None,
) -> OracleMoments:
    """Population moments as exact sums over levels, demographics, atoms and signals.

    Data are generated at the truth in ``spec``; moments are evaluated at
    ``params`` (default: truth) and, for persuasion markets, at ``theta``
    (default: the spec's). Demographic expectations use Gauss-Jacobi
    quadrature, which is exact for the polynomial-in-``D`` terms that arise
    at the truth.
    """
    params = params or true_params(spec)
    panel, w = population_panel(spec, False, nodes)
    deltas = invert_batch(panel, params).deltas
    g1 = w @ stage1_contributions(panel, params, deltas, instruments)
    m1 = MomentVector(g1, stage1_tags(params.J, params.K, params.L, instruments))
    m2 = obj2 = None
    if spec.strategy is not None:
        strategy = spec.strategy if theta is None else spec.strategy.with_theta(theta)
        panel2, w2 = population_panel(spec, True, nodes)
        h = h_table(spec.prior, strategy, params, options)
        g2 = w2 @ stage2_contributions(panel2, h)
        m2 = MomentVector(g2, stage2_tags(params.J, params.K, params.L))
        obj2 = gmm_objective(g2)
    return OracleMoments(m1, m2, gmm_objective(g1), obj2)
