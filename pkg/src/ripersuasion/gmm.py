"""Moment conditions, GMM objectives and estimators for both estimation stages.

Stage 1 (no-persuasion markets) estimates mean utilities ``alpha[j, k, l]``
and unconditional choice probabilities ``p0[j, k, l]`` from three blocks of
unconditional moments, each interacted with characteristic-level dummies:

* share: ``(ms_j - sum_k p0_jk d_k) * d_k'``
* shock: ``delta*_j * z`` with ``z`` drawn from ``{1, d_k, d_k**2}``
* foc:   ``e^{v_jk} / sum_l p0_lk e^{v_lk} - 1`` with ``v = delta* + alpha^k``

where ``delta*`` is the market's inverted shock vector. Stage 2 (persuasion
markets) plugs the stage-1 estimates and the recovered pseudo-shock prior in
and matches shares to ``sum_k h_jk(theta) d_k``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import optimize

from .exceptions import IdentificationError, InputError, NumericError, SolverError, WeakIdentificationWarning
from .inversion import DEFAULT_THRESHOLDS, PseudoShocks, invert_batch, invert_newton
from .model import Belief, MarketPanel, PreferenceParams
from .persuasion import PersuasionStrategy, signal_solutions
from .solver import SolverOptions

log = logging.getLogger(__name__)

PENALTY = 1e10
CONDITION_FLAG = 1e8


class MomentTag(NamedTuple):
    condition: str  # share | shock | foc | persuasion
    j: int
    k: int
    l: int
    instrument: str


@dataclass(frozen=True)
class MomentVector:
    values: np.ndarray
    tags: tuple

    def __post_init__(self):
        if len(self.values) != len(self.tags):
            raise InputError("moment values and tags differ in length")

    def block(self, condition: str) -> np.ndarray:
        return self.values[[t.condition == condition for t in self.tags]]


# --------------------------------------------------------------------------- instruments


def shock_instrument_names(K: int, instruments: str | Sequence[str] = "reduced") -> list:
    """Names of the shock-moment instruments.

    ``"reduced"`` keeps ``1, d_k, d_k**2`` for ``k < K``: the last group's
    terms are linear combinations of the others because demographic weights
    sum to one (exactly so for ``K <= 2``). ``"full"`` keeps every group.
    """
    if not isinstance(instruments, str):
        return list(instruments)
    if instruments == "full":
        ks = range(K)
    elif instruments == "reduced":
        ks = range(K - 1)
    else:
        raise InputError(f"unknown instrument set {instruments!r}")
    return ["1"] + [f"d{k + 1}" for k in ks] + [f"d{k + 1}^2" for k in ks]


def instrument_matrix(demo: np.ndarray, names: Sequence[str]) -> np.ndarray:
    cols = []
    for name in names:
        if name == "1":
            cols.append(np.ones(demo.shape[0]))
        elif name.endswith("^2"):
            cols.append(demo[:, int(name[1:-2]) - 1] ** 2)
        elif name.startswith("d"):
            cols.append(demo[:, int(name[1:]) - 1])
        else:
            raise InputError(f"unknown instrument {name!r}")
    return np.column_stack(cols)


# --------------------------------------------------------------------------- stage 1


@dataclass(frozen=True)
class Stage1Layout:
    """Packing between parameter vectors and ``PreferenceParams``.

    The optimiser works on ``[alpha, eta]`` where ``eta`` are log-odds of each
    inside option against the outside option, which keeps every ``p0`` in the
    simplex interior. Reporting uses natural coordinates ``[alpha, p0_inside]``.
    """

    J: int
    K: int
    L: int

    @property
    def n_alpha(self) -> int:
        return (self.J - 1) * self.K * self.L

    @property
    def size(self) -> int:
        return 2 * self.n_alpha

    def names(self) -> list:
        out = []
        for block in ("alpha", "p0"):
            for j in range(self.J - 1):
                for k in range(self.K):
                    for l in range(self.L):
                        out.append(f"{block}[j={j + 1},k={k + 1},l={l + 1}]")
        return out

    def _alpha(self, flat):
        a = np.zeros((self.J, self.K, self.L))
        a[:-1] = np.reshape(flat, (self.J - 1, self.K, self.L))
        return a

    def unpack(self, x) -> PreferenceParams:
        x = np.asarray(x, dtype=float)
        eta = np.zeros((self.J, self.K, self.L))
        eta[:-1] = np.reshape(x[self.n_alpha:], (self.J - 1, self.K, self.L))
        eta -= eta.max(axis=0, keepdims=True)
        p0 = np.exp(eta)
        p0 /= p0.sum(axis=0, keepdims=True)
        return PreferenceParams(self._alpha(x[: self.n_alpha]), p0)

    def pack(self, params: PreferenceParams) -> np.ndarray:
        p0 = params.p0
        if np.any(p0 <= 0):
            raise InputError("log-odds packing needs strictly positive p0")
        eta = np.log(p0[:-1]) - np.log(p0[-1:])
        return np.concatenate([params.alpha[:-1].ravel(), eta.ravel()])

    def natural(self, params: PreferenceParams) -> np.ndarray:
        return np.concatenate([params.alpha[:-1].ravel(), params.p0[:-1].ravel()])

    def from_natural(self, z) -> PreferenceParams:
        z = np.asarray(z, dtype=float)
        p0 = np.zeros((self.J, self.K, self.L))
        p0[:-1] = np.reshape(z[self.n_alpha:], (self.J - 1, self.K, self.L))
        p0[-1] = 1 - p0[:-1].sum(axis=0)
        return PreferenceParams(self._alpha(z[: self.n_alpha]), p0)


def stage1_tags(J: int, K: int, L: int, instruments="reduced") -> tuple:
    names = shock_instrument_names(K, instruments)
    tags = []
    for j in range(J - 1):
        for k in range(K):
            for l in range(L):
                tags.append(MomentTag("share", j, k, l, f"d{k + 1}"))
    for j in range(J - 1):
        for zi, z in enumerate(names):
            for l in range(L):
                tags.append(MomentTag("shock", j, -1, l, z))
    for j in range(J - 1):
        for k in range(K):
            for l in range(L):
                tags.append(MomentTag("foc", j, k, l, "1"))
    return tuple(tags)


def _level_dummies(level, L):
    return (np.asarray(level)[:, None] == np.arange(L)[None, :]).astype(float)


def stage1_contributions(panel: MarketPanel, params: PreferenceParams, deltas, instruments="reduced") -> np.ndarray:
    """Per-market stage-1 moment contributions, shape ``(M, n_moments)``, in tag order."""
    J, K, L = params.J, params.K, params.L
    M = len(panel)
    S = np.asarray(panel.shares)
    D = np.asarray(panel.demo)
    lv = np.asarray(panel.level)
    dummies = _level_dummies(lv, L)  # (M, L)

    p0m = np.transpose(params.p0[:, :, lv], (2, 0, 1))  # (M, J, K)
    pred = np.einsum("mjk,mk->mj", p0m, D)
    resid = S[:, :-1] - pred[:, :-1]  # (M, J-1)
    share = resid[:, :, None, None] * D[:, None, :, None] * dummies[:, None, None, :]

    Z = instrument_matrix(D, shock_instrument_names(K, instruments))
    shock = deltas[:, :, None, None] * Z[:, None, :, None] * dummies[:, None, None, :]

    delta_full = np.concatenate([deltas, np.zeros((M, 1))], axis=1)  # (M, J)
    alpham = np.transpose(params.alpha[:, :, lv], (2, 0, 1))  # (M, J, K)
    v = delta_full[:, :, None] + alpham
    with np.errstate(divide="ignore"):
        a = v + np.log(p0m)
    m = a.max(axis=1, keepdims=True)
    logden = m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))
    ratio = np.exp(v - logden)[:, :-1, :] - 1.0  # (M, J-1, K)
    foc = ratio[:, :, :, None] * dummies[:, None, None, :]

    return np.concatenate([share.reshape(M, -1), shock.reshape(M, -1), foc.reshape(M, -1)], axis=1)


@dataclass
class Stage1Problem:
    """Stage-1 GMM problem bound to a data set; caches warm-start shocks."""

    panel: MarketPanel
    L: int
    instruments: str | Sequence[str] = "reduced"
    tol: float = 1e-12
    thresholds: Sequence[float] | None = DEFAULT_THRESHOLDS
    inner: str = "newton"  # newton | contraction
    _warm: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if np.any(self.panel.chi != 0):
            raise InputError("stage 1 uses no-persuasion markets only")
        self.layout = Stage1Layout(self.panel.J, self.panel.K, self.L)
        self.tags = stage1_tags(self.panel.J, self.panel.K, self.L, self.instruments)

    def deltas(self, params: PreferenceParams) -> np.ndarray:
        if self.inner == "newton":
            batch = invert_newton(self.panel, params, tol=self.tol, delta0=self._warm)
        else:
            batch = invert_batch(self.panel, params, tol=self.tol, thresholds=self.thresholds, delta0=self._warm)
        self._warm = batch.deltas
        return batch.deltas

    def contributions(self, params: PreferenceParams) -> np.ndarray:
        return stage1_contributions(self.panel, params, self.deltas(params), self.instruments)

    def moments(self, params: PreferenceParams) -> MomentVector:
        return MomentVector(self.contributions(params).mean(axis=0), self.tags)

    def mean_moments(self, x) -> np.ndarray | None:
        try:
            gbar = self.contributions(self.layout.unpack(x)).mean(axis=0)
        except (SolverError, NumericError, InputError, FloatingPointError):
            self._warm = None
            return None
        if not np.all(np.isfinite(gbar)):
            self._warm = None
            return None
        return gbar


def moments_stage1(markets, alpha, p0, L=None, instruments="reduced", tol=1e-12):
    """Sample-mean stage-1 moments and the per-market contributions."""
    panel = markets if isinstance(markets, MarketPanel) else MarketPanel.from_markets(list(markets))
    params = PreferenceParams(alpha, p0)
    prob = Stage1Problem(panel, params.L if L is None else L, instruments, tol)
    contrib = prob.contributions(params)
    return MomentVector(contrib.mean(axis=0), prob.tags), contrib


def gmm_objective(gbar, W=None) -> float:
    gbar = np.asarray(gbar)
    return float(gbar @ gbar) if W is None else float(gbar @ W @ gbar)


def _sqrt_weight(W):
    if W is None:
        return None
    vals, vecs = np.linalg.eigh((W + W.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


@dataclass(frozen=True)
class Stage1Options:
    weight: str = "identity"  # identity | efficient
    n_starts: int = 5
    seed: int = 0
    method: str = "least_squares"  # least_squares | bfgs
    fd_step: float = 1e-6
    cov_step: float = 1e-5
    max_nfev: int = 400
    instruments: str | tuple = "reduced"
    inversion_tol: float = 1e-12
    inner: str = "newton"
    start_scale: float = 0.5
    compute_covariance: bool = True


@dataclass
class GmmEstimate:
    point: np.ndarray
    params: PreferenceParams
    objective: float
    weight_matrix: str
    W: np.ndarray | None
    covariance: np.ndarray | None
    converged: bool
    names: list
    moments: MomentVector | None = None
    trace: list = field(default_factory=list, repr=False)
    n_markets: int = 0

    @property
    def se(self) -> np.ndarray | None:
        return None if self.covariance is None else np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def alpha_se(self) -> np.ndarray | None:
        """Standard errors of ``alpha[j, k, l]`` for inside options, shape ``(J-1, K, L)``."""
        if self.covariance is None:
            return None
        J, K, L = self.params.shape
        return self.se[: (J - 1) * K * L].reshape(J - 1, K, L)

    def p0_se(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        J, K, L = self.params.shape
        n = (J - 1) * K * L
        inside = self.se[n:].reshape(J - 1, K, L)
        # outside p0 = 1 - sum(inside): variance from the inside block
        cov = self.covariance[n:, n:]
        outside = np.zeros((K, L))
        for k in range(K):
            for l in range(L):
                idx = [np.ravel_multi_index((j, k, l), (J - 1, K, L)) for j in range(J - 1)]
                outside[k, l] = np.sqrt(max(cov[np.ix_(idx, idx)].sum(), 0.0))
        return np.concatenate([inside, outside[None]], axis=0)


def starting_values(panel: MarketPanel, L: int) -> PreferenceParams:
    """Moment-based starting point.

    ``p0`` from a per-level least-squares regression of shares on demographic
    weights (clipped into the simplex interior); ``alpha`` from the
    single-group closed form applied to mean log share ratios.
    """
    J, K = panel.J, panel.K
    S, D, lv = np.asarray(panel.shares), np.asarray(panel.demo), np.asarray(panel.level)
    p0 = np.zeros((J, K, L))
    alpha = np.zeros((J, K, L))
    for l in range(L):
        sel = lv == l
        if not np.any(sel):
            p0[:, :, l] = 1.0 / J
            continue
        coef, *_ = np.linalg.lstsq(D[sel], S[sel], rcond=None)  # (K, J)
        coef = np.clip(coef, 0.02, None)
        coef /= coef.sum(axis=1, keepdims=True)
        p0[:, :, l] = coef.T
        mean_ratio = np.mean(np.log(S[sel, :-1] / S[sel, -1:]), axis=0)
        alpha[:-1, :, l] = mean_ratio[:, None] - np.log(p0[:-1, :, l] / p0[-1:, :, l])
    return PreferenceParams(alpha, p0)


def _fit_once(problem: Stage1Problem, x0, W, opts: Stage1Options, trace):
    Wh = _sqrt_weight(W)
    n_mom = len(problem.tags)

    def residuals(x):
        g = problem.mean_moments(x)
        if g is None:
            return np.full(n_mom, np.sqrt(PENALTY / n_mom))
        return g if Wh is None else Wh @ g

    if opts.method == "least_squares":
        res = optimize.least_squares(
            residuals, x0, jac="3-point", diff_step=opts.fd_step, method="trf",
            x_scale=1.0, xtol=1e-12, ftol=1e-14, gtol=1e-12, max_nfev=opts.max_nfev,
        )
        x, ok = res.x, bool(res.success)
    elif opts.method == "bfgs":

        def fun(x):
            r = residuals(x)
            return float(r @ r)

        def grad(x):
            g = np.empty_like(x)
            for i in range(x.size):
                h = opts.fd_step * max(1.0, abs(x[i]))
                e = np.zeros_like(x)
                e[i] = h
                g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
            return g

        res = optimize.minimize(fun, x0, jac=grad, method="BFGS", options={"gtol": 1e-10, "maxiter": opts.max_nfev})
        x, ok = res.x, bool(res.success)
    else:
        raise InputError(f"unknown optimizer {opts.method!r}")
    r = residuals(x)
    obj = float(r @ r)
    trace.append({"start": x0.tolist(), "x": x.tolist(), "objective": obj, "success": ok})
    return x, obj, ok


def numerical_jacobian(fun, z, rel_step=1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of a vector function."""
    z = np.asarray(z, dtype=float)
    f0 = fun(z)
    jac = np.empty((f0.size, z.size))
    for i in range(z.size):
        h = rel_step * max(1.0, abs(z[i]))
        e = np.zeros_like(z)
        e[i] = h
        jac[:, i] = (fun(z + e) - fun(z - e)) / (2 * h)
    return jac


def sandwich_covariance(contributions, jacobian, W=None, names=None) -> np.ndarray:
    """Sandwich covariance ``(B'WB)^-1 B'W Lambda W B (B'WB)^-1 / M``.

    ``Lambda`` is the uncentred sample second moment of the per-market
    contributions and ``B`` the Jacobian of the mean moments.
    """
    G = np.asarray(contributions, dtype=float)
    B = np.asarray(jacobian, dtype=float)
    M, q = G.shape
    W = np.eye(q) if W is None else np.asarray(W, dtype=float)
    u, s, vt = np.linalg.svd(B, full_matrices=False)
    if s.size < B.shape[1] or s[-1] <= 1e-10 * s[0]:
        null = vt[-1]
        labels = names or [f"param[{i}]" for i in range(B.shape[1])]
        involved = [labels[i] for i in np.flatnonzero(np.abs(null) > 0.1)]
        raise IdentificationError(f"moment Jacobian is rank deficient; null space involves {involved}")
    Lam = G.T @ G / M
    bread = np.linalg.inv(B.T @ W @ B)
    meat = B.T @ W @ Lam @ W @ B
    return bread @ meat @ bread / M


def estimate_stage1(markets, L: int | None = None, options: Stage1Options | None = None) -> GmmEstimate:
    """GMM estimate of ``(alpha, p0)`` from no-persuasion markets."""
    opts = options or Stage1Options()
    panel = markets if isinstance(markets, MarketPanel) else MarketPanel.from_markets(list(markets))
    L = int(panel.level.max()) + 1 if L is None else L
    problem = Stage1Problem(panel, L, opts.instruments, opts.inversion_tol, inner=opts.inner)
    layout = problem.layout
    x_start = layout.pack(starting_values(panel, L))
    rng = np.random.default_rng(opts.seed)
    starts = [x_start] + [x_start + opts.start_scale * rng.standard_normal(x_start.size) for _ in range(opts.n_starts - 1)]

    trace: list = []
    best = None
    for x0 in starts:
        problem._warm = None
        x, obj, ok = _fit_once(problem, x0, None, opts, trace)
        if best is None or obj < best[1]:
            best = (x, obj, ok)
    W = None
    label = "identity"
    if opts.weight == "efficient":
        problem._warm = None
        G = problem.contributions(layout.unpack(best[0]))
        W = np.linalg.pinv(G.T @ G / G.shape[0])
        label = "efficient (pinv of second moment at first-step estimate)"
        x, obj, ok = _fit_once(problem, best[0], W, opts, trace)
        best = (x, obj, ok)
    elif opts.weight != "identity":
        raise InputError(f"unknown weighting {opts.weight!r}")

    x, obj, ok = best
    if obj >= PENALTY / 10:
        raise SolverError("stage-1 GMM found no point where every market inverts", residual=obj, trace=trace)
    params = layout.unpack(x)
    problem._warm = None
    contrib = problem.contributions(params)
    moments = MomentVector(contrib.mean(axis=0), problem.tags)
    cov = None
    if opts.compute_covariance:
        names = layout.names()

        def gbar_nat(z):
            return problem.contributions(layout.from_natural(z)).mean(axis=0)

        jac = numerical_jacobian(gbar_nat, layout.natural(params), opts.cov_step)
        cov = sandwich_covariance(contrib, jac, W, names)
    return GmmEstimate(
        point=x, params=params, objective=obj, weight_matrix=label, W=W, covariance=cov,
        converged=ok, names=layout.names(), moments=moments, trace=trace, n_markets=len(panel),
    )


# --------------------------------------------------------------------------- stage 2


def _level_priors(prior, L):
    if isinstance(prior, PseudoShocks):
        out = []
        for l in range(L):
            if np.any(prior.levels == l):
                out.append(prior.level_belief(l))
            else:
                out.append(prior.belief)
        return out
    if isinstance(prior, Belief):
        return [prior] * L
    return list(prior)


def h_table(prior, strategy: PersuasionStrategy, params: PreferenceParams, options: SolverOptions | None = None) -> np.ndarray:
    """``h[j, k, l]``: integrated choice probabilities under persuasion for every group and level."""
    J, K, L = params.shape
    priors = _level_priors(prior, L)
    h = np.zeros((J, K, L))
    for l in range(L):
        for k in range(K):
            h[:, k, l] = signal_solutions(priors[l], strategy, k, params.alpha_slice(k, l), options).h
    return h


def stage2_tags(J, K, L) -> tuple:
    return tuple(
        MomentTag("persuasion", j, k, l, f"d{k + 1}") for j in range(J - 1) for k in range(K) for l in range(L)
    )


def stage2_contributions(panel: MarketPanel, h: np.ndarray) -> np.ndarray:
    """Per-market ``(ms_j - sum_d h_jd d_d) d_k 1{X = l}``, shape ``(N, (J-1) K L)``."""
    J, K, L = h.shape
    S, D, lv = np.asarray(panel.shares), np.asarray(panel.demo), np.asarray(panel.level)
    dummies = _level_dummies(lv, L)
    hm = np.transpose(h[:, :, lv], (2, 0, 1))  # (N, J, K)
    resid = S[:, :-1] - np.einsum("njk,nk->nj", hm, D)[:, :-1]
    g = resid[:, :, None, None] * D[:, None, :, None] * dummies[:, None, None, :]
    return g.reshape(len(panel), -1)


def moments_stage2_theta(markets, theta, prior, strategy: PersuasionStrategy, params_stage1: PreferenceParams, options=None):
    """Sample-mean persuasion moments at ``theta`` and the per-market contributions."""
    panel = markets if isinstance(markets, MarketPanel) else MarketPanel.from_markets(list(markets))
    if np.any(panel.chi != 1):
        raise InputError("stage 2 uses persuasion markets only")
    h = h_table(prior, strategy.with_theta(theta), params_stage1, options)
    contrib = stage2_contributions(panel, h)
    J, K, L = params_stage1.shape
    return MomentVector(contrib.mean(axis=0), stage2_tags(J, K, L)), contrib


@dataclass(frozen=True)
class ThetaOptions:
    lower: float = 0.5
    upper: float = 1.0
    grid_points: int = 50
    xtol: float = 1e-5
    plateau_z: float = 1.96
    weak_id_fraction: float = 0.5
    solver: SolverOptions = SolverOptions()
    W: np.ndarray | None = None
    seed: int = 0


@dataclass
class ThetaEstimate:
    theta: np.ndarray
    objective: float
    grid: np.ndarray
    profile: np.ndarray
    weak_identification: bool
    plateau: tuple
    h: np.ndarray
    profile_se: np.ndarray | None = None
    evaluations: int = 0
    bootstrap_draws: np.ndarray | None = None

    @property
    def bootstrap_se(self) -> np.ndarray | None:
        if self.bootstrap_draws is None:
            return None
        return np.std(self.bootstrap_draws, axis=0, ddof=1)


class Stage2Problem:
    def __init__(self, panel, prior, strategy, params, options: ThetaOptions):
        if np.any(panel.chi != 1):
            raise InputError("stage 2 uses persuasion markets only")
        self.panel = panel
        self.prior = prior
        self.strategy = strategy
        self.params = params
        self.opts = options
        self.evaluations = 0
        q = (params.J - 1) * params.K * params.L
        self.W = np.eye(q) if options.W is None else np.asarray(options.W, dtype=float)

    def contributions(self, theta):
        h = h_table(self.prior, self.strategy.with_theta(np.atleast_1d(theta)), self.params, self.opts.solver)
        return stage2_contributions(self.panel, h), h

    def objective(self, theta) -> float:
        self.evaluations += 1
        g, _ = self.contributions(theta)
        return gmm_objective(g.mean(axis=0), self.W)


def _golden(f, a, b, xtol):
    invphi = (np.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > xtol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def profile_difference_se(contribs, best: int, W) -> np.ndarray:
    """Delta-method standard error of ``Q(theta_i) - Q(theta_best)`` across markets.

    ``contribs`` is ``(n_grid, N, q)``. Each market's influence on the
    difference is ``2 g_m(theta_i)' W gbar_i - 2 g_m(theta_b)' W gbar_b``.
    """
    gbar = contribs.mean(axis=1)  # (n_grid, q)
    infl = 2 * np.einsum("inq,qr,ir->in", contribs, W, gbar)
    diff = infl - infl[best][None, :]
    return diff.std(axis=1) / np.sqrt(contribs.shape[1])


def _plateau(profile, best, tol):
    lo = hi = best
    while lo > 0 and profile[lo - 1] - profile[best] <= tol[lo - 1]:
        lo -= 1
    while hi < profile.size - 1 and profile[hi + 1] - profile[best] <= tol[hi + 1]:
        hi += 1
    return lo, hi


def estimate_theta(markets, prior, strategy: PersuasionStrategy, params_stage1: PreferenceParams, options: ThetaOptions | None = None) -> ThetaEstimate:
    """Second-step GMM estimate of the persuasion parameter.

    Scalar ``theta``: a grid profile over ``[lower, upper]`` seeds a golden
    section search inside the bracket around the best grid point. Vector
    ``theta``: Nelder-Mead from the best point of a seeded random design.

    The full profile is returned so flat regions are visible. The minimising
    plateau is the contiguous block of grid points whose objective exceeds
    the grid minimum by no more than ``plateau_z`` delta-method standard
    errors of the difference, i.e. points the sample cannot tell apart from
    the minimum. If that block covers at least ``weak_id_fraction`` of the
    grid, a ``WeakIdentificationWarning`` is issued and the grid midpoint of
    the plateau is returned instead of a refined minimiser.
    """
    opts = options or ThetaOptions()
    panel = markets if isinstance(markets, MarketPanel) else MarketPanel.from_markets(list(markets))
    prob = Stage2Problem(panel, prior, strategy, params_stage1, opts)
    dim = strategy.theta.size
    if not 0 < opts.lower < opts.upper <= 1 and all(f != "custom" for f in strategy.families):
        raise InputError("theta bounds must satisfy 0 < lower < upper <= 1")
    profile_se = None
    if dim == 1:
        grid = np.linspace(opts.lower, opts.upper, opts.grid_points)
        contribs = np.stack([prob.contributions(t)[0] for t in grid])
        prob.evaluations += grid.size
        gbar = contribs.mean(axis=1)
        profile = np.einsum("iq,qr,ir->i", gbar, prob.W, gbar)
        best = int(np.argmin(profile))
        profile_se = profile_difference_se(contribs, best, prob.W)
        lo, hi = _plateau(profile, best, opts.plateau_z * profile_se)
        weak = (hi - lo + 1) >= opts.weak_id_fraction * grid.size
        if weak:
            warnings.warn(
                f"weak identification: objective profile indistinguishable from its minimum on "
                f"[{grid[lo]:.4f}, {grid[hi]:.4f}]",
                WeakIdentificationWarning,
                stacklevel=2,
            )
            theta_hat = np.array([0.5 * (grid[lo] + grid[hi])])
            obj = prob.objective(theta_hat[0])
        else:
            a = grid[max(best - 1, 0)]
            b = grid[min(best + 1, grid.size - 1)]
            t, obj = _golden(prob.objective, a, b, opts.xtol)
            if profile[best] < obj:
                t, obj = grid[best], profile[best]
            theta_hat = np.array([t])
        plateau = (float(grid[lo]), float(grid[hi]))
    else:
        rng = np.random.default_rng(opts.seed)
        grid = rng.uniform(opts.lower, opts.upper, size=(opts.grid_points, dim))
        profile = np.array([prob.objective(t) for t in grid])
        best = int(np.argmin(profile))

        def f(t):
            if np.any(t < opts.lower) or np.any(t > opts.upper):
                return PENALTY
            return prob.objective(t)

        res = optimize.minimize(f, grid[best], method="Nelder-Mead", options={"xatol": opts.xtol, "fatol": 1e-14})
        theta_hat, obj = np.asarray(res.x), float(res.fun)
        weak, plateau = False, ()
    _, h = prob.contributions(theta_hat)
    return ThetaEstimate(theta_hat, float(obj), grid, profile, bool(weak), plateau, h, profile_se, prob.evaluations)


# --------------------------------------------------------------------------- diagnostics


@dataclass(frozen=True)
class IdentificationReport:
    share_condition: np.ndarray  # per level
    shock_condition: np.ndarray
    flagged: tuple
    threshold: float = CONDITION_FLAG

    @property
    def ok(self) -> bool:
        return not self.flagged


def _condition(Z):
    if Z.shape[0] == 0:
        return np.inf
    A = Z.T @ Z / Z.shape[0]
    s = np.linalg.svd(A, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else np.inf


def identification_diagnostics(markets, L: int | None = None, instruments="reduced", threshold=CONDITION_FLAG) -> IdentificationReport:
    """Condition numbers of the instrument second-moment matrices, per level.

    The share block uses ``D`` (so the matrix is the sample mean of ``D D'``);
    the shock block uses the configured shock instruments.
    """
    panel = markets if isinstance(markets, MarketPanel) else MarketPanel.from_markets(list(markets))
    L = int(panel.level.max()) + 1 if L is None else L
    D = np.asarray(panel.demo)
    names = shock_instrument_names(panel.K, instruments)
    share_c, shock_c, flagged = [], [], []
    for l in range(L):
        sel = np.asarray(panel.level) == l
        cs = _condition(D[sel])
        cz = _condition(instrument_matrix(D[sel], names))
        share_c.append(cs)
        shock_c.append(cz)
        if cs > threshold:
            flagged.append(("share", l, cs))
        if cz > threshold:
            flagged.append(("shock", l, cz))
    return IdentificationReport(np.array(share_c), np.array(shock_c), tuple(flagged), threshold)
