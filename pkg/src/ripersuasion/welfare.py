"""First-best achievement: how often decision makers pick the full-information optimum.

For a realised shock ``eps`` the first-best option of group ``k`` is
``argmax_j alpha_jk + eps_j`` (ties go to the lowest index). Without
persuasion the achievement probability is the logit-form conditional choice
probability of that option; with persuasion it is the mixture over signals
``sum_s Pr(s | eps) P_s(alpha + eps)[j_fb]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .exceptions import InputError
from .inversion import PseudoShocks
from .model import Belief, PreferenceParams, utilities
from .persuasion import PersuasionStrategy, signal_prob, signal_solutions
from .solver import SolverOptions, conditional_choice_prob, solve_weighted

DEFAULT_BINS = 30


def first_best_choice(alpha_slice, eps) -> np.ndarray | int:
    """Index of the utility-maximising option; lowest index wins ties."""
    v = np.asarray(alpha_slice, dtype=float) + np.asarray(eps, dtype=float)
    if not np.all(np.isfinite(v)):
        raise InputError("utilities must be finite")
    out = np.argmax(v, axis=-1)
    return int(out) if out.ndim == 0 else out


def prior_p0(prior: Belief, alpha_slice, options: SolverOptions | None = None) -> np.ndarray:
    """Unconditional choice probabilities under ``prior``.

    Uses the same weight normalisation as the per-signal solves, so a
    constant-signal strategy reproduces these probabilities bit for bit.
    """
    w = prior.weights
    keep = w > 0
    V = utilities(alpha_slice, prior.support)
    return solve_weighted(V[keep], w[keep] / w[keep].sum(), options).p0


def _achievement(eps, jfb, v, p0, strategy, k, sols):
    if strategy is None:
        P = conditional_choice_prob(p0, v)
        return np.take_along_axis(P, jfb[:, None], axis=1)[:, 0]
    lik = np.atleast_2d(signal_prob(strategy, k, eps))
    total = np.zeros(eps.shape[0])
    for s in range(sols.marginal.size):
        if not sols.marginal[s] > 0:
            continue
        P = conditional_choice_prob(sols.p0[s], v)
        total = total + lik[:, s] * np.take_along_axis(P, jfb[:, None], axis=1)[:, 0]
    return total


def achievement_prob(
    eps,
    k: int,
    l: int,
    params: PreferenceParams,
    strategy: PersuasionStrategy | None = None,
    prior: Belief | None = None,
    options: SolverOptions | None = None,
) -> float:
    """Probability that group ``k`` at level ``l`` picks its first-best option at shock ``eps``.

    With a ``prior``, unconditional choice probabilities are solved on it
    (required with persuasion); otherwise ``params.p0`` is used.
    """
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    a = params.alpha_slice(k, l)
    jfb = np.atleast_1d(first_best_choice(a, eps))
    v = eps + a
    if strategy is not None and prior is None:
        raise InputError("achievement under persuasion needs the prior belief")
    if prior is None:
        return float(_achievement(eps, jfb, v, params.p0_slice(k, l), None, k, None)[0])
    if strategy is None:
        return float(_achievement(eps, jfb, v, prior_p0(prior, a, options), None, k, None)[0])
    sols = signal_solutions(prior, strategy, k, a, options)
    return float(_achievement(eps, jfb, v, None, strategy, k, sols)[0])


@dataclass(frozen=True)
class GroupWelfare:
    values: np.ndarray  # (n,) achievement probabilities
    mean: float
    std: float
    edges: np.ndarray  # (bins + 1,)
    mass: np.ndarray  # (bins,) probability mass per bin, sums to 1


@dataclass(frozen=True)
class WelfareResult:
    baseline: tuple  # GroupWelfare per group
    persuaded: tuple | None


def _summarize(values, bins):
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=edges)
    return GroupWelfare(values, float(values.mean()), float(values.std()), edges, counts / counts.sum())


def _level_prior(prior, l):
    if isinstance(prior, PseudoShocks):
        return prior.level_belief(l) if np.any(prior.levels == l) else prior.belief
    return prior


def _group_values(eps, levels, params, prior, strategy, k, options):
    out = np.zeros(eps.shape[0])
    for l in np.unique(levels):
        sel = levels == l
        a = params.alpha_slice(k, int(l))
        bel = _level_prior(prior, int(l)) if prior is not None else None
        e = eps[sel]
        jfb = np.atleast_1d(first_best_choice(a, e))
        if strategy is None:
            p0 = params.p0_slice(k, int(l)) if bel is None else prior_p0(bel, a, options)
            out[sel] = _achievement(e, jfb, e + a, p0, None, k, None)
        else:
            sols = signal_solutions(bel, strategy, k, a, options)
            out[sel] = _achievement(e, jfb, e + a, None, strategy, k, sols)
    return out


def welfare_distribution(
    eps,
    params: PreferenceParams,
    levels=None,
    prior: Belief | PseudoShocks | None = None,
    strategy: PersuasionStrategy | None = None,
    bins: int = DEFAULT_BINS,
    options: SolverOptions | None = None,
    jobs: int = 1,
) -> WelfareResult:
    """Per-group achievement distributions over a shock sample, with and without persuasion.

    ``eps`` is typically the pseudo-shock sample and ``prior`` its empirical
    distribution (a ``PseudoShocks`` gives per-level priors).
    """
    if isinstance(eps, PseudoShocks):
        prior = eps if prior is None else prior
        levels = eps.levels if levels is None else levels
        eps = eps.shocks
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    levels = np.zeros(eps.shape[0], dtype=int) if levels is None else np.asarray(levels, dtype=int)
    if strategy is not None and prior is None:
        raise InputError("welfare under persuasion needs the prior belief")
    K = params.K
    tasks = [(k, None) for k in range(K)] + ([(k, strategy) for k in range(K)] if strategy is not None else [])
    if jobs == 1:
        vals = [_group_values(eps, levels, params, prior, s, k, options) for k, s in tasks]
    else:
        vals = Parallel(n_jobs=jobs)(delayed(_group_values)(eps, levels, params, prior, s, k, options) for k, s in tasks)
    base = tuple(_summarize(v, bins) for v in vals[:K])
    pers = tuple(_summarize(v, bins) for v in vals[K:]) if strategy is not None else None
    return WelfareResult(base, pers)
