"""Parametric persuasion strategies and the decision maker's response to them.

A strategy maps each shock vector to a distribution over a finite signal
alphabet. After observing a signal the decision maker's prior is reweighted
by Bayes' rule and the rational-inattention program is solved on the
posterior. Integrating the per-signal unconditional choice probabilities
against the signal's marginal gives ``h``, the group's choice probability
under persuasion.

Built-in two-signal families compare two designated options ``a`` and ``b``
(``rep`` and ``dem`` below), with ``gap = eps_a - eps_b``::

    hs_family:       Pr(-) = 1                  if gap <  0
                     Pr(-) = theta ** gap**2    if gap >= 0
    college_family:  Pr(-) = 0                  if gap >  0
                     Pr(-) = 1 - theta ** gap**2 if gap <= 0
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .exceptions import InputError, ParameterError, ZeroProbabilitySignalError
from .model import Belief, PreferenceParams, utilities
from .solver import RISolution, SolverOptions, conditional_choice_prob, solve_weighted

log = logging.getLogger(__name__)

BUILTIN_FAMILIES = ("hs_family", "college_family")


def _hs_minus(theta, gap):
    with np.errstate(under="ignore"):
        return np.where(gap < 0, 1.0, theta ** (gap**2))


def _college_minus(theta, gap):
    with np.errstate(under="ignore"):
        return np.where(gap > 0, 0.0, 1.0 - theta ** (gap**2))


_MINUS = {"hs_family": _hs_minus, "college_family": _college_minus}


@dataclass(frozen=True)
class PersuasionStrategy:
    """Per-group persuasion strategy.

    Parameters
    ----------
    families : tuple of str
        Family of each demographic group (``hs_family``, ``college_family`` or
        ``custom``).
    theta : array
        Parameter vector shared by all groups.
    theta_index : tuple of int
        Which entry of ``theta`` each group's family uses. Groups sharing an
        index share a parameter.
    signals : tuple
        Signal alphabet. Built-in families use ``("+", "-")``.
    rep, dem : int
        Options compared by the built-in families.
    likelihood : callable, optional
        For ``custom`` groups: ``likelihood(theta, eps, k) -> (n, S)`` array of
        signal probabilities.
    """

    families: tuple
    theta: np.ndarray
    theta_index: tuple = ()
    signals: tuple = ("+", "-")
    rep: int = 0
    dem: int = 1
    likelihood: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        fams = tuple(self.families)
        theta = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
        theta.setflags(write=False)
        idx = tuple(self.theta_index) or tuple(0 for _ in fams)
        object.__setattr__(self, "families", fams)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta_index", idx)
        object.__setattr__(self, "signals", tuple(self.signals))
        if len(idx) != len(fams):
            raise InputError("theta_index must give one entry per group")
        for k, (fam, i) in enumerate(zip(fams, idx)):
            if fam == "custom":
                if self.likelihood is None:
                    raise InputError("custom family requires a likelihood callable")
                continue
            if fam not in BUILTIN_FAMILIES:
                raise InputError(f"unknown persuasion family {fam!r}")
            if len(self.signals) != 2:
                raise InputError("built-in families use exactly two signals")
            if not 0 <= i < theta.size:
                raise InputError(f"group {k}: theta index {i} out of range")
            if not 0 < theta[i] <= 1:
                raise ParameterError(f"group {k}: {fam} requires theta in (0, 1], got {theta[i]!r}")

    @property
    def K(self) -> int:
        return len(self.families)

    def with_theta(self, theta) -> "PersuasionStrategy":
        return PersuasionStrategy(
            self.families, theta, self.theta_index, self.signals, self.rep, self.dem, self.likelihood
        )

    def relabeled(self, order: Sequence[int]) -> "PersuasionStrategy":
        """Same strategy with the signal alphabet permuted (observationally equivalent)."""
        order = list(order)
        base = self

        def lik(theta, eps, k):
            return signal_prob(base.with_theta(theta), k, eps)[..., order]

        return PersuasionStrategy(
            tuple("custom" for _ in self.families), self.theta, self.theta_index,
            tuple(self.signals[i] for i in order), self.rep, self.dem, lik,
        )


def uninformative(K: int, signal_count: int = 2) -> PersuasionStrategy:
    """Constant-signal strategy: always sends the first signal."""

    def lik(theta, eps, k):
        out = np.zeros(np.atleast_2d(eps).shape[:-1] + (signal_count,))
        out[..., 0] = 1.0
        return out

    return PersuasionStrategy(
        tuple("custom" for _ in range(K)), [1.0], signals=tuple(f"s{i}" for i in range(signal_count)), likelihood=lik
    )


def signal_prob(strategy: PersuasionStrategy, k: int, eps) -> np.ndarray:
    """Signal probabilities given shocks: shape ``(S,)`` for one vector, ``(n, S)`` for a stack."""
    eps = np.asarray(eps, dtype=float)
    fam = strategy.families[k]
    if fam == "custom":
        out = np.asarray(strategy.likelihood(strategy.theta, eps, k), dtype=float)
    else:
        theta = strategy.theta[strategy.theta_index[k]]
        gap = eps[..., strategy.rep] - eps[..., strategy.dem]
        minus = _MINUS[fam](theta, gap)
        out = np.stack([1.0 - minus, minus], axis=-1)
    return out


def _marginal_and_likelihood(prior: Belief, strategy, k):
    lik = np.atleast_2d(signal_prob(strategy, k, prior.support))
    return prior.weights @ lik, lik


def posterior_belief(prior: Belief, strategy: PersuasionStrategy, k: int, s) -> Belief:
    """Bayes update of ``prior`` on observing signal ``s`` (label or index)."""
    si = s if isinstance(s, (int, np.integer)) else strategy.signals.index(s)
    marg, lik = _marginal_and_likelihood(prior, strategy, k)
    if not marg[si] > 0:
        raise ZeroProbabilitySignalError(
            f"signal {strategy.signals[si]!r} has zero probability under the prior (theta={strategy.theta.tolist()})"
        )
    w = prior.weights * lik[:, si]
    return Belief(prior.support, w / w.sum())


@dataclass(frozen=True)
class SignalSolutions:
    """Per-signal marginals and unconditional choice probabilities for one (group, level)."""

    marginal: np.ndarray  # (S,)
    p0: np.ndarray  # (S, J); NaN rows for zero-probability signals
    solutions: tuple = field(default=(), repr=False)

    @property
    def h(self) -> np.ndarray:
        live = self.marginal > 0
        return self.marginal[live] @ self.p0[live]


def signal_solutions(
    prior: Belief,
    strategy: PersuasionStrategy,
    k: int,
    alpha_slice,
    options: SolverOptions | None = None,
) -> SignalSolutions:
    marg, lik = _marginal_and_likelihood(prior, strategy, k)
    # rows of lik sum to one, so this only removes rounding; a constant signal gets marginal exactly 1
    marg = marg / marg.sum()
    V = utilities(alpha_slice, prior.support)
    J = V.shape[1]
    p0 = np.full((marg.size, J), np.nan)
    sols = []
    for si in range(marg.size):
        if not marg[si] > 0:
            log.warning("signal %r has zero probability for group %d; dropped from h", strategy.signals[si], k)
            sols.append(None)
            continue
        w = prior.weights * lik[:, si]
        keep = w > 0
        sol = solve_weighted(V[keep], w[keep] / w[keep].sum(), options)
        p0[si] = sol.p0
        sols.append(sol)
    return SignalSolutions(marg, p0, tuple(sols))


def conditional_p0_given_signal(
    prior: Belief, strategy: PersuasionStrategy, k: int, l: int, s, params: PreferenceParams,
    options: SolverOptions | None = None,
) -> np.ndarray:
    """Unconditional choice probabilities of group ``k`` at level ``l`` after signal ``s``."""
    post = posterior_belief(prior, strategy, k, s)
    keep = post.weights > 0
    sol: RISolution = solve_weighted(
        utilities(params.alpha_slice(k, l), post.support[keep]), post.weights[keep], options
    )
    return sol.p0


def integrated_choice_prob_h(
    prior: Belief, strategy: PersuasionStrategy, k: int, l: int, params: PreferenceParams,
    options: SolverOptions | None = None,
) -> np.ndarray:
    """``h = sum_s Pr(s) * p0_s`` with ``Pr(s)`` the prior-weighted mean signal probability."""
    return signal_solutions(prior, strategy, k, params.alpha_slice(k, l), options).h


def conditional_choice_prob_with_persuasion(
    prior: Belief, strategy: PersuasionStrategy, k: int, l: int, eps, params: PreferenceParams,
    options: SolverOptions | None = None,
) -> np.ndarray:
    """Per-signal conditional choice probabilities at shock ``eps``: shape ``(S, J)``.

    Rows of zero-probability signals are NaN.
    """
    sol = signal_solutions(prior, strategy, k, params.alpha_slice(k, l), options)
    v = params.alpha_slice(k, l) + np.asarray(eps, dtype=float)
    out = np.full_like(sol.p0, np.nan)
    for si in range(sol.marginal.size):
        if sol.marginal[si] > 0:
            out[si] = conditional_choice_prob(sol.p0[si], v)
    return out


def expected_value(prior: Belief, p0, alpha_slice) -> float:
    """Attained value of the unconditional-choice program at ``p0`` under ``prior``."""
    V = utilities(alpha_slice, prior.support)
    keep = prior.weights > 0
    with np.errstate(divide="ignore"):
        A = V[keep] + np.log(np.asarray(p0, dtype=float))
    m = A.max(axis=1)
    return float(prior.weights[keep] @ (m + np.log(np.exp(A - m[:, None]).sum(axis=1))))


def persuaded_value(prior: Belief, strategy: PersuasionStrategy, k: int, alpha_slice, options=None) -> float:
    """Prior-weighted value attained when the decision maker best-responds to each signal."""
    sol = signal_solutions(prior, strategy, k, alpha_slice, options)
    total = 0.0
    for si in range(sol.marginal.size):
        if sol.marginal[si] > 0:
            total += sol.marginal[si] * expected_value(posterior_belief(prior, strategy, k, si), sol.p0[si], alpha_slice)
    return total
