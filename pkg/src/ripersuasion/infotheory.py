"""Entropy and mutual information for finite distributions.

Reported quantities use base-2 logarithms (bits). The information cost inside
the choice program uses natural logs with unit cost; ``NATS_PER_BIT``
converts between the two.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError
from .model import Belief
from .persuasion import PersuasionStrategy, signal_prob

NATS_PER_BIT = np.log(2.0)


def _log(x, base):
    if base == 2:
        return np.log2(x)
    if base == "e" or base == np.e:
        return np.log(x)
    return np.log(x) / np.log(base)


def entropy(dist, base=2) -> float:
    """Shannon entropy with the convention ``0 log 0 = 0``."""
    p = np.asarray(dist, dtype=float).ravel()
    if np.any(p < 0):
        raise InputError("distribution has negative weights")
    if abs(p.sum() - 1) > 1e-9:
        raise InputError(f"distribution sums to {p.sum()!r}, not 1")
    nz = p[p > 0]
    return float(-(nz * _log(nz, base)).sum())


def mutual_information(joint, base=2) -> float:
    """``H(state) - E_signal[H(state | signal)]`` for a joint table ``joint[state, signal]``."""
    P = np.asarray(joint, dtype=float)
    if P.ndim != 2:
        raise InputError("joint distribution must be a 2-d table (state x signal)")
    if np.any(P < 0):
        raise InputError("joint distribution has negative weights")
    if abs(P.sum() - 1) > 1e-9:
        raise InputError(f"joint distribution sums to {P.sum()!r}, not 1")
    state = P.sum(axis=1)
    signal = P.sum(axis=0)
    cond = 0.0
    for s in np.flatnonzero(signal > 0):
        cond += signal[s] * entropy(P[:, s] / signal[s], base)
    return entropy(state, base) - cond


def quantized_uniform_sign_joint(n_bins: int) -> np.ndarray:
    """Joint table of X ~ U[-1, 1] quantised into ``n_bins`` cells and Y = 1{X >= 0}."""
    if n_bins < 2 or n_bins % 2:
        raise InputError("n_bins must be an even integer >= 2")
    centers = -1 + (np.arange(n_bins) + 0.5) * (2.0 / n_bins)
    P = np.zeros((n_bins, 2))
    P[np.arange(n_bins), (centers >= 0).astype(int)] = 1.0 / n_bins
    return P


def signal_marginal(prior: Belief, strategy: PersuasionStrategy, k: int) -> np.ndarray:
    return prior.weights @ np.atleast_2d(signal_prob(strategy, k, prior.support))


def signal_marginal_entropy(prior: Belief, strategy: PersuasionStrategy, k: int, base=2) -> float:
    """Entropy of the marginal signal distribution induced by ``strategy`` on ``prior``."""
    marg = signal_marginal(prior, strategy, k)
    return entropy(marg / marg.sum(), base)


def information_cost(prior: Belief, strategy: PersuasionStrategy, k: int, base=2) -> float:
    """Mutual information between the prior's support point and the signal."""
    lik = np.atleast_2d(signal_prob(strategy, k, prior.support))
    return mutual_information(prior.weights[:, None] * lik, base)
