"""Domain types shared by every stage of the pipeline.

Index conventions: options, groups and characteristic levels are 0-based in
Python. The outside option is the last option ``J - 1``; its mean utility and
every shock component attached to it are pinned at zero. The information
cost is fixed at one and is not a parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import InputError

SIMPLEX_TOL = 1e-9
BELIEF_TOL = 1e-12
INFO_COST = 1.0


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ChoiceSpec:
    """Dimensions of the choice problem and human-readable labels."""

    J: int
    K: int = 1
    L: int = 1
    option_labels: tuple = ()
    group_labels: tuple = ()
    level_labels: tuple = ()

    def __post_init__(self):
        if self.J < 2 or self.K < 1 or self.L < 1:
            raise InputError(f"need J >= 2, K >= 1, L >= 1; got J={self.J}, K={self.K}, L={self.L}")
        for name, n, default in (
            ("option_labels", self.J, [f"option_{j + 1}" for j in range(self.J - 1)] + ["outside"]),
            ("group_labels", self.K, [f"group_{k + 1}" for k in range(self.K)]),
            ("level_labels", self.L, [f"level_{l + 1}" for l in range(self.L)]),
        ):
            labels = tuple(getattr(self, name)) or tuple(default)
            if len(labels) != n:
                raise InputError(f"{name} has {len(labels)} entries, expected {n}")
            object.__setattr__(self, name, labels)

    @property
    def outside(self) -> int:
        return self.J - 1


@dataclass(frozen=True)
class Market:
    """One market-level observation.

    ``x_level`` is 0-based here; the CSV format stores it 1-based.
    """

    id: str
    chi: int
    shares: np.ndarray
    demo: np.ndarray
    x_level: int = 0

    def __post_init__(self):
        shares = _frozen(self.shares)
        demo = _frozen(self.demo)
        object.__setattr__(self, "shares", shares)
        object.__setattr__(self, "demo", demo)
        if self.chi not in (0, 1):
            raise InputError(f"market {self.id}: chi must be 0 or 1, got {self.chi}")
        if shares.ndim != 1 or shares.size < 2:
            raise InputError(f"market {self.id}: shares must be a vector of length J >= 2")
        if not np.all(np.isfinite(shares)) or np.any(shares < 0) or abs(shares.sum() - 1) > SIMPLEX_TOL:
            raise InputError(f"market {self.id}: shares must be nonnegative and sum to 1")
        if demo.ndim != 1 or np.any(demo < 0) or abs(demo.sum() - 1) > SIMPLEX_TOL:
            raise InputError(f"market {self.id}: demographic weights must be nonnegative and sum to 1")
        if shares[-1] <= 0:
            raise InputError(f"market {self.id}: outside share must be positive")
        if self.x_level < 0:
            raise InputError(f"market {self.id}: negative characteristic level")

    @property
    def J(self) -> int:
        return self.shares.size

    @property
    def K(self) -> int:
        return self.demo.size


@dataclass(frozen=True)
class MarketPanel:
    """Column-stacked view of many markets for vectorised computation."""

    ids: tuple
    chi: np.ndarray  # (M,)
    shares: np.ndarray  # (M, J)
    demo: np.ndarray  # (M, K)
    level: np.ndarray  # (M,)

    @classmethod
    def from_markets(cls, markets: Sequence[Market]) -> "MarketPanel":
        if len(markets) == 0:
            raise InputError("empty market list")
        J, K = markets[0].J, markets[0].K
        for m in markets:
            if m.J != J or m.K != K:
                raise InputError(f"market {m.id}: inconsistent dimensions")
        return cls(
            ids=tuple(m.id for m in markets),
            chi=_frozen([m.chi for m in markets], dtype=int),
            shares=_frozen(np.stack([m.shares for m in markets])),
            demo=_frozen(np.stack([m.demo for m in markets])),
            level=_frozen([m.x_level for m in markets], dtype=int),
        )

    def to_markets(self) -> list:
        return [
            Market(id=i, chi=int(c), shares=s, demo=d, x_level=int(l))
            for i, c, s, d, l in zip(self.ids, self.chi, self.shares, self.demo, self.level)
        ]

    def subset(self, mask) -> "MarketPanel":
        idx = np.flatnonzero(np.asarray(mask)) if np.asarray(mask).dtype == bool else np.asarray(mask, dtype=int)
        return MarketPanel(
            ids=tuple(self.ids[i] for i in idx),
            chi=_frozen(self.chi[idx], dtype=int),
            shares=_frozen(self.shares[idx]),
            demo=_frozen(self.demo[idx]),
            level=_frozen(self.level[idx], dtype=int),
        )

    def __len__(self):
        return len(self.ids)

    @property
    def J(self) -> int:
        return self.shares.shape[1]

    @property
    def K(self) -> int:
        return self.demo.shape[1]


@dataclass(frozen=True)
class Belief:
    """Finitely supported distribution over shock vectors (last component 0)."""

    support: np.ndarray  # (n, J)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        support = _frozen(np.atleast_2d(self.support))
        weights = _frozen(np.atleast_1d(self.weights))
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "weights", weights)
        if support.shape[0] == 0:
            raise InputError("belief has empty support")
        if weights.shape != (support.shape[0],):
            raise InputError("belief weights and support length differ")
        if np.any(weights < 0) or abs(weights.sum() - 1) > BELIEF_TOL:
            raise InputError(f"belief weights must be nonnegative and sum to 1 (sum={weights.sum()!r})")
        if np.any(support[:, -1] != 0):
            raise InputError("last shock component must be 0 at every support point")
        if not np.all(np.isfinite(support)):
            raise InputError("belief support must be finite")

    @classmethod
    def empirical(cls, points) -> "Belief":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, points, weights) -> "Belief":
        """Belief from arbitrary utility vectors, re-centred so the last component is 0.

        Choice behaviour is invariant to adding a common constant to every
        component of a utility vector, so this loses nothing.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(points - points[:, -1:], weights)

    @classmethod
    def point_mass(cls, eps) -> "Belief":
        return cls(np.atleast_2d(eps), np.ones(1))

    @property
    def J(self) -> int:
        return self.support.shape[1]

    def __len__(self):
        return self.support.shape[0]


@dataclass(frozen=True)
class PreferenceParams:
    """Mean utilities ``alpha[j, k, l]`` and unconditional choice probabilities ``p0[j, k, l]``."""

    alpha: np.ndarray
    p0: np.ndarray
    lam: float = field(default=INFO_COST, init=False)

    def __post_init__(self):
        alpha = _frozen(self.alpha)
        p0 = _frozen(self.p0)
        if alpha.ndim == 1:
            alpha = _frozen(alpha[:, None, None])
        if p0.ndim == 1:
            p0 = _frozen(p0[:, None, None])
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "p0", p0)
        if alpha.ndim != 3 or alpha.shape != p0.shape:
            raise InputError(f"alpha {alpha.shape} and p0 {p0.shape} must both be (J, K, L)")
        if np.any(alpha[-1] != 0):
            raise InputError("outside-option mean utility must be 0")
        if not np.all(np.isfinite(alpha)):
            raise InputError("alpha must be finite")
        if np.any(p0 < 0) or np.any(p0 > 1) or np.any(np.abs(p0.sum(axis=0) - 1) > SIMPLEX_TOL):
            raise InputError("p0[:, k, l] must lie in the probability simplex")

    @property
    def shape(self):
        return self.alpha.shape

    @property
    def J(self) -> int:
        return self.alpha.shape[0]

    @property
    def K(self) -> int:
        return self.alpha.shape[1]

    @property
    def L(self) -> int:
        return self.alpha.shape[2]

    def alpha_slice(self, k: int, l: int) -> np.ndarray:
        return self.alpha[:, k, l]

    def p0_slice(self, k: int, l: int) -> np.ndarray:
        return self.p0[:, k, l]


def group_utility(params: PreferenceParams, eps, k: int, l: int) -> np.ndarray:
    """Utility vector ``alpha[:, k, l] + eps`` for group ``k`` at level ``l``."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (params.J,):
        raise InputError(f"shock has shape {eps.shape}, expected ({params.J},)")
    if eps[-1] != 0:
        raise InputError("outside-option shock must be 0")
    return params.alpha_slice(k, l) + eps


def utilities(alpha_slice, support) -> np.ndarray:
    """Utility matrix ``(n, J)`` for every support point of a belief."""
    support = np.atleast_2d(support)
    alpha_slice = np.asarray(alpha_slice, dtype=float)
    if support.shape[1] != alpha_slice.shape[0]:
        raise InputError(f"shock dimension {support.shape[1]} does not match J={alpha_slice.shape[0]}")
    return support + alpha_slice
