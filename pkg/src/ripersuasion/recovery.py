"""Monte Carlo parameter-recovery harness for the two-step estimator.

One replication simulates no-persuasion and persuasion markets from a known
design, estimates ``(alpha, p0)`` by GMM, recovers the pseudo-shock prior and
estimates ``theta``. Replication ``r`` uses root seed ``seed + r``, so the
collection of replications is reproducible and independent of how it is
split across workers.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed

from .exceptions import WeakIdentificationWarning
from .gmm import Stage1Options, ThetaOptions, estimate_stage1, estimate_theta
from .infotheory import signal_marginal_entropy
from .inversion import pseudo_shocks
from .model import Belief
from .persuasion import PersuasionStrategy
from .simulate import DgpSpec, simulate_markets, true_params

log = logging.getLogger(__name__)


def recovery_design(theta: float = 0.9, n_markets: int = 2000, n_persuasion: int = 2000, seed: int = 0) -> DgpSpec:
    """Three options, two demographic groups, one characteristic level, four-point zero-mean prior.

    Group 1 faces an ``hs_family`` strategy and group 2 a ``college_family``
    strategy, both comparing options 1 and 2 and sharing one ``theta``.
    """
    atoms = 1.5 * np.array([[1.0, -0.5, 0.0], [-1.0, 0.8, 0.0], [0.6, 1.2, 0.0], [-0.6, -1.5, 0.0]])
    weights = np.full(4, 0.25)
    atoms[:, :2] -= weights @ atoms[:, :2]
    alpha = np.zeros((3, 2, 1))
    alpha[:2, :, 0] = [[-0.5, -0.2], [-0.5, 0.1]]
    strategy = PersuasionStrategy(("hs_family", "college_family"), [theta], (0, 0))
    return DgpSpec(alpha, Belief(atoms, weights), [[0.5, 0.5]], n_markets, n_persuasion, strategy=strategy, seed=seed)


def ecdf_on_grid(points, weights, axes) -> np.ndarray:
    """Weighted orthant CDF ``F(x) = P(X <= x)`` at every vertex of the product grid ``axes``."""
    idx = tuple(np.searchsorted(ax, points[:, d], side="left") for d, ax in enumerate(axes))
    H = np.zeros(tuple(ax.size for ax in axes))
    np.add.at(H, idx, weights)
    for d in range(len(axes)):
        H = np.cumsum(H, axis=d)
    return H


def kolmogorov_distance(points_a, weights_a, points_b, weights_b, max_cells: int = 2**24) -> float:
    """Multivariate Kolmogorov distance ``sup_x |F_a(x) - F_b(x)|`` between two discrete distributions.

    Both CDFs are constant on the cells of the product grid spanned by all
    observed coordinates, so evaluating at the grid vertices gives the exact
    supremum. When that grid would exceed ``max_cells`` the supremum is
    taken over the support points and their coordinatewise maxima only
    (a lower bound).
    """
    A = np.atleast_2d(np.asarray(points_a, dtype=float))
    B = np.atleast_2d(np.asarray(points_b, dtype=float))
    axes = [np.unique(np.concatenate([A[:, d], B[:, d]])) for d in range(A.shape[1])]
    if np.prod([ax.size for ax in axes], dtype=float) <= max_cells:
        return float(np.max(np.abs(ecdf_on_grid(A, weights_a, axes) - ecdf_on_grid(B, weights_b, axes))))
    pts = np.concatenate([A, B])

    def cdf(P, w, x):
        return np.array([(w * np.all(P <= xi, axis=1)).sum() for xi in x])

    return float(np.max(np.abs(cdf(A, weights_a, pts) - cdf(B, weights_b, pts))))


@dataclass
class Replication:
    index: int
    seed: int
    alpha_hat: np.ndarray
    alpha_se: np.ndarray
    p0_hat: np.ndarray
    theta_hat: float
    ks: float
    weak_identification: bool
    stage1_objective: float
    entropy: np.ndarray  # per group, at theta_hat on the recovered prior
    share_shift: np.ndarray  # per group, max_j |h_j - p0_j|
    seconds: float


@dataclass(frozen=True)
class RecoveryConfig:
    design_theta: float = 0.9
    n_markets: int = 2000
    n_persuasion: int = 2000
    replications: int = 100
    seed: int = 20240
    stage1: Stage1Options = field(default_factory=lambda: Stage1Options(n_starts=1))
    theta: ThetaOptions = field(default_factory=ThetaOptions)


def run_replication(cfg: RecoveryConfig, r: int) -> Replication:
    t0 = time.perf_counter()
    seed = cfg.seed + r
    spec = recovery_design(cfg.design_theta, cfg.n_markets, cfg.n_persuasion, seed)
    data = simulate_markets(spec)
    pan0 = data.panel.subset(data.panel.chi == 0)
    pan1 = data.panel.subset(data.panel.chi == 1)
    est = estimate_stage1(pan0, spec.alpha.shape[2], replace(cfg.stage1, seed=seed))
    prior = pseudo_shocks(pan0, est.params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeakIdentificationWarning)
        th = estimate_theta(pan1, prior, spec.strategy, est.params, cfg.theta)
    G = spec.prior
    ks = kolmogorov_distance(prior.shocks[:, :-1], prior.belief.weights, G.support[:, :-1], G.weights)
    strat_hat = spec.strategy.with_theta(th.theta)
    K = spec.alpha.shape[1]
    entropy = np.array([signal_marginal_entropy(prior.belief, strat_hat, k) for k in range(K)])
    shift = np.abs(th.h - est.params.p0).max(axis=(0, 2))
    return Replication(
        r, seed, est.params.alpha, est.alpha_se(), est.params.p0, float(th.theta[0]), ks,
        th.weak_identification, est.objective, entropy, shift, time.perf_counter() - t0,
    )


def run_recovery(cfg: RecoveryConfig, jobs: int = 1, indices=None) -> list:
    indices = range(cfg.replications) if indices is None else indices
    if jobs == 1:
        return [run_replication(cfg, r) for r in indices]
    return Parallel(n_jobs=jobs)(delayed(run_replication)(cfg, r) for r in indices)


@dataclass(frozen=True)
class RecoverySummary:
    alpha_rmse: np.ndarray  # (J-1, K, L)
    p0_rmse: np.ndarray  # (J, K, L)
    ks_median: float
    theta_hit_rate: float
    alpha_coverage: np.ndarray  # (J-1, K, L)
    theta_mean: float
    weak_rate: float


def summarize(reps: list, spec: DgpSpec, theta_band: float = 0.05) -> RecoverySummary:
    truth = true_params(spec)
    A = np.stack([r.alpha_hat[:-1] for r in reps])
    S = np.stack([r.alpha_se for r in reps])
    P = np.stack([r.p0_hat for r in reps])
    th = np.array([r.theta_hat for r in reps])
    a0 = truth.alpha[:-1]
    cover = np.mean(np.abs(A - a0) <= 1.959963984540054 * S, axis=0)
    theta0 = float(spec.strategy.theta[0])
    return RecoverySummary(
        alpha_rmse=np.sqrt(np.mean((A - a0) ** 2, axis=0)),
        p0_rmse=np.sqrt(np.mean((P - truth.p0) ** 2, axis=0)),
        ks_median=float(np.median([r.ks for r in reps])),
        theta_hit_rate=float(np.mean(np.abs(th - theta0) <= theta_band)),
        alpha_coverage=cover,
        theta_mean=float(th.mean()),
        weak_rate=float(np.mean([r.weak_identification for r in reps])),
    )
