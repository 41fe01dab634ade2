"""Share inversion: recover the market-level shock vector from observed shares.

For fixed preference parameters the model share of inside option ``j`` is

    ms*_j(delta) = sum_k d_k p0_jk e^{delta_j + alpha_jk}
                   / (p0_Jk + sum_{l<J} p0_lk e^{delta_l + alpha_lk})

and ``T(delta) = delta + log(ms) - log(ms*(delta))`` is a contraction whenever
every group chooses the outside option with positive probability. Many
markets can be iterated as one stacked contraction; markets that have
converged are dropped once enough of them have, following a threshold
schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import InputError, NumericError, SolverError
from .model import Belief, Market, MarketPanel, PreferenceParams

DEFAULT_TOL = 1e-12
DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class InversionResult:
    delta: np.ndarray  # (J-1,)
    residual: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class BatchInversion:
    deltas: np.ndarray  # (M, J-1)
    residuals: np.ndarray
    iterations: np.ndarray
    t_applications: int
    sweeps: int

    @property
    def results(self) -> list:
        return [
            InversionResult(d, float(r), int(i), bool(r < np.inf))
            for d, r, i in zip(self.deltas, self.residuals, self.iterations)
        ]


def _as_panel(markets) -> MarketPanel:
    if isinstance(markets, MarketPanel):
        return markets
    if isinstance(markets, Market):
        return MarketPanel.from_markets([markets])
    return MarketPanel.from_markets(list(markets))


def apply_share_floor(panel: MarketPanel, floor: float | None = None) -> MarketPanel:
    """Reject markets with a zero inside share, or floor and renormalise them.

    With ``floor=None`` (the default) any zero inside share raises, naming the
    offending markets.
    """
    inside = panel.shares[:, :-1]
    bad = np.flatnonzero(np.any(inside <= 0, axis=1))
    if bad.size == 0:
        return panel
    if floor is None:
        names = ", ".join(panel.ids[i] for i in bad[:10])
        raise InputError(f"zero inside share in market(s): {names}")
    shares = np.maximum(panel.shares, floor)
    shares = shares / shares.sum(axis=1, keepdims=True)
    return MarketPanel(panel.ids, panel.chi, shares, panel.demo, panel.level)


class _ShareModel:
    """Precomputed per-market coefficients ``c_jk = p0_jk e^{alpha_jk}`` for fast share evaluation."""

    def __init__(self, panel: MarketPanel, params: PreferenceParams):
        if panel.J != params.J or panel.K != params.K:
            raise InputError(
                f"market dimensions (J={panel.J}, K={panel.K}) do not match parameters "
                f"(J={params.J}, K={params.K})"
            )
        if np.any(panel.level >= params.L):
            raise InputError("market characteristic level outside parameter range")
        p0 = np.moveaxis(params.p0[:, :, panel.level], -1, 0)  # (M, J, K)
        alpha = np.moveaxis(params.alpha[:, :, panel.level], -1, 0)
        p0 = np.swapaxes(p0, 1, 2)  # (M, K, J)
        alpha = np.swapaxes(alpha, 1, 2)
        self.outside = p0[:, :, -1]  # (M, K)
        if np.any(self.outside <= 0):
            bad = sorted({panel.ids[i] for i in np.flatnonzero(np.any(self.outside <= 0, axis=1))})
            raise InputError(f"outside-option p0 is zero for market(s) {bad[:10]}; contraction undefined")
        self.coef = p0[:, :, :-1] * np.exp(alpha[:, :, :-1])  # (M, K, J-1)
        self.demo = np.asarray(panel.demo)
        self.log_shares = None
        with np.errstate(divide="ignore"):
            self.log_shares = np.log(panel.shares[:, :-1])

    def take(self, idx):
        new = object.__new__(_ShareModel)
        new.outside = self.outside[idx]
        new.coef = self.coef[idx]
        new.demo = self.demo[idx]
        new.log_shares = self.log_shares[idx]
        return new

    def shares(self, delta):
        """Inside model shares ``(M, J-1)``."""
        num = self.coef * np.exp(delta)[:, None, :]
        den = self.outside + num.sum(axis=2)
        return np.einsum("mk,mkj->mj", self.demo / den, num)

    def shares_and_jacobian(self, delta):
        """Inside shares ``(M, J-1)`` and their derivatives ``d ms_j / d delta_l``, ``(M, J-1, J-1)``."""
        num = self.coef * np.exp(delta)[:, None, :]
        s = num / (self.outside + num.sum(axis=2))[:, :, None]  # (M, K, J-1)
        ms = np.einsum("mk,mkj->mj", self.demo, s)
        jac = -np.einsum("mk,mkj,mkl->mjl", self.demo, s, s)
        idx = np.arange(ms.shape[1])
        jac[:, idx, idx] += ms
        return ms, jac

    def step(self, delta):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = delta + self.log_shares - np.log(self.shares(delta))
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite value in contraction step")
        return out


def _polish(model: _ShareModel, delta):
    """One Newton correction on ``log ms*(delta) = log ms``, kept where it does not raise the residual.

    Stopping on the step size leaves an error of about ``q / (1 - q)`` times
    the last step, large when the outside share (hence ``1 - q``) is small.
    A single Newton step from a converged iterate removes that error.
    Returns the corrected deltas and ``max_j |T(delta) - delta|`` at them.
    """
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ms, jac = model.shares_and_jacobian(delta)
        F = np.log(ms) - model.log_shares
        res = np.max(np.abs(F), axis=1)
        try:
            step = np.linalg.solve(jac / ms[:, :, None], F[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            return delta, res
        cand = delta - step
        Fc = np.log(model.shares(cand)) - model.log_shares
        rc = np.max(np.abs(Fc), axis=1)
    ok = np.isfinite(rc) & (rc <= res)
    out = delta.copy()
    out[ok] = cand[ok]
    return out, np.where(ok, rc, res)


def model_share(delta, market: Market, params: PreferenceParams) -> np.ndarray:
    """Model-implied share vector (length J, outside last) at ``delta``."""
    panel = _as_panel(market)
    model = _ShareModel(panel, params)
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    if delta.shape != (len(panel), params.J - 1):
        raise InputError(f"delta must have length J-1={params.J - 1}")
    inside = model.shares(delta)
    full = np.concatenate([inside, 1 - inside.sum(axis=1, keepdims=True)], axis=1)
    return full[0] if isinstance(market, Market) else full


def contraction_step(delta, market: Market, params: PreferenceParams) -> np.ndarray:
    """One application of ``T``."""
    panel = _as_panel(market)
    if np.any(panel.shares[:, :-1] <= 0):
        raise InputError(f"zero inside share in market {panel.ids[0]}: log undefined")
    model = _ShareModel(panel, params)
    delta = np.atleast_2d(np.asarray(delta, dtype=float))
    out = model.step(delta)
    return out[0] if isinstance(market, Market) else out


def closed_form_delta(market: Market, params: PreferenceParams) -> np.ndarray:
    """Exact inversion when there is a single demographic group.

    ``delta_j = log(ms_j / ms_J) - log(p0_j / p0_J) - alpha_j``.
    """
    if params.K != 1 or market.K != 1:
        raise InputError("closed-form inversion requires a single demographic group")
    s = market.shares
    p = params.p0[:, 0, market.x_level]
    a = params.alpha[:, 0, market.x_level]
    if np.any(s <= 0) or np.any(p <= 0):
        raise InputError(f"market {market.id}: closed form needs strictly positive shares and p0")
    return np.log(s[:-1] / s[-1]) - np.log(p[:-1] / p[-1]) - a[:-1]


def invert_batch(
    markets,
    params: PreferenceParams,
    tol: float = DEFAULT_TOL,
    thresholds: Sequence[float] | None = DEFAULT_THRESHOLDS,
    max_iter: int = 100_000,
    delta0=None,
) -> BatchInversion:
    """Invert many markets as one stacked contraction with threshold dropout.

    Each market's result is frozen at the first iterate whose sup-norm step
    falls below ``tol``, so the output does not depend on the dropout
    schedule. Converged markets stay in the stack (and are counted as
    ``T``-applications) until the number of converged markets exceeds the
    next threshold, at which point the stack is rebuilt from the remainder.
    ``thresholds=()`` or ``None`` iterates the full stack until every market
    has converged.
    """
    panel = _as_panel(markets)
    if np.any(panel.shares[:, :-1] <= 0):
        bad = [panel.ids[i] for i in np.flatnonzero(np.any(panel.shares[:, :-1] <= 0, axis=1))]
        raise InputError(f"zero inside share in market(s) {bad[:10]}: log undefined")
    model = _ShareModel(panel, params)
    M, Jm1 = len(panel), params.J - 1
    delta = np.zeros((M, Jm1)) if delta0 is None else np.array(delta0, dtype=float, copy=True)
    out = np.zeros((M, Jm1))
    residuals = np.full(M, np.inf)
    iterations = np.zeros(M, dtype=int)
    done = np.zeros(M, dtype=bool)
    cuts = sorted(float(t) for t in (thresholds or ()))
    active = np.arange(M)
    sub = model
    t_apps = 0
    sweeps = 0
    for _ in range(max_iter):
        new = sub.step(delta[active])
        t_apps += active.size
        sweeps += 1
        res = np.max(np.abs(new - delta[active]), axis=1)
        delta[active] = new
        iterations[active[~done[active]]] += 1
        fresh = (~done[active]) & (res < tol)
        idx = active[fresh]
        out[idx] = new[fresh]
        residuals[idx] = res[fresh]
        done[idx] = True
        if done.all():
            break
        n_done = int(done.sum())
        drop = False
        while cuts and n_done > cuts[0] * M:
            cuts.pop(0)
            drop = True
        if drop:
            keep = ~done[active]
            active = active[keep]
            sub = sub.take(keep)
    else:
        bad = [panel.ids[i] for i in np.flatnonzero(~done)]
        raise SolverError(
            f"contraction did not converge within {max_iter} iterations for market(s) {bad[:10]}",
            residual=float(np.max(np.abs(sub.step(delta[active]) - delta[active]))),
            iterations=max_iter,
        )
    out, residuals = _polish(model, out)
    return BatchInversion(out, residuals, iterations, t_apps, sweeps)


def invert_newton(
    markets,
    params: PreferenceParams,
    tol: float = DEFAULT_TOL,
    delta0=None,
    max_iter: int = 100,
) -> BatchInversion:
    """Same fixed points as :func:`invert_batch`, found by safeguarded Newton steps.

    Solves ``log ms*(delta) = log ms`` market by market (vectorised), halving
    a step until the sup-norm of ``T(delta) - delta`` decreases. Markets where
    this stalls are handed to the contraction. Intended for GMM inner loops,
    where warm starts make Newton converge in a handful of steps.
    """
    panel = _as_panel(markets)
    if np.any(panel.shares[:, :-1] <= 0):
        bad = [panel.ids[i] for i in np.flatnonzero(np.any(panel.shares[:, :-1] <= 0, axis=1))]
        raise InputError(f"zero inside share in market(s) {bad[:10]}: log undefined")
    model = _ShareModel(panel, params)
    M = len(panel)
    delta = np.zeros((M, params.J - 1)) if delta0 is None else np.array(delta0, dtype=float, copy=True)
    iterations = np.zeros(M, dtype=int)
    residuals = np.full(M, np.inf)
    active = np.arange(M)
    stalled = []
    evals = 0

    def gap(sub, d):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ms, jac = sub.shares_and_jacobian(d)
            F = np.log(ms) - sub.log_shares
        return F, jac / ms[:, :, None]

    sub = model
    F, dF = gap(sub, delta)
    evals += M
    for _ in range(max_iter):
        res = np.max(np.abs(F), axis=1)
        res[~np.isfinite(res)] = np.inf
        done = res < tol
        residuals[active[done]] = res[done]
        keep = ~done
        active, F, dF, res = active[keep], F[keep], dF[keep], res[keep]
        if active.size == 0:
            break
        sub = model.take(active)
        try:
            step = np.linalg.solve(dF, F[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.full_like(F, np.nan)
        t = np.ones(active.size)
        accepted = np.zeros(active.size, dtype=bool)
        new_F, new_dF = F.copy(), dF.copy()
        trial = delta[active].copy()
        pending = np.isfinite(step).all(axis=1)
        for _ in range(30):
            if not pending.any():
                break
            idx = np.flatnonzero(pending)
            cand = delta[active[idx]] - t[idx, None] * step[idx]
            Fc, dFc = gap(sub.take(idx), cand)
            evals += idx.size
            rc = np.max(np.abs(Fc), axis=1)
            ok = np.isfinite(rc) & (rc < res[idx])
            good = idx[ok]
            trial[good], new_F[good], new_dF[good] = cand[ok], Fc[ok], dFc[ok]
            accepted[good] = True
            pending[good] = False
            t[idx[~ok]] *= 0.5
        delta[active[accepted]] = trial[accepted]
        iterations[active] += 1
        if (~accepted).any():
            stalled.extend(active[~accepted].tolist())
        F, dF, active = new_F[accepted], new_dF[accepted], active[accepted]
    else:
        stalled.extend(active.tolist())
    if stalled:
        stalled = np.array(sorted(stalled))
        rest = invert_batch(panel.subset(stalled), params, tol=tol, thresholds=None, delta0=delta[stalled])
        delta[stalled] = rest.deltas
        residuals[stalled] = rest.residuals
        iterations[stalled] += rest.iterations
        evals += rest.t_applications
    done = np.setdiff1d(np.arange(M), stalled if len(stalled) else [])
    if done.size:
        delta[done], residuals[done] = _polish(model.take(done), delta[done])
    return BatchInversion(delta, residuals, iterations, evals, int(iterations.max(initial=0)))


def invert(market: Market, params: PreferenceParams, tol: float = DEFAULT_TOL, max_iter: int = 100_000, delta0=None) -> InversionResult:
    """Iterate ``T`` from ``delta0`` (default 0) to its unique fixed point."""
    b = invert_batch(market, params, tol=tol, thresholds=None, max_iter=max_iter, delta0=None if delta0 is None else [delta0])
    return InversionResult(b.deltas[0], float(b.residuals[0]), int(b.iterations[0]), True)


@dataclass(frozen=True)
class PseudoShocks:
    """Recovered shock vectors, aligned with the input markets."""

    belief: Belief
    shocks: np.ndarray  # (M, J), last column 0
    ids: tuple
    levels: np.ndarray

    def level_belief(self, l: int) -> Belief:
        pts = self.shocks[self.levels == l]
        if pts.shape[0] == 0:
            raise InputError(f"no pseudo-shocks at characteristic level {l}")
        return Belief.empirical(pts)


def pseudo_shocks(markets, params: PreferenceParams, tol: float = DEFAULT_TOL, thresholds=DEFAULT_THRESHOLDS) -> PseudoShocks:
    """Invert every no-persuasion market and return the equally weighted empirical prior."""
    panel = _as_panel(markets)
    if np.any(panel.chi != 0):
        bad = [panel.ids[i] for i in np.flatnonzero(panel.chi != 0)]
        raise InputError(f"pseudo-shocks require no-persuasion markets; got chi=1 for {bad[:10]}")
    try:
        batch = invert_batch(panel, params, tol=tol, thresholds=thresholds)
    except (InputError, SolverError, NumericError) as exc:
        raise type(exc)(f"inversion failed while recovering pseudo-shocks: {exc}") from exc
    shocks = np.concatenate([batch.deltas, np.zeros((len(panel), 1))], axis=1)
    return PseudoShocks(Belief.empirical(shocks), shocks, panel.ids, np.asarray(panel.level))
