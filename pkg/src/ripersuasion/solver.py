"""Unconditional choice probabilities of the rational-inattention decision maker.

With a finitely supported prior ``{(v_i, w_i)}`` the decision maker's
unconditional choice probabilities maximise the concave program

    f(p) = sum_i w_i * log(sum_j p_j * exp(v_ij))    over the simplex,

and conditional on the realised utility vector ``v`` the choice probabilities
take the logit-like form ``p_j e^{v_j} / sum_l p_l e^{v_l}``.

The solver iterates the multiplicative fixed point ``p_j <- p_j * g_j`` with
``g_j = sum_i w_i e^{v_ij} / sum_l p_l e^{v_il}`` (an EM / Blahut-Arimoto
update, which is a monotone ascent method), and accelerates it with an
active-set Newton step that is only accepted when it increases ``f``.
A projected-gradient step takes over when the fixed point stalls and Newton
is unavailable. Every sum of exponentials is evaluated in log-sum-exp form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError, NumericError, SolverError
from .model import Belief, utilities

_EXP_CAP = 700.0


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    foc_tol: float = 1e-8
    max_iter: int = 10_000
    zero_clamp: float = 1e-14
    newton: bool = True
    stall_window: int = 50
    keep_trace: bool = False


@dataclass(frozen=True)
class RISolution:
    p0: np.ndarray
    objective: float
    foc_residual: np.ndarray
    iterations: int
    trace: tuple = field(default=(), repr=False)


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    return np.maximum(y - css[rho] / (rho + 1.0), 0.0)


class _Program:
    """Evaluates the objective and its derivatives for a fixed utility matrix."""

    def __init__(self, V, w):
        self.V = np.asarray(V, dtype=float)
        self.w = np.asarray(w, dtype=float)
        if not np.all(np.isfinite(self.V)):
            raise InputError("utilities must be finite")

    def log_denominator(self, p):
        with np.errstate(divide="ignore"):
            A = self.V + np.log(p)
        m = A.max(axis=1)
        if not np.all(np.isfinite(m)):
            raise NumericError("probability vector puts no mass on any option")
        return m + np.log(np.exp(A - m[:, None]).sum(axis=1))

    def objective(self, p):
        return float(self.w @ self.log_denominator(p))

    def evaluate(self, p):
        logS = self.log_denominator(p)
        G = np.exp(np.minimum(self.V - logS[:, None], _EXP_CAP))
        g = self.w @ G
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient in the unconditional-choice program")
        return float(self.w @ logS), G, g


def _converged(p, r, opts):
    active = p > 0
    slack = np.max(np.abs(p * r))
    if slack >= opts.tol:
        return False
    if np.any(np.abs(r[active]) > opts.foc_tol):
        return False
    return not np.any(r[~active] > opts.foc_tol)


def _newton_step(prog, p, f, G, g):
    """Active-set Newton step restricted to sum(d) = 0; None if not an ascent."""
    active = np.flatnonzero(p > 0)
    a = active.size
    if a < 2:
        return None
    GA = G[:, active]
    H = -(GA * prog.w[:, None]).T @ GA
    Z = np.vstack([np.eye(a - 1), -np.ones((1, a - 1))])
    Hr = Z.T @ H @ Z
    gr = Z.T @ g[active]
    try:
        # negative definiteness is required for an ascent direction
        np.linalg.cholesky(-Hr)
        dr = np.linalg.solve(Hr, -gr)
    except np.linalg.LinAlgError:
        return None
    d = np.zeros_like(p)
    d[active] = Z @ dr
    slope = g @ d
    if not slope > 0:
        return None
    ratio = np.full_like(p, np.inf)
    neg = d < 0
    ratio[neg] = -p[neg] / d[neg]
    t_max = ratio.min()
    t = min(1.0, t_max)
    # near the optimum the objective gain drops below rounding; the caller then
    # falls back to the multiplicative update, which still shrinks the residual
    for _ in range(20):
        cand = np.maximum(p + t * d, 0.0)
        if t == t_max:
            cand[ratio <= t_max * (1 + 1e-12)] = 0.0
        cand /= cand.sum()
        if prog.objective(cand) > f:
            return cand
        t *= 0.5
    return None


def _reentry_step(prog, p, f, r, opts):
    """Move mass to a zeroed option whose first-order condition says it should enter."""
    j = int(np.argmax(np.where(p > 0, -np.inf, r)))
    e = np.zeros_like(p)
    e[j] = 1.0
    eta = 0.5
    for _ in range(60):
        cand = (1 - eta) * p + eta * e
        if prog.objective(cand) > f:
            return cand
        eta *= 0.5
    return None


def _projected_gradient_step(prog, p, f, g):
    step = 1.0 / max(np.max(np.abs(g)), 1.0)
    for _ in range(60):
        cand = project_simplex(p + step * g)
        if prog.objective(cand) > f:
            return cand
        step *= 0.5
    return None


def solve_weighted(V, w, options: SolverOptions | None = None) -> RISolution:
    """Maximise ``sum_i w_i log sum_j p_j exp(V[i, j])`` over the simplex.

    Parameters
    ----------
    V : (n, J) array
        Utility vectors at each support point.
    w : (n,) array
        Nonnegative weights summing to one.
    """
    opts = options or SolverOptions()
    prog = _Program(V, w)
    J = prog.V.shape[1]
    p = np.full(J, 1.0 / J)
    trace = []
    best_slack = np.inf
    since_improved = 0
    f = -np.inf
    r = np.zeros(J)
    for it in range(opts.max_iter + 1):
        f, G, g = prog.evaluate(p)
        r = g - 1.0
        if opts.keep_trace:
            trace.append(f)
        if _converged(p, r, opts):
            return RISolution(p, f, r, it, tuple(trace))
        if it == opts.max_iter:
            break

        slack = np.max(np.abs(p * r))
        if slack < best_slack * (1 - 1e-3):
            best_slack, since_improved = slack, 0
        else:
            since_improved += 1

        new = None
        if np.any((p == 0) & (r > opts.foc_tol)):
            new = _reentry_step(prog, p, f, r, opts)
        if new is None and opts.newton and it > 0:
            new = _newton_step(prog, p, f, G, g)
        if new is None and since_improved > opts.stall_window:
            new = _projected_gradient_step(prog, p, f, g)
            since_improved = 0
        if new is None:
            new = p * g
            new /= new.sum()
        new[new < opts.zero_clamp] = 0.0
        p = new / new.sum()
    raise SolverError(
        f"unconditional-choice solver did not converge in {opts.max_iter} iterations",
        residual=float(np.max(np.abs(p * r))),
        iterations=opts.max_iter,
        trace=tuple(trace),
    )


def solve_unconditional(belief: Belief, alpha_slice, options: SolverOptions | None = None) -> RISolution:
    """Unconditional choice probabilities for a belief and one group's mean utilities."""
    return solve_weighted(utilities(alpha_slice, belief.support), belief.weights, options)


def _check_simplex(p0):
    p0 = np.asarray(p0, dtype=float)
    if np.any(p0 < 0) or abs(p0.sum() - 1) > 1e-9:
        raise InputError("p0 must lie in the probability simplex")
    return p0


def conditional_choice_prob(p0, v) -> np.ndarray:
    """Logit-form choice probabilities ``p0_j e^{v_j} / sum_l p0_l e^{v_l}``.

    ``v`` may be a single utility vector or an ``(n, J)`` stack.
    """
    p0 = _check_simplex(p0)
    if not np.any(p0 > 0):
        raise InputError("p0 puts no mass on any option")
    v = np.asarray(v, dtype=float)
    with np.errstate(divide="ignore"):
        A = v + np.log(p0)
    m = A.max(axis=-1, keepdims=True)
    E = np.exp(A - m)
    return E / E.sum(axis=-1, keepdims=True)


def foc_residual(p0, belief: Belief, alpha_slice) -> np.ndarray:
    """``sum_i w_i e^{v_ij} / sum_l p0_l e^{v_il} - 1`` for every option."""
    p0 = _check_simplex(p0)
    prog = _Program(utilities(alpha_slice, belief.support), belief.weights)
    _, _, g = prog.evaluate(p0)
    return g - 1.0


def consistency_check(p0, belief: Belief, alpha_slice) -> np.ndarray:
    """Prior mean of the conditional choice probabilities minus ``p0``."""
    P = conditional_choice_prob(p0, utilities(alpha_slice, belief.support))
    return belief.weights @ P - np.asarray(p0, dtype=float)


def objective_value(p0, belief: Belief, alpha_slice) -> float:
    return _Program(utilities(alpha_slice, belief.support), belief.weights).objective(_check_simplex(p0))
