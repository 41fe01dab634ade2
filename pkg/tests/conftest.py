import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ripersuasion.model import Belief, Market, PreferenceParams

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def grid_search_p0(V, w, step=1e-6):
    """Brute-force maximiser of sum_i w_i log sum_j p_j exp(V_ij) for J = 2 on a fine grid."""
    p = np.arange(0.0, 1.0 + step / 2, step)
    E = np.exp(V)
    vals = (w[:, None] * np.log(np.outer(E[:, 0], p) + np.outer(E[:, 1], 1 - p))).sum(axis=0)
    i = int(np.argmax(vals))
    return np.array([p[i], 1 - p[i]]), float(vals[i])


def simplex_grid_search(V, w, n=400, refine=4):
    """Refined grid search over the simplex for J <= 3. Returns (p, objective)."""
    J = V.shape[1]
    E = np.exp(V)

    def obj(P):
        return np.log(P @ E.T) @ w

    if J == 2:
        lo, hi = 0.0, 1.0
        for _ in range(refine + 1):
            p1 = np.linspace(lo, hi, n + 1)
            P = np.stack([p1, 1 - p1], axis=1)
            f = obj(P)
            i = int(np.argmax(f))
            width = (hi - lo) / n
            lo, hi = max(0.0, p1[i] - 2 * width), min(1.0, p1[i] + 2 * width)
        return P[i], float(f[i])
    center, width = np.full(2, 1 / 3), 1.0
    best_p, best_f = None, -np.inf
    for _ in range(refine + 1):
        a = np.linspace(center[0] - width, center[0] + width, n + 1)
        b = np.linspace(center[1] - width, center[1] + width, n + 1)
        A, B = np.meshgrid(a, b, indexing="ij")
        ok = (A >= 0) & (B >= 0) & (A + B <= 1)
        P = np.stack([A[ok], B[ok], 1 - A[ok] - B[ok]], axis=1)
        f = obj(P)
        i = int(np.argmax(f))
        if f[i] > best_f:
            best_f, best_p = float(f[i]), P[i]
        center, width = best_p[:2], 4 * width / n
    return best_p, best_f


def random_belief(rng, J, n, scale=1.5):
    sup = np.zeros((n, J))
    sup[:, :-1] = rng.normal(0, scale, (n, J - 1))
    return Belief(sup, rng.dirichlet(np.ones(n)))


def random_params(rng, J, K, L=1, alpha_scale=0.5):
    alpha = np.zeros((J, K, L))
    alpha[:-1] = rng.normal(0, alpha_scale, (J - 1, K, L))
    p0 = rng.dirichlet(np.ones(J), size=(K, L)).transpose(2, 0, 1)
    return PreferenceParams(alpha, p0)


def market_from_delta(delta, params, demo, level=0, mid="m"):
    from ripersuasion.inversion import model_share

    J = params.J
    dummy = Market(mid, 0, np.full(J, 1.0 / J), demo, level)
    s = model_share(delta, dummy, params)
    return Market(mid, 0, s / s.sum(), demo, level)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
