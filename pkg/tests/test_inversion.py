import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import market_from_delta, random_params
from ripersuasion.exceptions import InputError
from ripersuasion.inversion import (
    apply_share_floor, closed_form_delta, contraction_step, invert, invert_batch, invert_newton, model_share,
    pseudo_shocks,
)
from ripersuasion.model import Market, MarketPanel, PreferenceParams


def _single(p0, alpha_inside=None):
    J = len(p0)
    alpha = np.zeros((J, 1, 1))
    if alpha_inside is not None:
        alpha[:-1, 0, 0] = alpha_inside
    return PreferenceParams(alpha, np.asarray(p0, dtype=float)[:, None, None])


def test_model_share_examples():
    m3 = Market("a", 0, [0.3, 0.2, 0.5], [1.0])
    assert np.allclose(model_share([0.0, 0.0], Market("u", 0, np.full(3, 1 / 3), [1.0]), _single(np.full(3, 1 / 3))), 1 / 3)
    assert np.allclose(model_share([0.0], Market("b", 0, [0.5, 0.5], [1.0]), _single([0.6, 0.4])), [0.6, 0.4])
    ms = model_share([np.log(1.2), np.log(0.8)], m3, _single([0.25, 0.25, 0.5]))
    assert np.allclose(ms, [0.3, 0.2, 0.5], atol=1e-15)


def test_closed_form_and_invert_example():
    m3 = Market("a", 0, [0.3, 0.2, 0.5], [1.0])
    p = _single([0.25, 0.25, 0.5])
    cf = closed_form_delta(m3, p)
    assert np.allclose(cf, [np.log(1.2), np.log(0.8)], atol=1e-15)
    assert np.allclose(invert(m3, p).delta, cf, atol=1e-12)
    with pytest.raises(InputError):
        closed_form_delta(Market("b", 0, [0.3, 0.2, 0.5], [0.5, 0.5]), random_params(np.random.default_rng(0), 3, 2))


def test_contraction_step_fixed_point():
    rng = np.random.default_rng(3)
    p = random_params(rng, 3, 2)
    d = np.array([0.3, -0.4])
    m = market_from_delta(d, p, np.array([0.3, 0.7]))
    assert np.max(np.abs(contraction_step(d, m, p) - d)) < 1e-14


def test_one_step_from_zero_with_k1():
    # T(0) equals the closed form only when the model share of the outside
    # option at delta = 0 equals the observed one; otherwise it differs by a
    # common constant and further steps are needed.
    p = _single([0.25, 0.25, 0.5])
    m = Market("a", 0, [0.3, 0.2, 0.5], [1.0])
    assert np.allclose(contraction_step([0.0, 0.0], m, p), closed_form_delta(m, p), atol=1e-15)
    m2 = Market("b", 0, [0.3, 0.3, 0.4], [1.0])
    diff = contraction_step([0.0, 0.0], m2, p) - closed_form_delta(m2, p)
    assert abs(diff[0] - diff[1]) < 1e-15 and abs(diff[0]) > 1e-3


def test_contraction_rejects_zero_inside_share():
    with pytest.raises(InputError):
        contraction_step([0.0, 0.0], Market("z", 0, [0.0, 0.5, 0.5], [1.0]), _single([0.25, 0.25, 0.5]))


def damped_newton(F, x0, tol=1e-14, h=1e-7, max_iter=200):
    """Damped Newton with a central-difference Jacobian; independent of the package's derivatives."""
    x = np.array(x0, dtype=float)
    for _ in range(max_iter):
        f = F(x)
        if np.max(np.abs(f)) < tol:
            break
        Jm = np.column_stack([(F(x + h * e) - F(x - h * e)) / (2 * h) for e in np.eye(x.size)])
        step = np.linalg.solve(Jm, f)
        t = 1.0
        while np.max(np.abs(F(x - t * step))) >= np.max(np.abs(f)) and t > 1e-8:
            t *= 0.5
        if t <= 1e-8:
            break
        x = x - t * step
    return x


def test_two_groups_match_root_finder():
    rng = np.random.default_rng(11)
    for _ in range(20):
        p = random_params(rng, 3, 2, alpha_scale=1.0)
        demo = rng.dirichlet([1, 1])
        m = market_from_delta(rng.normal(0, 1, 2), p, demo)
        res = invert(m, p)
        oracle = damped_newton(lambda d: np.log(model_share(d, m, p)[:-1]) - np.log(m.shares[:-1]), np.zeros(2))
        assert np.max(np.abs(res.delta - oracle)) < 1e-8


def test_residual_sequence_non_increasing():
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = random_params(rng, 3, 2)
        m = market_from_delta(rng.normal(0, 1, 2), p, rng.dirichlet([1, 1]))
        d = np.zeros(2)
        res = []
        for _ in range(60):
            nd = contraction_step(d, m, p)
            res.append(np.max(np.abs(nd - d)))
            d = nd
        assert np.all(np.diff(res[1:]) <= 1e-15)


def _panel(rng, n, p, outside=None):
    ms = []
    for i in range(n):
        d = rng.normal(0, 1, p.J - 1)
        if outside is not None:
            d = d + np.log((1 - outside[i]) / outside[i]) + 1.0
        ms.append(market_from_delta(d, p, rng.dirichlet(np.ones(p.K)), mid=f"m{i}"))
    return MarketPanel.from_markets(ms)


def test_batch_matches_single_market_inversion():
    rng = np.random.default_rng(8)
    p = random_params(rng, 3, 2)
    panel = _panel(rng, 100, p)
    batch = invert_batch(panel, p)
    for i, m in enumerate(panel.to_markets()):
        assert np.max(np.abs(batch.deltas[i] - invert(m, p).delta)) < 1e-12


def test_batch_at_fixed_points_returns_after_one_sweep():
    rng = np.random.default_rng(9)
    p = random_params(rng, 3, 2)
    panel = _panel(rng, 20, p)
    exact = invert_batch(panel, p)
    again = invert_batch(panel, p, delta0=exact.deltas)
    assert again.sweeps == 1


def test_newton_matches_contraction():
    rng = np.random.default_rng(10)
    p = random_params(rng, 4, 3)
    panel = _panel(rng, 60, p)
    a = invert_batch(panel, p)
    b = invert_newton(panel, p)
    assert np.max(np.abs(a.deltas - b.deltas)) < 1e-10


def test_share_floor():
    panel = MarketPanel.from_markets([Market("z", 0, [0.0, 0.4, 0.6], [1.0])])
    floored = apply_share_floor(panel, 1e-6)
    assert np.all(floored.shares > 0) and abs(floored.shares.sum() - 1) < 1e-12
    with pytest.raises(InputError):
        invert_batch(panel, _single([0.25, 0.25, 0.5]))


def test_pseudo_shocks_single_market_and_round_trip():
    p = _single([0.25, 0.25, 0.5])
    ps = pseudo_shocks([Market("a", 0, [0.3, 0.2, 0.5], [1.0])], p)
    assert len(ps.belief) == 1 and ps.belief.weights[0] == 1.0
    assert np.allclose(ps.shocks[0], [np.log(1.2), np.log(0.8), 0.0], atol=1e-12)


@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(1, 3))
def test_round_trip_property(seed, J, K):
    rng = np.random.default_rng(seed)
    p = random_params(rng, J, K)
    d0 = rng.normal(0, 1, J - 1)
    m = market_from_delta(d0, p, rng.dirichlet(np.ones(K)))
    assert np.max(np.abs(invert(m, p).delta - d0)) < 1e-9
    if K == 1:
        assert np.max(np.abs(closed_form_delta(m, p) - invert(m, p).delta)) < 1e-12
