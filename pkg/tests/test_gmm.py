import warnings
from collections import Counter

import numpy as np
import pytest

from ripersuasion.exceptions import IdentificationError, WeakIdentificationWarning
from ripersuasion.gmm import (
    Stage1Options, ThetaOptions, estimate_stage1, estimate_theta, gmm_objective, identification_diagnostics,
    moments_stage1, moments_stage2_theta, numerical_jacobian, sandwich_covariance, shock_instrument_names,
    stage1_tags,
)
from ripersuasion.inversion import pseudo_shocks
from ripersuasion.model import Belief, Market, MarketPanel, PreferenceParams
from ripersuasion.persuasion import PersuasionStrategy
from ripersuasion.simulate import DgpSpec, simulate_markets, true_params
from ripersuasion.solver import conditional_choice_prob, solve_weighted
from ripersuasion.welfare import prior_p0


def _two_option_spec(seed, M=2000):
    prior = Belief(np.array([[-2.5, 0.0], [0.2, 0.0], [2.5, 0.0]]), [0.3, 0.5, 0.2])
    prior = Belief(prior.support - np.array([prior.weights @ prior.support[:, 0], 0.0]), prior.weights)
    return DgpSpec(np.array([0.5, 0.0]), prior, [[1.0]], n_markets=M, seed=seed)


def test_single_market_share_moment():
    m = Market("a", 0, [0.3, 0.7], [1.0])
    mv, contrib = moments_stage1([m], np.array([0.2, 0.0]), np.array([0.45, 0.55]))
    assert mv.block("share")[0] == pytest.approx(0.3 - 0.45, abs=1e-15)
    assert contrib.shape == (1, len(mv.tags))


def test_tag_registry_matches_dimensions():
    for J, K, L, inst in [(2, 1, 1, "reduced"), (3, 2, 1, "reduced"), (4, 3, 2, "full")]:
        tags = stage1_tags(J, K, L, inst)
        counts = Counter(t.condition for t in tags)
        n_inst = len(shock_instrument_names(K, inst))
        assert counts == {"share": (J - 1) * K * L, "shock": (J - 1) * n_inst * L, "foc": (J - 1) * K * L}
        assert len(set(tags)) == len(tags)


def test_outside_share_residual_is_minus_sum_of_inside():
    rng = np.random.default_rng(0)
    p0 = rng.dirichlet(np.ones(3), size=2).T  # (J, K)
    ms = [Market(f"m{i}", 0, rng.dirichlet(np.ones(3) * 5), rng.dirichlet([1, 1])) for i in range(30)]
    panel = MarketPanel.from_markets(ms)
    alpha = np.zeros((3, 2, 1))
    _, contrib = moments_stage1(panel, alpha, p0[:, :, None])
    share = contrib[:, : 2 * 2].reshape(30, 2, 2)  # (M, j, k)
    outside = (panel.shares[:, -1] - panel.demo @ p0[-1])[:, None] * panel.demo
    assert np.allclose(outside, -share.sum(axis=1), atol=1e-15)


def test_foc_moment_zero_at_solver_p0_on_empirical_shocks():
    rng = np.random.default_rng(1)
    eps = np.zeros((40, 3))
    eps[:, :2] = rng.normal(0, 1, (40, 2))
    G = Belief.empirical(eps)
    alpha = np.zeros((3, 2, 1))
    alpha[:2, :, 0] = [[0.3, -0.2], [-0.4, 0.1]]
    p0 = np.stack([solve_weighted(eps + alpha[:, k, 0], G.weights).p0 for k in range(2)], axis=1)[:, :, None]
    params = PreferenceParams(alpha, p0)
    D = rng.dirichlet([1, 1], size=40)
    shares = [sum(D[m, k] * conditional_choice_prob(p0[:, k, 0], alpha[:, k, 0] + eps[m]) for k in range(2)) for m in range(40)]
    panel = MarketPanel.from_markets([Market(f"m{m}", 0, s, D[m]) for m, s in enumerate(shares)])
    mv, _ = moments_stage1(panel, params.alpha, params.p0)
    foc = mv.block("foc")
    tags = [t for t in mv.tags if t.condition == "foc"]
    interior = np.array([p0[t.j, t.k, t.l] > 0 for t in tags])
    assert interior.any()
    assert np.max(np.abs(foc[interior])) < 1e-8
    assert np.all(foc[~interior] <= 1e-8)


def test_zero_shock_dgp_has_zero_shock_moments():
    # with a degenerate prior the program's solution is a vertex unless utilities tie; alpha = 0 keeps it uniform
    prior = Belief.point_mass([0.0, 0.0, 0.0])
    alpha = np.zeros((3, 2, 1))
    spec = DgpSpec(alpha, prior, [[1.0, 1.0]], n_markets=50, seed=3)
    data = simulate_markets(spec)
    truth = true_params(spec)
    mv, _ = moments_stage1(data.panel, truth.alpha, truth.p0)
    assert np.allclose(truth.p0, 1 / 3, atol=1e-12)
    assert np.allclose(data.panel.shares, 1 / 3, atol=1e-12)
    assert np.max(np.abs(mv.block("shock"))) < 1e-10
    ps = pseudo_shocks(data.panel, truth)
    assert np.max(np.abs(ps.shocks)) < 1e-10


def test_stage1_recovers_two_option_design():
    spec = _two_option_spec(seed=4)
    data = simulate_markets(spec)
    est = estimate_stage1(data.panel, 1, Stage1Options(n_starts=2, seed=4))
    truth = true_params(spec)
    assert abs(est.params.alpha[0, 0, 0] - 0.5) < 0.05
    assert np.max(np.abs(est.params.p0 - truth.p0)) < 0.02
    assert est.covariance.shape == (2, 2) and np.all(np.diag(est.covariance) > 0)


def test_objective_minimised_near_truth():
    # with a single group the share moment is E[ms] - p0, so perturbing p0 always raises the objective
    wins = 0
    reps = 10
    for r in range(reps):
        spec = _two_option_spec(seed=100 + r, M=2000)
        data = simulate_markets(spec)
        truth = true_params(spec)
        q0 = gmm_objective(moments_stage1(data.panel, truth.alpha, truth.p0)[0].values)
        a = truth.alpha.copy()
        a[0] += 0.1
        q1 = gmm_objective(moments_stage1(data.panel, a, truth.p0)[0].values)
        wins += q0 <= q1
    assert wins >= reps - 1


def test_sandwich_linear_toy_matches_variance_of_mean():
    rng = np.random.default_rng(5)
    mu = rng.normal(1.0, 2.0, 500)
    theta = mu.mean()
    contrib = (mu - theta)[:, None]
    cov = sandwich_covariance(contrib, np.array([[-1.0]]))
    assert cov[0, 0] == pytest.approx(np.var(mu) / mu.size, rel=1e-12)


def test_sandwich_collapses_under_efficient_weight():
    rng = np.random.default_rng(6)
    G = rng.normal(size=(400, 5))
    B = rng.normal(size=(5, 2))
    Lam = G.T @ G / 400
    W = np.linalg.inv(Lam)
    cov = sandwich_covariance(G, B, W)
    assert np.allclose(cov, np.linalg.inv(B.T @ W @ B) / 400, rtol=1e-10)


def test_sandwich_rank_deficiency_names_coordinates():
    G = np.random.default_rng(7).normal(size=(50, 3))
    B = np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0]])
    with pytest.raises(IdentificationError, match="alpha_x"):
        sandwich_covariance(G, B, names=["alpha_x", "p0_y"])


def test_numerical_jacobian_of_linear_map():
    A = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]])
    assert np.allclose(numerical_jacobian(lambda z: A @ z, np.array([0.3, -2.0])), A, atol=1e-9)


def test_stage2_single_market_reduces_to_share_minus_h():
    prior = Belief([[0.5, 0.0], [-0.5, 0.0]], [0.5, 0.5])
    params = PreferenceParams(np.zeros(2), np.array([0.5, 0.5]))
    s = PersuasionStrategy(("college_family",), [0.8], rep=0, dem=1)
    m = Market("p", 1, [0.4, 0.6], [1.0])
    mv, _ = moments_stage2_theta([m], [0.8], prior, s, params)
    from ripersuasion.gmm import h_table

    h = h_table(prior, s, params)
    assert mv.values[0] == pytest.approx(0.4 - h[0, 0, 0], abs=1e-15)


def test_uninformative_stage2_equals_stage1_share_moments():
    rng = np.random.default_rng(8)
    eps = np.zeros((60, 3))
    eps[:, :2] = rng.normal(0, 1, (60, 2))
    G = Belief.empirical(eps)
    alpha = np.zeros((3, 2, 1))
    alpha[:2, :, 0] = [[0.3, -0.2], [-0.4, 0.1]]
    p0 = np.stack([prior_p0(G, alpha[:, k, 0]) for k in range(2)], axis=1)[:, :, None]
    params = PreferenceParams(alpha, p0)
    D = rng.dirichlet([1, 1], size=60)
    shares = [sum(D[m, k] * conditional_choice_prob(p0[:, k, 0], alpha[:, k, 0] + eps[m]) for k in range(2)) for m in range(60)]
    pan0 = MarketPanel.from_markets([Market(f"m{m}", 0, s, D[m]) for m, s in enumerate(shares)])
    pan1 = MarketPanel.from_markets([Market(f"m{m}", 1, s, D[m]) for m, s in enumerate(shares)])
    s = PersuasionStrategy(("college_family", "college_family"), [1.0], rep=0, dem=1)
    m2, _ = moments_stage2_theta(pan1, [1.0], G, s, params)
    m1, _ = moments_stage1(pan0, alpha, p0)
    assert np.array_equal(m2.values, m1.block("share"))


def test_identification_diagnostics():
    rng = np.random.default_rng(9)
    one = MarketPanel.from_markets([Market(f"m{i}", 0, [0.5, 0.5], [1.0]) for i in range(10)])
    rep = identification_diagnostics(one)
    assert rep.share_condition[0] == pytest.approx(1.0) and rep.ok
    D = rng.dirichlet([1, 1], size=200)
    two = MarketPanel.from_markets([Market(f"m{i}", 0, [0.5, 0.5], d) for i, d in enumerate(D)])
    assert not identification_diagnostics(two, instruments="full").ok
    assert identification_diagnostics(two, instruments="reduced").ok
    D3 = rng.dirichlet([1, 1, 1], size=500)
    three = MarketPanel.from_markets([Market(f"m{i}", 0, [0.5, 0.5], d) for i, d in enumerate(D3)])
    assert identification_diagnostics(three).ok


def _flat_design(n=400, seed=10):
    # every atom has eps_rep < eps_dem, so the hs family sends '-' with certainty for every theta
    atoms = np.array([[-1.0, 0.5, 0.0], [-0.2, 0.9, 0.0], [-1.5, -0.7, 0.0]])
    alpha = np.zeros((3, 2, 1))
    alpha[:2, :, 0] = [[0.6, 0.2], [-0.6, 0.0]]
    s = PersuasionStrategy(("hs_family", "hs_family"), [0.8], rep=0, dem=1)
    return DgpSpec(alpha, Belief(atoms, np.full(3, 1 / 3)), [[1.0, 1.0]], n_markets=n, n_persuasion=n, strategy=s, seed=seed)


def test_flat_profile_triggers_weak_identification():
    spec = _flat_design()
    data = simulate_markets(spec)
    pan1 = data.panel.subset(data.panel.chi == 1)
    with pytest.warns(WeakIdentificationWarning):
        th = estimate_theta(pan1, spec.prior, spec.strategy, true_params(spec), ThetaOptions(grid_points=11))
    assert th.weak_identification
    assert th.plateau == (0.5, 1.0) and th.theta[0] == pytest.approx(0.75)
    assert np.ptp(th.profile) == 0.0


def test_theta_recovered_at_truth_prior():
    from ripersuasion.recovery import recovery_design

    spec = recovery_design(0.9, n_markets=10, n_persuasion=1500, seed=11)
    data = simulate_markets(spec)
    pan1 = data.panel.subset(data.panel.chi == 1)
    with warnings.catch_warnings():
        warnings.simplefilter("error", WeakIdentificationWarning)
        th = estimate_theta(pan1, spec.prior, spec.strategy, true_params(spec), ThetaOptions(grid_points=26))
    assert abs(th.theta[0] - 0.9) < 0.05
    grid_obj = dict(zip(np.round(th.grid, 6), th.profile))
    assert th.objective <= min(grid_obj[0.86], grid_obj[0.94]) if 0.86 in grid_obj else True


def test_vector_theta_uses_simplex_search():
    from ripersuasion.recovery import recovery_design

    base = recovery_design(0.9, n_markets=10, n_persuasion=800, seed=12)
    s = PersuasionStrategy(("hs_family", "college_family"), [0.85, 0.9], (0, 1))
    spec = DgpSpec(base.alpha, base.prior, base.dirichlet, 10, 800, strategy=s, seed=12)
    data = simulate_markets(spec)
    pan1 = data.panel.subset(data.panel.chi == 1)
    th = estimate_theta(pan1, spec.prior, s, true_params(spec), ThetaOptions(grid_points=12))
    assert th.theta.shape == (2,)
    assert np.all((th.theta >= 0.5) & (th.theta <= 1.0))
    assert th.objective <= th.profile.min() + 1e-15
