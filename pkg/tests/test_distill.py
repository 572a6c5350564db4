import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

from pilcopid import optim
from pilcopid.dataset import AugmentedDataset, EmptyDatasetError, compute_errors
from pilcopid.distill import (
    ControllerState,
    DistillConfig,
    PIDController,
    PIDGains,
    closed_form_gains,
    collect_expert_data,
    initial_gains,
    kde_joint,
    kld_discrete,
    minimize_kld,
    pid_control,
    pid_nll,
    pid_nll_gradient,
    structure_mask,
)
from pilcopid.plant import PlantParams, rollout


def random_dataset(rng, n=60, n_inputs=1, noise=0.3, scales=None):
    scales = np.ones(6) if scales is None else np.asarray(scales)
    F = rng.normal(size=(n, 6)) * scales
    K = rng.normal(size=(n_inputs, 6))
    U = F @ K.T + noise * rng.normal(size=(n, n_inputs))
    return AugmentedDataset(F, U)


def random_gains(rng, structure="coupled", sigma=None):
    g = initial_gains(structure, rng=rng)
    sigma = rng.uniform(0.3, 2.0, size=g.n_inputs) if sigma is None else sigma
    return PIDGains(structure, g.K, sigma)


def test_structure_masks():
    assert structure_mask("coupled").tolist() == [[True] * 6]
    assert structure_mask("decoupled").astype(int).tolist() == [[1, 0, 1, 0, 1, 0], [0, 1, 0, 1, 0, 1]]
    with pytest.raises(ValueError):
        structure_mask("diagonal")


def test_gains_validation():
    with pytest.raises(ValueError):
        PIDGains("decoupled", np.ones((2, 6)), [1.0, 1.0])
    with pytest.raises(ValueError):
        PIDGains("coupled", np.ones((1, 6)), [0.0])
    with pytest.raises(ValueError):
        PIDGains("coupled", np.ones((2, 6)), [1.0])


def test_gains_file_round_trip(tmp_path, rng):
    g = PIDGains("coupled", rng.normal(size=(1, 6)) * 1e3, [0.1 + 1e-17])
    g.save(tmp_path / "g.json")
    back = PIDGains.load(tmp_path / "g.json")
    assert np.array_equal(back.K, g.K) and np.array_equal(back.sigma_phi, g.sigma_phi)
    assert back.feature_order == "e_x,e_theta,i_x,i_theta,d_x,d_theta"


def test_nll_zero_residual(rng):
    g = random_gains(rng, sigma=[0.7])
    F = rng.normal(size=(25, 6))
    data = AugmentedDataset(F, F @ g.K.T)
    assert math.isclose(pid_nll(data, g), 25 * 0.5 * math.log(2 * math.pi * 0.49), rel_tol=1e-12)


def test_nll_hand_dataset():
    F = np.zeros((3, 6))
    F[0, 0] = F[1, 1] = F[2, 0] = F[2, 1] = 1.0
    data = AugmentedDataset(F, [1.0, 1.0, 2.0])
    g = PIDGains("coupled", [[1, 1, 0, 0, 0, 0]], [1.0])
    assert pid_nll(data, g) == pytest.approx(1.5 * math.log(2 * math.pi), abs=1e-12)
    assert pid_nll(data, g) == pytest.approx(2.7568, abs=1e-4)


def test_nll_doubling_sigma(rng):
    g = random_gains(rng, sigma=[0.4])
    F = rng.normal(size=(13, 6))
    data = AugmentedDataset(F, F @ g.K.T)
    g2 = PIDGains("coupled", g.K, [0.8])
    assert pid_nll(data, g2) - pid_nll(data, g) == pytest.approx(13 * math.log(2), rel=1e-12)


def test_nll_rejects_nonpositive_sigma(rng):
    g = random_gains(rng)
    g.sigma_phi = np.array([-1.0])
    with pytest.raises(ValueError):
        pid_nll(random_dataset(rng), g)


def test_nll_matches_independent_log_density(rng):
    data = random_dataset(rng, n_inputs=2)
    for _ in range(3):
        g = random_gains(rng, "decoupled")
        mean = data.error_features @ g.K.T
        expected = -norm.logpdf(data.controls, loc=mean, scale=g.sigma_phi).sum()
        assert pid_nll(data, g) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("structure,learn_sigma", [("coupled", False), ("coupled", True), ("decoupled", False), ("decoupled", True)])
@given(seed=st.integers(0, 2**32 - 1))
def test_gradient_matches_finite_differences(structure, learn_sigma, seed):
    rng = np.random.default_rng(seed)
    g = random_gains(rng, structure)
    data = random_dataset(rng, n=30, n_inputs=g.n_inputs)
    k = int(g.mask.sum())

    def f(v):
        gg = g.with_free(v[:k])
        if learn_sigma:
            gg.sigma_phi = np.exp(v[k:])
        return pid_nll(data, gg)

    v0 = np.concatenate([g.free(), np.log(g.sigma_phi)]) if learn_sigma else g.free()
    fd = optim.central_difference(f, v0, eps=1e-5)
    an = pid_nll_gradient(data, g, learn_sigma)
    assert an.shape == v0.shape
    assert np.linalg.norm(an - fd) <= 1e-6 * max(np.linalg.norm(fd), 1.0)


def test_gradient_vanishes_at_least_squares(rng):
    data = random_dataset(rng, n=200)
    K, _ = closed_form_gains(data)
    g = PIDGains("coupled", K, [1.0])
    assert np.linalg.norm(pid_nll_gradient(data, g)) < 1e-8 * len(data)


def test_zero_dataset_gives_zero_gradient(rng):
    data = AugmentedDataset(np.zeros((10, 6)), np.zeros(10))
    assert np.all(pid_nll_gradient(data, random_gains(rng)) == 0)


def test_closed_form_exact_recovery(rng):
    F = rng.normal(size=(40, 6))
    K = rng.normal(size=(1, 6))
    got, sigma = closed_form_gains(AugmentedDataset(F, F @ K.T))
    np.testing.assert_allclose(got, K, atol=1e-10)
    assert sigma[0] < 1e-10


def test_closed_form_scalar_hand_case():
    K, _ = closed_form_gains(AugmentedDataset(np.array([[1.0], [2.0], [3.0]]), [2.0, 4.0, 6.0]))
    assert K[0, 0] == pytest.approx(2.0, abs=1e-12)


def test_closed_form_decoupled_keeps_pattern(rng):
    data = random_dataset(rng, n_inputs=2)
    K, sigma = closed_form_gains(data, "decoupled")
    assert np.all(K[~structure_mask("decoupled")] == 0)
    assert sigma.shape == (2,)


def test_closed_form_rank_deficient_uses_ridge(rng):
    F = rng.normal(size=(30, 6))
    F[:, 5] = F[:, 4]
    K, _ = closed_form_gains(AugmentedDataset(F, F[:, 0]))
    assert np.all(np.isfinite(K))
    assert K[0, 0] == pytest.approx(1.0, abs=1e-4)


def test_closed_form_empty():
    with pytest.raises(EmptyDatasetError):
        closed_form_gains(AugmentedDataset(np.zeros((0, 6)), np.zeros((0, 1))))


@pytest.mark.parametrize("structure", ["coupled", "decoupled"])
def test_minimize_matches_closed_form(structure, rng):
    n_inputs = 1 if structure == "coupled" else 2
    data = random_dataset(rng, n=300, n_inputs=n_inputs, scales=[0.1, 0.05, 0.5, 0.2, 1.0, 2.0])
    g0 = initial_gains(structure, sigma=1.0, rng=rng)
    res = minimize_kld(data, g0, DistillConfig(learn_sigma=False))
    K_ls, _ = closed_form_gains(data, structure)
    assert np.linalg.norm(res.gains.K - K_ls) <= 1e-3 * np.linalg.norm(K_ls)
    assert all(b <= a for a, b in zip(res.trace, res.trace[1:]))
    assert np.all(res.gains.K[~g0.mask] == 0)
    assert res.converged and res.n_iter <= 1000
    assert np.array_equal(res.gains.sigma_phi, g0.sigma_phi)


def test_minimize_refits_sigma(rng):
    data = random_dataset(rng, n=400, noise=0.3)
    res = minimize_kld(data, initial_gains(rng=rng), DistillConfig(learn_sigma=True))
    _, sigma = closed_form_gains(data)
    assert res.gains.sigma_phi[0] == pytest.approx(sigma[0], rel=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        DistillConfig(max_iters=0)


def test_kde_normalized_and_peaks_at_cluster():
    grid = kde_joint(np.full(50, 0.3), np.full(50, -1.0), ((-1, 1), (-2, 2), 81))
    assert grid.density.sum() * grid.cell_area == pytest.approx(1.0, abs=1e-6)
    i, j = np.unravel_index(np.argmax(grid.density), grid.density.shape)
    assert grid.a_centers[i] == pytest.approx(0.3, abs=0.03) and grid.b_centers[j] == pytest.approx(-1.0, abs=0.05)


def test_kde_standard_normal_matches_pdf(rng):
    s = rng.standard_normal((10_000, 2))
    grid = kde_joint(s[:, 0], s[:, 1], ((-4, 4), (-4, 4), 81))
    A, B = np.meshgrid(grid.a_centers, grid.b_centers, indexing="ij")
    exact = np.exp(-0.5 * (A**2 + B**2)) / (2 * math.pi)
    assert np.max(np.abs(grid.density - exact)) < 0.05


def test_kde_rejects_too_few_samples():
    with pytest.raises(ValueError):
        kde_joint([1.0], [2.0], ((0, 1), (0, 1), 10))


def test_kld_identity_and_hand_value():
    p = np.array([0.2, 0.3, 0.5])
    assert kld_discrete(p, p) == 0.0
    assert kld_discrete([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-12)
    assert kld_discrete([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.14384, abs=1e-5)


def test_kld_shape_mismatch():
    with pytest.raises(ValueError):
        kld_discrete(np.ones(3), np.ones(4))


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.9))
def test_kld_nonnegative(seed, sparsity):
    rng = np.random.default_rng(seed)
    p, q = rng.random((2, 7, 9))
    p[rng.random(p.shape) < sparsity] = 0.0
    q[rng.random(q.shape) < sparsity] = 0.0
    if p.sum() == 0 or q.sum() == 0:
        return
    assert kld_discrete(p, q) >= 0.0
    assert kld_discrete(p, p) == 0.0


def test_kld_zero_only_for_equal_grids(rng):
    p = rng.random((5, 5))
    q = p.copy()
    q[0, 0] *= 1.5
    assert kld_discrete(p, q) > 0


def test_pid_zero_error_zero_history():
    g = PIDGains("coupled", np.arange(1, 7)[None, :] * 1.0, [1.0])
    u, _ = pid_control(g, None, np.zeros(2), 0.05)
    assert np.all(u == 0)


@given(st.floats(-2, 2), st.integers(1, 60), st.floats(0.01, 0.1))
def test_pid_integral_only_telescopes(c, k, dt):
    g = PIDGains("coupled", [[0, 0, 3.0, 0, 0, 0]], [1.0])
    state = None
    for _ in range(k):
        u, state = pid_control(g, state, np.array([c, 0.0]), dt, u_max=1e9)
    assert u[0] == pytest.approx(3.0 * c * k * dt, rel=1e-9, abs=1e-12)


def test_pid_output_clamped():
    g = PIDGains("coupled", [[100.0, 0, 0, 0, 0, 0]], [1.0])
    u, _ = pid_control(g, None, np.array([1.0, 0.0]), 0.05, u_max=10.0)
    assert u[0] == 10.0


def test_anti_windup_freezes_integral():
    g = PIDGains("coupled", [[100.0, 0, 1.0, 0, 0, 0]], [1.0])
    st_ = ControllerState(np.array([0.5, 0.0]), np.array([1.0, 0.0]))
    _, frozen = pid_control(g, st_, np.array([1.0, 0.0]), 0.05, anti_windup=True)
    _, raw = pid_control(g, st_, np.array([1.0, 0.0]), 0.05)
    assert frozen.integral[0] == 0.5 and raw.integral[0] == pytest.approx(0.55)


@given(st.integers(0, 2**32 - 1))
def test_online_features_match_offline(seed):
    rng = np.random.default_rng(seed)
    params = PlantParams()
    g = PIDGains("coupled", rng.normal(size=(1, 6)), [1.0])
    tr = rollout(lambda s: float(rng.normal()), rng.normal(scale=0.1, size=4), 40, params, seed=seed % 1000)
    offline = np.array([r.as_row() for r in compute_errors(tr)])
    state = None
    for k, s in enumerate(tr.states):
        e = -s[[0, 2]]
        u, state = pid_control(g, state, e, params.dt, u_max=1e12)
        assert u[0] == (g.K @ offline[k])[0]


def test_controller_batch_matches_single(rng):
    g = PIDGains("coupled", rng.normal(size=(1, 6)), [1.0])
    states = rng.normal(size=(5, 3, 4))
    batch = PIDController(g, 0.05)
    singles = [PIDController(g, 0.05) for _ in range(3)]
    for k in range(5):
        ub = batch(states[k])
        for i, c in enumerate(singles):
            assert ub[i] == pytest.approx(c(states[k, i])[0], rel=1e-13)


def test_zero_integral_toggle():
    g = PIDGains("coupled", [[1, 2, 3, 4, 5, 6.0]], [1.0])
    c = PIDController(g, 0.05, zero_integral=True)
    assert c.gains.K.tolist() == [[1, 2, 0, 0, 5, 6]]


def test_collect_expert_data_shapes_and_determinism():
    policy = lambda s: float(np.clip(np.asarray(s) @ [1.0, 2.0, 20.0, 3.5], -10, 10))  # noqa: E731
    one = collect_expert_data(PlantParams(), policy, 1, seed=0, horizon=25)
    assert len(one) == 25
    a = collect_expert_data(PlantParams(), policy, 3, seed=5, horizon=20)
    b = collect_expert_data(PlantParams(), policy, 3, seed=5, horizon=20)
    assert np.array_equal(a.error_features, b.error_features) and np.array_equal(a.controls, b.controls)


def test_collect_expert_data_all_diverged():
    with pytest.raises(EmptyDatasetError):
        collect_expert_data(PlantParams(), lambda s: float("nan"), 2, seed=0, horizon=5)


@pytest.mark.parametrize("structure", ["coupled", "decoupled"])
def test_pd_mask_pins_integral_block(structure):
    full = structure_mask(structure, 2)
    pd = structure_mask(structure, 2, integral=False)
    assert not pd[:, 2:4].any()
    np.testing.assert_array_equal(pd[:, [0, 1, 4, 5]], full[:, [0, 1, 4, 5]])


def test_pd_closed_form_is_least_squares_on_remaining_columns(rng):
    data = random_dataset(rng, n=200)
    K, sigma = closed_form_gains(data, "coupled", integral=False)
    cols = [0, 1, 4, 5]
    ref = np.linalg.lstsq(data.error_features[:, cols], data.controls[:, 0], rcond=None)[0]
    np.testing.assert_allclose(K[0, cols], ref, rtol=1e-10)
    assert np.all(K[0, 2:4] == 0.0)


def test_pd_descent_keeps_integral_zero_and_matches_closed_form(rng):
    data = random_dataset(rng, n=200)
    g0 = initial_gains("coupled", sigma=1.0, rng=rng, integral=False)
    res = minimize_kld(data, g0, DistillConfig(learn_sigma=False, epsilon=1e-12))
    K_ref, _ = closed_form_gains(data, "coupled", integral=False)
    assert np.all(res.gains.ki == 0.0)
    np.testing.assert_allclose(res.gains.K, K_ref, rtol=1e-5, atol=1e-8)


def test_pd_gains_round_trip(tmp_path, rng):
    g = initial_gains("decoupled", rng=rng, integral=False)
    g.save(tmp_path / "g.json")
    back = PIDGains.load(tmp_path / "g.json")
    assert back.integral is False
    np.testing.assert_array_equal(back.K, g.K)
    with pytest.raises(ValueError):
        PIDGains("coupled", np.ones((1, 6)), 1.0, integral=False)


def test_without_integral_marks_gains_as_pd(rng):
    g = initial_gains(rng=rng).without_integral()
    assert g.integral is False and np.all(g.ki == 0.0)
