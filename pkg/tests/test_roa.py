import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pilcopid.plant import PlantParams, Trajectory
from pilcopid.roa import (
    EmptyRoaError,
    FitQualityError,
    LyapunovFit,
    LyapunovSample,
    ellipse_points,
    estimate_roa,
    fit_lyapunov,
    level_set,
    lyapunov_value,
    sample_grid,
    verify_boundary,
)

PARAMS = PlantParams(noise_cov=(0.0,) * 4)


def state_feedback():
    gains = np.array([1.0, 2.0, 20.0, 3.5])  # LQR-like balancing gains
    return lambda s: np.asarray(s) @ gains


def samples_from(fn, converged=None, n=9):
    th, thd = np.meshgrid(np.linspace(-0.5, 0.5, n), np.linspace(-1.5, 1.5, n), indexing="ij")
    th, thd = th.ravel(), thd.ravel()
    conv = np.ones(th.size, bool) if converged is None else converged
    return [LyapunovSample(a, b, float(fn(a, b)) if c else np.inf, bool(c)) for a, b, c in zip(th, thd, conv)]


def test_value_at_target_is_zero():
    traj = Trajectory(np.zeros((21, 4)), np.zeros((20, 1)), 0.05 * np.arange(21), PARAMS)
    assert lyapunov_value(traj) == (0.0, True)


@pytest.mark.parametrize("T", [10, 30, 60])
def test_geometric_series(T):
    s = 0.5 ** np.arange(T + 1)
    V, conv = lyapunov_value(s, dt=1.0, tail_tol=0.05)
    assert 0 <= 4 / 3 - V <= 4.0 ** (-T) / 3 + 1e-15
    assert conv == (s[-max(1, int(np.ceil(0.1 * (T + 1)))):] < 0.05).all()


def test_diverged_trajectory():
    s = np.zeros((10, 4))
    s[5:] = np.nan
    assert lyapunov_value(s, dt=0.05) == (np.inf, False)
    V, conv = lyapunov_value(np.ones((10, 4)), dt=0.05)
    assert V == np.inf and not conv


@given(arrays(float, (15, 4), elements=st.floats(-1e3, 1e3)))
def test_value_nonnegative(states):
    V, conv = lyapunov_value(states, dt=0.05)
    assert V >= 0
    assert np.isfinite(V) == conv


def test_sample_invariants():
    with pytest.raises(ValueError):
        LyapunovSample(0.0, 0.0, -1.0, True)
    with pytest.raises(ValueError):
        LyapunovSample(0.0, 0.0, np.inf, True)


def test_grid_shape_and_symmetry():
    assert len(sample_grid(resolution=(2, 2))) == 4
    g = sample_grid((-0.6, 0.6), (-2, 2), (5, 7))
    assert g.shape == (35, 4) and np.all(g[:, :2] == 0)
    np.testing.assert_allclose(np.sort(g[:, 2:], axis=0), np.sort(-g[:, 2:], axis=0), atol=1e-15)
    with pytest.raises(ValueError):
        sample_grid((1, -1))


def test_default_grid():
    g = sample_grid()
    assert len(g) == 41 * 41
    assert (g[:, 2].min(), g[:, 2].max(), g[:, 3].min(), g[:, 3].max()) == (-0.6, 0.6, -2.0, 2.0)


def test_fit_recovers_exact_quadratic():
    fit = fit_lyapunov(samples_from(lambda a, b: a * a + b * b))
    np.testing.assert_allclose(fit.coeffs, [1, 0, 1, 0, 0], atol=1e-8)
    assert fit(0.0, 0.0) == 0.0
    assert fit.r2 == pytest.approx(1.0)


def test_fit_needs_six_converged():
    conv = np.zeros(81, bool)
    conv[:5] = True
    with pytest.raises(FitQualityError):
        fit_lyapunov(samples_from(lambda a, b: a * a + b * b, conv))


def test_fit_rejects_indefinite():
    with pytest.raises(FitQualityError):
        fit_lyapunov(samples_from(lambda a, b: abs(a * a - b * b)))


def test_level_set_all_converged():
    samples = samples_from(lambda a, b: a * a + b * b)
    fit = fit_lyapunov(samples)
    c, _ = level_set(fit, samples)
    assert c == pytest.approx(max(fit(s.theta0, s.theta_dot0) for s in samples))


def test_level_set_below_first_failure():
    fn = lambda a, b: a * a + 0.1 * b * b  # noqa: E731
    samples = samples_from(fn)
    fit = fit_lyapunov(samples)
    vals = np.array([fit(s.theta0, s.theta_dot0) for s in samples])
    order = np.argsort(vals)
    bad = order[30]
    samples[bad] = LyapunovSample(samples[bad].theta0, samples[bad].theta_dot0, np.inf, False)
    c, _ = level_set(fit, samples)
    assert c < vals[bad]
    assert c == pytest.approx(vals[vals < vals[bad]].max())


@given(st.integers(0, 2**32 - 1))
def test_level_set_is_maximal(seed):
    rng = np.random.default_rng(seed)
    fit = LyapunovFit(np.array([1.0, 0.2, 0.3, 0.05, -0.02]), 1.0)
    th, thd = rng.uniform(-1, 1, 60), rng.uniform(-2, 2, 60)
    vals = fit(th, thd)
    conv = vals < rng.uniform(0.2, 1.5)
    conv[rng.random(60) < 0.05] = False
    conv[np.argmin(vals)] = True
    samples = [LyapunovSample(a, b, abs(float(v)) if c else np.inf, bool(c)) for a, b, v, c in zip(th, thd, vals, conv)]
    c_star, _ = level_set(fit, samples)
    assert np.all(conv[vals <= c_star])
    above = vals > c_star
    if above.any():
        # the next grid level already admits a non-converged sample
        assert not conv[above][np.argmin(vals[above])]


def test_level_set_empty():
    samples = samples_from(lambda a, b: a * a + b * b, np.zeros(81, bool))
    with pytest.raises(EmptyRoaError):
        level_set(LyapunovFit(np.array([1.0, 0, 1, 0, 0]), 1.0), samples)


@given(
    st.floats(0.1, 5), st.floats(-0.5, 0.5), st.floats(0.1, 5), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.01, 10)
)
def test_boundary_points_on_level(a, b, c, d, e, level):
    fit = LyapunovFit(np.array([a, b * 2 * np.sqrt(a * c), c, d, e]), 1.0)
    pts = ellipse_points(fit, level, 24)
    np.testing.assert_allclose(fit(pts[:, 0], pts[:, 1]), level, atol=1e-9 * max(1.0, level))


def test_interior_points_converge():
    pts = 0.5 * ellipse_points(LyapunovFit(np.array([1.0, 0.0, 0.1, 0.0, 0.0]), 1.0), 0.04, 12)
    report = verify_boundary(state_feedback, pts, PARAMS)
    assert report.fraction == 1.0


def test_verify_needs_points():
    with pytest.raises(ValueError):
        verify_boundary(state_feedback, np.zeros((0, 2)), PARAMS)


def test_estimate_roa_end_to_end(tmp_path):
    est = estimate_roa(state_feedback, PARAMS, (-0.5, 0.5), (-2, 2), (9, 9), n_boundary=8)
    est.to_csv(tmp_path / "grid.csv")
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert lines[0] == "theta0,theta_dot0,V,converged" and len(lines) == 82
    est.write_summary(tmp_path / "summary.json")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["c_star"] == est.c_star and len(summary["lyapunov"]["coeffs"]) == 5
    inside = [s for s in est.samples if est.fit(s.theta0, s.theta_dot0) <= est.c_star]
    assert inside and all(s.converged for s in inside)
    assert est.report.fraction == 1.0
