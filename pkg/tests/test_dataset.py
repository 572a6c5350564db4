import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pilcopid.dataset import (
    AugmentedDataset,
    EmptyDatasetError,
    augment,
    compute_errors,
    error_features,
    feature_names,
    gp_training_pairs,
)
from pilcopid.plant import PlantParams, PlantState, Trajectory, rollout

PARAMS = PlantParams()


def make_traj(states, dt=0.05, controls=None):
    states = np.asarray(states, dtype=float)
    n = len(states) - 1
    controls = np.zeros((n, 1)) if controls is None else np.asarray(controls, dtype=float).reshape(n, 1)
    return Trajectory(states, controls, dt * np.arange(n + 1), PlantParams(dt=dt))


def theta_series(values):
    s = np.zeros((len(values), 4))
    s[:, 2] = -np.asarray(values)  # e = 0 - theta
    return s


def test_constant_at_target_gives_zero_features():
    recs = compute_errors(make_traj(np.zeros((5, 4))))
    assert all(np.all(r.as_row() == 0) for r in recs)


def test_hand_telescoping_integral():
    recs = compute_errors(make_traj(theta_series([1, 1, 1]), dt=0.1), channels=(2,))
    np.testing.assert_allclose([r.i[0] for r in recs], [0.1, 0.2, 0.3], atol=1e-15)
    assert [r.d[0] for r in recs] == [0.0, 0.0, 0.0]


def test_hand_backward_difference():
    recs = compute_errors(make_traj(theta_series([0, 1, 0]), dt=0.5), channels=(2,))
    assert [r.d[0] for r in recs] == [0.0, 2.0, -2.0]


def test_out_of_range_channel():
    with pytest.raises(ValueError):
        compute_errors(make_traj(np.zeros((3, 4))), channels=(4,))
    with pytest.raises(ValueError):
        compute_errors(make_traj(np.zeros((3, 4))), channels=())


@given(arrays(float, (12, 4), elements=st.floats(-3, 3)), st.floats(0.01, 0.2))
def test_integral_telescopes_exactly(states, dt):
    f = error_features(states, PlantState(), (0, 2), dt)
    e, i = f[:, :2], f[:, 2:4]
    assert np.array_equal(i[0], dt * e[0])
    assert np.array_equal(i[1:], i[:-1] + dt * e[1:])
    assert np.all(f[0, 4:] == 0)


@given(arrays(float, (8, 4), elements=st.floats(-3, 3)), st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_proportional_columns_are_target_minus_state(states, target):
    f = error_features(states, target, (0, 2), 0.05)
    np.testing.assert_array_equal(f[:, :2], np.asarray(target)[[0, 2]] - states[:, [0, 2]])


def test_feature_order():
    assert feature_names() == ["e_x", "e_theta", "i_x", "i_theta", "d_x", "d_theta"]


def test_augment_concatenates_and_resets():
    a = rollout(lambda s: -2 * s[2], [0, 0, 0.1, 0], 7, PARAMS, seed=1)
    b = rollout(lambda s: 1.0, [0.2, 0, -0.1, 0], 4, PARAMS, seed=2)
    data = augment([a, b])
    assert len(data) == 11
    np.testing.assert_array_equal(data.error_features[7:], error_features(b.states[:4], PlantState(), (0, 2), PARAMS.dt))
    np.testing.assert_array_equal(data.controls[:, 0], np.concatenate([a.controls[:, 0], b.controls[:, 0]]))
    assert data.sources == [0] * 7 + [1] * 4


def test_single_step_trajectory_row():
    data = augment([make_traj([[0, 0, 0.2, 0], [0, 0, 0.3, 0]], controls=[1.5])])
    assert len(data) == 1
    assert np.all(data.error_features[0, 4:] == 0)
    assert data.controls[0, 0] == 1.5


def test_augment_empty_and_mixed_dt():
    with pytest.raises(EmptyDatasetError):
        augment([])
    with pytest.raises(ValueError):
        augment([make_traj(np.zeros((3, 4)), 0.05), make_traj(np.zeros((3, 4)), 0.1)])


@given(st.permutations([0, 1, 2]))
def test_augment_shuffle_is_row_permutation(order):
    trajs = [make_traj(np.random.default_rng(i).normal(size=(5 + i, 4)), controls=np.arange(4 + i)) for i in range(3)]
    base = augment(trajs)
    shuffled = augment([trajs[k] for k in order])
    blocks = np.split(base.error_features, np.cumsum([len(t) for t in trajs])[:-1])
    np.testing.assert_array_equal(shuffled.error_features, np.vstack([blocks[k] for k in order]))


def test_dataset_rejects_nonfinite():
    with pytest.raises(ValueError):
        AugmentedDataset(np.full((2, 6), np.nan), np.zeros((2, 1)))


def test_dataset_csv_round_trip(tmp_path):
    data = augment([rollout(lambda s: -2 * s[2], [0, 0, 0.1, 0], 6, PARAMS, seed=1)])
    path = tmp_path / "data.csv"
    data.to_csv(path)
    assert path.read_text().splitlines()[0] == "e_x,e_theta,i_x,i_theta,d_x,d_theta,u"
    back = AugmentedDataset.from_csv(path)
    assert np.array_equal(back.error_features, data.error_features) and np.array_equal(back.controls, data.controls)


def test_gp_pairs_constant_trajectory():
    X, Y = gp_training_pairs([make_traj(np.ones((6, 4)))])
    assert X.shape == (5, 5) and np.all(Y == 0)


def test_gp_pairs_reconstruct_trajectory():
    tr = rollout(lambda s: -4 * s[2], [0, 0, 0.1, 0], 9, PARAMS, seed=4)
    X, Y = gp_training_pairs([tr])
    assert len(X) == 9
    np.testing.assert_array_equal(X[:, 4], tr.controls[:, 0])
    recon = np.vstack([tr.states[:1], X[:, :4] + Y])
    np.testing.assert_allclose(recon, tr.states, rtol=0, atol=1e-15)


def test_gp_pairs_empty():
    with pytest.raises(EmptyDatasetError):
        gp_training_pairs([])
