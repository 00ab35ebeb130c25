import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynbn import detector as det


def test_parameter_count_and_init():
    m = det.init_detector(544, 12, seed=3)
    expected = 544 * 1024 + 1024 + 1024 * 512 + 512 + 512 * 12 + 12
    assert m.n_parameters() == expected == 1_089_036
    assert all(np.all(m.params[f"b{i}"] == 0) for i in (1, 2, 3))
    m2 = det.init_detector(544, 12, seed=3)
    assert all(m.params[k].tobytes() == m2.params[k].tobytes() for k in m.params)
    lim = np.sqrt(6 / (544 + 1024))
    assert np.abs(m.params["w1"]).max() <= lim
    with pytest.raises(ValueError):
        det.init_detector(0, 12, 0)


def test_schedule_arithmetic():
    s = det.TrainSchedule()
    assert s.lr_at(0) == 0.01 and s.lr_at(19) == 0.01
    assert np.isclose(s.lr_at(20), 0.001)
    assert np.isclose(s.lr_at(35), 0.0001) and np.isclose(s.lr_at(49), 0.01 / 100)


def _toy(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, 6)).astype(np.float32)
    x[:, 0] += np.where(y == 1, 3.0, -3.0)
    return x, y


def test_separable_toy_reaches_full_train_accuracy():
    x, y = _toy()
    m = det.init_detector(6, 2, seed=1)
    m, hist = det.train_detector(m, x, y, det.TrainSchedule(epochs=15, drop_epochs=(10,), batch_size=32))
    assert hist[-1][3] == 1.0
    assert hist[-1][2] < hist[0][2]
    acc, cm = det.evaluate(m, x, y)
    assert acc == 1.0 and np.all(cm == np.diag(np.diag(cm)))


def test_training_is_deterministic_and_logs():
    x, y = _toy()
    lines = []
    runs = []
    for _ in range(2):
        m = det.init_detector(6, 2, seed=1)
        det.train_detector(m, x, y, det.TrainSchedule(epochs=3, seed=5), log=lines.append)
        runs.append(m)
    assert all(runs[0].params[k].tobytes() == runs[1].params[k].tobytes() for k in runs[0].params)
    assert lines[0].startswith("0, 0.01, ") and len(lines) == 6


def test_training_input_errors():
    m = det.init_detector(6, 2, seed=1)
    x, y = _toy(10)
    with pytest.raises(ValueError):
        det.train_detector(m, x, y + 5)
    with pytest.raises(det.nx.ShapeError):
        det.train_detector(m, x[:, :5], y)
    with pytest.raises(det.nx.ShapeError):
        det.predict(m, np.zeros(7, np.float32))


def test_backprop_matches_finite_differences():
    from oracles import numeric_grad, rel_error

    rng = np.random.default_rng(2)
    m = det.init_detector(5, 3, seed=0, hidden=(7, 6))
    m.params = {k: v.astype(np.float64) + (0.1 * rng.standard_normal(v.shape) if k.startswith("b") else 0)
                for k, v in m.params.items()}
    x = rng.standard_normal((4, 5))
    y = np.array([0, 2, 1, 2])
    _, _, grads = m.loss_and_grads(x, y)
    for k in m.params:
        num = numeric_grad(lambda: m.loss_and_grads(x, y)[0], m.params[k])
        assert rel_error(grads[k], num) < 1e-3, k


def test_predict_probabilities_and_ties():
    m = det.init_detector(4, 3, seed=0)
    for k in m.params:
        m.params[k][...] = 0
    label, probs = det.predict(m, np.ones(4, np.float32))
    assert label == 0 and np.allclose(probs, 1 / 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_probability_vectors_sum_to_one(seed):
    m = det.init_detector(8, 5, seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal((6, 8)).astype(np.float32) * 10
    _, probs = det.predict(m, x)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-5)


def test_confusion_matrix_rows_and_permutation_invariance():
    rng = np.random.default_rng(4)
    m = det.init_detector(8, 4, seed=1)
    x = rng.standard_normal((50, 8)).astype(np.float32)
    y = rng.integers(0, 4, 50)
    acc, cm = det.evaluate(m, x, y)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(y, minlength=4))
    perm = rng.permutation(50)
    acc2, cm2 = det.evaluate(m, x[perm], y[perm])
    assert acc == acc2 and np.array_equal(cm, cm2)
    perfect = det.confusion_matrix(y, y, 4)
    assert np.array_equal(perfect, np.diag(np.bincount(y, minlength=4)))


def test_family_confinement():
    cm = np.zeros((5, 5), int)
    cm[1, 2] = 3   # within family {1, 2, 3}
    cm[2, 4] = 1   # leaves the family
    cm[3, 3] = 10
    assert det.family_confinement(cm, [1, 2, 3]) == 0.75
    assert det.family_confinement(np.eye(5, dtype=int), [1, 2]) == 1.0


def test_persistence(tmp_path):
    m = det.init_detector(10, 3, seed=9)
    det.save_detector(tmp_path / "d.bnad", m)
    back = det.load_detector(tmp_path / "d.bnad")
    assert all(back.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
