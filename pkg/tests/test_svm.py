import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.svm import SVC

from rgmdt.svm import SvmConfig, SvmError, train_svm

HARD = SvmConfig(C=1e6)


def separable(rng, n=20, gap=0.5):
    w = rng.normal(size=2)
    w /= np.linalg.norm(w)
    X = rng.uniform(-3, 3, size=(n * 3, 2))
    s = X @ w - 0.3
    keep = np.abs(s) > gap
    X, s = X[keep][:n], s[keep][:n]
    y = np.where(s > 0, 1.0, -1.0)
    if (y > 0).all() or (y < 0).all():
        y[0] = -y[0]
        X[0] = X[0] - 2 * (s[0] + 0.3 * np.sign(s[0])) * w  # reflect across the true boundary
    return X, y


def test_two_point_midpoint():
    h = train_svm([[-1.0], [1.0]], [-1, 1], HARD)
    assert h.w[0] == pytest.approx(1.0, abs=1e-6)
    assert h.p == pytest.approx(0.0, abs=1e-6)
    assert np.allclose([-1, 1] * h.decision(np.array([[-1.0], [1.0]])), 1.0, atol=1e-6)


def test_shifted_two_points():
    h = train_svm([[1.0, 0.0], [3.0, 0.0]], [-1, 1], HARD)
    # separator x = 2, margin 1 on both sides
    assert h.w == pytest.approx([1.0, 0.0], abs=1e-6)
    assert h.p == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_separable_margins_and_dual(seed):
    X, y = separable(np.random.default_rng(seed))
    h = train_svm(X, y, HARD)
    assert (y * h.decision(X)).min() >= 1 - 1e-6
    assert abs(h.alpha @ y) <= 1e-8
    assert h.alpha.min() >= 0 and h.alpha.max() <= 1e6
    assert h.hinge_loss == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_solver(seed):
    rng = np.random.default_rng(50 + seed)
    X = rng.normal(size=(30, 2))
    y = np.where(X[:, 0] + 0.5 * X[:, 1] + rng.normal(scale=0.6, size=30) > 0, 1.0, -1.0)
    h = train_svm(X, y, SvmConfig(C=1.0))
    ref = SVC(kernel="linear", C=1.0, tol=1e-10).fit(X, y)
    assert np.allclose(h.w, ref.coef_[0], atol=1e-4)
    assert h.p == pytest.approx(-ref.intercept_[0], abs=1e-3)


def test_xor_has_positive_hinge():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([-1.0, -1.0, 1.0, 1.0])
    h = train_svm(X, y, SvmConfig(C=1.0))
    assert h.hinge_loss > 0
    assert abs(h.alpha @ y) <= 1e-8
    assert h.alpha.max() <= 1.0 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 100.0))
def test_dual_feasible_on_arbitrary_labels(seed, C):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(12, 2))
    y = np.where(rng.random(12) < 0.5, -1.0, 1.0)
    y[0], y[1] = 1.0, -1.0
    h = train_svm(X, y, SvmConfig(C=C))
    assert abs(h.alpha @ y) <= 1e-8
    assert h.alpha.min() >= -1e-12 and h.alpha.max() <= C + 1e-9


def test_errors():
    with pytest.raises(SvmError):
        train_svm(np.zeros((0, 2)), [])
    with pytest.raises(SvmError):
        train_svm([[0.0], [1.0]], [1, 1])
    with pytest.raises(SvmError):
        train_svm([[0.0], [1.0]], [0, 1])
    with pytest.raises(SvmError):
        SvmConfig(C=0.0)
    with pytest.raises(SvmError):
        train_svm([[0.0], [1.0]], [-1, 1], sample_weight=[1.0])


def test_uniform_weights_reproduce_unweighted():
    X, y = separable(np.random.default_rng(3))
    a = train_svm(X, y, SvmConfig(C=5.0))
    b = train_svm(X, y, SvmConfig(C=5.0), sample_weight=np.full(len(y), 0.2))
    assert np.allclose(a.w, b.w) and a.p == pytest.approx(b.p)


def test_heavy_weight_pulls_boundary():
    # one mislabeled point: a large weight forces the separator to respect it
    X = np.array([[-2.0], [-1.0], [1.0], [2.0], [-0.5]])
    y = np.array([-1.0, -1.0, 1.0, 1.0, 1.0])
    light = train_svm(X, y, SvmConfig(C=1.0), sample_weight=[1, 1, 1, 1, 0.01])
    heavy = train_svm(X, y, SvmConfig(C=1.0), sample_weight=[1, 1, 1, 1, 100])
    assert light.decision(X[4:])[0] < 0 < heavy.decision(X[4:])[0]


def test_deterministic():
    X, y = separable(np.random.default_rng(9))
    a, b = train_svm(X, y), train_svm(X, y)
    assert a.w.tobytes() == b.w.tobytes() and a.p == b.p
