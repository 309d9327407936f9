import numpy as np
import pytest
from sklearn.base import clone

from revspike.estimator import SpikingClassifier


def test_get_set_params_roundtrip():
    est = SpikingClassifier(hidden_layer_sizes=(7,), e_rev=2.5, epochs=3)
    params = est.get_params()
    assert params["e_rev"] == 2.5
    est2 = clone(est)
    assert est2.get_params() == params


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SpikingClassifier().predict(np.zeros((1, 4)))


def test_rejects_unscaled_features():
    est = SpikingClassifier(epochs=1)
    with pytest.raises(ValueError, match="scaled"):
        est.fit(np.array([[2.0, 0.5]]), np.array([0]))


def test_fit_predict_digits_subset(digits):
    X, y = digits
    est = SpikingClassifier(
        hidden_layer_sizes=(64,), e_rev=4.0, m_train=8, m_test=16,
        epochs=10, learning_rate=1e-3, random_state=0,
    )
    est.fit(X[:600], y[:600])
    acc = est.score(X[600:900], y[600:900])
    assert acc >= 0.6
    pred = est.predict(X[600:605])
    assert set(pred) <= set(est.classes_)
    assert est.decision_times(X[600:605]).shape == (5, 10)


def test_predictions_deterministic(digits):
    X, y = digits
    est = SpikingClassifier(hidden_layer_sizes=(8,), epochs=1, learning_rate=1e-3, random_state=3)
    est.fit(X[:100], y[:100])
    p1 = est.predict(X[100:140])
    p2 = est.predict(X[100:140])
    assert np.array_equal(p1, p2)


def test_ttfs_mode_fits(digits):
    X, y = digits
    est = SpikingClassifier(hidden_layer_sizes=(12,), mode="ttfs", e_rev=4.0,
                            epochs=1, learning_rate=1e-3, t_ref=0.7, gamma1=0.3,
                            sigma_spike=0.0, random_state=0)
    est.fit(X[:150], y[:150])
    assert est.predict(X[:10]).shape == (10,)


def test_nonuniform_labels_mapped(digits):
    X, y = digits
    keep = (y == 3) | (y == 8)
    est = SpikingClassifier(hidden_layer_sizes=(8,), epochs=2, learning_rate=1e-3)
    est.fit(X[keep][:120], y[keep][:120])
    assert set(est.classes_) == {3, 8}
    assert set(est.predict(X[keep][:20])) <= {3, 8}
