import numpy as np
import pytest
from sklearn.base import clone

from usdc.data import make_shapes10
from usdc.estimator import USDCClassifier

FAST = dict(layers=2, heads=2, embed_dim=16, ffn_hidden=16, epochs_pretrain=1, epochs_stage1=1, epochs_stage2=1,
            batch_size=32, lr=1e-3)


@pytest.fixture(scope="module")
def shapes():
    return make_shapes10(96, seed=5)


@pytest.fixture(scope="module")
def fitted(shapes):
    x, y = shapes
    names = np.array(list("abcdefghij"))[y]
    return USDCClassifier(**FAST).fit(x, names)


def test_params_roundtrip():
    est = USDCClassifier(**FAST)
    assert est.get_params()["epochs_stage1"] == 1
    est.set_params(f_t=0.5)
    assert clone(est).get_params() == est.get_params()


def test_predict_shapes_and_labels(fitted, shapes):
    x, _ = shapes
    pred = fitted.predict(x)
    assert pred.shape == (96,) and set(pred) <= set("abcdefghij")
    proba = fitted.predict_proba(x)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-5)
    assert (fitted.classes_[proba.argmax(axis=1)] == pred).all()
    assert 0.0 <= fitted.score(x, np.array(list("abcdefghij"))[shapes[1]]) <= 1.0
    assert fitted.n_features_in_ == 256 and fitted.image_shape_ == (1, 16, 16)
    assert "params_before" in fitted.summary_ and "accuracy" not in fitted.summary_  # fit has no held-out split


def test_flat_input_matches_image_input(fitted, shapes):
    x, _ = shapes
    np.testing.assert_array_equal(fitted.decision_function(x.reshape(96, -1)), fitted.decision_function(x))


def test_input_validation(fitted, shapes):
    x, y = shapes
    with pytest.raises(ValueError):
        USDCClassifier(**FAST).fit(x.reshape(96, -1)[:, :250], y)
    with pytest.raises(ValueError):
        USDCClassifier(**FAST).fit(x, np.zeros(96))
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((2, 1, 8, 8)))
    with pytest.raises(ValueError):
        USDCClassifier(**FAST).fit(x, y[:10])


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        USDCClassifier().predict(np.zeros((1, 1, 16, 16)))
