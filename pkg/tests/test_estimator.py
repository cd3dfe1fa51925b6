import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from medvkan.data import synth_dataset
from medvkan.estimator import MedVKANSegmenter, check_images, check_masks


@pytest.fixture(scope="module")
def xy():
    samples = synth_dataset(1, 4, 32, 2)
    return np.stack([s.image for s in samples]), np.stack([s.label for s in samples])


@pytest.fixture(scope="module")
def fitted(xy):
    return MedVKANSegmenter(max_steps=3, batch_size=2, random_state=0).fit(*xy)


def test_params_and_clone():
    est = MedVKANSegmenter(max_steps=7, efconv_mode="conv5")
    params = est.get_params()
    assert params["max_steps"] == 7 and params["efconv_mode"] == "conv5"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lr=1e-3)
    assert est.lr == 1e-3


def test_fit_predict_shapes(fitted, xy):
    X, y = xy
    assert fitted.classes_.tolist() == [0, 1] and fitted.n_features_in_ == 1
    assert len(fitted.history_) == 3
    pred = fitted.predict(X)
    assert pred.shape == y.shape and set(np.unique(pred)) <= {0, 1}
    proba = fitted.predict_proba(X)
    assert proba.shape == (4, 2, 32, 32)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(proba.argmax(axis=1), pred)
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_three_dim_input_accepted(fitted, xy):
    X, _ = xy
    np.testing.assert_array_equal(fitted.predict(X[:, 0]), fitted.predict(X))


def test_reproducible(xy):
    a = MedVKANSegmenter(max_steps=2, batch_size=2, random_state=3).fit(*xy)
    b = MedVKANSegmenter(max_steps=2, batch_size=2, random_state=3).fit(*xy)
    np.testing.assert_array_equal(a.predict_proba(xy[0]), b.predict_proba(xy[0]))


def test_not_fitted(xy):
    with pytest.raises(NotFittedError):
        MedVKANSegmenter().predict(xy[0])


def test_channel_mismatch(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((1, 3, 32, 32)))


@pytest.mark.parametrize("X", [np.zeros((1, 1, 30, 32)), np.zeros((2, 2)), np.zeros((0, 1, 32, 32)),
                               np.full((1, 1, 32, 32), np.nan)])
def test_check_images_rejects(X):
    with pytest.raises(ValueError):
        check_images(X)


def test_check_masks():
    X = np.zeros((2, 1, 32, 32))
    assert check_masks(np.ones((2, 32, 32)), X).dtype == np.int64
    for bad in (np.zeros((2, 16, 16)), np.full((2, 32, 32), 0.5), -np.ones((2, 32, 32))):
        with pytest.raises(ValueError):
            check_masks(bad, X)


def test_label_exceeds_num_classes(xy):
    X, y = xy
    with pytest.raises(ValueError):
        MedVKANSegmenter(num_classes=2, max_steps=1).fit(X, y * 2)
