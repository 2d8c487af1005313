import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from keymatch3d import KeypointDetectorDescriptor, RepositoryMatcher
from keymatch3d import depthsynth as ds
from keymatch3d._validation import DomainError

K = ds.default_intrinsics()


@pytest.fixture(scope="module")
def pairs():
    return list(ds.generate_pairs(ds.toy_engine_mesh(), K, 4, seed=0))


@pytest.fixture(scope="module")
def fitted(pairs):
    return KeypointDetectorDescriptor(iterations=5, t=8, seed=1).fit(pairs)


def test_params_round_trip_through_clone():
    est = KeypointDetectorDescriptor(learning_rate=1e-4, t=5)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(gamma=2.0).gamma == 2.0


def test_transform_before_fit():
    with pytest.raises(NotFittedError):
        KeypointDetectorDescriptor().transform([np.ones((64, 64))])


def test_fit_transform_shapes(fitted, pairs):
    out = fitted.transform([pairs[0].depth_a, pairs[0].depth_b.data])
    assert len(out) == 2
    xy, desc = out[0]
    assert xy.shape == (8, 2) and desc.shape == (8, 128)
    assert len(fitted.log_.records) == 5 and fitted.d_min_ < fitted.d_max_


def test_fit_is_deterministic(pairs, fitted):
    again = KeypointDetectorDescriptor(iterations=5, t=8, seed=1).fit(pairs)
    assert again.params_.equals(fitted.params_)


def test_fit_rejects_bad_input():
    with pytest.raises(DomainError):
        KeypointDetectorDescriptor(iterations=1).fit([np.zeros((4, 4))])
    with pytest.raises(DomainError):
        KeypointDetectorDescriptor(iterations=-1).fit([])


def test_matcher_predict_and_score(fitted, pairs):
    views = [v for p in pairs for v in p.views()]
    m = RepositoryMatcher(fitted, K).fit(views[:4])
    results = m.predict(views[4:])
    assert len(results) == 4
    acc = m.score(views[4:])
    assert 0.0 <= acc <= 1.0
    assert acc == sum(r.true_matches for r in results) / sum(r.queries for r in results)
    assert m.score(views[:4]) >= acc  # the repository views match themselves best


def test_matcher_requires_fit_and_views(fitted):
    with pytest.raises(NotFittedError):
        RepositoryMatcher(fitted, K).predict([])
    with pytest.raises(DomainError):
        RepositoryMatcher(fitted, K).fit([])
