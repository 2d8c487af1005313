import numpy as np
import pytest

from keymatch3d import layers as L
from keymatch3d._validation import DomainError

import gradcheck


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((3, 4, 5))
    w = np.eye(3)[:, :, None, None]
    out, _ = L.conv2d_forward(x, w, np.zeros(3))
    np.testing.assert_array_equal(out, x)


def test_relu_example():
    np.testing.assert_array_equal(L.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    np.testing.assert_array_equal(L.relu_backward(np.ones(3), np.array([-1.0, 0.0, 2.0])), [0, 0, 1])


def test_conv_shape_errors():
    with pytest.raises(DomainError):
        L.conv2d_forward(np.zeros((2, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(3))
    with pytest.raises(DomainError):
        L.conv2d_forward(np.zeros((3, 4, 4)), np.zeros((3, 3, 3, 3)), np.zeros(2))


def test_fc_shape_error():
    with pytest.raises(DomainError):
        L.fc_forward(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))


def test_maxpool_values_and_odd_size():
    x = np.arange(16.0).reshape(1, 4, 4)
    out, _ = L.maxpool2(x)
    np.testing.assert_array_equal(out[0], [[5, 7], [13, 15]])
    with pytest.raises(DomainError):
        L.maxpool2(np.zeros((1, 3, 4)))


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 2, 2))
    out, cache = L.maxpool2(x)
    d = L.maxpool2_backward(np.ones_like(out), cache)
    np.testing.assert_array_equal(d[0], [[1, 0], [0, 0]])


def test_sigmoid_is_stable():
    s = L.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert s[1] == 0.5 and np.all(np.isfinite(s))
    assert s[0] >= 0 and s[2] <= 1


@pytest.mark.parametrize("name, err", sorted(gradcheck.primitive_errors().items()))
def test_primitive_gradients_match_finite_differences(name, err):
    assert err < 1e-5, name


def test_roi_pool_constant_map():
    feat = np.full((2, 5, 6), 3.25)
    out, _ = L.roi_pool(feat, np.array([[0.2, 0.7, 4.3, 3.9], [-3.0, -3.0, 1.0, 1.0]]), 4)
    assert out.shape == (2, 2, 4, 4)
    np.testing.assert_allclose(out, 3.25, rtol=1e-15)


def test_roi_pool_sample_on_grid_node():
    feat = np.random.default_rng(1).standard_normal((3, 5, 6))
    # a 1x1 pool samples the box center, here the node (x=3, y=2)
    out, _ = L.roi_pool(feat, np.array([[2.0, 1.0, 4.0, 3.0]]), 1)
    np.testing.assert_array_equal(out[0, :, 0, 0], feat[:, 2, 3])


def test_roi_pool_clamps_out_of_bounds_samples():
    feat = np.random.default_rng(2).standard_normal((1, 4, 4))
    out, _ = L.roi_pool(feat, np.array([[-3.0, -3.0, 0.0, 0.0]]), 1)
    assert out[0, 0, 0, 0] == feat[0, 0, 0]


def test_roi_pool_rejects_disjoint_roi():
    with pytest.raises(DomainError):
        L.roi_pool(np.zeros((1, 4, 4)), np.array([[10.0, 10.0, 12.0, 12.0]]), 2)


def test_roi_pool_backward_conserves_mass():
    rng = np.random.default_rng(3)
    feat = rng.standard_normal((2, 6, 6))
    out, cache = L.roi_pool(feat, np.array([[0.5, 0.5, 4.5, 3.5], [-2.0, 1.0, 2.0, 8.0]]), 3)
    d = L.roi_pool_backward(np.ones_like(out), cache)
    # bilinear weights sum to one at each sample
    np.testing.assert_allclose(d.sum(axis=(1, 2)), 2 * 9)
