import numpy as np
import pytest

from keymatch3d import net
from keymatch3d._validation import DomainError
from keymatch3d.loss import LossConfig

import gradcheck

SMALL = net.NetConfig(channels=(4, 4, 6, 6), descriptor_dim=5, box_size=8, pool_size=2, t=3, nms_radius=0)


def test_all_zero_params_give_half_scores():
    p = net.init_params(SMALL, seed=0).zeros_like()
    _, score, _ = net.forward(p, np.random.default_rng(0).uniform(size=(3, 16, 12)))
    assert score.shape == (4, 3)
    assert np.all(score == 0.5)


def test_forward_shapes_and_range():
    p = net.init_params(net.NetConfig(), seed=1)
    feat, score, _ = net.forward(p, np.random.default_rng(1).uniform(size=(3, 64, 64)))
    assert feat.shape == (64, 16, 16) and score.shape == (16, 16)
    assert np.all((score > 0) & (score < 1))


def test_forward_rejects_indivisible_input():
    p = net.init_params(SMALL, seed=0)
    with pytest.raises(DomainError):
        net.forward(p, np.zeros((3, 10, 12)))


def test_forward_is_pure():
    p = net.init_params(SMALL, seed=2)
    x = np.random.default_rng(2).uniform(size=(3, 16, 16))
    a, b = net.forward(p, x), net.forward(p, x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_jacobian_vector_product():
    rng = np.random.default_rng(3)
    p = net.init_params(SMALL, seed=rng, dtype=np.float64)
    x = rng.uniform(size=(3, 8, 8))
    R = rng.standard_normal((6, 2, 2))
    feat, _, state = net.forward(p, x)
    grads = net.backbone_backward(p, state, R)
    v = rng.standard_normal(p["conv2_w"].shape)
    analytic = float(np.sum(grads["conv2_w"] * v))
    base = p["conv2_w"].copy()

    def f(step):
        p["conv2_w"] = base + step * v
        return float(np.sum(net.forward(p, x)[0] * R))

    numeric = (f(1e-5) - f(-1e-5)) / 2e-5
    assert abs(analytic - numeric) / abs(numeric) < 1e-5


def test_select_top_two():
    s = np.array([[0.1, 0.9], [0.8, 0.2]])
    cells, truncated = net.select_cells(s, 2)
    assert cells.tolist() == [1, 2] and not truncated


def test_nms_keeps_only_higher_adjacent_cell():
    s = np.array([[0.9, 0.8, 0.1, 0.05]])
    cells, _ = net.select_cells(s, 2, nms_radius=4.0, stride=4)
    assert cells.tolist() == [0, 2]


def test_nms_truncates_with_flag():
    cells, truncated = net.select_cells(np.array([[0.9, 0.8]]), 2, nms_radius=10.0)
    assert cells.tolist() == [0] and truncated


def test_select_rejects_bad_t():
    with pytest.raises(DomainError):
        net.select_cells(np.zeros((2, 2)), 5)
    with pytest.raises(DomainError):
        net.select_cells(np.zeros((2, 2)), 0)


def test_random_mode_is_seeded():
    s = np.random.default_rng(0).uniform(size=(8, 8))
    a, _ = net.select_cells(s, 5, "random", rng=3)
    b, _ = net.select_cells(s, 5, "random", rng=3)
    assert np.array_equal(a, b) and len(set(a)) == 5


def test_keypoint_set_contract():
    p = net.init_params(net.NetConfig(), seed=4)
    x = np.random.default_rng(4).uniform(size=(3, 64, 64))
    k = net.extract_keypoints(p, x)
    assert len(k) == 16 and k.descriptors.shape == (16, 128)
    assert np.all(np.diff(k.scores) <= 0)
    d = np.hypot(*(k.xy[:, None] - k.xy[None]).transpose(2, 0, 1))
    assert np.all(d[~np.eye(16, dtype=bool)] > 4.0)
    np.testing.assert_array_equal(k.rois[:, 2:] - k.rois[:, :2], 32.0)
    assert np.all((k.xy >= 0) & (k.xy < 64))


def _small_keypoints(seed=5):
    p = net.init_params(SMALL, seed=seed)
    x = np.random.default_rng(seed).uniform(size=(3, 16, 16)).astype(np.float32)
    return p, net.extract_keypoints(p, x)


def test_zero_upstream_gives_zero_gradients():
    p, k = _small_keypoints()
    g = net.backward_from_keypoints(p, k, np.zeros((3, 5)), np.zeros(3))
    assert all(not np.any(g[n]) for n in net.PARAM_NAMES)


def test_score_only_gradient_leaves_descriptor_head_zero():
    p, k = _small_keypoints()
    g = net.backward_from_keypoints(p, k, np.zeros((3, 5)), np.ones(3))
    assert not np.any(g["fc_w"]) and not np.any(g["fc_b"])
    assert np.any(g["score_w"])


def test_descriptor_only_gradient_leaves_score_head_zero():
    p, k = _small_keypoints()
    g = net.backward_from_keypoints(p, k, np.ones((3, 5)), np.zeros(3))
    assert not np.any(g["score_w"]) and not np.any(g["score_b"])


def test_lambda_zero_routing_in_full_chain():
    params, _, grad_fn = gradcheck.tiny_problem(0, LossConfig(lambda_c=0.0))
    g = grad_fn()
    assert not np.any(g["fc_w"]) and not np.any(g["fc_b"])
    params, _, grad_fn = gradcheck.tiny_problem(0, LossConfig(lambda_s=0.0))
    g = grad_fn()
    assert not np.any(g["score_w"]) and not np.any(g["score_b"])


def test_keypoint_coordinates_are_constants():
    # the backward pass reads only cached forward values, so coordinates and
    # boxes are constants: editing them cannot change any gradient
    p, k = _small_keypoints()
    dd, ds = np.ones((3, 5)), np.ones(3)
    before = net.backward_from_keypoints(p, k, dd, ds)
    k.xy = k.xy + 100.0
    k.rois = k.rois * 0.0
    after = net.backward_from_keypoints(p, k, dd, ds)
    assert before.equals(after)
    assert set(before.tensors) == set(net.PARAM_NAMES)


def test_misaligned_gradients_rejected():
    p, k = _small_keypoints()
    with pytest.raises(DomainError):
        net.backward_from_keypoints(p, k, np.zeros((2, 5)), np.zeros(3))


@pytest.mark.parametrize("name, err", sorted(gradcheck.full_chain_errors().items()))
def test_full_chain_gradient(name, err):
    assert err < 1e-4, name


def test_full_chain_directional_derivative():
    assert gradcheck.full_chain_directional_error() < 1e-4


def test_checkpoint_round_trip(tmp_path):
    p = net.init_params(net.NetConfig(), seed=6)
    extra = [np.arange(6, dtype=np.float32).reshape(2, 3)]
    path = tmp_path / "a.kmnp"
    net.write_checkpoint(path, p, extra, {"note": "x"})
    q, ex, echo = net.read_checkpoint(path)
    assert q.equals(p) and q.config == p.config
    np.testing.assert_array_equal(ex[0], extra[0])
    assert echo["note"] == "x"
    net.write_checkpoint(tmp_path / "b.kmnp", q, ex, {"note": "x"})
    assert (tmp_path / "b.kmnp").read_bytes() == path.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(DomainError):
        net.read_checkpoint(tmp_path / "x")
