import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keymatch3d._validation import DomainError
from keymatch3d.loss import LossConfig, contrastive_loss, multitask_loss, score_loss
from keymatch3d.sampling import make_pairs

import gradcheck
from oracles import central_difference, rel_error


def test_positive_identical_descriptors():
    f = np.array([[0.3, -0.2]])
    loss, g0, g1 = contrastive_loss(f, f.copy(), [1], 1.0)
    assert loss == 0.0 and not g0.any() and not g1.any()


def test_negative_at_margin():
    loss, g0, _ = contrastive_loss(np.array([[0.0, 0.0]]), np.array([[0.6, 0.8]]), [0], 1.0)
    assert abs(loss) < 1e-12 and not g0.any()


def test_negative_identical_is_half():
    f = np.array([[1.0, 2.0]])
    loss, g0, _ = contrastive_loss(f, f.copy(), [0], 1.0)
    assert abs(loss - 0.5) < 1e-12
    assert not g0.any()


def test_score_loss_without_positives():
    loss, g = score_loss([0.3, 0.9], [0, 0], 0, 1.0)
    assert abs(loss - 1.0) < 1e-12 and not g.any()


def test_score_loss_saturated_positive():
    losses = [score_loss([1 - eps], [1], 1, 1.0)[0] for eps in (1e-2, 1e-4, 1e-6, 1e-9)]
    assert np.all(np.diff(losses) < 0)
    # the clamp at 1 - 1e-7 bounds how close the limit gets
    assert abs(losses[-1] - 0.5) < 1e-7


def test_score_loss_at_inverse_e():
    loss, g = score_loss([np.exp(-1)], [1], 1, 1.0)
    assert abs(loss - 1.0) < 1e-12
    assert abs(g[0] + 1 / (2 * np.exp(-1))) < 1e-12


@pytest.mark.parametrize("s", [0.0, 1.0, -0.1, np.nan])
def test_score_outside_open_interval(s):
    with pytest.raises(DomainError):
        score_loss([s], [1], 1, 1.0)


def test_contrastive_gradients_match_fd():
    assert gradcheck.contrastive_loss_error() < 1e-6


def test_score_gradients_match_fd():
    assert gradcheck.score_loss_error() < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_contrastive_fd_on_random_batches(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(1, 21), rng.integers(1, 9)
    f0, f1 = rng.standard_normal((n, d)) * 0.4, rng.standard_normal((n, d)) * 0.4
    lab = rng.integers(0, 2, n)
    dist = np.linalg.norm(f0 - f1, axis=1)
    if np.any((lab == 0) & (np.abs(dist - 1.0) < 1e-6)):
        return  # kink band
    f = lambda: contrastive_loss(f0, f1, lab, 1.0)[0]
    _, g0, g1 = contrastive_loss(f0, f1, lab, 1.0)
    assert rel_error(g0, central_difference(f, f0)) < 1e-6
    assert rel_error(g1, central_difference(f, f1)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_contrastive_invariances(seed, k):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 12)
    f0, f1 = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    lab = rng.integers(0, 2, n)
    base = contrastive_loss(f0, f1, lab, 1.5)[0]
    assert base >= 0
    perm = rng.permutation(n)
    assert abs(contrastive_loss(f0[perm], f1[perm], lab[perm], 1.5)[0] - base) < 1e-12
    dup = contrastive_loss(np.tile(f0, (k, 1)), np.tile(f1, (k, 1)), np.tile(lab, k), 1.5)[0]
    assert abs(dup - base) < 1e-12 * max(1, base)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 5.0))
def test_score_loss_bounds_and_gamma_scaling(seed, gamma):
    rng = np.random.default_rng(seed)
    s = rng.uniform(0.01, 0.99, 8)
    l = rng.integers(0, 2, 8)
    npos = int(l.sum())
    loss, g = score_loss(s, l, npos, gamma)
    assert loss >= 1 / (1 + npos)
    _, g1 = score_loss(s, l, npos, 1.0)
    np.testing.assert_allclose(g, gamma * g1, rtol=1e-12)
    if npos:
        i = int(np.flatnonzero(l)[0])
        s2 = s.copy()
        s2[i] = min(s[i] + 0.005, 0.999)
        assert score_loss(s2, l, npos, gamma)[0] < loss


def _three_pair_batch():
    p0 = np.array([[0, 0, 0], [1, 0, 0], [0, 3, 0.0]])
    p1 = np.array([[0, 0, 0.01], [1, 0.5, 0], [0, 3, 0.001]])
    return make_pairs(p0, [True] * 3, p1, [True] * 3)


def test_multitask_total_matches_hand_sum():
    rng = np.random.default_rng(0)
    b = _three_pair_batch()
    d0, d1 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    s0, s1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    cfg = LossConfig(lambda_c=0.7, lambda_s=1.3, margin=2.0, gamma=0.5)
    out = multitask_loss(b, d0, d1, s0, s1, cfg)
    # recompute by hand
    dist = np.linalg.norm(d0[b.pairs[:, 0]] - d1[b.pairs[:, 1]], axis=1)
    pos, neg = b.pair_labels == 1, b.pair_labels == 0
    lc = np.sum(dist[pos] ** 2) / (2 * pos.sum()) + np.sum(np.maximum(0, 2.0 - dist[neg]) ** 2) / (2 * neg.sum())
    npos = pos.sum()
    ls0 = 1 / (1 + npos) - 0.5 * np.sum(b.labels0 * np.log(s0)) / (1 + npos)
    ls1 = 1 / (1 + npos) - 0.5 * np.sum(b.labels1 * np.log(s1)) / (1 + npos)
    assert abs(out.total - (0.7 * lc + 1.3 * (ls0 + ls1))) < 1e-12


def test_lambda_zero_zeroes_gradients():
    rng = np.random.default_rng(1)
    b = _three_pair_batch()
    args = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    out = multitask_loss(b, *args, LossConfig(lambda_c=0.0))
    assert not out.ddesc0.any() and not out.ddesc1.any()
    out = multitask_loss(b, *args, LossConfig(lambda_s=0.0))
    assert not out.dscore0.any() and not out.dscore1.any()
