"""On-the-fly correspondence labels from depth and pose.

Keypoints of both views are lifted to world coordinates, paired one-to-one
by 3D proximity and labelled positive when the pair is closer than
``tau_pos`` meters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from ._validation import DomainError
from .depthsynth import DepthImage


@dataclass(frozen=True)
class SamplingConfig:
    tau_pos: float = 0.025
    depth_lookup: str = "nearest"

    def __post_init__(self):
        if not self.tau_pos > 0:
            raise DomainError("tau_pos must be > 0")
        if self.depth_lookup not in ("nearest", "bilinear"):
            raise DomainError(f"unknown depth_lookup {self.depth_lookup!r}")


def lookup_depth(depth: np.ndarray, xy, mode: str = "nearest") -> np.ndarray:
    """Depth at sub-pixel locations; 0 where invalid or outside the raster.

    Bilinear lookup is only valid when all four neighbours are valid, so it
    never blends foreground with background.
    """
    H, W = depth.shape
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    out = np.zeros(len(xy))
    if mode == "nearest":
        u = np.floor(xy[:, 0] + 0.5).astype(int)
        v = np.floor(xy[:, 1] + 0.5).astype(int)
        ok = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        out[ok] = depth[v[ok], u[ok]]
        return out
    u0 = np.floor(xy[:, 0]).astype(int)
    v0 = np.floor(xy[:, 1]).astype(int)
    ok = (u0 >= 0) & (u0 + 1 < W) & (v0 >= 0) & (v0 + 1 < H)
    for k in np.flatnonzero(ok):
        patch = depth[v0[k] : v0[k] + 2, u0[k] : u0[k] + 2]
        if np.all(patch > 0):
            a, b = xy[k, 0] - u0[k], xy[k, 1] - v0[k]
            out[k] = (
                patch[0, 0] * (1 - a) * (1 - b) + patch[0, 1] * a * (1 - b) + patch[1, 0] * (1 - a) * b + patch[1, 1] * a * b
            )
    return out


def lift_keypoints(xy, depth, pose, intrinsics, cfg: SamplingConfig = SamplingConfig()):
    """World points for keypoint locations; returns ``(points (n, 3), valid (n,))``.

    Invalid keypoints (no depth) get NaN coordinates.
    """
    data = depth.data if isinstance(depth, DepthImage) else np.asarray(depth, dtype=np.float64)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    z = lookup_depth(data, xy, cfg.depth_lookup)
    valid = (z > 0) & intrinsics.contains(xy)
    pts = np.full((len(xy), 3), np.nan)
    if valid.any():
        cam = geo.backproject(intrinsics, xy[valid], z[valid])
        pts[valid] = geo.transform_point(pose, cam)
    return pts, valid


@dataclass
class PairBatch:
    """Sampling-layer output.

    ``pairs`` is ``(m, 2)`` indices into the two keypoint sets, with
    ``pair_labels`` and ``pair_distances`` per pair. Keypoints left unpaired
    (invalid depth, or the other side ran out) are negatives: they carry label
    0 in ``labels0``/``labels1`` and are zipped side by side into placeholder
    negative entries, so ``n == n_pos + n_neg == max(|K0|, |K1|)`` unless no
    keypoint on either side has depth, in which case the batch is empty.
    """

    pairs: np.ndarray
    pair_labels: np.ndarray
    pair_distances: np.ndarray
    labels0: np.ndarray
    labels1: np.ndarray
    unpaired0: np.ndarray
    unpaired1: np.ndarray
    points0: np.ndarray
    points1: np.ndarray
    any_valid: bool = True

    @property
    def n_pos(self) -> int:
        return int(self.pair_labels.sum())

    @property
    def n_neg(self) -> int:
        # an all-invalid input is an empty batch, not t placeholder negatives
        placeholders = max(len(self.unpaired0), len(self.unpaired1)) if self.any_valid else 0
        return int(len(self.pair_labels) - self.n_pos + placeholders)

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg

    def check(self) -> None:
        """Raise if the batch violates injectivity or count bookkeeping."""
        i, j = self.pairs[:, 0], self.pairs[:, 1]
        if len(np.unique(i)) != len(i) or len(np.unique(j)) != len(j):
            raise AssertionError("a keypoint appears in more than one pair")
        if np.intersect1d(i, self.unpaired0).size or np.intersect1d(j, self.unpaired1).size:
            raise AssertionError("a keypoint is both paired and unpaired")
        if self.n != self.n_pos + self.n_neg:
            raise AssertionError("N != N_pos + N_neg")
        if not (np.array_equal(self.labels0[i], self.pair_labels) and np.array_equal(self.labels1[j], self.pair_labels)):
            raise AssertionError("keypoint labels disagree with pair labels")


def greedy_pairs(points0, valid0, points1, valid1):
    """One-to-one matching, repeatedly taking the globally closest unmatched
    pair (ties: lower i, then lower j). Returns ``(pairs (m, 2), distances)``."""
    i_idx = np.flatnonzero(valid0)
    j_idx = np.flatnonzero(valid1)
    if len(i_idx) == 0 or len(j_idx) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    diff = points0[i_idx][:, None, :] - points1[j_idx][None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    ii, jj = np.meshgrid(i_idx, j_idx, indexing="ij")
    flat_d, flat_i, flat_j = dist.ravel(), ii.ravel(), jj.ravel()
    order = np.lexsort((flat_j, flat_i, flat_d))
    used0, used1 = set(), set()
    pairs, dists = [], []
    target = min(len(i_idx), len(j_idx))
    for k in order:
        a, b = flat_i[k], flat_j[k]
        if a in used0 or b in used1:
            continue
        used0.add(a)
        used1.add(b)
        pairs.append((a, b))
        dists.append(flat_d[k])
        if len(pairs) == target:
            break
    return np.array(pairs, dtype=np.int64).reshape(-1, 2), np.array(dists)


def make_pairs(points0, valid0, points1, valid1, cfg: SamplingConfig = SamplingConfig()) -> PairBatch:
    points0, points1 = np.asarray(points0, dtype=float), np.asarray(points1, dtype=float)
    valid0, valid1 = np.asarray(valid0, dtype=bool), np.asarray(valid1, dtype=bool)
    pairs, dists = greedy_pairs(points0, valid0, points1, valid1)
    labels = (dists < cfg.tau_pos).astype(np.int64)
    l0 = np.zeros(len(points0), dtype=np.int64)
    l1 = np.zeros(len(points1), dtype=np.int64)
    l0[pairs[:, 0]] = labels
    l1[pairs[:, 1]] = labels
    return PairBatch(
        pairs=pairs,
        pair_labels=labels,
        pair_distances=dists,
        labels0=l0,
        labels1=l1,
        unpaired0=np.setdiff1d(np.arange(len(points0)), pairs[:, 0]),
        unpaired1=np.setdiff1d(np.arange(len(points1)), pairs[:, 1]),
        points0=points0,
        points1=points1,
        any_valid=bool(valid0.any() or valid1.any()),
    )


def run_sampling_layer(xy0, xy1, depth0, depth1, pose0, pose1, intrinsics, cfg: SamplingConfig = SamplingConfig()) -> PairBatch:
    """Lift both keypoint sets to world space and pair them."""
    p0, v0 = lift_keypoints(xy0, depth0, pose0, intrinsics, cfg)
    p1, v1 = lift_keypoints(xy1, depth1, pose1, intrinsics, cfg)
    return make_pairs(p0, v0, p1, v1, cfg)
