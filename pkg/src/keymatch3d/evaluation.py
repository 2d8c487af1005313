"""Repository-based keypoint matching evaluation.

Descriptors from repository views are stored with their world coordinates.
Each query descriptor from a test view retrieves its exact Euclidean nearest
neighbour (no ratio test, no distance cutoff) and counts as a true match when
the two world points are closer than ``tau_eval`` meters.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from . import net
from .depthsynth import DepthImage, normalize_depth
from ._validation import DomainError
from .sampling import SamplingConfig, lift_keypoints

REPO_MAGIC = b"KMRP"
RESULTS_HEADER = ("view_id", "queries", "true_matches", "accuracy")


# --------------------------------------------------------------------------
# keypoint extractors: depth image -> (xy, descriptors)


class NetworkExtractor:
    """Keypoints and descriptors from a trained model.

    In ``random`` mode the cell draw for view ``view_id`` comes from its own
    stream seeded by ``(seed, view_id)``, so results do not depend on the
    order views are processed in.
    """

    def __init__(self, params: net.ModelParams, d_min, d_max, t=None, mode="top-score", seed=0):
        self.params = params
        self.d_min, self.d_max = float(d_min), float(d_max)
        self.t = params.config.t if t is None else int(t)
        self.mode = mode
        self.seed = seed

    @property
    def dim(self):
        return self.params.config.descriptor_dim

    def __call__(self, depth: DepthImage, view_id: int = 0):
        x = normalize_depth(depth, self.d_min, self.d_max)
        rng = np.random.default_rng([int(self.seed), int(view_id)]) if self.mode == "random" else None
        kps = net.extract_keypoints(self.params, x, self.t, mode=self.mode, rng=rng)
        return kps.xy, np.asarray(kps.descriptors, dtype=np.float64)


def random_valid_pixels(depth: DepthImage, t: int, rng) -> np.ndarray:
    """Up to ``t`` distinct valid-depth pixels drawn uniformly, as (u, v)."""
    v, u = np.nonzero(depth.valid)
    k = min(t, len(u))
    sel = np.sort(rng.choice(len(u), size=k, replace=False)) if k else np.zeros(0, dtype=int)
    return np.column_stack([u[sel], v[sel]]).astype(np.float64)


def raw_patch_descriptor(depth: DepthImage, xy, box_size: int = 32) -> np.ndarray:
    """Flattened ``box_size`` x ``box_size`` depth patches relative to the
    center depth; invalid or out-of-image pixels read 0."""
    d = depth.data
    H, W = d.shape
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    half = box_size // 2
    offs = np.arange(box_size) - half
    out = np.zeros((len(xy), box_size * box_size))
    for k, (u, v) in enumerate(np.floor(xy + 0.5).astype(int)):
        center = d[v, u]
        rows, cols = v + offs, u + offs
        patch = np.zeros((box_size, box_size))
        rin = (rows >= 0) & (rows < H)
        cin = (cols >= 0) & (cols < W)
        sub = d[np.ix_(rows[rin], cols[cin])]
        rel = np.where(sub > 0, sub - center, 0.0)
        patch[np.ix_(rin, cin)] = rel
        out[k] = patch.ravel()
    return out


class RandomPatchExtractor:
    """Floor baseline: random valid pixels described by raw depth patches."""

    def __init__(self, t: int = 16, box_size: int = 32, seed=0):
        self.t, self.box_size, self.seed = int(t), int(box_size), seed

    @property
    def dim(self):
        return self.box_size * self.box_size

    def __call__(self, depth: DepthImage, view_id: int = 0):
        rng = np.random.default_rng([int(self.seed), int(view_id)])
        xy = random_valid_pixels(depth, self.t, rng)
        return xy, raw_patch_descriptor(depth, xy, self.box_size)


# --------------------------------------------------------------------------
# repository


@dataclass
class Repository:
    """Descriptors with world coordinates; stored in float32 like the file format."""

    descriptors: np.ndarray
    points: np.ndarray
    view_ids: np.ndarray = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(len(self.points), -1)
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        if self.view_ids is None:
            self.view_ids = np.full(len(self.points), -1, dtype=np.int64)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int64)

    def __len__(self):
        return len(self.points)

    @property
    def dim(self):
        return self.descriptors.shape[1]


def build_repository(extractor, views, intrinsics, cfg: SamplingConfig = SamplingConfig()) -> Repository:
    """Run ``extractor`` on every ``(depth, pose)`` view and keep keypoints
    with valid depth, tagged with their world coordinates."""
    views = list(views)
    if not views:
        raise DomainError("repository needs at least one view")
    descs, pts, ids = [], [], []
    for vid, (depth, pose) in enumerate(views):
        xy, f = extractor(depth, vid)
        if f.ndim != 2 or (len(f) and f.shape[1] != extractor.dim):
            raise DomainError(f"descriptor dimension mismatch: {f.shape} vs {extractor.dim}")
        p, valid = lift_keypoints(xy, depth, pose, intrinsics, cfg)
        descs.append(f[valid])
        pts.append(p[valid])
        ids.append(np.full(int(valid.sum()), vid))
    return Repository(np.concatenate(descs).reshape(-1, extractor.dim), np.concatenate(pts), np.concatenate(ids))


def write_repository(path, repo: Repository) -> None:
    with open(path, "wb") as fh:
        fh.write(REPO_MAGIC)
        fh.write(struct.pack("<II", repo.dim, len(repo)))
        rows = np.hstack([repo.descriptors, repo.points]).astype("<f4")
        fh.write(rows.tobytes())


def read_repository(path) -> Repository:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != REPO_MAGIC:
        raise DomainError(f"{path}: not a repository file (bad magic)")
    d, n = struct.unpack_from("<II", blob, 4)
    if len(blob) != 12 + 4 * n * (d + 3):
        raise DomainError(f"{path}: truncated repository")
    rows = np.frombuffer(blob, dtype="<f4", offset=12, count=n * (d + 3)).reshape(n, d + 3)
    return Repository(rows[:, :d].astype(np.float32), rows[:, d:].astype(np.float32))


# --------------------------------------------------------------------------
# matching


def nearest_neighbors(queries, database, chunk: int = 64):
    """Exact Euclidean nearest neighbour of each query row.

    Distances use explicit differences in float64 (no ``|a|^2 + |b|^2 - 2ab``
    expansion) and ties go to the lower database index.
    Returns ``(indices, distances)``.
    """
    q = np.asarray(queries, dtype=np.float64)
    db = np.asarray(database, dtype=np.float64)
    if len(db) == 0:
        raise DomainError("empty repository")
    if q.ndim != 2 or db.ndim != 2 or q.shape[1] != db.shape[1]:
        raise DomainError(f"descriptor dimension mismatch: {q.shape} vs {db.shape}")
    idx = np.empty(len(q), dtype=np.int64)
    dist = np.empty(len(q))
    for s in range(0, len(q), chunk):
        diff = q[s : s + chunk, None, :] - db[None, :, :]
        d2 = np.einsum("qnd,qnd->qn", diff, diff)
        best = np.argmin(d2, axis=1)
        idx[s : s + chunk] = best
        dist[s : s + chunk] = np.sqrt(d2[np.arange(len(best)), best])
    return idx, dist


@dataclass
class MatchResult:
    repo_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    descriptor_distance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    distance_3d: np.ndarray = field(default_factory=lambda: np.zeros(0))
    is_true: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    query_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def queries(self) -> int:
        return len(self.is_true)

    @property
    def true_matches(self) -> int:
        return int(self.is_true.sum())

    @property
    def accuracy(self) -> float:
        return self.true_matches / self.queries if self.queries else 0.0

    @classmethod
    def concatenate(cls, results) -> "MatchResult":
        results = list(results)
        if not results:
            return cls()
        return cls(*(np.concatenate([getattr(r, f) for r in results]) for f in
                     ("repo_index", "descriptor_distance", "distance_3d", "is_true", "query_xy")))


def match_descriptors(xy, desc, points, valid, repo: Repository, tau_eval: float) -> MatchResult:
    """Nearest-neighbour match for every query descriptor.

    A query whose keypoint has no valid depth still retrieves a neighbour but
    has no 3D location to verify, so it counts as a false match with
    ``distance_3d = inf``.
    """
    if len(desc) == 0:
        return MatchResult()
    idx, ddist = nearest_neighbors(desc, repo.descriptors)
    d3 = np.full(len(desc), np.inf)
    d3[valid] = np.linalg.norm(points[valid] - repo.points[idx[valid]].astype(np.float64), axis=1)
    return MatchResult(idx, ddist, d3, d3 < tau_eval, np.asarray(xy, dtype=np.float64))


def match_view(extractor, view, intrinsics, repo: Repository, tau_eval: float = 0.05, view_id: int = 0,
               cfg: SamplingConfig = SamplingConfig()) -> MatchResult:
    """Match every keypoint of ``view = (depth, pose)`` against ``repo``."""
    if len(repo) == 0:
        raise DomainError("empty repository")
    depth, pose = view
    xy, desc = extractor(depth, view_id)
    pts, valid = lift_keypoints(xy, depth, pose, intrinsics, cfg)
    return match_descriptors(xy, desc, pts, valid, repo, tau_eval)


def evaluate(extractor, views, intrinsics, repo: Repository, tau_eval: float = 0.05, csv_path=None):
    """Match all test views; returns ``(aggregate, per_view)`` and optionally
    writes ``view_id,queries,true_matches,accuracy`` rows."""
    views = list(views)
    if not views:
        raise DomainError("no test views")
    per_view = [match_view(extractor, v, intrinsics, repo, tau_eval, view_id=i) for i, v in enumerate(views)]
    agg = MatchResult.concatenate(per_view)
    if csv_path is not None:
        write_results_csv(csv_path, per_view)
    return agg, per_view


def write_results_csv(path, per_view) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for i, r in enumerate(per_view):
            w.writerow([i, r.queries, r.true_matches, repr(r.accuracy)])
        total = MatchResult.concatenate(per_view)
        w.writerow(["all", total.queries, total.true_matches, repr(total.accuracy)])


# --------------------------------------------------------------------------
# visualization

_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
     [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 190]],
    dtype=np.uint8,
)


def depth_to_gray(depth: DepthImage) -> np.ndarray:
    """8-bit rendering: near surfaces bright, invalid pixels black."""
    d = depth.data
    out = np.zeros(d.shape, dtype=np.uint8)
    v = d > 0
    if v.any():
        lo, hi = d[v].min(), d[v].max()
        span = hi - lo if hi > lo else 1.0
        out[v] = np.round(255 - 200 * (d[v] - lo) / span).astype(np.uint8)
    return out


def line_pixels(p0, p1) -> np.ndarray:
    """Integer pixels on the segment from ``p0`` to ``p1`` (endpoints included)."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    n = int(np.ceil(np.max(np.abs(p1 - p0)))) + 1
    s = np.linspace(0.0, 1.0, max(n, 2))
    pts = np.floor(p0 + (p1 - p0) * s[:, None] + 0.5).astype(int)
    return np.unique(pts, axis=0)


def render_matches(view_a: DepthImage, view_b: DepthImage, matches, path=None) -> np.ndarray:
    """Side-by-side grayscale depth images with one colored line per match.

    ``matches`` is a sequence of ``((u_a, v_a), (u_b, v_b))`` pixel pairs.
    Returns the ``(H, W, 3)`` image and writes a binary PPM if ``path`` is set.
    """
    ga, gb = depth_to_gray(view_a), depth_to_gray(view_b)
    H = max(ga.shape[0], gb.shape[0])
    W = ga.shape[1] + gb.shape[1]
    img = np.zeros((H, W, 3), dtype=np.uint8)
    img[: ga.shape[0], : ga.shape[1]] = ga[..., None]
    img[: gb.shape[0], ga.shape[1] :] = gb[..., None]
    for k, (pa, pb) in enumerate(matches):
        pb = (pb[0] + ga.shape[1], pb[1])
        pix = line_pixels(pa, pb)
        ok = (pix[:, 0] >= 0) & (pix[:, 0] < W) & (pix[:, 1] >= 0) & (pix[:, 1] < H)
        pix = pix[ok]
        img[pix[:, 1], pix[:, 0]] = _PALETTE[k % len(_PALETTE)]
    if path is not None:
        write_ppm(path, img)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P6":
        raise DomainError(f"{path}: not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
