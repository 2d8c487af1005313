"""Synthetic depth data: z-buffer rendering of triangle meshes, a parametric
sensor-noise model, network-input normalization and pose-annotated pairs.

Depth rasters are ``(height, width)`` float arrays in meters; 0 marks an
invalid pixel.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage

from . import geometry as geo
from ._validation import ConfigurationError, DomainError, check_depth_array, check_rng
from .geometry import CameraIntrinsics, RigidTransform

logger = logging.getLogger(__name__)

DEPTH_MAGIC = b"DPTH"
NEAR_PLANE = 1e-3
EDGE_GRADIENT = 0.05  # m/px, depth-discontinuity threshold for edge shadows
MAX_CONSECUTIVE_REJECTIONS = 100


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(f) < 1:
            raise DomainError("mesh needs at least one triangle")
        if not np.all(np.isfinite(v)):
            raise DomainError("mesh vertices must be finite")
        if f.min() < 0 or f.max() >= len(v):
            raise DomainError("triangle index out of range")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)

    @property
    def centroid(self) -> np.ndarray:
        used = self.vertices[np.unique(self.triangles)]
        return 0.5 * (used.min(axis=0) + used.max(axis=0))

    @property
    def bounding_radius(self) -> float:
        used = self.vertices[np.unique(self.triangles)]
        return float(np.max(np.linalg.norm(used - self.centroid, axis=1)))


@dataclass(frozen=True)
class DepthImage:
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", check_depth_array(self.data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True)
class NoiseParams:
    sigma_base: float = 0.002
    sigma_quadratic: float = 0.002
    dropout_prob: float = 0.02
    edge_shadow_width: int = 2

    def __post_init__(self):
        if min(self.sigma_base, self.sigma_quadratic, self.dropout_prob, self.edge_shadow_width) < 0:
            raise DomainError("noise parameters must be non-negative")
        if self.dropout_prob > 1:
            raise DomainError("dropout_prob must be <= 1")

    @classmethod
    def none(cls) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, 0)


@dataclass(frozen=True)
class RenderedPair:
    depth_a: DepthImage
    depth_b: DepthImage
    pose_a: RigidTransform
    pose_b: RigidTransform
    intrinsics: CameraIntrinsics

    def views(self):
        return [(self.depth_a, self.pose_a), (self.depth_b, self.pose_b)]


# --------------------------------------------------------------------------
# meshes


def box_mesh(center, size, rotation_z: float = 0.0) -> TriangleMesh:
    c = np.asarray(center, dtype=float)
    h = 0.5 * np.asarray(size, dtype=float)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float) * h
    corners = corners @ geo.axis_angle_to_matrix([0, 0, 1], rotation_z).T + c
    # outward-facing quads on the 8 corners indexed by (x, y, z) bits
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(corners, tris)


def cylinder_mesh(center, radius: float, height: float, segments: int = 12, axis: str = "z") -> TriangleMesh:
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    lo = np.column_stack([ring, np.full(segments, -height / 2)])
    hi = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([lo, hi, [[0, 0, -height / 2]], [[0, 0, height / 2]]])
    if axis == "x":
        verts = verts[:, [2, 0, 1]]
    elif axis == "y":
        verts = verts[:, [1, 2, 0]]
    verts = verts + np.asarray(center, dtype=float)
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i), (cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(verts, tris)


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += len(m.vertices)
    return TriangleMesh(np.vstack(verts), np.vstack(tris))


def toy_engine_mesh() -> TriangleMesh:
    """Asymmetric low-poly assembly of boxes and cylinders (~0.35 m radius).

    Stands in for a CAD part: flat faces, sharp creases, round bosses and
    enough asymmetry that distinct surface regions look different.
    """
    parts = [
        box_mesh([0.0, 0.0, 0.0], [0.50, 0.32, 0.14]),
        box_mesh([-0.12, 0.04, 0.12], [0.20, 0.20, 0.12], rotation_z=0.3),
        cylinder_mesh([0.14, -0.05, 0.13], 0.07, 0.14, segments=14),
        cylinder_mesh([0.14, -0.05, 0.23], 0.035, 0.08, segments=10),
        cylinder_mesh([0.0, 0.19, 0.0], 0.05, 0.30, segments=12, axis="x"),
        box_mesh([0.23, 0.10, 0.06], [0.06, 0.10, 0.08], rotation_z=-0.5),
        box_mesh([-0.27, -0.10, -0.02], [0.08, 0.08, 0.18]),
        cylinder_mesh([-0.05, -0.19, -0.03], 0.04, 0.12, segments=10, axis="y"),
    ]
    return merge_meshes(parts)


def load_obj(path) -> TriangleMesh:
    """Read vertices and (fan-triangulated) faces from a Wavefront OBJ file."""
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(np.array(verts), np.array(tris))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for t in mesh.triangles:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in t)))


def resolve_mesh(source: str) -> TriangleMesh:
    """``builtin:engine`` or a path to an OBJ file."""
    if source in ("builtin:engine", "engine"):
        return toy_engine_mesh()
    if not os.path.exists(source):
        raise FileNotFoundError(f"mesh file not found: {source}")
    return load_obj(source)


# --------------------------------------------------------------------------
# rendering


def pixel_rays(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape (H, W, 3)."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width].astype(np.float64)
    x = (u - intrinsics.cx) / intrinsics.fx
    y = (v - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def render_depth(mesh: TriangleMesh, pose: RigidTransform, intrinsics: CameraIntrinsics) -> DepthImage:
    """Z-buffer the mesh seen from ``pose`` (camera -> world).

    Triangles with a vertex closer than the near plane are skipped; cameras in
    this package always sit outside the object's bounding sphere.
    """
    if not isinstance(intrinsics, CameraIntrinsics):
        raise DomainError("render_depth needs CameraIntrinsics")
    W, H = intrinsics.width, intrinsics.height
    world_to_cam = geo.invert(pose)
    cam = geo.transform_point(world_to_cam, mesh.vertices)
    tri = cam[mesh.triangles]  # (T, 3, 3)
    zbuf = np.full((H, W), np.inf)

    in_front = np.all(tri[:, :, 2] > NEAR_PLANE, axis=1)
    tri = tri[in_front]
    if len(tri) == 0:
        return DepthImage(np.zeros((H, W)))
    uv = np.empty(tri.shape[:2] + (2,))
    uv[..., 0] = intrinsics.fx * tri[..., 0] / tri[..., 2] + intrinsics.cx
    uv[..., 1] = intrinsics.fy * tri[..., 1] / tri[..., 2] + intrinsics.cy
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    offsets = np.einsum("ij,ij->i", normals, tri[:, 0])

    umin = np.maximum(np.ceil(uv[..., 0].min(axis=1)), 0).astype(int)
    umax = np.minimum(np.floor(uv[..., 0].max(axis=1)), W - 1).astype(int)
    vmin = np.maximum(np.ceil(uv[..., 1].min(axis=1)), 0).astype(int)
    vmax = np.minimum(np.floor(uv[..., 1].max(axis=1)), H - 1).astype(int)
    area = (uv[:, 1, 0] - uv[:, 0, 0]) * (uv[:, 2, 1] - uv[:, 0, 1]) - (uv[:, 1, 1] - uv[:, 0, 1]) * (
        uv[:, 2, 0] - uv[:, 0, 0]
    )
    keep = (umin <= umax) & (vmin <= vmax) & (np.abs(area) > 1e-12)
    rx = (np.arange(W) - intrinsics.cx) / intrinsics.fx
    ry = (np.arange(H) - intrinsics.cy) / intrinsics.fy

    for k in np.flatnonzero(keep):
        p = uv[k]
        us = np.arange(umin[k], umax[k] + 1, dtype=np.float64)
        vs = np.arange(vmin[k], vmax[k] + 1, dtype=np.float64)[:, None]
        s = np.sign(area[k])
        # edge functions, all >= 0 inside (orientation-normalized)
        w0 = s * ((p[2, 0] - p[1, 0]) * (vs - p[1, 1]) - (p[2, 1] - p[1, 1]) * (us - p[1, 0]))
        w1 = s * ((p[0, 0] - p[2, 0]) * (vs - p[2, 1]) - (p[0, 1] - p[2, 1]) * (us - p[2, 0]))
        w2 = s * ((p[1, 0] - p[0, 0]) * (vs - p[0, 1]) - (p[1, 1] - p[0, 1]) * (us - p[0, 0]))
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        n = normals[k]
        denom = n[0] * rx[umin[k] : umax[k] + 1] + n[1] * ry[vmin[k] : vmax[k] + 1, None] + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z = offsets[k] / denom
        z = np.where(inside & (z > NEAR_PLANE), z, np.inf)
        block = zbuf[vmin[k] : vmax[k] + 1, umin[k] : umax[k] + 1]
        np.minimum(block, z, out=block)

    zbuf[~np.isfinite(zbuf)] = 0.0
    return DepthImage(zbuf)


# --------------------------------------------------------------------------
# noise and normalization


def depth_edges(depth: np.ndarray, threshold: float = EDGE_GRADIENT) -> np.ndarray:
    """Pixels adjacent to a jump larger than ``threshold`` meters between neighbours."""
    edges = np.zeros(depth.shape, dtype=bool)
    dx = np.abs(np.diff(depth, axis=1)) > threshold
    dy = np.abs(np.diff(depth, axis=0)) > threshold
    edges[:, :-1] |= dx
    edges[:, 1:] |= dx
    edges[:-1, :] |= dy
    edges[1:, :] |= dy
    return edges


def apply_noise(depth: DepthImage, params: NoiseParams, rng=None) -> DepthImage:
    """Gaussian depth noise with ``sigma(z) = sigma_base + sigma_quadratic * z**2``,
    random dropout, and invalidated bands along depth discontinuities."""
    rng = check_rng(rng)
    d = depth.data
    valid = d > 0
    sigma = params.sigma_base + params.sigma_quadratic * d**2
    noise = rng.standard_normal(d.shape) * sigma
    out = np.where(valid, d + noise, 0.0)
    drop = rng.random(d.shape) < params.dropout_prob
    out[drop] = 0.0
    if params.edge_shadow_width > 0:
        edges = depth_edges(d)
        if edges.any():
            shadow = ndimage.binary_dilation(edges, iterations=int(params.edge_shadow_width))
            out[shadow] = 0.0
    out[out < 0] = 0.0
    return DepthImage(out)


def normalize_depth(depth: DepthImage, d_min: float, d_max: float) -> np.ndarray:
    """Map metric depth to a (3, H, W) network input in [0, 1]; invalid -> 0."""
    if not d_max > d_min:
        raise DomainError(f"d_max must exceed d_min (got {d_min}, {d_max})")
    d = depth.data
    x = np.clip((d - d_min) / (d_max - d_min), 0.0, 1.0)
    x[d <= 0] = 0.0
    return np.broadcast_to(x, (3,) + d.shape).copy()


# --------------------------------------------------------------------------
# view and pair sampling


@dataclass(frozen=True)
class ViewSampler:
    """Cameras on a sphere around the mesh centroid, looking at it."""

    radius_range: tuple = (1.5, 2.5)  # multiples of the bounding-sphere radius
    max_roll: float = np.deg2rad(15.0)

    def sample(self, mesh: TriangleMesh, rng) -> RigidTransform:
        c, r = mesh.centroid, mesh.bounding_radius
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        dist = rng.uniform(*self.radius_range) * r
        roll = rng.uniform(-self.max_roll, self.max_roll)
        return geo.look_at(c + dist * d, c, roll=roll)


def overlap_fraction(depth_a: DepthImage, pose_a, depth_b: DepthImage, pose_b, intrinsics, tol=0.01, rel_tol=0.01):
    """Fraction of view-a valid pixels whose surface point is visible in view b."""
    va = depth_a.valid
    if not va.any():
        return 0.0
    v, u = np.nonzero(va)
    pts = geo.backproject(intrinsics, np.column_stack([u, v]), depth_a.data[v, u])
    world = geo.transform_point(pose_a, pts)
    in_b = geo.transform_point(geo.invert(pose_b), world)
    z = in_b[:, 2]
    ok = z > NEAR_PLANE
    uv = np.full((len(z), 2), -1.0)
    uv[ok] = geo.project(intrinsics, in_b[ok])
    ok &= intrinsics.contains(uv)
    ui = np.floor(uv[:, 0] + 0.5).astype(int)
    vi = np.floor(uv[:, 1] + 0.5).astype(int)
    ok_idx = np.flatnonzero(ok)
    zb = depth_b.data[vi[ok_idx], ui[ok_idx]]
    seen = (zb > 0) & (np.abs(zb - z[ok_idx]) <= tol + rel_tol * z[ok_idx])
    return float(seen.sum()) / float(len(z))


def mutual_overlap(pair: RenderedPair) -> float:
    ab = overlap_fraction(pair.depth_a, pair.pose_a, pair.depth_b, pair.pose_b, pair.intrinsics)
    ba = overlap_fraction(pair.depth_b, pair.pose_b, pair.depth_a, pair.pose_a, pair.intrinsics)
    return min(ab, ba)


def pair_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per pair so output does not depend on generation order."""
    return np.random.default_rng([int(seed), int(index)])


def generate_pair(
    mesh,
    intrinsics,
    seed: int,
    index: int,
    max_angle=np.deg2rad(20.0),
    max_translation=None,
    noise: NoiseParams | None = None,
    min_overlap=0.2,
    sampler: ViewSampler | None = None,
) -> RenderedPair:
    sampler = sampler or ViewSampler()
    if max_translation is None:
        max_translation = 0.15 * mesh.bounding_radius
    rng = pair_rng(seed, index)
    for _ in range(MAX_CONSECUTIVE_REJECTIONS):
        pose_a = sampler.sample(mesh, rng)
        pose_b = geo.compose(pose_a, geo.sample_perturbation(rng, max_angle, max_translation))
        depth_a = render_depth(mesh, pose_a, intrinsics)
        depth_b = render_depth(mesh, pose_b, intrinsics)
        pair = RenderedPair(depth_a, depth_b, pose_a, pose_b, intrinsics)
        if mutual_overlap(pair) >= min_overlap:
            if noise is not None:
                pair = RenderedPair(
                    apply_noise(depth_a, noise, rng), apply_noise(depth_b, noise, rng), pose_a, pose_b, intrinsics
                )
            return pair
    raise ConfigurationError(
        f"perturbation too large: {MAX_CONSECUTIVE_REJECTIONS} consecutive pairs below {min_overlap:.0%} overlap"
    )


def generate_pairs(mesh, intrinsics, count: int, perturb_bounds=None, noise=None, seed: int = 0, **kw) -> Iterator[RenderedPair]:
    """Yield ``count`` pose-annotated pairs; ``perturb_bounds=(angle_rad, translation_m)``."""
    if count < 1:
        raise DomainError("count must be >= 1")
    if perturb_bounds is None:
        perturb_bounds = (np.deg2rad(20.0), 0.15 * mesh.bounding_radius)
    for i in range(count):
        yield generate_pair(mesh, intrinsics, seed, i, perturb_bounds[0], perturb_bounds[1], noise, **kw)


def calibrate_depth_range(mesh, intrinsics, seed: int = 0, n_views: int = 100, sampler=None):
    """1st/99th percentile of valid depths over ``n_views`` sampled views."""
    sampler = sampler or ViewSampler()
    rng = np.random.default_rng([int(seed), 0x0CA1])
    vals = []
    for _ in range(n_views):
        d = render_depth(mesh, sampler.sample(mesh, rng), intrinsics).data
        vals.append(d[d > 0])
    vals = np.concatenate(vals)
    if vals.size == 0:
        raise ConfigurationError("calibration views contain no valid depth")
    lo, hi = np.percentile(vals, [1.0, 99.0])
    if not hi > lo:
        hi = lo + 1e-3
    return float(lo), float(hi)


def default_intrinsics(width: int = 64, height: int = 64, fov_deg: float = 60.0) -> CameraIntrinsics:
    f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


# --------------------------------------------------------------------------
# files


def write_depth(path, depth: DepthImage) -> None:
    d = np.ascontiguousarray(depth.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", depth.width, depth.height))
        fh.write(d.tobytes())


def read_depth(path) -> DepthImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DEPTH_MAGIC:
        raise DomainError(f"{path}: not a depth raster (bad magic)")
    w, h = struct.unpack_from("<II", blob, 4)
    n = w * h
    if len(blob) != 12 + 4 * n:
        raise DomainError(f"{path}: truncated depth raster")
    data = np.frombuffer(blob, dtype="<f4", offset=12, count=n).reshape(h, w)
    return DepthImage(data.astype(np.float64))


def read_kv(path) -> dict:
    """Plain ``key=value`` file; ``#`` starts a comment line."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_kv(path, items: dict) -> None:
    with open(path, "w") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


@dataclass
class Dataset:
    """A directory of depth pairs described by ``manifest.txt``."""

    root: Path
    intrinsics: CameraIntrinsics
    d_min: float
    d_max: float
    seed: int
    noise: NoiseParams | None
    entries: list = field(default_factory=list)  # (file_a, file_b, pose_a, pose_b)

    def __len__(self):
        return len(self.entries)

    def pair(self, i: int) -> RenderedPair:
        fa, fb, ga, gb = self.entries[i]
        return RenderedPair(read_depth(self.root / fa), read_depth(self.root / fb), ga, gb, self.intrinsics)

    def pairs(self):
        for i in range(len(self)):
            yield self.pair(i)

    def views(self):
        """All views in pair order: a0, b0, a1, b1, ..."""
        for p in self.pairs():
            yield from p.views()


MANIFEST = "manifest.txt"
POSES = "poses.txt"


def write_dataset(root, pairs, intrinsics, d_min, d_max, seed, noise=None, extra=None) -> Dataset:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries, poses = [], []
    for i, p in enumerate(pairs):
        fa, fb = f"pair_{i:05d}_a.dpth", f"pair_{i:05d}_b.dpth"
        write_depth(root / fa, p.depth_a)
        write_depth(root / fb, p.depth_b)
        entries.append((fa, fb, p.pose_a, p.pose_b))
        poses += [p.pose_a, p.pose_b]
    geo.write_poses(root / POSES, poses)
    kv = {
        "fx": repr(intrinsics.fx),
        "fy": repr(intrinsics.fy),
        "cx": repr(intrinsics.cx),
        "cy": repr(intrinsics.cy),
        "width": intrinsics.width,
        "height": intrinsics.height,
        "d_min": repr(float(d_min)),
        "d_max": repr(float(d_max)),
        "seed": int(seed),
        "noise": "none" if noise is None else "gaussian",
    }
    if noise is not None:
        kv.update(
            sigma_base=repr(noise.sigma_base),
            sigma_quadratic=repr(noise.sigma_quadratic),
            dropout_prob=repr(noise.dropout_prob),
            edge_shadow_width=noise.edge_shadow_width,
        )
    kv.update(extra or {})
    kv["poses"] = POSES
    kv["count"] = len(entries)
    for i, (fa, fb, _, _) in enumerate(entries):
        kv[f"pair.{i:05d}"] = f"{fa} {fb} {2 * i} {2 * i + 1}"
    write_kv(root / MANIFEST, kv)
    return Dataset(root, intrinsics, float(d_min), float(d_max), int(seed), noise, entries)


def read_dataset(path) -> Dataset:
    """Load a dataset from its directory or its manifest file."""
    path = Path(path)
    manifest = path / MANIFEST if path.is_dir() else path
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    root = manifest.parent
    kv = read_kv(manifest)
    try:
        intr = CameraIntrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]), int(kv["width"]), int(kv["height"])
        )
        poses = geo.read_poses(root / kv["poses"])
        noise = None
        if kv.get("noise", "none") != "none":
            noise = NoiseParams(
                float(kv["sigma_base"]),
                float(kv["sigma_quadratic"]),
                float(kv["dropout_prob"]),
                int(kv["edge_shadow_width"]),
            )
        entries = []
        for key in sorted(k for k in kv if k.startswith("pair.")):
            fa, fb, ia, ib = kv[key].split()
            entries.append((fa, fb, poses[int(ia)], poses[int(ib)]))
        ds = Dataset(root, intr, float(kv["d_min"]), float(kv["d_max"]), int(kv["seed"]), noise, entries)
    except KeyError as e:
        raise ConfigurationError(f"{manifest}: missing key {e.args[0]}") from None
    if "count" in kv and int(kv["count"]) != len(entries):
        raise ConfigurationError(f"{manifest}: count={kv['count']} but {len(entries)} pair entries")
    return ds
