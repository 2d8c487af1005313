"""Pinhole camera model and rigid-body transforms.

Conventions used throughout the package:

* A ``RigidTransform`` attached to a view maps camera-frame coordinates to
  world-frame coordinates (camera -> world).
* Pixel centers sit at integer coordinates, origin at the top-left corner,
  ``u`` grows to the right and ``v`` grows downward.
* The camera looks along +z; +x is image-right and +y is image-down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import DomainError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.fx) and np.isfinite(self.fy) and self.fx > 0 and self.fy > 0):
            raise DomainError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise DomainError(f"image size must be >= 1, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, uv) -> np.ndarray:
        """True where pixel coordinates fall inside the raster (pixel-center extents)."""
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= -0.5) & (u < self.width - 0.5) & (v >= -0.5) & (v < self.height - 0.5)


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): ``p -> rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise DomainError("rigid transform has non-finite entries")
        if np.max(np.abs(R @ R.T - np.eye(3))) > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        """Build from a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))


def project(intrinsics: CameraIntrinsics, p) -> np.ndarray:
    """Project camera-frame points ``(..., 3)`` to pixel coordinates ``(..., 2)``."""
    p = np.asarray(p, dtype=float)
    z = p[..., 2]
    if np.any(~(z > 0)):
        raise DomainError("cannot project a point with non-positive depth")
    u = intrinsics.fx * (p[..., 0] / z) + intrinsics.cx
    v = intrinsics.fy * (p[..., 1] / z) + intrinsics.cy
    return np.stack([u, v], axis=-1)


def backproject(intrinsics: CameraIntrinsics, uv, depth) -> np.ndarray:
    """Lift pixel coordinates with metric depth to camera-frame points.

    ``depth`` is the z coordinate (not the ray length). Depth 0 is the invalid
    sentinel and is rejected like any other non-positive value.
    """
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise DomainError("cannot backproject a pixel with invalid or non-positive depth")
    if not np.all(intrinsics.contains(uv)):
        raise DomainError("pixel coordinates outside the image")
    x = (uv[..., 0] - intrinsics.cx) / intrinsics.fx * depth
    y = (uv[..., 1] - intrinsics.cy) / intrinsics.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape)], axis=-1)


def transform_point(g: RigidTransform, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p @ g.rotation.T + g.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(g: RigidTransform) -> RigidTransform:
    Rt = g.rotation.T
    return RigidTransform(Rt, -Rt @ g.translation)


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    # snap a nearly-orthonormal matrix back onto SO(3)
    u, _, vt = np.linalg.svd(R)
    Rn = u @ vt
    if np.linalg.det(Rn) < 0:
        u[:, -1] = -u[:, -1]
        Rn = u @ vt
    return Rn


def axis_angle_to_matrix(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def rotation_angle(R) -> float:
    """Rotation magnitude in radians, in [0, pi]."""
    c = (np.trace(np.asarray(R)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _unit_vector(rng: np.random.Generator) -> np.ndarray:
    while True:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_perturbation(rng: np.random.Generator, max_angle: float, max_translation: float) -> RigidTransform:
    """Random rigid motion: uniform axis, angle in [0, max_angle], translation
    with uniform direction and norm uniform in [0, max_translation]."""
    if max_angle < 0 or max_translation < 0:
        raise DomainError("perturbation bounds must be non-negative")
    axis = _unit_vector(rng)
    angle = rng.uniform(0.0, max_angle) if max_angle > 0 else 0.0
    direction = _unit_vector(rng)
    norm = rng.uniform(0.0, max_translation) if max_translation > 0 else 0.0
    return RigidTransform(axis_angle_to_matrix(axis, angle), direction * norm)


def look_at(eye, target, roll: float = 0.0, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Camera->world pose of a camera at ``eye`` looking at ``target``.

    ``roll`` rotates the camera about its optical axis (radians).
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    if abs(np.dot(z, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    if roll:
        R = R @ axis_angle_to_matrix([0.0, 0.0, 1.0], roll)
    return RigidTransform(_reorthonormalize(R), eye)


def format_pose(g: RigidTransform) -> str:
    """One line of 12 row-major ``[R|t]`` values."""
    m = g.as_matrix()[:3, :4]
    return " ".join(repr(float(x)) for x in m.ravel())


def parse_pose(line: str) -> RigidTransform:
    values = [float(x) for x in line.split()]
    if len(values) != 12:
        raise DomainError(f"pose line must hold 12 values, got {len(values)}")
    return RigidTransform.from_matrix(np.array(values).reshape(3, 4))


def write_poses(path, poses) -> None:
    with open(path, "w") as fh:
        for g in poses:
            fh.write(format_pose(g) + "\n")


def read_poses(path) -> list[RigidTransform]:
    with open(path) as fh:
        return [parse_pose(line) for line in fh if line.strip()]
