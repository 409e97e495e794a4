"""Rigid-transform algebra, pinhole projection, viewpoint sampling and Kabsch.

Conventions used throughout the package:

* transforms map points as ``x_out = R @ x_in + t`` (column-vector form),
* camera frames are right-handed with +z in front of the camera,
* angles are degrees at public interfaces, radians internally,
* all geometry is in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ORTHONORMALITY_TOL = 1e-9

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


class DegenerateGeometryError(ValueError):
    """Raised when a point configuration does not determine a rigid transform."""


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): ``x_out = rotation @ x_in + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        err = np.max(np.abs(R.T @ R - np.eye(3)))
        if err >= ORTHONORMALITY_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) >= ORTHONORMALITY_TOL:
            raise ValueError(f"rotation determinant {det!r} != +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return RigidTransform(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-9) -> bool:
        return (
            np.max(np.abs(self.rotation - other.rotation)) < tol
            and np.max(np.abs(self.translation - other.translation)) < tol
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    return a.compose(b)


def invert(a: RigidTransform) -> RigidTransform:
    return a.inverse()


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def scaled(self, sx: float, sy: float, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics after resampling the image by (sx, sy)."""
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height
        )


def standoff_distance(d: float, d_px: float, K: CameraIntrinsics) -> float:
    """Camera distance that renders an object of diameter ``d`` at ``d_px`` pixels."""
    if d <= 0 or d_px <= 0:
        raise ValueError("diameter and pixel size must be positive")
    return K.focal * d / d_px


def backproject(u, v, z, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates and depth to a camera-frame 3D point.

    Accepts scalars or equally shaped arrays; returns shape (..., 3).
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    x = (np.asarray(u, dtype=np.float64) - K.cx) * z / K.fx
    y = (np.asarray(v, dtype=np.float64) - K.cy) * z / K.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def project(p: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to (u, v, z). Points must have z > 0."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise ValueError("cannot project points at or behind the camera")
    u = K.fx * p[..., 0] / z + K.cx
    v = K.fy * p[..., 1] / z + K.cy
    return np.stack([u, v, z], axis=-1)


@dataclass(frozen=True)
class ViewpointSet:
    """Camera-from-object rotations covering the view sphere.

    Every view places the camera on the unit sphere looking at the origin
    (translation (0, 0, 1)); rendering rescales the standoff.
    """

    views: tuple
    alpha: float
    delta: float

    def __len__(self) -> int:
        return len(self.views)


def fibonacci_base_count(alpha_deg: float) -> int:
    """Number of sphere directions for an angular spacing of ``alpha_deg``."""
    alpha = math.radians(alpha_deg)
    return int(math.floor(4.0 * math.pi / (alpha * alpha)))


def fibonacci_sphere(n: int) -> np.ndarray:
    """Spherical Fibonacci lattice, midpoint variant: n unit vectors."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    theta = GOLDEN_ANGLE * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=-1)


def look_at_rotation(direction: np.ndarray) -> np.ndarray:
    """Camera-from-world rotation for a camera at ``direction`` looking at the origin.

    The camera +z axis points from the camera toward the origin.  The image
    up direction follows global +Z projected onto the view plane; when the
    view direction is within 1e-6 of being parallel to +-Z, global +X is
    used instead.
    """
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    z_cam = -v
    up = np.array([0.0, 0.0, 1.0])
    if 1.0 - abs(v[2]) < 1e-6:
        up = np.array([1.0, 0.0, 0.0])
    up = up - np.dot(up, z_cam) * z_cam
    up /= np.linalg.norm(up)
    y_cam = -up  # image rows grow downward
    x_cam = np.cross(y_cam, z_cam)
    return np.stack([x_cam, y_cam, z_cam], axis=0)


def _roll_matrix(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def fibonacci_viewpoints(alpha: float, delta: float) -> ViewpointSet:
    """Sample camera-from-object views: Fibonacci sphere plus in-plane rolls.

    ``alpha`` is the approximate angular separation of the base directions
    (degrees, 0 < alpha <= 90); ``delta`` the in-plane roll step and must
    divide 360 evenly.
    """
    if not 0.0 < alpha <= 90.0:
        raise ValueError("alpha must be in (0, 90] degrees")
    n_roll = 360.0 / delta
    if abs(n_roll - round(n_roll)) > 1e-9 or delta <= 0:
        raise ValueError("delta must divide 360 evenly")
    n_roll = int(round(n_roll))
    dirs = fibonacci_sphere(fibonacci_base_count(alpha))
    rolls = [_roll_matrix(math.radians(k * delta)) for k in range(n_roll)]
    views = []
    t = np.array([0.0, 0.0, 1.0])
    for d in dirs:
        base = look_at_rotation(d)
        for roll in rolls:
            views.append(RigidTransform(roll @ base, t))
    return ViewpointSet(views=tuple(views), alpha=alpha, delta=delta)


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``src`` onto ``dst``.

    Closed-form SVD solution; a reflection in the cross-covariance is
    corrected by flipping the smallest singular direction so that the
    returned rotation always has det = +1.

    Raises DegenerateGeometryError when the source points are collinear or
    coincident (fewer than two independent directions).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be N x 3")
    n = src.shape[0]
    if n < 3:
        raise DegenerateGeometryError("need at least 3 correspondences")
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    p = src - c_src
    q = dst - c_dst
    spread = np.linalg.svd(p, compute_uv=False)
    if spread[1] <= max(1e-12, 1e-9 * spread[0]):
        raise DegenerateGeometryError("source points are collinear or coincident")
    h = p.T @ q
    u, _, vt = np.linalg.svd(h)
    sign = np.sign(np.linalg.det(vt.T @ u.T))
    diag = np.array([1.0, 1.0, sign])
    rotation = vt.T @ np.diag(diag) @ u.T
    translation = c_dst - rotation @ c_src
    return RigidTransform(rotation, translation)


def orthonormalized(R: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Nearest proper rotation (SVD projection) of a slightly-off matrix.

    Raises if the input deviates from a rotation by more than ``tol``.
    """
    R = np.asarray(R, dtype=np.float64)
    err = np.max(np.abs(R.T @ R - np.eye(3)))
    if err > tol:
        raise ValueError(f"matrix is not close to a rotation (deviation {err:.3e})")
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        out = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return out


def rotation_angle_rad(a: np.ndarray, b: np.ndarray | None = None) -> float:
    """Geodesic angle of a rotation, or between two rotations."""
    r = np.asarray(a, dtype=np.float64)
    if b is not None:
        r = r @ np.asarray(b, dtype=np.float64).T
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation matrix (quaternion method)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
