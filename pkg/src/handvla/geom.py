"""Rigid-body and pinhole-camera primitives.

Rotations are stored as 3x3 matrices. Euler angles only appear at I/O
boundaries and always use the XYZ-intrinsic convention::

    R = Rx(a) @ Ry(b) @ Rz(c)

When the middle angle reaches +-pi/2 the decomposition is degenerate; the
third angle is then pinned to 0 and the first absorbs the remaining twist.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

_GIMBAL_EPS = 1e-12


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(b: float) -> np.ndarray:
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(c_: float) -> np.ndarray:
    c, s = math.cos(c_), math.sin(c_)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_to_matrix(angles) -> np.ndarray:
    """XYZ-intrinsic Euler angles (rad) to a rotation matrix, closed form."""
    a, b, c = (float(x) for x in angles)
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    return np.array(
        [
            [cb * cc, -cb * sc, sb],
            [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
            [sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb],
        ]
    )


def matrix_to_euler(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    cb = math.hypot(m[0, 0], m[0, 1])
    b = math.atan2(m[0, 2], cb)
    if cb > _GIMBAL_EPS:
        a = math.atan2(-m[1, 2], m[2, 2])
        c = math.atan2(-m[0, 1], m[0, 0])
    else:
        # gimbal lock: R = Rx(a) Ry(+-pi/2), third angle pinned to 0
        a = math.atan2(m[2, 1], m[1, 1])
        c = 0.0
    return np.array([a, b, c])


def euler_to_matrix_batch(angles: np.ndarray) -> np.ndarray:
    """Vectorized :func:`euler_to_matrix` over a ``(..., 3)`` array."""
    angles = np.asarray(angles, dtype=float)
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    out = np.empty(angles.shape[:-1] + (3, 3))
    out[..., 0, 0] = cb * cc
    out[..., 0, 1] = -cb * sc
    out[..., 0, 2] = sb
    out[..., 1, 0] = ca * sc + sa * sb * cc
    out[..., 1, 1] = ca * cc - sa * sb * sc
    out[..., 1, 2] = -sa * cb
    out[..., 2, 0] = sa * sc - ca * sb * cc
    out[..., 2, 1] = sa * cc + ca * sb * sc
    out[..., 2, 2] = ca * cb
    return out


def matrix_to_euler_batch(m: np.ndarray) -> np.ndarray:
    """Vectorized :func:`matrix_to_euler` over a ``(..., 3, 3)`` array."""
    m = np.asarray(m, dtype=float)
    cb = np.hypot(m[..., 0, 0], m[..., 0, 1])
    b = np.arctan2(m[..., 0, 2], cb)
    lock = cb <= _GIMBAL_EPS
    a = np.where(lock, np.arctan2(m[..., 2, 1], m[..., 1, 1]), np.arctan2(-m[..., 1, 2], m[..., 2, 2]))
    c = np.where(lock, 0.0, np.arctan2(-m[..., 0, 1], m[..., 0, 0]))
    return np.stack([a, b, c], axis=-1)


def orthonormalize(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=float)
    x, y, z = k
    c, s = math.cos(angle), math.sin(angle)
    v = 1.0 - c
    return np.array(
        [
            [c + x * x * v, x * y * v - z * s, x * z * v + y * s],
            [y * x * v + z * s, c + y * y * v, y * z * v - x * s],
            [z * x * v - y * s, z * y * v + x * s, c + z * z * v],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class Rotation:
    """Immutable SO(3) element backed by a 3x3 matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_euler(cls, angles) -> "Rotation":
        return rotation_from_euler(angles)

    def as_euler(self) -> np.ndarray:
        return euler_from_rotation(self)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def inv(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.matrix.T

    def orthonormalized(self) -> "Rotation":
        return Rotation(orthonormalize(self.matrix))

    def __repr__(self) -> str:
        return f"Rotation(euler={np.round(self.as_euler(), 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``; translation in meters."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(Rotation(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_euler(cls, angles, translation) -> "Pose":
        return cls(rotation_from_euler(angles), translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation.matrix
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        r = self.rotation.matrix
        return Pose(Rotation(r @ other.rotation.matrix), r @ other.translation + self.translation)

    def inv(self) -> "Pose":
        rt = self.rotation.matrix.T
        return Pose(Rotation(rt), -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform points of shape ``(3,)`` or ``(n, 3)``."""
        return np.asarray(points, dtype=float) @ self.rotation.matrix.T + self.translation

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 6).tolist()}, {self.rotation!r})"


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; pixel centers sit at integer coordinates."""

    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.focal_x, 0.0, self.principal_x], [0.0, self.focal_y, self.principal_y], [0.0, 0.0, 1.0]]
        )

    def fov(self) -> "FieldOfView":
        return FieldOfView.from_intrinsics(self)

    @classmethod
    def centered(cls, fov_h: float, width: int, height: int, fov_v: float | None = None) -> "CameraIntrinsics":
        """Intrinsics with the principal point at the image center."""
        fx = width / (2.0 * math.tan(fov_h / 2.0))
        fy = fx if fov_v is None else height / (2.0 * math.tan(fov_v / 2.0))
        return cls(fx, fy, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))


@dataclass(frozen=True)
class FieldOfView:
    horizontal_rad: float
    vertical_rad: float

    def __post_init__(self):
        for v in (self.horizontal_rad, self.vertical_rad):
            if not 0.0 < v < math.pi:
                raise ValueError(f"field of view must lie in (0, pi), got {v}")

    @classmethod
    def from_intrinsics(cls, k: CameraIntrinsics) -> "FieldOfView":
        return cls(2.0 * math.atan(k.width / (2.0 * k.focal_x)), 2.0 * math.atan(k.height / (2.0 * k.focal_y)))

    def focal_lengths(self, width: int, height: int) -> tuple[float, float]:
        return width / (2.0 * math.tan(self.horizontal_rad / 2.0)), height / (2.0 * math.tan(self.vertical_rad / 2.0))


def rotation_from_euler(angles) -> Rotation:
    a = np.asarray(angles, dtype=float).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite Euler angles: {a}")
    return Rotation(euler_to_matrix(a))


def euler_from_rotation(r: Rotation) -> np.ndarray:
    return matrix_to_euler(r.matrix)


def project(intrinsics: CameraIntrinsics, point_cam) -> np.ndarray:
    """Pinhole projection of one camera-frame point."""
    x, y, z = (float(v) for v in point_cam)
    if not z > 0:
        raise BehindCameraError(f"point has depth {z}")
    return np.array([intrinsics.focal_x * x / z + intrinsics.principal_x, intrinsics.focal_y * y / z + intrinsics.principal_y])


def project_points(intrinsics: CameraIntrinsics, points: np.ndarray, min_depth: float = 1e-9):
    """Vectorized projection.

    Returns ``(pixels, in_front)``; pixels of points at or behind
    ``min_depth`` are NaN.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    z = p[:, 2]
    ok = z > min_depth
    safe = np.where(ok, z, 1.0)
    px = np.stack(
        [intrinsics.focal_x * p[:, 0] / safe + intrinsics.principal_x, intrinsics.focal_y * p[:, 1] / safe + intrinsics.principal_y],
        axis=1,
    )
    px[~ok] = np.nan
    return px, ok


def unproject(intrinsics: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    u, v = (float(x) for x in pixel)
    return np.array([(u - intrinsics.principal_x) / intrinsics.focal_x * depth, (v - intrinsics.principal_y) / intrinsics.focal_y * depth, depth])


def relative_delta(pose_k: Pose, pose_k1: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Translation difference and left rotation delta ``R1 R0^T`` as Euler angles."""
    dt = pose_k1.translation - pose_k.translation
    dr = matrix_to_euler(pose_k1.rotation.matrix @ pose_k.rotation.matrix.T)
    return dt, dr


def integrate_deltas(start: Pose, deltas: Iterable[tuple[Sequence[float], Sequence[float]]]) -> list[Pose]:
    """Inverse of :func:`relative_delta` applied along a sequence."""
    out = [start]
    r = start.rotation.matrix
    t = start.translation
    for dt, dr in deltas:
        dt = np.asarray(dt, dtype=float)
        dr = np.asarray(dr, dtype=float)
        if not (np.all(np.isfinite(dt)) and np.all(np.isfinite(dr))):
            raise ValueError("non-finite delta")
        r = euler_to_matrix(dr) @ r
        t = t + dt
        out.append(Pose(Rotation(r), t))
    return out


def relative_deltas_batch(translations: np.ndarray, rotations: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`relative_delta` between consecutive rows."""
    translations = np.asarray(translations, dtype=float)
    rotations = np.asarray(rotations, dtype=float)
    dt = np.diff(translations, axis=0)
    rel = rotations[1:] @ np.swapaxes(rotations[:-1], -1, -2)
    return dt, matrix_to_euler_batch(rel)
