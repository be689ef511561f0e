"""Pinhole cameras, relative poses and two-view epipolar geometry.

Conventions used throughout the package:

* A relative pose maps points from the source camera frame into the target
  camera frame, ``X_t = R @ X_s + t``.  This is the only reading under which
  ``x_t = dehomogenize(K R K^-1 [x_s, 1] * d + K t)`` holds.
* Pixel ``(row i, col j)`` has its centre at the continuous coordinate
  ``(j + 0.5, i + 0.5)``.  With this convention a 2x2 box-filter downsample
  maps coordinates exactly as ``x -> x / 2``, so halving ``fx, fy, cx, cy``
  is exact across pyramid levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLine, DegenerateRay, ZeroTranslation

_EPS_Z = 1e-12
_SMALL_ANGLE = 1e-8


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def at_level(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid level ``level`` (each level halves resolution)."""
        k = self
        for _ in range(level):
            k = CameraIntrinsics(
                k.fx / 2.0,
                k.fy / 2.0,
                k.cx / 2.0,
                k.cy / 2.0,
                (k.width + 1) // 2,
                (k.height + 1) // 2,
            )
        return k


def skew(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_matrix(r) -> np.ndarray:
    """Rodrigues' formula for a rotation vector ``r = angle * axis``."""
    r = np.asarray(r, dtype=float).reshape(3)
    theta = math.sqrt(float(r @ r))
    S = skew(r)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + S + 0.5 * (S @ S)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * S + b * (S @ S)


def rotation_vector(R) -> np.ndarray:
    """Matrix logarithm of a rotation, returned with ``|r| <= pi``."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = 0.5 * (np.trace(R) - 1.0)
    sn = float(np.linalg.norm(s))
    theta = math.atan2(sn, c)
    if theta < _SMALL_ANGLE:
        return s
    if theta < math.pi - 1e-6:
        return s * (theta / sn)
    # near pi the antisymmetric part vanishes; recover the axis from R + I
    B = 0.5 * (R + np.eye(3))
    col = int(np.argmax(np.diag(B)))
    axis = B[:, col] / math.sqrt(max(B[col, col], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ s < 0:
        axis = -axis
    return axis * theta


def canonical_rotation_vector(r) -> np.ndarray:
    r = np.asarray(r, dtype=float).reshape(3)
    theta = float(np.linalg.norm(r))
    if theta < math.pi:
        return r.copy()
    return rotation_vector(rotation_matrix(r))


def rotation_angle(R) -> float:
    """Rotation angle of ``R`` in radians."""
    return float(np.linalg.norm(rotation_vector(R)))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float).reshape(3)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class RelativePose:
    """Pose of the source frame with respect to the target frame (``X_t = R X_s + t``)."""

    r: np.ndarray
    t: np.ndarray
    scale_known: bool = True

    def __post_init__(self):
        object.__setattr__(self, "r", _frozen(self.r))
        object.__setattr__(self, "t", _frozen(self.t))
        if not np.all(np.isfinite(self.r)) or not np.all(np.isfinite(self.t)):
            raise ValueError("pose components must be finite")
        if not self.scale_known and abs(float(np.linalg.norm(self.t)) - 1.0) > 1e-12:
            raise ValueError("scale-free pose needs a unit-norm translation")

    @classmethod
    def from_rt(cls, R, t, scale_known: bool = True) -> "RelativePose":
        return cls(rotation_vector(R), t, scale_known)

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.zeros(3), np.zeros(3), True)

    @property
    def R(self) -> np.ndarray:
        return rotation_matrix(self.r)

    def normalized(self) -> "RelativePose":
        """Same pose with unit translation and ``scale_known = False``."""
        n = float(np.linalg.norm(self.t))
        if n < _EPS_Z:
            raise ZeroTranslation("cannot normalize a zero translation")
        t = self.t / n
        t = t / np.linalg.norm(t)
        return RelativePose(self.r, t, False)

    def inverse(self) -> "RelativePose":
        R = self.R
        return RelativePose.from_rt(R.T, -R.T @ self.t, self.scale_known)

    def then(self, other: "RelativePose") -> "RelativePose":
        """Compose: apply ``self`` first, then ``other``."""
        R = other.R @ self.R
        t = other.R @ self.t + other.t
        return RelativePose.from_rt(R, t, self.scale_known and other.scale_known)

    def transform(self, X) -> np.ndarray:
        """Map points (..., 3) from the source frame into the target frame."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t


def relative_pose(world_to_a: RelativePose, world_to_b: RelativePose) -> RelativePose:
    """Pose taking frame ``a`` coordinates to frame ``b`` coordinates."""
    return world_to_a.inverse().then(world_to_b)


@dataclass(frozen=True)
class EpipolarLine:
    """Line ``e_x x' + e_y y' + e_z = 0`` in target pixel coordinates."""

    e: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "e", _frozen(self.e))

    @property
    def norm2(self) -> float:
        return float(self.e[0] ** 2 + self.e[1] ** 2)

    @property
    def direction(self) -> np.ndarray:
        """Unit vector along the line, ``(e_y, -e_x) / |(e_x, e_y)|``."""
        n = math.sqrt(self.norm2)
        return np.array([self.e[1], -self.e[0]]) / n

    @property
    def normal(self) -> np.ndarray:
        n = math.sqrt(self.norm2)
        return np.array([self.e[0], self.e[1]]) / n

    def distance(self, p) -> float:
        p = np.asarray(p, dtype=float)
        return abs(self.e[0] * p[0] + self.e[1] * p[1] + self.e[2]) / math.sqrt(self.norm2)

    def closest_point(self, p) -> np.ndarray:
        ex, ey, ez = self.e
        xp, yp = np.asarray(p, dtype=float)
        n2 = self.norm2
        return np.array(
            [
                (xp * ey * ey - yp * ex * ey - ex * ez) / n2,
                (yp * ex * ex - xp * ex * ey - ey * ez) / n2,
            ]
        )


def essential_matrix(pose: RelativePose) -> np.ndarray:
    return skew(pose.t) @ pose.R


def fundamental_matrix(
    K_s: CameraIntrinsics, K_t: CameraIntrinsics, pose: RelativePose
) -> np.ndarray:
    """``F = K_t^-T [t]x R K_s^-1`` so that ``[x_t, 1] F [x_s, 1]^T = 0``."""
    if float(np.linalg.norm(pose.t)) < _EPS_Z:
        raise ZeroTranslation("fundamental matrix undefined for zero translation")
    return K_t.inverse.T @ essential_matrix(pose) @ K_s.inverse


def epipolar_line(F, x) -> EpipolarLine:
    x = np.asarray(x, dtype=float)
    e = np.asarray(F, dtype=float) @ np.array([x[0], x[1], 1.0])
    if e[0] ** 2 + e[1] ** 2 < 1e-18:
        raise DegenerateLine(f"pixel {tuple(x)} maps to a degenerate epipolar line")
    return EpipolarLine(e)


def epipolar_lines(F, pts) -> np.ndarray:
    """Vectorised ``F [x, 1]^T`` for points of shape (..., 2); returns (..., 3)."""
    pts = np.asarray(pts, dtype=float)
    F = np.asarray(F, dtype=float)
    return (
        F[:, 0] * pts[..., 0, None] + F[:, 1] * pts[..., 1, None] + F[:, 2]
    )


AT_INFINITY = None
"""Sentinel returned by :func:`epipole_in_source` for stereo-like motion."""


def epipole_in_source(K: CameraIntrinsics, pose: RelativePose):
    """Projection of the target camera centre into the source image.

    Returns a pixel (2-vector) or :data:`AT_INFINITY` when the centre lies
    on the source image plane at infinity (purely lateral motion).
    """
    if float(np.linalg.norm(pose.t)) < _EPS_Z:
        raise ZeroTranslation("epipole undefined for zero translation")
    p = -(K.matrix @ (pose.R.T @ pose.t))
    if abs(p[2]) <= _EPS_Z * float(np.linalg.norm(p)):
        return AT_INFINITY
    return dehomogenize(p)


def dehomogenize(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if abs(p[2]) <= _EPS_Z:
        raise DegenerateRay(f"cannot dehomogenize {tuple(p)}")
    return np.array([p[0] / p[2], p[1] / p[2]])


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Pixel-centre coordinates, shape (height, width, 2) as (x, y)."""
    xs = np.arange(width, dtype=float) + 0.5
    ys = np.arange(height, dtype=float) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def rotated_rays(K: CameraIntrinsics, R, pts) -> np.ndarray:
    """``K R K^-1 [x, 1]^T`` for points of shape (..., 2); returns (..., 3)."""
    M = K.matrix @ np.asarray(R, dtype=float) @ K.inverse
    pts = np.asarray(pts, dtype=float)
    return M[:, 0] * pts[..., 0, None] + M[:, 1] * pts[..., 1, None] + M[:, 2]


def project(K: CameraIntrinsics, X) -> tuple[np.ndarray, np.ndarray]:
    """Project camera-frame points (..., 3); returns pixels (..., 2) and depth (...)."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * X[..., 0] / z + K.cx
        v = K.fy * X[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def backproject(K: CameraIntrinsics, pts, depth) -> np.ndarray:
    pts = np.asarray(pts, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (pts[..., 0] - K.cx) / K.fx * depth
    y = (pts[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, depth], axis=-1)
