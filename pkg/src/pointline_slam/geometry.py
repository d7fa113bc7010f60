"""Geometric primitives: SE(3) poses, the stereo camera model, 2-D features,
3-D landmarks, and stereo triangulation.

Conventions used throughout the package:
  * poses are stored world-from-camera (camera-to-world),
  * se(3) tangent vectors are laid out [rho, omega] (translation part first),
  * pose increments are applied by left multiplication: T <- exp(xi) * T.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMAL_TOL = 1e-9
DEFAULT_MIN_DISPARITY = 1.0


def skew(w: np.ndarray) -> np.ndarray:
    """3x3 skew-symmetric matrix such that skew(w) @ v == cross(w, v)."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def rotation_is_valid(R: np.ndarray, tol: float = ORTHONORMAL_TOL) -> bool:
    if R.shape != (3, 3):
        return False
    if not np.all(np.isfinite(R)):
        return False
    err = np.abs(R.T @ R - np.eye(3)).max()
    return err <= tol and abs(np.linalg.det(R) - 1.0) <= tol


def renormalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project a near-orthonormal matrix back onto SO(3) (closest in Frobenius norm)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid-body transform. `rotation` is 3x3 orthonormal, `translation` in meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not rotation_is_valid(R, tol=1e-7):
            raise ValueError("rotation is not orthonormal with det +1")
        # Snap to SO(3) so long composition chains cannot drift.
        if not rotation_is_valid(R, tol=ORTHONORMAL_TOL):
            R = renormalize_rotation(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return PoseSE3(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (n, 3) stack of points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def almost_equal(self, other: "PoseSE3", tol: float = 1e-9) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)


def _so3_V(omega: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): exp translation coupling term."""
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-16:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    theta = np.sqrt(theta2)
    a = (1.0 - np.cos(theta)) / theta2
    b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _so3_V_inv(omega: np.ndarray) -> np.ndarray:
    theta2 = float(omega @ omega)
    K = skew(omega)
    if theta2 < 1e-16:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    theta = np.sqrt(theta2)
    half = 0.5 * theta
    cot = half / np.tan(half)
    c = (1.0 - cot) / theta2
    return np.eye(3) - 0.5 * K + c * (K @ K)


def se3_exp(tangent: np.ndarray) -> PoseSE3:
    """Exponential map. `tangent` is [rho, omega]; exp(0) is the identity."""
    xi = np.asarray(tangent, dtype=np.float64).reshape(6)
    if not np.all(np.isfinite(xi)):
        raise ValueError("tangent vector must be finite")
    rho, omega = xi[:3], xi[3:]
    R = Rotation.from_rotvec(omega).as_matrix()
    t = _so3_V(omega) @ rho
    return PoseSE3(R, t)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Inverse of se3_exp on the principal branch (rotation angle in [0, pi];
    at exactly pi the axis sign follows scipy's rotvec convention)."""
    omega = Rotation.from_matrix(pose.rotation).as_rotvec()
    rho = _so3_V_inv(omega) @ pose.translation
    return np.concatenate([rho, omega])


@dataclass(frozen=True)
class StereoCamera:
    """Calibrated rectified stereo rig. Focal lengths and principal point in
    pixels, baseline in meters."""

    fx: float
    fy: float
    cx: float
    cy: float
    baseline: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError("fx, fy, baseline must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, X_c: np.ndarray) -> np.ndarray:
        """Project camera-frame point(s) to left-image pixels. No visibility check."""
        X = np.asarray(X_c, dtype=np.float64)
        if X.ndim == 1:
            z = X[2]
            return np.array([self.fx * X[0] / z + self.cx, self.fy * X[1] / z + self.cy])
        z = X[:, 2]
        return np.stack([self.fx * X[:, 0] / z + self.cx,
                         self.fy * X[:, 1] / z + self.cy], axis=1)

    def disparity_of(self, X_c: np.ndarray) -> np.ndarray:
        X = np.asarray(X_c, dtype=np.float64)
        z = X[2] if X.ndim == 1 else X[:, 2]
        return self.fx * self.baseline / z

    def in_bounds(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        u = uv[..., 0]
        v = uv[..., 1]
        return ((u >= margin) & (u < self.width - margin)
                & (v >= margin) & (v < self.height - margin))

    def normalized(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates -> coordinates on the z=1 plane."""
        uv = np.asarray(uv, dtype=np.float64)
        return np.stack([(uv[..., 0] - self.cx) / self.fx,
                         (uv[..., 1] - self.cy) / self.fy], axis=-1)


@dataclass(frozen=True)
class PointFeature2D:
    """A detected point in the left image; `disparity` present when stereo-matched."""

    u: float
    v: float
    disparity: Optional[float] = None
    id: int = -1

    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


@dataclass(frozen=True, eq=False)
class LineFeature2D:
    """A detected line segment; endpoints in left-image pixels."""

    start: np.ndarray
    end: np.ndarray
    id: int = -1

    def __post_init__(self):
        s = np.asarray(self.start, dtype=np.float64).reshape(2).copy()
        e = np.asarray(self.end, dtype=np.float64).reshape(2).copy()
        if not np.all(np.isfinite(s)) or not np.all(np.isfinite(e)):
            raise ValueError("line endpoints must be finite")
        if np.array_equal(s, e):
            raise ValueError("line must have positive length")
        s.flags.writeable = False
        e.flags.writeable = False
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def midpoint(self) -> np.ndarray:
        return (self.start + self.end) / 2.0

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


@dataclass(frozen=True, eq=False)
class Landmark3D:
    """3-D landmark, either a point or a line segment (meters, world frame).

    For lines the direction (l, m, n) is always derived from the endpoints,
    never stored, so it cannot fall out of sync.
    """

    kind: str
    position: Optional[np.ndarray] = None
    start: Optional[np.ndarray] = None
    end: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "point":
            p = np.asarray(self.position, dtype=np.float64).reshape(3).copy()
            p.flags.writeable = False
            object.__setattr__(self, "position", p)
        elif self.kind == "line":
            s = np.asarray(self.start, dtype=np.float64).reshape(3).copy()
            e = np.asarray(self.end, dtype=np.float64).reshape(3).copy()
            if np.linalg.norm(e - s) <= 0.0:
                raise ValueError("line landmark needs distinct endpoints")
            s.flags.writeable = False
            e.flags.writeable = False
            object.__setattr__(self, "start", s)
            object.__setattr__(self, "end", e)
        else:
            raise ValueError(f"unknown landmark kind {self.kind!r}")

    @staticmethod
    def point(position: np.ndarray) -> "Landmark3D":
        return Landmark3D(kind="point", position=position)

    @staticmethod
    def line(start: np.ndarray, end: np.ndarray) -> "Landmark3D":
        return Landmark3D(kind="line", start=start, end=end)

    @property
    def direction(self) -> np.ndarray:
        return self.end - self.start


@dataclass
class Frame:
    """One stereo frame as seen by the pipeline."""

    index: int
    timestamp: float
    points: list = field(default_factory=list)
    lines: list = field(default_factory=list)
    image: Optional[np.ndarray] = None
    ggs: Optional[object] = None
    pose: Optional[PoseSE3] = None
    is_keyframe: bool = False


def triangulate_point(f: PointFeature2D, cam: StereoCamera,
                      min_disparity: float = DEFAULT_MIN_DISPARITY) -> Optional[np.ndarray]:
    """Back-project a stereo-matched feature; None when depth is unusable."""
    if f.disparity is None or f.disparity <= min_disparity:
        return None
    z = cam.fx * cam.baseline / f.disparity
    x = (f.u - cam.cx) * z / cam.fx
    y = (f.v - cam.cy) * z / cam.fy
    return np.array([x, y, z])


def triangulate_line(f: LineFeature2D, f_right: LineFeature2D, cam: StereoCamera,
                     min_disparity: float = DEFAULT_MIN_DISPARITY) -> Optional[Landmark3D]:
    """Endpoint-wise stereo triangulation of a line; None if either endpoint fails."""
    d_start = f.start[0] - f_right.start[0]
    d_end = f.end[0] - f_right.end[0]
    ps = triangulate_point(PointFeature2D(f.start[0], f.start[1], d_start), cam, min_disparity)
    pe = triangulate_point(PointFeature2D(f.end[0], f.end[1], d_end), cam, min_disparity)
    if ps is None or pe is None:
        return None
    return Landmark3D.line(ps, pe)
