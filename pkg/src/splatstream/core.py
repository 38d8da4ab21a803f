"""Domain types and geometric helpers shared by every pipeline stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

if TYPE_CHECKING:
    from splatstream.motion import ObjectTrack

STATIC_ID = -1
FRESH_VISIBILITY = (-1.0, 1.0)
FRESH_LIFE = (1.0, -1.0)


# --------------------------------------------------------------------------
# rotations


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("quaternion must be finite and nonzero")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q if q[0] >= 0 else -q


def euler_to_matrix(ypr) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll) for a (yaw, pitch, roll) vector."""
    yaw, pitch, roll = (float(a) for a in ypr)
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def matrix_to_euler(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    pitch = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    yaw = math.atan2(R[1, 0], R[0, 0])
    roll = math.atan2(R[2, 1], R[2, 2])
    return np.array([yaw, pitch, roll])


# --------------------------------------------------------------------------
# SE(3) as 4x4 homogeneous matrices


def make_se3(rotation, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = np.asarray(rotation, dtype=np.float64)
    T[:3, 3] = np.asarray(translation, dtype=np.float64)
    return T


def check_rotation(R, tol: float = 1e-6) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation must be orthonormal with determinant +1")


def check_se3(T, tol: float = 1e-6) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError(f"SE(3) transform must be 4x4, got {T.shape}")
    check_rotation(T[:3, :3], tol)
    if not np.all(np.isfinite(T[:3, 3])) or np.abs(T[3] - [0, 0, 0, 1]).max() > tol:
        raise ValueError("malformed homogeneous transform")
    return T


def compose_se3(a, b) -> np.ndarray:
    """Transform applying ``b`` first, then ``a``."""
    return check_se3(a) @ check_se3(b)


def invert_se3(T) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    R = T[:3, :3]
    return make_se3(R.T, -R.T @ T[:3, 3])


# --------------------------------------------------------------------------
# covariance and time


def build_covariance(log_scale, rotation) -> np.ndarray:
    """Sigma = R S S^T R^T for a single Gaussian (quaternion in w, x, y, z)."""
    s = np.asarray(log_scale, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    if s.shape != (3,) or q.shape != (4,):
        raise ValueError("expected a 3-vector log_scale and a 4-vector quaternion")
    return build_covariances(s[None], q[None])[0]


def build_covariances(log_scales, quats) -> np.ndarray:
    """Batched covariance construction; quaternions are renormalized."""
    s = np.asarray(log_scales, dtype=np.float64)
    q = np.asarray(quats, dtype=np.float64)
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(q))):
        raise ValueError("non-finite scale or rotation")
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    M = quat_to_matrix(q) * np.exp(s)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def normalize_time(frame_index: int, frame_count: int) -> float:
    """Map a frame index onto [-1, 1]; a single-frame scene maps to 0."""
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    if not 0 <= frame_index < frame_count:
        raise ValueError(f"frame_index {frame_index} outside [0, {frame_count})")
    if frame_count == 1:
        return 0.0
    return -1.0 + 2.0 * frame_index / (frame_count - 1)


def time_to_frame(t: float, frame_count: int) -> float:
    """Fractional frame position of a normalized time."""
    if frame_count <= 1:
        return 0.0
    return (float(t) + 1.0) * 0.5 * (frame_count - 1)


# --------------------------------------------------------------------------
# domain types


class FieldColor:
    """Marker: the Gaussian's color is queried from a neural field."""

    def __repr__(self) -> str:
        return "FIELD_COLOR"


FIELD_COLOR = FieldColor()


@dataclass
class Gaussian3D:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: object = (0.5, 0.5, 0.5)
    visibility: tuple[float, float] = FRESH_VISIBILITY
    life: tuple[float, float] = FRESH_LIFE
    instance_id: int | None = None

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = quat_normalize(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        if not 0.0 < self.opacity < 1.0:
            raise ValueError(f"opacity must lie in (0, 1), got {self.opacity}")
        if self.color is not FIELD_COLOR:
            self.color = tuple(float(c) for c in self.color)
        self.visibility = tuple(float(v) for v in self.visibility)
        self.life = tuple(float(v) for v in self.life)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.log_scale, self.rotation)


class GaussianArray:
    """Struct-of-arrays storage for a group of Gaussians.

    All float fields are float32 (the on-disk precision). Rows whose color is
    NaN have their color queried from a neural field at render time.
    ``visibility`` and ``life`` are mutated in place by :mod:`splatstream.tvis`.
    """

    __slots__ = ("positions", "log_scales", "quats", "opacities", "colors",
                 "visibility", "life", "instance_ids")

    def __init__(self, positions, log_scales, quats, opacities, colors=None,
                 visibility=None, life=None, instance_ids=None):
        n = len(positions)
        self.positions = np.asarray(positions, dtype=np.float32).reshape(n, 3)
        self.log_scales = np.asarray(log_scales, dtype=np.float32).reshape(n, 3)
        q = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        if n:
            q = quat_normalize(q)
        self.quats = q.astype(np.float32)
        self.opacities = np.asarray(opacities, dtype=np.float32).reshape(n)
        if np.any((self.opacities <= 0) | (self.opacities >= 1)):
            raise ValueError("opacities must lie strictly in (0, 1)")
        if colors is None:
            colors = np.full((n, 3), 0.5)
        self.colors = np.asarray(colors, dtype=np.float32).reshape(n, 3)
        if visibility is None:
            visibility = np.tile(FRESH_VISIBILITY, (n, 1))
        if life is None:
            life = np.tile(FRESH_LIFE, (n, 1))
        self.visibility = np.array(visibility, dtype=np.float32).reshape(n, 2)
        self.life = np.array(life, dtype=np.float32).reshape(n, 2)
        if instance_ids is None:
            instance_ids = np.full(n, STATIC_ID)
        self.instance_ids = np.asarray(instance_ids, dtype=np.int32).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls) -> "GaussianArray":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0))

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianArray":
        if not gaussians:
            return cls.empty()
        colors = [(np.nan,) * 3 if g.color is FIELD_COLOR else g.color for g in gaussians]
        return cls(
            [g.position for g in gaussians],
            [g.log_scale for g in gaussians],
            [g.rotation for g in gaussians],
            [g.opacity for g in gaussians],
            colors,
            [g.visibility for g in gaussians],
            [g.life for g in gaussians],
            [STATIC_ID if g.instance_id is None else g.instance_id for g in gaussians],
        )

    def to_gaussians(self) -> list[Gaussian3D]:
        out = []
        for i in range(len(self)):
            c = self.colors[i]
            iid = int(self.instance_ids[i])
            out.append(Gaussian3D(
                self.positions[i], self.log_scales[i], self.quats[i], float(self.opacities[i]),
                FIELD_COLOR if np.isnan(c).any() else c,
                tuple(self.visibility[i]), tuple(self.life[i]),
                None if iid == STATIC_ID else iid,
            ))
        return out

    def subset(self, idx) -> "GaussianArray":
        out = GaussianArray.__new__(GaussianArray)
        for name in self.__slots__:
            setattr(out, name, getattr(self, name)[idx].copy())
        return out

    @staticmethod
    def concatenate(arrays: Sequence["GaussianArray"]) -> "GaussianArray":
        out = GaussianArray.__new__(GaussianArray)
        arrays = list(arrays)
        if not arrays:
            return GaussianArray.empty()
        for name in GaussianArray.__slots__:
            setattr(out, name, np.concatenate([getattr(a, name) for a in arrays]))
        return out

    def covariances(self, idx=None) -> np.ndarray:
        if idx is None:
            return build_covariances(self.log_scales, self.quats)
        return build_covariances(self.log_scales[idx], self.quats[idx])

    def equals(self, other: "GaussianArray") -> bool:
        return all(
            np.array_equal(getattr(self, n), getattr(other, n), equal_nan=n == "colors")
            for n in self.__slots__
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        check_rotation(R)
        if self.width < 1 or self.height < 1:
            raise ValueError("camera width and height must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not -1.0 <= self.time <= 1.0:
            raise ValueError(f"camera time {self.time} outside [-1, 1]")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def extrinsics(self) -> np.ndarray:
        return make_se3(self.rotation, self.translation)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_extrinsics(self, T) -> "Camera":
        T = check_se3(T)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                      T[:3, :3], T[:3, 3], self.time)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "time": self.time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["rotation"]),
                   np.array(d["translation"]), float(d.get("time", 0.0)))


@dataclass(frozen=True)
class Pose:
    """Object local-to-global pose: Euler (yaw, pitch, roll) radians plus meters."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        return make_se3(euler_to_matrix(self.rotation), self.translation)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = check_se3(T)
        return cls(matrix_to_euler(T[:3, :3]), T[:3, 3])


@dataclass
class SceneModel:
    static_gaussians: GaussianArray
    dynamic_gaussians: dict[int, GaussianArray] = field(default_factory=dict)
    tracks: dict[int, "ObjectTrack"] = field(default_factory=dict)
    cameras: list[Camera] = field(default_factory=list)
    frame_count: int = 1

    def validate(self) -> None:
        for iid, g in self.dynamic_gaussians.items():
            if iid not in self.tracks:
                raise ValueError(f"dynamic instance {iid} has no track")
            if len(g) and np.any(g.instance_ids != iid):
                raise ValueError(f"instance ids inside group {iid} disagree")
        for cam in self.cameras:
            if not -1.0 <= cam.time <= 1.0:
                raise ValueError("camera time outside [-1, 1]")

    def groups(self) -> Iterator[tuple[int | None, GaussianArray, int]]:
        """(instance id or None, array, global offset): static first, then ids ascending."""
        offset = 0
        yield None, self.static_gaussians, offset
        offset += len(self.static_gaussians)
        for iid in sorted(self.dynamic_gaussians):
            g = self.dynamic_gaussians[iid]
            yield iid, g, offset
            offset += len(g)

    @property
    def gaussian_count(self) -> int:
        return len(self.static_gaussians) + sum(len(g) for g in self.dynamic_gaussians.values())

    def all_arrays(self) -> list[GaussianArray]:
        return [g for _, g, _ in self.groups()]

    def camera_at(self, t: float) -> Camera:
        """Camera whose timestamp is closest to ``t``."""
        if not self.cameras:
            raise ValueError("scene has no cameras")
        return min(self.cameras, key=lambda c: abs(c.time - t))
