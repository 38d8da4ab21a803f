"""Perspective projection of 3D Gaussians (EWA linearization), instance
cameras, and frustum culling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from splatstream.core import Camera, Pose, compose_se3

NEAR_PLANE = 0.01
LOW_PASS = 0.3
TAN_CLAMP = 1.3


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    source_index: int
    in_frustum: bool


@dataclass
class ProjectedBatch:
    """Vectorized projection result; row ``i`` corresponds to ``source_index[i]``."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    source_index: np.ndarray  # (N,) int64
    in_frustum: np.ndarray  # (N,) bool
    cam_points: np.ndarray  # (N, 3) camera-frame positions

    def __len__(self) -> int:
        return len(self.depth)

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(self.mean2d[i].copy(), self.cov2d[i].copy(), float(self.depth[i]),
                                 int(self.source_index[i]), bool(self.in_frustum[i]))

    def take(self, idx) -> "ProjectedBatch":
        return ProjectedBatch(self.mean2d[idx], self.cov2d[idx], self.depth[idx],
                              self.source_index[idx], self.in_frustum[idx], self.cam_points[idx])

    @staticmethod
    def concatenate(batches: Sequence["ProjectedBatch"]) -> "ProjectedBatch":
        if not batches:
            return empty_batch()
        return ProjectedBatch(*(np.concatenate([getattr(b, f) for b in batches])
                                for f in ("mean2d", "cov2d", "depth", "source_index",
                                          "in_frustum", "cam_points")))


def empty_batch() -> ProjectedBatch:
    return ProjectedBatch(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                          np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool), np.zeros((0, 3)))


def project_points(positions, cov3d, camera: Camera, source_index=None,
                   near: float = NEAR_PLANE, low_pass: float = LOW_PASS) -> ProjectedBatch:
    """Project N Gaussians through ``camera``.

    mean2d = K (R mu + t); cov2d = J R Sigma R^T J^T + low_pass * I, where J is the
    perspective Jacobian at the camera-frame point with x/z, y/z clamped to
    1.3x the half-FOV tangent. Points at or in front of the near plane are
    flagged out of frustum and get NaN means.
    """
    mu = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    cov = np.asarray(cov3d, dtype=np.float64).reshape(-1, 3, 3)
    n = len(mu)
    if source_index is None:
        source_index = np.arange(n, dtype=np.int64)
    R = camera.rotation
    p = mu @ R.T + camera.translation
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs

    mean2d = np.empty((n, 2))
    mean2d[:, 0] = camera.fx * x * inv_z + camera.cx
    mean2d[:, 1] = camera.fy * y * inv_z + camera.cy
    mean2d[~valid] = np.nan

    lim_x = TAN_CLAMP * 0.5 * camera.width / camera.fx
    lim_y = TAN_CLAMP * 0.5 * camera.height / camera.fy
    tx = np.clip(x * inv_z, -lim_x, lim_x) * zs
    ty = np.clip(y * inv_z, -lim_y, lim_y) * zs
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * tx * inv_z * inv_z
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * ty * inv_z * inv_z
    T = J @ R
    cov2d = T @ cov @ np.swapaxes(T, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[~valid] = 0.0
    cov2d[:, 0, 0] += low_pass
    cov2d[:, 1, 1] += low_pass
    return ProjectedBatch(mean2d, cov2d, z.copy(), np.asarray(source_index, dtype=np.int64),
                          valid, p)


def project_gaussian(position, cov3d, camera: Camera, source_index: int = 0,
                     near: float = NEAR_PLANE) -> ProjectedGaussian:
    return project_points(np.asarray(position)[None], np.asarray(cov3d)[None], camera,
                          np.array([source_index]), near=near)[0]


def instance_camera(base: Camera, pose: Pose | np.ndarray) -> Camera:
    """Camera that projects object-local points straight onto ``base``'s image."""
    T = pose.matrix() if isinstance(pose, Pose) else np.asarray(pose, dtype=np.float64)
    return base.with_extrinsics(compose_se3(base.extrinsics, T))


def build_instance_cameras(base: Camera, object_poses: Mapping[int, Pose]) -> dict[int, Camera]:
    return {iid: instance_camera(base, pose) for iid, pose in object_poses.items()}


def default_margin(width: int, height: int) -> float:
    # bounds at 1.3x the image half-extent
    return 0.15 * max(width, height)


def frustum_cull(projected, width: int, height: int, margin: float | None = None) -> np.ndarray:
    """Mask of entries in front of the near plane whose mean lies in the padded image."""
    if margin is None:
        margin = default_margin(width, height)
    if isinstance(projected, ProjectedBatch):
        m, ok = projected.mean2d, projected.in_frustum
    else:
        if len(projected) == 0:
            return np.zeros(0, dtype=bool)
        m = np.array([p.mean2d for p in projected], dtype=np.float64).reshape(-1, 2)
        ok = np.array([p.in_frustum for p in projected], dtype=bool)
    with np.errstate(invalid="ignore"):
        inside = ((m[:, 0] >= -margin) & (m[:, 0] <= width + margin)
                  & (m[:, 1] >= -margin) & (m[:, 1] <= height + margin))
    return ok & inside


def pixel_coords(points, camera: Camera, near: float = 0.01):
    """Rounded pixel coordinates of world points and a mask of points landing in the image."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3) @ camera.rotation.T + camera.translation
    z = p[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    u = np.floor(camera.fx * p[:, 0] / zs + camera.cx + 0.5)
    v = np.floor(camera.fy * p[:, 1] / zs + camera.cy + 0.5)
    inside = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    u = np.where(inside, u, 0).astype(np.int64)
    v = np.where(inside, v, 0).astype(np.int64)
    return u, v, inside
