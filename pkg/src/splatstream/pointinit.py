"""Scene initialization from LiDAR: voxel downsampling, semantic labeling by
projection, and BEV-semantic augmentation of tall structures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from splatstream.core import Camera, GaussianArray
from splatstream.project import pixel_coords

UNKNOWN_LABEL = 65535
DEFAULT_VOXEL = 0.15


@dataclass
class SemanticPointCloud:
    points: np.ndarray  # (N, 3) world meters
    labels: np.ndarray  # (N,) class ids, UNKNOWN_LABEL when unlabeled
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.labels) != len(self.points):
            raise ValueError("labels must align with points")
        known = set(self.label_names) | {UNKNOWN_LABEL}
        if self.label_names and not set(np.unique(self.labels).tolist()) <= known:
            raise ValueError("label ids missing from label_names")


def voxel_downsample(points, grid: float = DEFAULT_VOXEL) -> np.ndarray:
    """Centroid of the points in every occupied voxel (index = floor(p / grid))."""
    if grid <= 0:
        raise ValueError("grid must be > 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return pts.copy()
    keys = np.floor(pts / grid).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def label_points(points, semantic_image: np.ndarray, camera: Camera,
                 label_names: dict[int, str] | None = None) -> SemanticPointCloud:
    """Label each point with the semantic id at its rounded pixel; unknown elsewhere."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sem = np.asarray(semantic_image)
    if sem.shape != (camera.height, camera.width):
        raise ValueError(f"semantic image {sem.shape} does not match camera {camera.height}x{camera.width}")
    u, v, inside = pixel_coords(pts, camera)
    labels = np.full(len(pts), UNKNOWN_LABEL, dtype=np.int64)
    labels[inside] = sem[v[inside], u[inside]]
    return SemanticPointCloud(pts, labels, dict(label_names or {}))


def label_points_multi(points, semantic_images: Sequence[np.ndarray], cameras: Sequence[Camera],
                       label_names: dict[int, str] | None = None) -> SemanticPointCloud:
    """First camera in which a point lands (in order) supplies its label."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.full(len(pts), UNKNOWN_LABEL, dtype=np.int64)
    for sem, cam in zip(semantic_images, cameras):
        todo = labels == UNKNOWN_LABEL
        if not todo.any():
            break
        sub = label_points(pts[todo], sem, cam).labels
        labels[np.flatnonzero(todo)] = sub
    return SemanticPointCloud(pts, labels, dict(label_names or {}))


def in_any_frustum(points, cameras: Iterable[Camera]) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    seen = np.zeros(len(pts), dtype=bool)
    for cam in cameras:
        seen |= pixel_coords(pts, cam)[2]
    return seen


def bev_cells(points, bev_grid: float) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not len(pts):
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(np.floor(pts[:, :2] / bev_grid).astype(np.int64), axis=0)


def bev_augment(cloud: SemanticPointCloud, target_labels, bev_grid: float, dz: float, h: float,
                cameras: Sequence[Camera]) -> np.ndarray:
    """Vertical point columns over BEV cells occupied by target-class points.

    Each occupied cell gets points at its center with z in {dz, 2dz, ..., <= h};
    only points that land inside at least one camera image are returned.
    """
    if dz <= 0:
        raise ValueError("dz must be > 0")
    if h < dz:
        raise ValueError("h must be >= dz")
    if bev_grid <= 0:
        raise ValueError("bev_grid must be > 0")
    targets = np.asarray(sorted(target_labels), dtype=np.int64)
    sel = cloud.points[np.isin(cloud.labels, targets)]
    cells = bev_cells(sel, bev_grid)
    if not len(cells):
        return np.zeros((0, 3))
    n_z = int(np.floor(h / dz + 1e-9))
    zs = dz * np.arange(1, n_z + 1)
    centers = (cells + 0.5) * bev_grid
    cols = np.empty((len(cells), n_z, 3))
    cols[:, :, :2] = centers[:, None, :]
    cols[:, :, 2] = zs[None, :]
    cols = cols.reshape(-1, 3)
    return cols[in_any_frustum(cols, cameras)]


def merge(original, augmented) -> np.ndarray:
    a = np.asarray(original, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(augmented, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([a, b], axis=0)


def init_gaussians(points, colors=None, opacity: float = 0.1, min_scale: float = 1e-3) -> GaussianArray:
    """Isotropic Gaussians sized by nearest-neighbor distance, identity rotation."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n > 1:
        dist, _ = cKDTree(pts).query(pts, k=2)
        nn = np.maximum(dist[:, 1], min_scale)
    else:
        nn = np.full(n, 0.1)
    log_s = np.repeat(np.log(nn)[:, None], 3, axis=1)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianArray(pts, log_s, quats, np.full(n, opacity), colors)


def load_label_map(path) -> dict[int, str]:
    """JSON object {"id": "name", ...} or list of {"id": int, "name": str}."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        return {int(k): str(v) for k, v in raw.items()}
    return {int(e["id"]): str(e["name"]) for e in raw}


def resolve_labels(names_or_ids: Iterable[str], label_map: dict[int, str]) -> set[int]:
    by_name = {v: k for k, v in label_map.items()}
    out = set()
    for item in names_or_ids:
        item = item.strip()
        if item in by_name:
            out.add(by_name[item])
        elif item.isdigit():
            out.add(int(item))
        else:
            raise KeyError(f"unknown label {item!r}")
    return out
