"""Tile-binned front-to-back alpha blending and the two render pipelines.

``conventional``: transform object Gaussians to world, project everything,
frustum-cull, blend.

``streamlined``: temporal-visibility filter, instance-specific projection,
frustum-cull, adaptive LOD, color query, blend, point-life update.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from splatstream.core import Camera, GaussianArray, SceneModel, time_to_frame
from splatstream.field import FieldInputs, FieldParams, field_query
from splatstream.lod import LodConfig, apply_lod, lod_rng
from splatstream.project import (NEAR_PLANE, ProjectedBatch, frustum_cull, instance_camera,
                                 project_points)
from splatstream.tvis import filter_visible, update_point_life

ALPHA_MAX = 0.99
T_MIN = 1e-4
CONTRIB_MIN = 1e-4
DET_MIN = 1e-12
BAND_ROWS = 4  # tile rows per compositing chunk
MODES = ("conventional", "streamlined")


@dataclass
class SplatBatch:
    """Projected, frustum-passed splats ready for compositing."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    source_index: np.ndarray

    def __len__(self) -> int:
        return len(self.depth)


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3)
    depth_map: np.ndarray | None
    frustum_mask: np.ndarray
    contributed_mask: np.ndarray
    stats: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)  # milliseconds per stage


@dataclass
class RenderConfig:
    lod: LodConfig | None = None
    tile: int = 16
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = NEAR_PLANE
    margin: float | None = None
    workers: int = 1
    update_life: bool = True
    life_mask: str = "frustum"  # or "contributed"
    compute_depth: bool = True
    static_field: FieldParams | None = None
    dynamic_field: FieldParams | None = None
    classes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.life_mask not in ("frustum", "contributed"):
            raise ValueError(f"unknown life_mask {self.life_mask!r}")
        if self.tile < 1:
            raise ValueError("tile size must be >= 1")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SPLATSTREAM_WORKERS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------
# compositing


def _tile_pairs(x0, x1, y0, y1, tile, ntx):
    """Enumerate (splat, tile) overlaps of pixel-space bounding boxes."""
    tx0, tx1, ty0, ty1 = x0 // tile, x1 // tile, y0 // tile, y1 // tile
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    sid = np.repeat(np.arange(len(x0)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[sid] + local % nx[sid]
    ty = ty0[sid] + local // nx[sid]
    return sid, ty * ntx + tx, tx, ty


def _fragments(sid, tx, ty, x0, x1, y0, y1, tile):
    px0 = np.maximum(x0[sid], tx * tile)
    px1 = np.minimum(x1[sid], tx * tile + tile - 1)
    py0 = np.maximum(y0[sid], ty * tile)
    py1 = np.minimum(y1[sid], ty * tile + tile - 1)
    w, h = px1 - px0 + 1, py1 - py0 + 1
    counts = w * h
    rep = np.repeat(np.arange(len(sid)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = px0[rep] + local % w[rep]
    py = py0[rep] + local // w[rep]
    return sid[rep], px, py


def _composite(fsid, px, py, splats, conic, width, height, compute_depth):
    # fragments arrive in global (depth, source) order, so a stable sort on
    # the pixel index alone yields per-pixel front-to-back sequences
    n_pix = width * height
    m = splats.mean2d
    dx = m[fsid, 0] - px
    dy = m[fsid, 1] - py
    power = -0.5 * (conic[fsid, 0] * dx * dx + conic[fsid, 2] * dy * dy) - conic[fsid, 1] * dx * dy
    alpha = np.minimum(ALPHA_MAX, splats.opacities[fsid] * np.exp(np.minimum(power, 0.0)))
    pix = py * width + px
    key = pix.astype(np.uint16) if n_pix <= 1 << 16 else pix  # uint16 keys take the radix path
    order = np.argsort(key, kind="stable")
    pix, fsid, alpha = pix[order], fsid[order], alpha[order]

    logt = np.log1p(-alpha)
    cum = np.cumsum(logt)
    starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    lengths = np.diff(np.r_[starts, len(pix)])
    base = np.repeat(np.r_[0.0, cum][starts], lengths)
    t_before = np.exp(cum - logt - base)
    t_after = t_before * (1.0 - alpha)
    included = t_after >= T_MIN
    weight = np.where(included, alpha * t_before, 0.0)

    color = np.stack([np.bincount(pix, weight * splats.colors[fsid, k], minlength=n_pix)
                      for k in range(3)], axis=1)
    depth = np.bincount(pix, weight * splats.depth[fsid], minlength=n_pix) if compute_depth else None
    log_final = np.bincount(pix, np.where(included, logt, 0.0), minlength=n_pix)
    contributed = np.zeros(len(splats), dtype=bool)
    contributed[fsid[weight > CONTRIB_MIN]] = True
    blended = np.zeros(len(splats), dtype=bool)
    blended[fsid[weight > 0]] = True
    return color, depth, log_final, contributed, blended


def blend(splats: SplatBatch, width: int, height: int, tile: int = 16, n_sources: int | None = None,
          background=(0.0, 0.0, 0.0), workers: int = 1, compute_depth: bool = True) -> RenderOutput:
    """Front-to-back alpha compositing of ``splats`` onto a width x height image.

    Splats are globally ordered by (depth, source_index) and binned into
    ``tile`` x ``tile`` pixel tiles by their 3-sigma bounding boxes; each pixel
    blends every overlapping splat with alpha = min(0.99, o * exp(-0.5 d^T S^-1 d))
    and stops before transmittance would drop below 1e-4. Pixel centers sit at
    integer coordinates.
    """
    n = len(splats)
    if n_sources is None:
        n_sources = int(splats.source_index.max()) + 1 if n else 0
    n_pix = width * height
    color = np.zeros((n_pix, 3))
    depth = np.zeros(n_pix) if compute_depth else None
    log_final = np.zeros(n_pix)
    frustum_mask = np.zeros(n_sources, dtype=bool)
    contributed_mask = np.zeros(n_sources, dtype=bool)
    frustum_mask[splats.source_index] = True
    stats = {"splats": n, "singular": 0, "blended": 0, "fragments": 0}

    if n:
        c = splats.cov2d
        a, b, d = c[:, 0, 0], c[:, 0, 1], c[:, 1, 1]
        det = a * d - b * b
        ok = det >= DET_MIN
        stats["singular"] = int(n - ok.sum())
        det_safe = np.where(ok, det, 1.0)
        conic = np.stack([d / det_safe, -b / det_safe, a / det_safe], axis=1)
        mid = 0.5 * (a + d)
        lmax = mid + np.sqrt(np.maximum(mid * mid - det, 0.1))
        radius = np.ceil(3.0 * np.sqrt(lmax))
        mx, my = splats.mean2d[:, 0], splats.mean2d[:, 1]
        with np.errstate(invalid="ignore"):
            x0 = np.maximum(0, np.ceil(mx - radius))
            x1 = np.minimum(width - 1, np.floor(mx + radius))
            y0 = np.maximum(0, np.ceil(my - radius))
            y1 = np.minimum(height - 1, np.floor(my + radius))
            ok &= (x0 <= x1) & (y0 <= y1) & np.isfinite(mx) & np.isfinite(my)
        order = np.lexsort((splats.source_index, splats.depth))
        keep = order[ok[order]]  # front-to-back
        x0, x1, y0, y1 = (v[keep].astype(np.int64) for v in (x0, x1, y0, y1))
        ntx = (width + tile - 1) // tile
        psid, _, tx, ty = _tile_pairs(x0, x1, y0, y1, tile, ntx)
        psid = keep[psid]

        bounds = _full_bounds(keep, x0, x1, y0, y1, n)

        def run(sel):
            fsid, px, py = _fragments(psid[sel], tx[sel], ty[sel], *bounds, tile)
            return len(fsid), _composite(fsid, px, py, splats, conic, width, height, compute_depth)

        # the chunking is fixed by geometry, never by worker count, so the
        # floating-point reduction order and hence the image are identical
        chunks = _bands(ty, BAND_ROWS)
        workers = max(1, int(workers))
        if workers == 1 or len(chunks) == 1:
            results = [run(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run, chunks))
        blended = np.zeros(n, dtype=bool)
        for nf, (ccol, cdep, clog, contrib, bl) in results:
            stats["fragments"] += nf
            color += ccol
            if compute_depth:
                depth += cdep
            log_final += clog
            contributed_mask[splats.source_index[contrib]] = True
            blended |= bl
        stats["blended"] = int(blended.sum())

    color += np.exp(log_final)[:, None] * np.asarray(background, dtype=np.float64)
    image = np.clip(color, 0.0, 1.0).reshape(height, width, 3)
    return RenderOutput(image, None if depth is None else depth.reshape(height, width),
                        frustum_mask, contributed_mask, stats)


def _full_bounds(keep, x0, x1, y0, y1, n):
    out = []
    for v in (x0, x1, y0, y1):
        full = np.zeros(n, dtype=np.int64)
        full[keep] = v
        out.append(full)
    return out


def _bands(ty: np.ndarray, rows: int) -> list[np.ndarray]:
    """Split (splat, tile) pairs into horizontal bands of ``rows`` tile rows."""
    band = ty // rows
    order = np.argsort(band, kind="stable")
    cuts = np.flatnonzero(np.diff(band[order])) + 1
    return np.split(order, cuts) if len(order) else [order]


# --------------------------------------------------------------------------
# pipelines


@dataclass
class _Group:
    instance_id: int | None
    gaussians: GaussianArray
    offset: int
    camera: Camera
    rotation: np.ndarray  # world->camera rotation seen by this group's local frame


class _StageClock:
    def __init__(self):
        self.ms: dict[str, float] = {}
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.ms[stage] = self.ms.get(stage, 0.0) + (now - self._t) * 1e3
        self._t = now


def _query_colors(groups: list[_Group], gid: np.ndarray, local_idx: np.ndarray,
                  positions: np.ndarray, projected: ProjectedBatch, t: float,
                  scene: SceneModel, config: RenderConfig) -> np.ndarray:
    colors = np.empty((len(gid), 3))
    for k in np.unique(gid):
        rows = np.flatnonzero(gid == k)
        g = groups[k]
        c = g.gaussians.colors[local_idx[rows]].astype(np.float64)
        need = np.flatnonzero(np.isnan(c).any(axis=1))
        if len(need):
            params = config.static_field if g.instance_id is None else config.dynamic_field
            if params is None:
                raise ValueError("scene has field-colored Gaussians but no field was configured")
            r = rows[need]
            pc = projected.cam_points[r]
            dirs = (pc / np.linalg.norm(pc, axis=1, keepdims=True)) @ g.rotation
            frame = np.clip(time_to_frame(t, scene.frame_count), 0, len(params.time_emb) - 1)
            classes = None
            if g.instance_id is not None:
                label = scene.tracks[g.instance_id].class_label
                classes = np.full(len(r), config.classes.index(label))
            x = FieldInputs(positions[r], projected.depth[r], dirs, np.full(len(r), frame), classes)
            c[need] = field_query(params, x)
        colors[rows] = c
    return colors


def render_view(scene: SceneModel, t: float, mode: str = "streamlined",
                config: RenderConfig | None = None, camera: Camera | None = None) -> RenderOutput:
    """Render the scene at normalized time ``t`` with either pipeline.

    In streamlined mode with ``config.update_life`` the point life of every
    Gaussian that passed the frustum test (or contributed, per
    ``config.life_mask``) is widened to include ``t``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown render mode {mode!r}")
    if not -1.0 <= t <= 1.0:
        raise ValueError(f"time {t} outside [-1, 1]")
    config = config or RenderConfig()
    cam = camera if camera is not None else scene.camera_at(t)
    for iid in scene.dynamic_gaussians:
        if iid not in scene.tracks:
            raise KeyError(f"unknown instance id {iid}: no track")
    n_total = scene.gaussian_count
    clock = _StageClock()
    streamlined = mode == "streamlined"

    # filter (streamlined only) and per-group camera setup
    groups: list[_Group] = []
    selections: list[np.ndarray | None] = []
    for iid, g, off in scene.groups():
        if len(g) == 0:
            continue
        sel = filter_visible(g, t) if streamlined else None
        if sel is not None and len(sel) == 0:
            continue
        if iid is None:
            groups.append(_Group(None, g, off, cam, cam.rotation))
        else:
            pose = scene.tracks[iid].pose_at(t)
            if pose is None:
                continue
            T = pose.matrix()
            if streamlined:
                gcam = instance_camera(cam, T)
                groups.append(_Group(iid, g, off, gcam, gcam.rotation))
            else:
                groups.append(_Group(iid, g, off, cam, cam.rotation @ T[:3, :3]))
        selections.append(sel)
    if streamlined:
        clock.lap("filter")

    # project + cull
    parts, gids, locals_, positions = [], [], [], []
    for k, (grp, sel) in enumerate(zip(groups, selections)):
        g = grp.gaussians
        idx = np.arange(len(g)) if sel is None else sel
        pos = g.positions[idx].astype(np.float64)
        cov = g.covariances(idx)
        world_pos, world_cov = pos, cov
        if not streamlined and grp.instance_id is not None:
            T = scene.tracks[grp.instance_id].pose_at(t).matrix()
            R = T[:3, :3]
            world_pos = pos @ R.T + T[:3, 3]
            world_cov = R @ cov @ R.T
        parts.append(project_points(world_pos, world_cov, grp.camera, grp.offset + idx, near=config.near))
        gids.append(np.full(len(idx), k))
        locals_.append(idx)
        positions.append(pos)
    projected = ProjectedBatch.concatenate(parts)
    gid = np.concatenate(gids) if gids else np.zeros(0, dtype=np.int64)
    local_idx = np.concatenate(locals_) if locals_ else np.zeros(0, dtype=np.int64)
    own_pos = np.concatenate(positions) if positions else np.zeros((0, 3))
    in_view = frustum_cull(projected, cam.width, cam.height, config.margin)
    frustum_rows = np.flatnonzero(in_view)
    clock.lap("project")

    stats = {"projected": len(projected), "frustum": int(len(frustum_rows)), "lod_culled": 0}
    rows = frustum_rows
    vis = projected.take(rows)
    vis_pos = own_pos[rows]
    vis_gid = gid[rows]
    if streamlined and config.lod is not None and config.lod.enabled:
        res = apply_lod(vis, config.lod, lod_rng(config.lod, t))
        stats["lod_culled"] = res.culled
        if len(res.small_kept):
            jpos = vis_pos[res.small_kept] + res.offsets
            jit = []
            for k in np.unique(vis_gid[res.small_kept]):
                sub = np.flatnonzero(vis_gid[res.small_kept] == k)
                r = res.small_kept[sub]
                jit.append((sub, project_points(jpos[sub], _cov_rows(groups[k], local_idx[rows[r]]),
                                                groups[k].camera, vis.source_index[r], near=config.near)))
            order_rows = np.concatenate([res.large, res.small_kept])
            new_vis = vis.take(order_rows)
            n_large = len(res.large)
            for sub, pb in jit:
                dst = n_large + sub
                new_vis.mean2d[dst], new_vis.cov2d[dst] = pb.mean2d, pb.cov2d
                new_vis.depth[dst], new_vis.cam_points[dst] = pb.depth, pb.cam_points
                new_vis.in_frustum[dst] = pb.in_frustum
            vis_pos = np.concatenate([vis_pos[res.large], jpos])
            rows = rows[order_rows]
            vis = new_vis
            valid = vis.in_frustum
            vis, vis_pos, rows = vis.take(valid), vis_pos[valid], rows[valid]
        else:
            rows, vis, vis_pos = rows[res.large], vis.take(res.large), vis_pos[res.large]
        vis_gid = gid[rows]
    clock.lap("lod")

    colors = _query_colors(groups, vis_gid, local_idx[rows], vis_pos, vis, t, scene, config)
    opac = np.empty(len(rows))
    for k in np.unique(vis_gid):
        sel = vis_gid == k
        opac[sel] = groups[k].gaussians.opacities[local_idx[rows[sel]]]
    splats = SplatBatch(vis.mean2d, vis.cov2d, vis.depth, colors, opac, vis.source_index)
    out = blend(splats, cam.width, cam.height, config.tile, n_total, config.background,
                config.workers, config.compute_depth)
    frustum_mask = np.zeros(n_total, dtype=bool)
    frustum_mask[projected.source_index[frustum_rows]] = True
    out.frustum_mask = frustum_mask
    clock.lap("blend")

    if streamlined and config.update_life:
        life_mask = out.frustum_mask if config.life_mask == "frustum" else out.contributed_mask
        for grp, sel in zip(groups, selections):
            update_point_life(grp.gaussians, life_mask[grp.offset + sel], t, sel)
        clock.lap("filter")

    stats.update(blended=out.stats["blended"], singular=out.stats["singular"],
                 fragments=out.stats["fragments"], total=n_total, mode=mode)
    out.stats = stats
    out.timings = clock.ms
    return out


def _cov_rows(group: _Group, idx: np.ndarray) -> np.ndarray:
    return group.gaussians.covariances(idx)


def render_sequence(scene: SceneModel, times: Sequence[float], mode: str,
                    config: RenderConfig | None = None) -> list[RenderOutput]:
    return [render_view(scene, t, mode, config) for t in times]
