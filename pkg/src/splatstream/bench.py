"""Scaling benchmark: per-viewpoint render cost versus scene size for the
conventional and streamlined pipelines."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from splatstream.lod import LodConfig
from splatstream.metrics import psnr
from splatstream.raster import MODES, RenderConfig, render_view
from splatstream.scenegen import SceneSpec, generate_scene, scale_spec
from splatstream.tvis import commit_visibility

log = logging.getLogger(__name__)

CSV_HEADER = ["mode", "scale", "gaussians", "per_view_ms", "filter_ms", "project_ms", "lod_ms", "blend_ms"]
STAGES = ("filter", "project", "lod", "blend")
PSNR_GATE = 45.0


@dataclass
class BenchRecord:
    mode: str
    scale: int
    gaussians: int
    per_view_ms: float
    filter_ms: float = 0.0
    project_ms: float = 0.0
    lod_ms: float = 0.0
    blend_ms: float = 0.0
    views: int = 0
    workers: int = 1
    image_hashes: list[str] = field(default_factory=list, repr=False)
    below_resolution: bool = False

    def csv_row(self) -> list:
        return [self.mode, self.scale, self.gaussians, f"{self.per_view_ms:.4f}", f"{self.filter_ms:.4f}",
                f"{self.project_ms:.4f}", f"{self.lod_ms:.4f}", f"{self.blend_ms:.4f}"]


@dataclass
class BenchResult:
    records: list[BenchRecord]
    min_psnr: dict[int, float]  # per scale, conventional vs streamlined (LOD off only)

    def record(self, mode: str, scale: int) -> BenchRecord:
        for r in self.records:
            if r.mode == mode and r.scale == scale:
                return r
        raise KeyError((mode, scale))

    def ratio(self, mode: str) -> float:
        """Median per-view time at the largest scale over that at the smallest."""
        scales = sorted({r.scale for r in self.records if r.mode == mode})
        return self.record(mode, scales[-1]).per_view_ms / self.record(mode, scales[0]).per_view_ms


def image_hash(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes()).hexdigest()[:16]


class _Sweep:
    """Per-view best time (and the stage split of that run) across repeats."""

    def __init__(self, views: int):
        self.best = np.full(views, np.inf)
        self.timings: list[dict] = [{} for _ in range(views)]
        self.images: list = [None] * views

    def run_view(self, scene, k: int, mode: str, config: RenderConfig) -> None:
        cam = scene.cameras[k]
        t0 = time.perf_counter()
        out = render_view(scene, cam.time, mode, config, cam)
        dt = (time.perf_counter() - t0) * 1e3
        if dt < self.best[k]:
            self.best[k], self.timings[k] = dt, out.timings
        self.images[k] = out.image

    def stage(self, name: str) -> float:
        return float(np.median([t.get(name, 0.0) for t in self.timings]))


def run_scaling_benchmark(base_spec: SceneSpec, scales: Sequence[int], modes: Sequence[str] = MODES,
                          lod: LodConfig | None = None, workers: int = 1, repeats: int = 1,
                          psnr_gate: float = PSNR_GATE) -> BenchResult:
    """Render every view of the base spec scaled to each segment count.

    Streamlined mode first runs one untimed sweep that records point life and
    then commits visibility, as in training; the timed sweeps leave it fixed.
    Each repeat renders every (scale, mode, view) job once in a shuffled
    order and each job keeps its fastest run, so a stretch of slow machine
    time is spread over all scales instead of being charged to one. With LOD off the two modes must agree to ``psnr_gate`` dB
    on every view.
    """
    if not scales:
        raise ValueError("scales must be nonempty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for m in modes:
        if m not in MODES:
            raise ValueError(f"unknown mode {m!r}")
    lod_on = lod is not None and lod.enabled
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    config = RenderConfig(lod=lod, workers=workers, update_life=False, compute_depth=False)
    scenes = {}
    for scale in scales:
        scene, _ = generate_scene(scale_spec(base_spec, int(scale)))
        if "streamlined" in modes:
            # conventional mode ignores visibility, so both modes can share the scene
            warm = replace(config, update_life=True)
            for cam in scene.cameras:
                render_view(scene, cam.time, "streamlined", warm, cam)
            for g in scene.all_arrays():
                commit_visibility(g)
        scenes[int(scale)] = scene
    sweeps = {(s, m): _Sweep(len(scenes[s].cameras)) for s in scenes for m in modes}
    jobs = [(s, m, k) for (s, m), sw in sweeps.items() for k in range(len(sw.best))]
    rng = np.random.default_rng(0)
    for _ in range(repeats):
        for j in rng.permutation(len(jobs)):
            scale, mode, k = jobs[j]
            sweeps[scale, mode].run_view(scenes[scale], k, mode, config)

    records, min_psnr = [], {}
    for scale, scene in scenes.items():
        for mode in modes:
            sw = sweeps[scale, mode]
            med = float(np.median(sw.best))
            rec = BenchRecord(mode, scale, scene.gaussian_count, med, *(sw.stage(s) for s in STAGES),
                              views=len(sw.best), workers=workers,
                              image_hashes=[image_hash(im) for im in sw.images])
            if med < 10 * resolution_ms:
                rec.below_resolution = True
                log.warning("scale %s %s: median %.6f ms is near the clock resolution", scale, mode, med)
            records.append(rec)
            log.info("scale %d %-12s N=%d median %.2f ms", scale, mode, rec.gaussians, med)
        if not lod_on and set(modes) == set(MODES):
            worst = min(psnr(a, b) for a, b in zip(sweeps[scale, "conventional"].images,
                                                   sweeps[scale, "streamlined"].images))
            min_psnr[scale] = worst
            if worst < psnr_gate:
                raise RuntimeError(f"scale {scale}: modes disagree (PSNR {worst:.2f} dB < {psnr_gate} dB)")
    return BenchResult(records, min_psnr)


def benchmark_spec(seed: int = 0) -> SceneSpec:
    """Base segment for the scaling benchmark.

    A 60 m facade segment with 12 frames: each view covers roughly a fifth
    of the segment, and the ground starts where the camera can see it, so
    every Gaussian is observed during the warm-up sweep.
    """
    return SceneSpec(seed=seed, frame_count=12, static_density=250.0, street_length=60.0,
                     segment_length=60.0, building_height=8.0, street_width=10.0,
                     ground_near=5.0, image_width=96, image_height=96,
                     focal=96.0, camera_height=2.0)


def write_csv(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow(r.csv_row())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_dat(records: Sequence[BenchRecord], path) -> None:
    """gnuplot-friendly table: one row per scale, one column per mode."""
    modes = [m for m in MODES if any(r.mode == m for r in records)]
    scales = sorted({r.scale for r in records})
    workers = records[0].workers if records else 1
    lines = [f"# workers {workers}", "# scale gaussians " + " ".join(f"{m}_ms" for m in modes)]
    by = {(r.mode, r.scale): r for r in records}
    for s in scales:
        n = next(r.gaussians for r in records if r.scale == s)
        vals = " ".join(f"{by[(m, s)].per_view_ms:.4f}" if (m, s) in by else "nan" for m in modes)
        lines.append(f"{s} {n} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")
