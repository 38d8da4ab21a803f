"""Adaptive level of detail: depth-dependent Bernoulli culling of small
projected Gaussians and noisy jitter of the survivors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splatstream.project import ProjectedBatch

MIN_DROP = 1e-2


@dataclass(frozen=True)
class LodConfig:
    r: float = 4.0
    p_max: float = 0.5
    D: float = 50.0
    offset_scale: tuple[float, float, float] = (0.05, 0.05, 0.05)
    rng_seed: int = 0

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("LOD threshold r must be >= 0")
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError("p_max must lie in [0, 1]")
        if self.D <= 0:
            raise ValueError("reference depth D must be > 0")
        object.__setattr__(self, "offset_scale", tuple(float(v) for v in self.offset_scale))

    @property
    def enabled(self) -> bool:
        return self.r > 0


@dataclass
class LodResult:
    large: np.ndarray  # indices into the batch, untouched
    small_kept: np.ndarray  # indices into the batch, jittered
    offsets: np.ndarray  # (len(small_kept), 3)
    culled: int


def scale2d(cov2d) -> np.ndarray | float:
    """3-sigma pixel radius along the major axis: 3 * sqrt(lambda_max)."""
    c = np.asarray(cov2d, dtype=np.float64)
    single = c.ndim == 2
    c = c.reshape(-1, 2, 2)
    a, b, d = c[:, 0, 0], 0.5 * (c[:, 0, 1] + c[:, 1, 0]), c[:, 1, 1]
    if np.any(np.abs(c[:, 0, 1] - c[:, 1, 0]) > 1e-9 * (1 + np.abs(b))):
        raise ValueError("cov2d must be symmetric")
    mid = 0.5 * (a + d)
    disc = np.sqrt(np.maximum(0.25 * (a - d) ** 2 + b * b, 0.0))
    lmin, lmax = mid - disc, mid + disc
    if np.any(lmin < -1e-9 * np.maximum(1.0, lmax)):
        raise ValueError("cov2d must be positive semi-definite")
    out = 3.0 * np.sqrt(np.maximum(lmax, 0.0))
    return float(out[0]) if single else out


def drop_probability(d, cfg: LodConfig):
    """p = p_max + (p_max - 0.01) * min(0, (d - D) / D), clamped to [0, 1].

    Evaluated as 0.01 + (p_max - 0.01) * d / D below D and p_max beyond, an
    algebraically identical form that is exact at both ends.
    """
    d = np.asarray(d, dtype=np.float64)
    p = np.where(d >= cfg.D, cfg.p_max, MIN_DROP + (cfg.p_max - MIN_DROP) * (d / cfg.D))
    p = np.clip(p, 0.0, 1.0)
    return float(p) if p.ndim == 0 else p


def lod_rng(cfg: LodConfig, t: float) -> np.random.Generator:
    """One stream per render call, keyed by (seed, exact bits of t)."""
    key = int(np.float64(t).view(np.uint64))
    return np.random.default_rng(np.random.SeedSequence([cfg.rng_seed & (2**64 - 1), key]))


def apply_lod(projected: ProjectedBatch, cfg: LodConfig, rng: np.random.Generator) -> LodResult:
    n = len(projected)
    if not cfg.enabled or n == 0:
        return LodResult(np.arange(n), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), 0)
    small = scale2d(projected.cov2d) <= cfg.r
    large_idx = np.flatnonzero(~small)
    small_idx = np.flatnonzero(small)
    depth = projected.depth[small_idx]
    p = drop_probability(depth, cfg)
    keep = rng.random(len(small_idx)) >= p
    kept = small_idx[keep]
    d_max = float(projected.depth.max())
    norm_d = np.clip(projected.depth[kept] / d_max, 0.0, 1.0) if d_max > 0 else np.zeros(len(kept))
    noise = rng.standard_normal((len(kept), 3))
    offsets = np.asarray(cfg.offset_scale) * norm_d[:, None] * noise
    return LodResult(large_idx, kept, offsets, int(len(small_idx) - len(kept)))
