"""Temporal separation: per-Gaussian visibility intervals maintained from
observed frustum membership (point life)."""

from __future__ import annotations

import numpy as np

from splatstream.core import FRESH_LIFE, GaussianArray

COMMIT_MARGIN = 0.1
DEFAULT_RESET_PERIOD = 30


def _f32_down(x: np.ndarray) -> np.ndarray:
    y = x.astype(np.float32)
    over = y.astype(np.float64) > x
    y[over] = np.nextafter(y[over], np.float32(-np.inf))
    return y


def _f32_up(x: np.ndarray) -> np.ndarray:
    y = x.astype(np.float32)
    under = y.astype(np.float64) < x
    y[under] = np.nextafter(y[under], np.float32(np.inf))
    return y


def filter_visible(gaussians: GaussianArray, t: float) -> np.ndarray:
    """Indices whose visibility interval contains ``t`` (compared in float64)."""
    t = np.float64(t)
    v = gaussians.visibility
    return np.flatnonzero((v[:, 0] <= t) & (v[:, 1] >= t))


def update_point_life(gaussians: GaussianArray, mask, t: float, indices=None) -> None:
    """Widen the life interval of every masked Gaussian to include ``t``.

    With ``indices`` (the :func:`filter_visible` output) the mask is aligned with
    them; otherwise it is aligned with the whole array. Stored bounds are
    rounded outward so the float32 interval always contains ``t``.
    """
    mask = np.asarray(mask, dtype=bool)
    expected = len(gaussians) if indices is None else len(indices)
    if mask.shape != (expected,):
        raise ValueError(f"mask length {mask.shape} does not match {expected} presented Gaussians")
    sel = np.flatnonzero(mask) if indices is None else np.asarray(indices)[mask]
    if not len(sel):
        return
    t64 = np.array([t], dtype=np.float64)
    lo, hi = _f32_down(t64)[0], _f32_up(t64)[0]
    life = gaussians.life
    life[sel, 0] = np.minimum(life[sel, 0], lo)
    life[sel, 1] = np.maximum(life[sel, 1], hi)


def commit_visibility(gaussians: GaussianArray, margin: float = COMMIT_MARGIN) -> None:
    """Set visibility from point life with a margin, then reset life.

    Never-observed Gaussians (empty life) become visible at all times.
    """
    life = gaussians.life.astype(np.float64)
    observed = life[:, 0] <= life[:, 1]
    vs = np.where(observed, np.maximum(-1.0, life[:, 0] - margin), -1.0)
    ve = np.where(observed, np.minimum(1.0, life[:, 1] + margin), 1.0)
    gaussians.visibility[:, 0] = _f32_down(vs)
    gaussians.visibility[:, 1] = _f32_up(ve)
    gaussians.life[:] = FRESH_LIFE


def reset_visibility(gaussians: GaussianArray) -> None:
    gaussians.visibility[:, 0] = -1.0
    gaussians.visibility[:, 1] = 1.0


class VisibilitySchedule:
    """Commit bookkeeping with a periodic full reset.

    Every ``reset_period``-th cycle resets visibility to the full range instead
    of committing (life is still cleared).
    """

    def __init__(self, reset_period: int = DEFAULT_RESET_PERIOD, margin: float = COMMIT_MARGIN):
        if reset_period < 1:
            raise ValueError("reset_period must be >= 1")
        self.reset_period = reset_period
        self.margin = margin
        self.cycles = 0

    def end_sweep(self, arrays) -> bool:
        """Close a training sweep over ``arrays``; returns True if this was a reset cycle."""
        self.cycles += 1
        reset = self.cycles % self.reset_period == 0
        for g in arrays:
            if reset:
                reset_visibility(g)
                g.life[:] = FRESH_LIFE
            else:
                commit_visibility(g, self.margin)
        return reset
