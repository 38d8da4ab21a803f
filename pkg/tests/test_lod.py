import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatstream.lod import LodConfig, apply_lod, drop_probability, lod_rng, scale2d
from splatstream.project import ProjectedBatch


def _batch(depths, radius_px):
    n = len(depths)
    var = (np.asarray(radius_px, dtype=float) / 3.0) ** 2 * np.ones(n)
    cov = np.zeros((n, 2, 2))
    cov[:, 0, 0] = cov[:, 1, 1] = var
    return ProjectedBatch(np.zeros((n, 2)), cov, np.asarray(depths, dtype=float), np.arange(n),
                          np.ones(n, dtype=bool), np.zeros((n, 3)))


def test_scale2d_examples():
    assert scale2d(np.eye(2)) == 3.0
    assert scale2d(np.diag([4.0, 1.0])) == 6.0


def test_scale2d_matches_eigen_oracle():
    rng = np.random.default_rng(6)
    A = rng.normal(size=(500, 2, 2))
    cov = A @ np.swapaxes(A, 1, 2)
    expected = 3 * np.sqrt(np.linalg.eigvalsh(cov)[:, -1])
    assert np.abs(scale2d(cov) - expected).max() < 1e-9


def test_scale2d_rejects_invalid():
    with pytest.raises(ValueError):
        scale2d(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        scale2d(np.diag([1.0, -1.0]))


def test_drop_probability_values():
    cfg = LodConfig(p_max=0.5, D=50)
    assert drop_probability(50.0, cfg) == 0.5
    assert drop_probability(0.0, cfg) == 0.01
    assert drop_probability(25.0, cfg) == pytest.approx(0.255)
    assert drop_probability(500.0, cfg) == 0.5


def test_drop_probability_below_floor_interpolates():
    cfg = LodConfig(p_max=0.0, D=10.0)
    assert drop_probability(0.0, cfg) == pytest.approx(0.01)
    assert drop_probability(5.0, cfg) == pytest.approx(0.005)
    assert drop_probability(20.0, cfg) == 0.0


@given(st.floats(0.01, 1), st.floats(1, 200), st.floats(0, 1000), st.floats(0, 1000))
def test_drop_probability_monotone(p_max, D, d1, d2):
    cfg = LodConfig(p_max=p_max, D=D)
    lo, hi = sorted((d1, d2))
    assert drop_probability(lo, cfg) <= drop_probability(hi, cfg) + 1e-15
    if lo >= D:
        assert drop_probability(lo, cfg) == pytest.approx(p_max)


def test_config_validation():
    for kw in ({"r": -1}, {"p_max": 1.5}, {"D": 0}):
        with pytest.raises(ValueError):
            LodConfig(**kw)


def test_disabled_is_identity():
    b = _batch(np.linspace(1, 100, 50), 1.0)
    res = apply_lod(b, LodConfig(r=0), np.random.default_rng(0))
    assert res.large.tolist() == list(range(50)) and len(res.small_kept) == 0 and res.culled == 0


def test_large_never_touched():
    depths = np.linspace(1, 100, 200)
    radius = np.where(np.arange(200) % 2 == 0, 10.0, 1.0)
    b = _batch(depths, 1.0)
    b.cov2d[:, 0, 0] = b.cov2d[:, 1, 1] = (radius / 3) ** 2
    res = apply_lod(b, LodConfig(r=4.0, p_max=1.0, D=1.0), np.random.default_rng(1))
    assert res.large.tolist() == list(range(0, 200, 2))
    assert set(res.small_kept.tolist()) <= set(range(1, 200, 2))


@pytest.mark.parametrize("depth", [0.0, 25.0, 50.0])
def test_keep_rate_binomial(depth):
    cfg = LodConfig(r=4.0, p_max=0.5, D=50.0)
    n = 10_000
    res = apply_lod(_batch(np.full(n, depth), 1.0), cfg, lod_rng(cfg, 0.25))
    p = drop_probability(depth, cfg)
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(len(res.small_kept) - n * (1 - p)) <= 3 * sigma


def test_zero_offset_scale():
    cfg = LodConfig(offset_scale=(0, 0, 0))
    res = apply_lod(_batch(np.linspace(1, 60, 100), 1.0), cfg, lod_rng(cfg, 0.0))
    assert len(res.small_kept) > 0 and np.all(res.offsets == 0)


def test_offsets_scale_with_depth():
    cfg = LodConfig(p_max=0.0, offset_scale=(1.0, 2.0, 3.0))
    depths = np.r_[np.full(5000, 10.0), np.full(5000, 100.0)]
    res = apply_lod(_batch(depths, 1.0), cfg, lod_rng(cfg, 0.0))
    near = res.offsets[depths[res.small_kept] == 10.0]
    far = res.offsets[depths[res.small_kept] == 100.0]
    assert np.allclose(far.std(axis=0), [1, 2, 3], rtol=0.1)
    assert np.allclose(near.std(axis=0), [0.1, 0.2, 0.3], rtol=0.1)


def test_deterministic_per_seed_and_time():
    cfg = LodConfig()
    b = _batch(np.linspace(1, 100, 1000), 1.0)
    r1 = apply_lod(b, cfg, lod_rng(cfg, 0.3))
    r2 = apply_lod(b, cfg, lod_rng(cfg, 0.3))
    r3 = apply_lod(b, cfg, lod_rng(cfg, 0.30000000000000004))
    assert np.array_equal(r1.small_kept, r2.small_kept) and np.array_equal(r1.offsets, r2.offsets)
    assert not np.array_equal(r1.small_kept, r3.small_kept)
