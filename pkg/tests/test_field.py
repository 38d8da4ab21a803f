import numpy as np
import pytest

from splatstream.field import (DIR_FREQS, EMB_DIM, POS_FREQS, FieldInputs, _forward, field_forward,
                               field_gradient, field_loss, field_query, fit_field, init_field,
                               load_field, save_field)

H = 1e-4


def _inputs(rng, n, frames=4, classes=None):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    cls = None if classes is None else rng.integers(0, classes, n)
    return FieldInputs(rng.uniform(-1, 1, (n, 3)), rng.uniform(1, 50, n), dirs,
                       rng.uniform(0, frames - 1, n), cls)


def _naive_forward(p, pos, depth, direction, t, cls=None):
    """Single-sample forward with explicit loops over frequencies."""
    def enc(v, L):
        out = list(v)
        out += [np.sin(2.0 ** k * np.pi * v[i]) for k in range(L) for i in range(3)]
        out += [np.cos(2.0 ** k * np.pi * v[i]) for k in range(L) for i in range(3)]
        return out
    i0 = min(int(np.floor(t)), len(p.time_emb) - 1)
    i1 = min(i0 + 1, len(p.time_emb) - 1)
    f = t - i0
    x = enc(np.asarray(pos) / p.pos_scale, POS_FREQS) + [depth / p.depth_scale] + enc(direction, DIR_FREQS)
    x += list((1 - f) * p.time_emb[i0] + f * p.time_emb[i1])
    if cls is not None:
        x += list(p.class_emb[cls])
    h = np.array(x)
    for W, b in ((p.W1, p.b1), (p.W2, p.b2)):
        h = np.array([max(0.0, sum(h[i] * W[i, j] for i in range(len(h))) + b[j]) for j in range(W.shape[1])])
    z = np.array([sum(h[i] * p.W3[i, j] for i in range(len(h))) + p.b3[j] for j in range(3)])
    return 1 / (1 + np.exp(-z))


def test_zero_weights_give_half_gray():
    p = init_field(3).map(np.zeros_like)
    rng = np.random.default_rng(0)
    assert np.array_equal(field_query(p, _inputs(rng, 10, 3)), np.full((10, 3), 0.5))


def test_forward_deterministic_and_bounded():
    rng = np.random.default_rng(1)
    p, x = init_field(4, seed=3), _inputs(rng, 50)
    a, b = field_query(p, x), field_query(p, x)
    assert np.array_equal(a, b)
    assert np.all((a > 0) & (a < 1))


@pytest.mark.parametrize("dynamic", [False, True])
def test_forward_matches_naive_oracle(dynamic):
    rng = np.random.default_rng(2)
    p = init_field(5, n_classes=3 if dynamic else None, depth_scale=40.0, pos_scale=2.0, seed=4)
    p = p.map(lambda t: t + rng.normal(0, 0.3, t.shape))
    x = _inputs(rng, 6, 5, 3 if dynamic else None)
    got = field_query(p, x)
    for i in range(len(x)):
        cls = None if x.classes is None else int(x.classes[i])
        ref = _naive_forward(p, x.positions[i], x.depths[i], x.directions[i], x.times[i], cls)
        assert np.abs(got[i] - ref).max() < 1e-6
    single = field_forward(p, x.positions[0], x.depths[0], x.directions[0], 2,
                           None if x.classes is None else int(x.classes[0]))
    assert single.shape == (3,)


def test_index_errors():
    p = init_field(3, n_classes=2)
    with pytest.raises(IndexError):
        field_forward(p, [0, 0, 0], 1.0, [1, 0, 0], 3, 0)
    with pytest.raises(IndexError):
        field_forward(p, [0, 0, 0], 1.0, [1, 0, 0], 0, 2)
    with pytest.raises(ValueError):
        field_forward(p, [0, 0, 0], 1.0, [1, 0, 0], 0)


def _pattern(p, x):
    _, (_, z1, _, z2, _, _) = _forward(p, x)
    return z1 > 0, z2 > 0


def fd_check(p, x, y, rng, per_tensor=None):
    """Worst relative error between analytic and central-difference gradients.

    Components whose +/-h evaluations straddle a ReLU kink are skipped: the
    loss is not differentiable there and the difference quotient is meaningless.
    """
    _, g = field_gradient(p, x, y)
    flat, gflat = p.flat(), g.flat()
    idx = np.arange(len(flat))
    if per_tensor is not None:
        idx, k = [], 0
        for t in p.tensors():
            idx += list(k + rng.choice(t.size, min(per_tensor, t.size), replace=False))
            k += t.size
    worst, checked = 0.0, 0
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = H
        pp, pm = p.with_flat(flat + e), p.with_flat(flat - e)
        ap, am = _pattern(pp, x), _pattern(pm, x)
        if not all(np.array_equal(a, b) for a, b in zip(ap, am)):
            continue
        fd = (field_loss(pp, x, y) - field_loss(pm, x, y)) / (2 * H)
        denom = max(abs(fd), abs(gflat[i]), 1e-3)
        worst = max(worst, abs(fd - gflat[i]) / denom)
        checked += 1
    return worst, checked


def test_gradient_matches_finite_differences_every_component():
    rng = np.random.default_rng(5)
    p = init_field(3, n_classes=2, depth_scale=50.0, seed=1)
    x = _inputs(rng, 6, 3, 2)
    worst, checked = fd_check(p, x, rng.uniform(0, 1, (6, 3)), rng)
    assert checked > 0.99 * len(p.flat())
    assert worst < 1e-4


def test_gradient_zero_at_exact_fit():
    rng = np.random.default_rng(6)
    p, x = init_field(3, seed=2), _inputs(rng, 20, 3)
    _, g = field_gradient(p, x, field_query(p, x))
    assert np.linalg.norm(g.flat()) < 1e-10


def test_gradient_invariant_to_duplication():
    rng = np.random.default_rng(7)
    p, x = init_field(3, seed=2), _inputs(rng, 15, 3)
    y = rng.uniform(0, 1, (15, 3))
    idx = np.r_[np.arange(15), np.arange(15)]
    l1, g1 = field_gradient(p, x, y)
    l2, g2 = field_gradient(p, x.take(idx), y[idx])
    assert abs(l1 - l2) < 1e-12
    assert np.abs(g1.flat() - g2.flat()).max() < 1e-12


def test_empty_batch_rejected():
    p = init_field(2)
    x = FieldInputs(np.zeros((0, 3)), [], np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        field_gradient(p, x, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        fit_field(p, x, np.zeros((0, 3)), 0.1, 1)


def test_zero_learning_rate_is_noop():
    rng = np.random.default_rng(8)
    p, x = init_field(3, seed=2), _inputs(rng, 10, 3)
    q, losses = fit_field(p, x, rng.uniform(0, 1, (10, 3)), 0.0, 5)
    assert np.array_equal(q.flat(), p.flat())
    assert len(set(losses)) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_raises():
    rng = np.random.default_rng(9)
    p, x = init_field(3, seed=2), _inputs(rng, 10, 3)
    with pytest.raises(FloatingPointError):
        fit_field(p, x, rng.uniform(0, 1, (10, 3)), 1e200, 5)


def _fit_data(seed=0, n=256):
    rng = np.random.default_rng(seed)
    return _inputs(rng, n, 4), init_field(4, depth_scale=50.0, seed=seed)


@pytest.mark.slow
def test_constant_color_fit():
    x, p = _fit_data()
    _, losses = fit_field(p, x, np.tile([0.2, 0.6, 0.9], (len(x), 1)), 2.0, 2000)
    assert losses[-1] < 1e-4


@pytest.mark.slow
def test_depth_ramp_fit():
    x, p = _fit_data()
    s = x.depths / 50.0
    y = np.stack([0.1 + 0.8 * s, 0.9 - 0.8 * s, np.full(len(x), 0.5)], axis=1)
    _, losses = fit_field(p, x, y, 0.5, 2000)
    assert losses[-1] < 1e-3
    # smoothed trace decreases
    w = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert w[-1] < w[0]


def test_save_load_roundtrip(tmp_path):
    p = init_field(3, n_classes=2, depth_scale=12.5, seed=3)
    save_field(p, tmp_path / "dyn")
    q = load_field(tmp_path / "dyn")
    assert q.is_dynamic and q.depth_scale == 12.5
    assert np.array_equal(q.flat(), p.flat().astype(np.float32).astype(np.float64))
    (tmp_path / "dyn.bin").write_bytes((tmp_path / "dyn.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_field(tmp_path / "dyn")
    assert EMB_DIM == q.time_emb.shape[1]
