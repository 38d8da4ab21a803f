"""Object trajectories from 2D masks: coarse LiDAR tracks refined by a NeuralODE.

The dynamics network f(z, t, c) maps a 6-dim state (position, Euler
yaw/pitch/roll), normalized time and a per-object embedding to dz/dt. Poses
are obtained by fixed-step RK4 from z(t0) = [XYZ_t0, 0, 0, 0]. Training
backpropagates through the unrolled integrator (discretize-then-optimize).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from splatstream.core import Camera, Pose
from splatstream.project import pixel_coords

log = logging.getLogger(__name__)

STATE_DIM = 6
EMBED_DIM = 16
HIDDEN = 64
STEPS_PER_UNIT = 4
MIN_STEPS = 4
MIN_MASK_POINTS = 5


# --------------------------------------------------------------------------
# coarse tracks


def coarse_track(lidar_frames: Sequence[np.ndarray], masks: Mapping[int, Sequence[np.ndarray | None]],
                 cameras: Sequence[Camera], min_points: int = MIN_MASK_POINTS
                 ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Mean world position of the LiDAR points falling inside each object's mask.

    Returns instance id -> (times, positions). Frames with fewer than
    ``min_points`` in-mask points give no entry; objects with no usable mask
    at all are dropped with a warning.
    """
    if len(lidar_frames) != len(cameras):
        raise ValueError("need one camera per LiDAR frame")
    projected = [pixel_coords(pts, cam) for pts, cam in zip(lidar_frames, cameras)]
    tracks = {}
    for iid, seq in masks.items():
        if len(seq) != len(cameras):
            raise ValueError(f"object {iid}: mask sequence length differs from frame count")
        if all(m is None or not np.any(m) for m in seq):
            log.warning("object %s has an empty mask sequence; dropped", iid)
            continue
        times, xyz = [], []
        for f, m in enumerate(seq):
            if m is None:
                continue
            u, v, inside = projected[f]
            hit = np.zeros(len(u), dtype=bool)
            hit[inside] = np.asarray(m)[v[inside], u[inside]] != 0
            if hit.sum() < min_points:
                continue
            times.append(cameras[f].time)
            xyz.append(np.asarray(lidar_frames[f], dtype=np.float64)[hit].mean(axis=0))
        if not times:
            log.warning("object %s: no frame had %d in-mask points; dropped", iid, min_points)
            continue
        order = np.argsort(times, kind="stable")
        tracks[iid] = (np.asarray(times)[order], np.asarray(xyz)[order])
    return tracks


# --------------------------------------------------------------------------
# integrator


def integrate_rk4(rhs: Callable, z0, t0: float, t1: float, steps: int, c=None) -> np.ndarray:
    """Classical fixed-step 4th-order Runge-Kutta for dz/dt = rhs(z, t, c)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, dtype=np.float64)
    h = (t1 - t0) / steps
    t = float(t0)
    for i in range(steps):
        k1 = rhs(z, t, c)
        k2 = rhs(z + 0.5 * h * k1, t + 0.5 * h, c)
        k3 = rhs(z + 0.5 * h * k2, t + 0.5 * h, c)
        k4 = rhs(z + h * k3, t + h, c)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t = t0 + (i + 1) * h
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"non-finite ODE state at t={t:.6g}")
    return z


def step_count(t0: float, t1: float) -> int:
    return max(MIN_STEPS, math.ceil(STEPS_PER_UNIT * abs(t1 - t0) - 1e-12))


# --------------------------------------------------------------------------
# dynamics network


@dataclass
class OdeNet:
    """Two-hidden-layer ReLU MLP: [state(6), t, embedding(D)] -> dz/dt (6)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    names = ("W1", "b1", "W2", "b2", "W3", "b3")

    @classmethod
    def init(cls, embed_dim: int = EMBED_DIM, hidden: int = HIDDEN, seed: int = 0) -> "OdeNet":
        rng = np.random.default_rng(seed)
        d_in = STATE_DIM + 1 + embed_dim
        return cls(rng.normal(0, np.sqrt(2.0 / d_in), (d_in, hidden)), np.zeros(hidden),
                   rng.normal(0, np.sqrt(2.0 / hidden), (hidden, hidden)), np.zeros(hidden),
                   rng.normal(0, 1e-3, (hidden, STATE_DIM)), np.zeros(STATE_DIM))

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.names]

    def forward(self, x: np.ndarray):
        z1 = x @ self.W1 + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.W2 + self.b2
        a2 = np.maximum(z2, 0.0)
        return a2 @ self.W3 + self.b3, (x, z1, a1, z2, a2)

    def backward(self, cache, dout: np.ndarray, grads: dict) -> np.ndarray:
        x, z1, a1, z2, a2 = cache
        grads["W3"] += a2.T @ dout
        grads["b3"] += dout.sum(0)
        dz2 = (dout @ self.W3.T) * (z2 > 0)
        grads["W2"] += a1.T @ dz2
        grads["b2"] += dz2.sum(0)
        dz1 = (dz2 @ self.W2.T) * (z1 > 0)
        grads["W1"] += x.T @ dz1
        grads["b1"] += dz1.sum(0)
        return dz1 @ self.W1.T

    def to_dict(self) -> dict:
        return {n: getattr(self, n).tolist() for n in self.names}

    @classmethod
    def from_dict(cls, d: dict) -> "OdeNet":
        return cls(*(np.asarray(d[n], dtype=np.float64) for n in cls.names))


@dataclass
class ObjectTrack:
    instance_id: int
    class_label: str
    times: np.ndarray  # (T,) normalized, ascending
    positions: np.ndarray  # (T, 3) coarse XYZ per time
    rotations: np.ndarray | None = None  # (T, 3) known Euler angles, if any
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(EMBED_DIM))
    ode: OdeNet | None = None
    initial_state: np.ndarray | None = None
    position_scale: float = 1.0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(self.times) != len(self.positions):
            raise ValueError("times and positions must align")
        if np.any(np.diff(self.times) < 0):
            raise ValueError("coarse positions must be sorted by time")
        if self.rotations is not None:
            self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 3)
        self.embedding = np.asarray(self.embedding, dtype=np.float64).reshape(-1)
        if self.initial_state is None and len(self.positions):
            self.initial_state = np.r_[self.positions[0], 0.0, 0.0, 0.0]
        if not np.all(np.isfinite(self.embedding)):
            raise ValueError("embedding must be finite")

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def rhs(self, z, t, c=None):
        c = self.embedding if c is None else c
        return _rhs(self.ode, z[None], np.array([t]), c[None], self.initial_state[None, :3],
                    np.array([self.position_scale]))[0]

    def pose_at(self, t: float, tol: float = 1e-9) -> Pose | None:
        """Pose at ``t``, or None when the object does not exist at that time."""
        lo, hi = self.span
        if t < lo - tol or t > hi + tol:
            return None
        return query_pose(self, t)


def _inputs(z, t, c, origin, scale):
    zi = z.copy()
    zi[:, :3] = (z[:, :3] - origin) / scale[:, None]
    return np.concatenate([zi, t[:, None], c], axis=1)


def _out_scale(scale):
    s = np.ones((len(scale), STATE_DIM))
    s[:, :3] = scale[:, None]
    return s


def _rhs(net, z, t, c, origin, scale):
    out, _ = net.forward(_inputs(z, t, c, origin, scale))
    return out * _out_scale(scale)


def query_pose(track: ObjectTrack, t: float) -> Pose:
    """Pose of the object at ``t``.

    With a fitted network the state is RK4-integrated from t0 using
    max(4, ceil(4 |t - t0|)) steps; otherwise the coarse samples are
    linearly interpolated (clamped at the ends).
    """
    if track.ode is None:
        pos = np.array([np.interp(t, track.times, track.positions[:, k]) for k in range(3)])
        if track.rotations is None:
            rot = np.zeros(3)
        else:
            rot = np.array([np.interp(t, track.times, np.unwrap(track.rotations[:, k])) for k in range(3)])
        return Pose(rot, pos)
    z = integrate_rk4(track.rhs, track.initial_state, track.t0, t, step_count(track.t0, t))
    return Pose(z[3:], z[:3])


# --------------------------------------------------------------------------
# fitting


@dataclass
class OdeFit:
    net: OdeNet
    tracks: list[ObjectTrack]
    losses: list[float]


def _rollout(net, z0, t0, h, n_steps, c, origin, scale):
    """Batched RK4 with per-element step size ``h`` for ``n_steps[i]`` steps; keeps a tape."""
    z = z0.copy()
    tape = []
    osc = _out_scale(scale)
    for s in range(int(n_steps.max()) if len(n_steps) else 0):
        hs = np.where(s < n_steps, h, 0.0)
        t = t0 + s * h
        hb = hs[:, None]
        stages = []
        zs = z
        ks = []
        for frac, ti in ((0.0, t), (0.5, t + 0.5 * h), (0.5, t + 0.5 * h), (1.0, t + h)):
            zin = z if not ks else z + frac * hb * ks[-1]
            out, cache = net.forward(_inputs(zin, ti, c, origin, scale))
            ks.append(out * osc)
            stages.append(cache)
        tape.append((hb, stages))
        z = zs + (hb / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
    return z, tape


def _backprop(net, tape, gz, scale):
    """Gradients w.r.t. network params and the embedding inputs."""
    grads = {n: np.zeros_like(getattr(net, n)) for n in net.names}
    gc = 0.0
    osc = _out_scale(scale)
    inv = np.ones_like(osc)
    inv[:, :3] = 1.0 / scale[:, None]
    for hb, stages in reversed(tape):
        gk = [hb / 6.0 * gz, hb / 3.0 * gz, hb / 3.0 * gz, hb / 6.0 * gz]
        gz = gz.copy()
        fracs = (0.0, 0.5, 0.5, 1.0)
        for i in (3, 2, 1, 0):
            dx = net.backward(stages[i], gk[i] * osc, grads)
            gzi = dx[:, :STATE_DIM] * inv
            gc = gc + dx[:, STATE_DIM + 1:]
            gz += gzi
            if i > 0:
                gk[i - 1] = gk[i - 1] + fracs[i] * hb * gzi
    return grads, gc


class _Adam:
    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads, lr):
        self.k += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.k)
            vh = v / (1 - self.b2 ** self.k)
            p -= lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class _Batch:
    z0: np.ndarray
    t0: np.ndarray
    h: np.ndarray
    n_steps: np.ndarray
    target: np.ndarray
    track: np.ndarray
    origin: np.ndarray
    scale: np.ndarray


def _training_batch(tracks: Sequence[ObjectTrack]) -> _Batch:
    rows = []
    for k, tr in enumerate(tracks):
        for t, xyz in zip(tr.times, tr.positions):
            n = step_count(tr.t0, t)
            rows.append((tr.initial_state, tr.t0, (t - tr.t0) / n, n, xyz, k,
                         tr.initial_state[:3], tr.position_scale))
    cols = list(zip(*rows))
    return _Batch(np.array(cols[0]), np.array(cols[1]), np.array(cols[2]), np.array(cols[3]),
                  np.array(cols[4]), np.array(cols[5]), np.array(cols[6]), np.array(cols[7]))


def trajectory_loss_and_grad(net: OdeNet, embeddings: np.ndarray, batch: _Batch):
    """Mean squared position error over all (track, time) samples and its gradient."""
    c = embeddings[batch.track]
    z, tape = _rollout(net, batch.z0, batch.t0, batch.h, batch.n_steps, c, batch.origin, batch.scale)
    err = z[:, :3] - batch.target
    loss = float(np.mean(np.sum(err ** 2, axis=1)))
    gz = np.zeros_like(z)
    gz[:, :3] = 2.0 * err / len(err)
    grads, gc = _backprop(net, tape, gz, batch.scale)
    g_emb = np.zeros_like(embeddings)
    if np.ndim(gc):
        np.add.at(g_emb, batch.track, gc)
    return loss, grads, g_emb


def prepare_track(track: ObjectTrack, seed: int | None = None) -> ObjectTrack:
    """Reset the initial state to [XYZ_t0, 0] and choose a position scale from the data extent."""
    extent = float(np.abs(track.positions - track.positions[0]).max()) if len(track.positions) else 0.0
    emb = track.embedding
    if seed is not None or not np.any(emb):
        emb = np.random.default_rng(seed if seed is not None else track.instance_id).normal(0, 1, EMBED_DIM)
    return replace(track, initial_state=np.r_[track.positions[0], 0.0, 0.0, 0.0],
                   position_scale=max(1.0, extent), embedding=emb)


def fit_ode(tracks: ObjectTrack | Sequence[ObjectTrack], learning_rate: float = 3e-3,
            iterations: int = 1500, net: OdeNet | None = None, seed: int = 0,
            final_lr_fraction: float = 0.05) -> OdeFit:
    """Fit one shared dynamics network (plus per-object embeddings) to coarse tracks.

    Adam with exponential learning-rate decay to ``final_lr_fraction`` of the
    initial rate. Raises ``RuntimeError`` if the loss exceeds ten times its
    initial value (floored at 0.01 * scale^2).
    """
    if isinstance(tracks, ObjectTrack):
        tracks = [tracks]
    tracks = [prepare_track(tr) for tr in tracks]
    for tr in tracks:
        if len(tr.times) < 3:
            raise ValueError(f"object {tr.instance_id}: need >= 3 coarse positions")
    net = net or OdeNet.init(embed_dim=len(tracks[0].embedding), seed=seed)
    net = OdeNet(*(p.copy() for p in net.tensors()))
    emb = np.stack([tr.embedding for tr in tracks]).astype(np.float64)
    batch = _training_batch(tracks)
    params = net.tensors() + [emb]
    opt = _Adam(params, learning_rate)
    decay = final_lr_fraction ** (1.0 / max(1, iterations))
    losses = []
    limit = None
    for it in range(iterations):
        loss, grads, g_emb = trajectory_loss_and_grad(net, emb, batch)
        if limit is None:
            limit = 10.0 * max(loss, 1e-2 * max(tr.position_scale for tr in tracks) ** 2)
        if not np.isfinite(loss) or loss > limit:
            raise RuntimeError(f"NeuralODE fit diverged at iteration {it}: loss {loss:.4g} "
                               f"(initial {losses[0] if losses else loss:.4g}, lr {learning_rate})")
        losses.append(loss)
        opt.step(params, [grads[n] for n in net.names] + [g_emb], learning_rate * decay ** it)
    losses.append(trajectory_loss_and_grad(net, emb, batch)[0])
    fitted = [replace(tr, ode=net, embedding=emb[k].copy()) for k, tr in enumerate(tracks)]
    return OdeFit(net, fitted, losses)


def track_rmse(track: ObjectTrack, times, positions) -> float:
    pred = np.array([query_pose(track, t).translation for t in times])
    return float(np.sqrt(np.mean(np.sum((pred - np.asarray(positions)) ** 2, axis=1))))


# --------------------------------------------------------------------------
# JSON interchange


def track_to_json(track: ObjectTrack, pose_times: Sequence[float] | None = None) -> dict:
    d = {
        "instance_id": int(track.instance_id),
        "class": track.class_label,
        "frames": [{"t": float(t), "xyz": [float(v) for v in p]} for t, p in zip(track.times, track.positions)],
    }
    if pose_times is not None:
        poses = []
        for t in pose_times:
            p = query_pose(track, t)
            poses.append({"t": float(t), "xyz": p.translation.tolist(), "rpy": p.rotation.tolist()})
        d["poses"] = poses
    return d


def track_from_json(d: dict) -> ObjectTrack:
    frames = d.get("frames", [])
    return ObjectTrack(int(d["instance_id"]), str(d.get("class", "object")),
                       [f["t"] for f in frames], [f["xyz"] for f in frames])
