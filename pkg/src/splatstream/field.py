"""Distance-aware neural color fields.

A fixed 2x64 ReLU MLP with a sigmoid head maps (encoded position, normalized
depth, encoded view direction, time embedding[, class embedding]) to RGB.
Forward, analytic backward and plain gradient descent are implemented in
numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HIDDEN = 64
POS_FREQS = 6
DIR_FREQS = 2
EMB_DIM = 8
LAYER_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


def posenc(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^k pi x), cos(2^k pi x)] for k < n_freqs, along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    xf = x[..., None, :] * freqs[:, None]
    parts = [x, np.sin(xf).reshape(*x.shape[:-1], -1), np.cos(xf).reshape(*x.shape[:-1], -1)]
    return np.concatenate(parts, axis=-1)


def encoded_width(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


@dataclass
class FieldParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    time_emb: np.ndarray  # (frames, EMB_DIM)
    class_emb: np.ndarray | None = None  # (classes, EMB_DIM), dynamic field only
    depth_scale: float = 1.0
    pos_scale: float = 1.0

    @property
    def is_dynamic(self) -> bool:
        return self.class_emb is not None

    def tensor_names(self) -> list[str]:
        names = list(LAYER_NAMES) + ["time_emb"]
        return names + ["class_emb"] if self.is_dynamic else names

    def tensors(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.tensor_names()]

    def map(self, fn, other: "FieldParams | None" = None) -> "FieldParams":
        if other is None:
            upd = {n: fn(getattr(self, n)) for n in self.tensor_names()}
        else:
            upd = {n: fn(getattr(self, n), getattr(other, n)) for n in self.tensor_names()}
        return replace(self, **upd)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def with_flat(self, v: np.ndarray) -> "FieldParams":
        upd, k = {}, 0
        for n in self.tensor_names():
            t = getattr(self, n)
            upd[n] = np.asarray(v[k:k + t.size], dtype=np.float64).reshape(t.shape)
            k += t.size
        return replace(self, **upd)


def input_width(dynamic: bool) -> int:
    w = encoded_width(POS_FREQS) + 1 + encoded_width(DIR_FREQS) + EMB_DIM
    return w + EMB_DIM if dynamic else w


def init_field(frame_count: int, n_classes: int | None = None, depth_scale: float = 1.0,
               pos_scale: float = 1.0, seed: int = 0) -> FieldParams:
    """He-initialized hidden layers; small output layer."""
    rng = np.random.default_rng(seed)
    d_in = input_width(n_classes is not None)
    return FieldParams(
        W1=rng.normal(0, np.sqrt(2.0 / d_in), (d_in, HIDDEN)),
        b1=np.zeros(HIDDEN),
        W2=rng.normal(0, np.sqrt(2.0 / HIDDEN), (HIDDEN, HIDDEN)),
        b2=np.zeros(HIDDEN),
        W3=rng.normal(0, 0.1 / np.sqrt(HIDDEN), (HIDDEN, 3)),
        b3=np.zeros(3),
        time_emb=rng.normal(0, 0.1, (max(1, frame_count), EMB_DIM)),
        class_emb=None if n_classes is None else rng.normal(0, 0.1, (n_classes, EMB_DIM)),
        depth_scale=float(depth_scale),
        pos_scale=float(pos_scale),
    )


@dataclass
class FieldInputs:
    positions: np.ndarray  # (N, 3) meters
    depths: np.ndarray  # (N,) meters
    directions: np.ndarray  # (N, 3) unit
    times: np.ndarray  # (N,) frame position; fractional values interpolate
    classes: np.ndarray | None = None  # (N,) int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.depths = np.asarray(self.depths, dtype=np.float64).reshape(n)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(n, 3)
        self.times = np.asarray(self.times, dtype=np.float64).reshape(n)
        if self.classes is not None:
            self.classes = np.asarray(self.classes, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    def take(self, idx) -> "FieldInputs":
        return FieldInputs(self.positions[idx], self.depths[idx], self.directions[idx],
                           self.times[idx], None if self.classes is None else self.classes[idx])


def _time_weights(params: FieldParams, times: np.ndarray):
    n_frames = len(params.time_emb)
    if np.any(times < 0) or np.any(times > n_frames - 1):
        raise IndexError(f"time index outside [0, {n_frames - 1}]")
    i0 = np.floor(times).astype(np.int64)
    i0 = np.minimum(i0, n_frames - 1)
    frac = times - i0
    i1 = np.minimum(i0 + 1, n_frames - 1)
    return i0, i1, frac


def _features(params: FieldParams, x: FieldInputs):
    i0, i1, frac = _time_weights(params, x.times)
    emb_t = (1 - frac)[:, None] * params.time_emb[i0] + frac[:, None] * params.time_emb[i1]
    parts = [
        posenc(x.positions / params.pos_scale, POS_FREQS),
        (x.depths / params.depth_scale)[:, None],
        posenc(x.directions, DIR_FREQS),
        emb_t,
    ]
    if params.is_dynamic:
        if x.classes is None:
            raise ValueError("dynamic field requires class indices")
        if np.any(x.classes < 0) or np.any(x.classes >= len(params.class_emb)):
            raise IndexError("class index out of bounds")
        parts.append(params.class_emb[x.classes])
    return np.concatenate(parts, axis=1), (i0, i1, frac)


def _forward(params: FieldParams, x: FieldInputs):
    h0, tw = _features(params, x)
    z1 = h0 @ params.W1 + params.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ params.W2 + params.b2
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ params.W3 + params.b3
    out = 1.0 / (1.0 + np.exp(-z3))
    return out, (h0, z1, a1, z2, a2, tw)


def field_query(params: FieldParams, inputs: FieldInputs) -> np.ndarray:
    """Batched forward pass, (N, 3) RGB in (0, 1)."""
    if len(inputs) == 0:
        return np.zeros((0, 3))
    return _forward(params, inputs)[0]


def field_forward(params: FieldParams, position, depth: float, direction, time_index: int,
                  class_index: int | None = None) -> np.ndarray:
    if not 0 <= time_index < len(params.time_emb):
        raise IndexError(f"time index {time_index} out of bounds")
    x = FieldInputs(np.asarray(position)[None], [depth], np.asarray(direction)[None],
                    [time_index], None if class_index is None else [class_index])
    return field_query(params, x)[0]


def field_loss(params: FieldParams, inputs: FieldInputs, targets) -> float:
    out = field_query(params, inputs)
    return float(np.mean((out - np.asarray(targets, dtype=np.float64)) ** 2))


def field_gradient(params: FieldParams, inputs: FieldInputs, targets) -> tuple[float, FieldParams]:
    """Loss and exact gradient of mean((f(x) - y)^2) over all N*3 entries."""
    if len(inputs) == 0:
        raise ValueError("empty batch")
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    out, (h0, z1, a1, z2, a2, (i0, i1, frac)) = _forward(params, inputs)
    err = out - y
    loss = float(np.mean(err ** 2))
    dz3 = (2.0 / err.size) * err * out * (1.0 - out)
    g = {"W3": a2.T @ dz3, "b3": dz3.sum(0)}
    dz2 = (dz3 @ params.W3.T) * (z2 > 0)
    g["W2"], g["b2"] = a1.T @ dz2, dz2.sum(0)
    dz1 = (dz2 @ params.W2.T) * (z1 > 0)
    g["W1"], g["b1"] = h0.T @ dz1, dz1.sum(0)
    dh0 = dz1 @ params.W1.T
    k = encoded_width(POS_FREQS) + 1 + encoded_width(DIR_FREQS)
    d_emb_t = dh0[:, k:k + EMB_DIM]
    g_time = np.zeros_like(params.time_emb)
    np.add.at(g_time, i0, (1 - frac)[:, None] * d_emb_t)
    np.add.at(g_time, i1, frac[:, None] * d_emb_t)
    g["time_emb"] = g_time
    if params.is_dynamic:
        g_cls = np.zeros_like(params.class_emb)
        np.add.at(g_cls, inputs.classes, dh0[:, k + EMB_DIM:])
        g["class_emb"] = g_cls
    return loss, replace(params, **g)


def fit_field(params: FieldParams, inputs: FieldInputs, targets, learning_rate: float,
              iterations: int) -> tuple[FieldParams, list[float]]:
    """Full-batch plain gradient descent on the mean squared color error."""
    if len(inputs) == 0:
        raise ValueError("fit_field needs at least one sample")
    losses = []
    for it in range(iterations):
        loss, grad = field_gradient(params, inputs, targets)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite field loss at iteration {it} (lr={learning_rate})")
        losses.append(loss)
        params = params.map(lambda p, gp: p - learning_rate * gp, grad)
    losses.append(field_loss(params, inputs, targets))
    return params, losses


# --------------------------------------------------------------------------
# serialization: flat little-endian float32 + JSON sidecar


def save_field(params: FieldParams, path: str | Path) -> None:
    path = Path(path)
    blob = params.flat().astype("<f4")
    path.with_suffix(".bin").write_bytes(blob.tobytes())
    meta = {
        "format": "splatstream-field/1",
        "tensors": [{"name": n, "shape": list(getattr(params, n).shape)} for n in params.tensor_names()],
        "depth_scale": params.depth_scale,
        "pos_scale": params.pos_scale,
        "pos_freqs": POS_FREQS,
        "dir_freqs": DIR_FREQS,
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_field(path: str | Path) -> FieldParams:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("format") != "splatstream-field/1":
        raise ValueError(f"unsupported field format {meta.get('format')!r}")
    blob = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4").astype(np.float64)
    tensors, k = {}, 0
    for t in meta["tensors"]:
        size = int(np.prod(t["shape"]))
        if k + size > len(blob):
            raise ValueError("field blob truncated")
        tensors[t["name"]] = blob[k:k + size].reshape(t["shape"])
        k += size
    if k != len(blob):
        raise ValueError("field blob size does not match sidecar shapes")
    return FieldParams(depth_scale=float(meta["depth_scale"]), pos_scale=float(meta["pos_scale"]),
                       class_emb=tensors.pop("class_emb", None), **tensors)
