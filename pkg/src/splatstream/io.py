"""Readers and writers for the small file formats the tools exchange:
binary PPM/PGM, optional PNG, raw float depth maps, and PLY point clouds."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

DEPTH_MAGIC = b"SSDEPTH1"


def _to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """8-bit binary PPM (P6) from an (H, W, 3) float image in [0, 1]."""
    img = _to_u8(image)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def _read_netpbm(data: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    return tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3]), data[pos + 1:]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(Path(path).read_bytes())
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    dtype = np.uint8 if maxval < 256 else ">u2"
    arr = np.frombuffer(body, dtype=dtype, count=w * h * 3)
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def write_pgm(path, array: np.ndarray, maxval: int | None = None) -> None:
    """Binary PGM (P5); 16-bit big-endian when values exceed 255."""
    a = np.asarray(array)
    if maxval is None:
        maxval = 65535 if a.max(initial=0) > 255 else 255
    h, w = a.shape
    body = a.astype(np.uint8).tobytes() if maxval < 256 else a.astype(">u2").tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (w, h, maxval) + body)


def read_pgm(path) -> np.ndarray:
    magic, w, h, maxval, body = _read_netpbm(Path(path).read_bytes())
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    dtype = np.uint8 if maxval < 256 else ">u2"
    return np.frombuffer(body, dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image  # optional dependency

    Image.fromarray(_to_u8(image)).save(path)


def read_image(path) -> np.ndarray:
    """(H, W, 3) float image from PPM, or PNG when Pillow is installed."""
    path = Path(path)
    if path.read_bytes()[:2] == b"P6":
        return read_ppm(path)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray) -> None:
    """Magic, uint32 width, uint32 height, then little-endian float32 rows."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    Path(path).write_bytes(DEPTH_MAGIC + struct.pack("<II", w, h) + d.tobytes())


def read_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth file")
    w, h = struct.unpack("<II", data[8:16])
    return np.frombuffer(data[16:], dtype="<f4", count=w * h).reshape(h, w).astype(np.float64)


# --------------------------------------------------------------------------
# PLY


def write_ply(path, points: np.ndarray, labels: np.ndarray | None = None, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    header = ["ply", "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(pts)}", "property float x", "property float y", "property float z"]
    if labels is not None:
        header.append("property ushort label")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode()
    if binary:
        fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
        if labels is not None:
            fields.append(("label", "<u2"))
        rec = np.empty(len(pts), dtype=fields)
        rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
        if labels is not None:
            rec["label"] = labels
        Path(path).write_bytes(head + rec.tobytes())
    else:
        rows = []
        for i, p in enumerate(pts.astype(np.float32)):
            row = " ".join(f"{float(v):.9g}" for v in p)
            if labels is not None:
                row += f" {int(labels[i])}"
            rows.append(row)
        Path(path).write_bytes(head + ("\n".join(rows) + ("\n" if rows else "")).encode())


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
              "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
              "ushort": "u2", "uint16": "u2", "short": "i2", "int16": "i2",
              "uint": "u4", "uint32": "u4", "int": "i4", "int32": "i4"}


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None]:
    """(points (N, 3) float64, labels or None) from an ASCII or binary PLY."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header")
    end = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    fmt, count, props, in_vertex = None, 0, [], False
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ValueError("list properties on vertices are not supported")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    body = data[end:]
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        table = np.array(rows[:count * len(props)], dtype=np.float64).reshape(count, len(props))
        cols = {name: table[:, k].astype(t) for k, (name, t) in enumerate(props)}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        order = "<" if fmt == "binary_little_endian" else ">"
        dt = np.dtype([(name, order + t) for name, t in props])
        if len(body) < dt.itemsize * count:
            raise ValueError(f"{path}: truncated PLY body")
        rec = np.frombuffer(body, dtype=dt, count=count)
        cols = {name: rec[name] for name, _ in props}
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(np.float64)
    labels = cols["label"].astype(np.int64) if "label" in cols else None
    return pts, labels


def read_json(path):
    return json.loads(Path(path).read_text())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
