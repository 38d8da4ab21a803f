"""Deterministic synthetic street scenes and the on-disk scene format.

World frame: x runs along the street, y across it (the facade sits at
y = street_width), z is up. The camera travels along x at y = 0 and looks
sideways at the facade, so a street segment is only in view during its own
window of frames.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from splatstream.core import Camera, GaussianArray, Pose, SceneModel, normalize_time
from splatstream.motion import EMBED_DIM, ObjectTrack, OdeNet
from splatstream.project import frustum_cull, project_points

FORMAT_NAME = "splatstream-scene"
FORMAT_VERSION = 1

RECORD_DTYPE = np.dtype([
    ("position", "<f4", 3), ("log_scale", "<f4", 3), ("quat", "<f4", 4), ("opacity", "<f4"),
    ("rgb", "<f4", 3), ("visibility", "<f4", 2), ("life", "<f4", 2), ("instance_id", "<i4"),
])
assert RECORD_DTYPE.itemsize == 76

# side-looking camera: image x = world x, image y = -world z, optical axis = world y
SIDE_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])

PALETTE = np.array([
    [0.85, 0.33, 0.10], [0.93, 0.69, 0.13], [0.47, 0.67, 0.19], [0.30, 0.75, 0.93],
    [0.00, 0.45, 0.74], [0.49, 0.18, 0.56], [0.64, 0.08, 0.18], [0.75, 0.75, 0.75],
])
TRAJECTORIES = ("constant_velocity", "circular")


@dataclass
class ObjectSpec:
    class_label: str = "car"
    spawn_frame: int = 0
    despawn_frame: int = 1
    trajectory: str = "constant_velocity"
    gaussian_count: int = 200
    start: tuple[float, float, float] = (0.0, 5.0, 0.0)
    velocity: tuple[float, float, float] = (1.0, 0.0, 0.0)  # meters per frame
    center: tuple[float, float, float] = (0.0, 5.0, 0.0)
    radius: float = 2.0
    angular_speed: float = 0.1  # radians per frame
    phase: float = 0.0
    extent: tuple[float, float, float] = (4.0, 1.8, 1.5)


@dataclass
class SceneSpec:
    seed: int = 0
    frame_count: int = 8
    static_density: float = 200.0  # Gaussians per meter of street
    street_length: float = 30.0
    segment_length: float = 30.0
    building_height: float = 8.0
    street_width: float = 10.0
    ground_fraction: float = 0.3
    ground_near: float = 0.0  # ground Gaussians span y in [ground_near, street_width]
    gaussian_scale: float = 0.35  # splat size relative to the mean spacing
    image_width: int = 128
    image_height: int = 128
    focal: float = 128.0
    camera_height: float = 2.0
    objects: list[ObjectSpec] = field(default_factory=list)

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        for name in ("static_density", "street_length", "segment_length", "building_height",
                     "street_width", "focal", "gaussian_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.ground_near < self.street_width:
            raise ValueError("ground_near must lie in [0, street_width)")
        if not 0.0 <= self.ground_fraction <= 1.0:
            raise ValueError("ground_fraction must lie in [0, 1]")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image size must be positive")
        for k, o in enumerate(self.objects):
            if not 0 <= o.spawn_frame < o.despawn_frame <= self.frame_count:
                raise ValueError(f"object {k}: need 0 <= spawn < despawn <= frame_count")
            if o.trajectory not in TRAJECTORIES:
                raise ValueError(f"object {k}: unknown trajectory {o.trajectory!r}")
            if o.gaussian_count < 1:
                raise ValueError(f"object {k}: gaussian_count must be >= 1")

    @property
    def segment_count(self) -> int:
        return int(np.ceil(self.street_length / self.segment_length - 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        okeys = {f.name for f in fields(ObjectSpec)}
        kw["objects"] = [ObjectSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                                       for k, v in o.items() if k in okeys})
                         for o in d.get("objects", [])]
        return cls(**kw)


def scale_spec(spec: SceneSpec, segments: int) -> SceneSpec:
    """Spec repeated over ``segments`` street segments of the base length.

    Frames and objects are replicated per segment, so every segment keeps
    the same content density and the same number of frames looking at it.
    """
    if segments < 1:
        raise ValueError("segments must be >= 1")
    objs = []
    for k in range(segments):
        df, dx = k * spec.frame_count, k * spec.street_length
        for o in spec.objects:
            objs.append(replace(o, spawn_frame=o.spawn_frame + df, despawn_frame=o.despawn_frame + df,
                                start=(o.start[0] + dx, *o.start[1:]),
                                center=(o.center[0] + dx, *o.center[1:])))
    return replace(spec, frame_count=spec.frame_count * segments,
                   street_length=spec.street_length * segments, objects=objs)


@dataclass
class GroundTruth:
    colors: np.ndarray  # (N, 3) per global Gaussian index
    segment_ids: np.ndarray  # (N,) street segment of each static Gaussian, -1 for dynamic
    poses: dict[int, list[Pose | None]]  # per instance, per frame
    scene: SceneModel = field(repr=False)

    def visible_set(self, frame: int, margin: float | None = None) -> np.ndarray:
        """Global indices whose centers fall inside the (padded) frustum at ``frame``."""
        cam = self.scene.cameras[frame]
        out = []
        for iid, g, off in self.scene.groups():
            if len(g) == 0:
                continue
            pos = g.positions.astype(np.float64)
            if iid is not None:
                pose = self.poses[iid][frame]
                if pose is None:
                    continue
                T = pose.matrix()
                pos = pos @ T[:3, :3].T + T[:3, 3]
            pb = project_points(pos, np.zeros((len(pos), 3, 3)), cam)
            out.append(off + np.flatnonzero(frustum_cull(pb, cam.width, cam.height, margin)))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def palette_colors(positions: np.ndarray, cell: float = 0.75) -> np.ndarray:
    """Color from a hash of the position's grid cell (learnable, position-determined)."""
    key = np.floor(np.asarray(positions, dtype=np.float64) / cell).astype(np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = (key[:, 0] * np.uint64(73856093)) ^ (key[:, 1] * np.uint64(19349663)) \
            ^ (key[:, 2] * np.uint64(83492791))
    return PALETTE[(h % np.uint64(len(PALETTE))).astype(np.int64)]


def camera_for_frame(spec: SceneSpec, frame: int) -> Camera:
    F = spec.frame_count
    x = spec.street_length * (frame / (F - 1) if F > 1 else 0.5)
    center = np.array([x, 0.0, spec.camera_height])
    return Camera(spec.focal, spec.focal, spec.image_width / 2, spec.image_height / 2,
                  spec.image_width, spec.image_height, SIDE_ROTATION, -SIDE_ROTATION @ center,
                  normalize_time(frame, F))


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.where(q[:, :1] < 0, -q, q)


def _segment_static(spec: SceneSpec, k: int):
    x0 = k * spec.segment_length
    x1 = min(spec.street_length, x0 + spec.segment_length)
    length = x1 - x0
    rng = np.random.default_rng([spec.seed, 1, k])
    n = int(round(spec.static_density * length))
    n_ground = int(round(n * spec.ground_fraction))
    n_facade = n - n_ground
    facade = np.column_stack([rng.uniform(x0, x1, n_facade),
                              np.full(n_facade, spec.street_width) + rng.normal(0, 0.05, n_facade),
                              rng.uniform(0, spec.building_height, n_facade)])
    ground = np.column_stack([rng.uniform(x0, x1, n_ground),
                              rng.uniform(spec.ground_near, spec.street_width, n_ground),
                              rng.normal(0, 0.02, n_ground)])
    pos = np.concatenate([facade, ground])
    area = length * (spec.building_height + spec.street_width - spec.ground_near) / max(n, 1)
    base = spec.gaussian_scale * np.sqrt(area)
    log_s = np.log(base) + rng.uniform(-0.4, 0.2, (n, 3))
    quats = _random_quats(rng, n)
    opac = rng.uniform(0.3, 0.9, n)
    return pos, log_s, quats, opac


def object_positions(o: ObjectSpec, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (positions, Euler yaw/pitch/roll) at integer frames."""
    df = np.asarray(frames, dtype=np.float64) - o.spawn_frame
    if o.trajectory == "constant_velocity":
        pos = np.asarray(o.start, dtype=np.float64) + df[:, None] * np.asarray(o.velocity, dtype=np.float64)
        yaw = np.full(len(df), np.arctan2(o.velocity[1], o.velocity[0]))
    else:
        theta = o.phase + o.angular_speed * df
        c = np.asarray(o.center, dtype=np.float64)
        pos = np.column_stack([c[0] + o.radius * np.cos(theta), c[1] + o.radius * np.sin(theta),
                               np.full(len(df), c[2])])
        yaw = theta + np.pi / 2 * np.sign(o.angular_speed or 1.0)
    rot = np.column_stack([yaw, np.zeros(len(df)), np.zeros(len(df))])
    return pos, rot


def generate_scene(spec: SceneSpec) -> tuple[SceneModel, GroundTruth]:
    spec.validate()
    F = spec.frame_count
    parts = [_segment_static(spec, k) for k in range(spec.segment_count)]
    pos = np.concatenate([p[0] for p in parts])
    static = GaussianArray(pos, np.concatenate([p[1] for p in parts]),
                           np.concatenate([p[2] for p in parts]), np.concatenate([p[3] for p in parts]),
                           palette_colors(pos))
    seg_ids = [np.minimum(np.floor(static.positions[:, 0] / spec.segment_length), spec.segment_count - 1)
               .astype(np.int64)]

    dynamic, tracks, poses = {}, {}, {}
    for iid, o in enumerate(spec.objects):
        rng = np.random.default_rng([spec.seed, 2, iid])
        ext = np.asarray(o.extent)
        local = rng.uniform(-0.5, 0.5, (o.gaussian_count, 3)) * ext + [0.0, 0.0, ext[2] / 2]
        log_s = np.log(0.25 * (ext.prod() / o.gaussian_count) ** (1 / 3)) + rng.uniform(-0.3, 0.3, (o.gaussian_count, 3))
        dynamic[iid] = GaussianArray(local, log_s, _random_quats(rng, o.gaussian_count),
                                     rng.uniform(0.4, 0.95, o.gaussian_count), palette_colors(local, 0.5),
                                     instance_ids=np.full(o.gaussian_count, iid))
        frames = np.arange(o.spawn_frame, o.despawn_frame)
        p, r = object_positions(o, frames)
        times = np.array([normalize_time(int(f), F) for f in frames])
        emb = np.random.default_rng([spec.seed, 3, iid]).normal(0, 1, EMBED_DIM)
        tracks[iid] = ObjectTrack(iid, o.class_label, times, p, r, emb)
        per_frame: list[Pose | None] = [None] * F
        for f, pp, rr in zip(frames, p, r):
            per_frame[int(f)] = Pose(rr, pp)
        poses[iid] = per_frame
        seg_ids.append(np.full(o.gaussian_count, -1))

    scene = SceneModel(static, dynamic, tracks, [camera_for_frame(spec, f) for f in range(F)], F)
    scene.validate()
    colors = np.concatenate([g.colors for g in scene.all_arrays()]).astype(np.float64)
    return scene, GroundTruth(colors, np.concatenate(seg_ids), poses, scene)


# --------------------------------------------------------------------------
# file format


def _track_to_dict(tr: ObjectTrack) -> dict:
    return {
        "instance_id": int(tr.instance_id), "class": tr.class_label,
        "times": tr.times.tolist(), "positions": tr.positions.tolist(),
        "rotations": None if tr.rotations is None else tr.rotations.tolist(),
        "embedding": tr.embedding.tolist(),
        "initial_state": None if tr.initial_state is None else np.asarray(tr.initial_state).tolist(),
        "position_scale": float(tr.position_scale),
        "ode": None if tr.ode is None else tr.ode.to_dict(),
    }


def _track_from_dict(d: dict) -> ObjectTrack:
    return ObjectTrack(
        int(d["instance_id"]), str(d["class"]), d["times"], d["positions"],
        d.get("rotations"), np.asarray(d.get("embedding") or np.zeros(EMBED_DIM)),
        OdeNet.from_dict(d["ode"]) if d.get("ode") else None,
        None if d.get("initial_state") is None else np.asarray(d["initial_state"], dtype=np.float64),
        float(d.get("position_scale", 1.0)),
    )


def _records(g: GaussianArray) -> np.ndarray:
    rec = np.empty(len(g), dtype=RECORD_DTYPE)
    rec["position"], rec["log_scale"], rec["quat"] = g.positions, g.log_scales, g.quats
    rec["opacity"], rec["rgb"] = g.opacities, g.colors
    rec["visibility"], rec["life"], rec["instance_id"] = g.visibility, g.life, g.instance_ids
    return rec


def _from_records(rec: np.ndarray) -> GaussianArray:
    g = GaussianArray.__new__(GaussianArray)
    g.positions = rec["position"].astype(np.float32)
    g.log_scales = rec["log_scale"].astype(np.float32)
    g.quats = rec["quat"].astype(np.float32)
    g.opacities = rec["opacity"].astype(np.float32)
    g.colors = rec["rgb"].astype(np.float32)
    g.visibility = rec["visibility"].astype(np.float32)
    g.life = rec["life"].astype(np.float32)
    g.instance_ids = rec["instance_id"].astype(np.int32)
    return g


def scene_paths(path) -> tuple[Path, Path]:
    """(manifest, blob) for a path given with or without the .scene.json suffix."""
    p = Path(path)
    name = p.name
    for suffix in (".scene.json", ".scene.bin", ".json"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return p.with_name(name + ".scene.json"), p.with_name(name + ".scene.bin")


def save_scene(scene: SceneModel, path, spec: SceneSpec | None = None) -> Path:
    manifest_path, blob_path = scene_paths(path)
    groups = list(scene.groups())
    blob = b"".join(_records(g).tobytes() for _, g, _ in groups)
    manifest = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "record_bytes": RECORD_DTYPE.itemsize,
        "blob": blob_path.name, "blob_bytes": len(blob), "frame_count": scene.frame_count,
        "groups": [{"instance_id": iid, "count": len(g)} for iid, g, _ in groups],
        "cameras": [c.to_dict() for c in scene.cameras],
        "tracks": [_track_to_dict(scene.tracks[k]) for k in sorted(scene.tracks)],
        "spec": None if spec is None else spec.to_dict(),
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_scene(path) -> SceneModel:
    scene, _ = load_scene_with_spec(path)
    return scene


def load_scene_with_spec(path) -> tuple[SceneModel, SceneSpec | None]:
    manifest_path, _ = scene_paths(path)
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{manifest_path}: malformed manifest ({exc.msg})") from None
    if not isinstance(m, dict) or m.get("format") != FORMAT_NAME:
        raise ValueError(f"{manifest_path}: not a scene manifest")
    if m.get("version") != FORMAT_VERSION:
        raise ValueError(f"{manifest_path}: unsupported scene version {m.get('version')!r}")
    if m.get("record_bytes") != RECORD_DTYPE.itemsize:
        raise ValueError(f"{manifest_path}: unexpected record size {m.get('record_bytes')!r}")
    blob = (manifest_path.parent / m["blob"]).read_bytes()
    counts = [int(gd["count"]) for gd in m["groups"]]
    need = sum(counts) * RECORD_DTYPE.itemsize
    if len(blob) < need or len(blob) != m.get("blob_bytes", len(blob)):
        raise ValueError(f"{manifest_path}: Gaussian blob truncated ({len(blob)} of {need} bytes)")
    rec = np.frombuffer(blob, dtype=RECORD_DTYPE, count=sum(counts))
    static, dynamic, start = None, {}, 0
    for gd, n in zip(m["groups"], counts):
        g = _from_records(rec[start:start + n])
        start += n
        if gd["instance_id"] is None:
            static = g
        else:
            dynamic[int(gd["instance_id"])] = g
    tracks = {int(d["instance_id"]): _track_from_dict(d) for d in m["tracks"]}
    cams = [Camera.from_dict(c) for c in m["cameras"]]
    scene = SceneModel(static if static is not None else GaussianArray.empty(), dynamic, tracks,
                       cams, int(m["frame_count"]))
    scene.validate()
    spec = SceneSpec.from_dict(m["spec"]) if m.get("spec") else None
    return scene, spec


def scenes_equal(a: SceneModel, b: SceneModel) -> bool:
    if a.frame_count != b.frame_count or sorted(a.dynamic_gaussians) != sorted(b.dynamic_gaussians):
        return False
    if not a.static_gaussians.equals(b.static_gaussians):
        return False
    if not all(a.dynamic_gaussians[k].equals(b.dynamic_gaussians[k]) for k in a.dynamic_gaussians):
        return False
    if [c.to_dict() for c in a.cameras] != [c.to_dict() for c in b.cameras]:
        return False
    if sorted(a.tracks) != sorted(b.tracks):
        return False
    return all(_track_to_dict(a.tracks[k]) == _track_to_dict(b.tracks[k]) for k in a.tracks)


def frame_times(scene: SceneModel) -> list[float]:
    return [c.time for c in scene.cameras]


def default_objects(spec: SceneSpec, count: int = 2) -> list[ObjectSpec]:
    """A few cars driving along the street within the base frame window."""
    objs = []
    F = spec.frame_count
    for k in range(count):
        y = spec.street_width * (0.45 + 0.2 * k)
        x0 = spec.street_length * (0.2 + 0.3 * k)
        objs.append(ObjectSpec("car", 0, F, "constant_velocity", 150, (x0, y, 0.0),
                               (0.5 * spec.street_length / max(F, 1), 0.0, 0.0)))
    return objs


def object_specs(specs: Sequence[dict]) -> list[ObjectSpec]:
    return SceneSpec.from_dict({"objects": list(specs)}).objects
