import json
import subprocess
import sys

import numpy as np
import pytest

from splatstream import io
from splatstream.cli import main
from splatstream.core import Camera
from splatstream.project import pixel_coords
from splatstream.scenegen import SceneSpec

from test_pointinit import look_y_camera


@pytest.fixture
def spec_file(tmp_path):
    spec = SceneSpec(frame_count=4, static_density=40, image_width=40, image_height=40, focal=40)
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec.to_dict()))
    return path


def test_gen_scene_and_render_both(tmp_path, spec_file, capsys):
    out = tmp_path / "out"
    assert main(["gen-scene", "--spec", str(spec_file), "--objects", "1", "--out-dir", str(out),
                 "--name", "s", "--ply", "--seed", "4"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["frames"] == 4 and info["objects"] == 1
    assert (out / "s.ply").exists()
    assert main(["render", str(out / "s.scene.json"), "--mode", "both", "--lod-r", "0",
                 "--out-dir", str(tmp_path / "r")]) == 0
    text = capsys.readouterr().out
    diff = float(text.split("max per-pixel diff:")[1].split()[0])
    assert diff < 1e-5
    stats = json.loads((tmp_path / "r" / "render_stats.json").read_text())
    assert stats["frames"] == 4 and len(stats["views"]) == 8
    img = io.read_ppm(tmp_path / "r" / "streamlined_0002.ppm")
    assert img.shape == (40, 40, 3)
    assert io.read_depth(tmp_path / "r" / "streamlined_0002.depth").shape == (40, 40)


def test_gen_scene_seed_determinism(tmp_path, spec_file):
    for d in ("a", "b"):
        assert main(["gen-scene", "--spec", str(spec_file), "--seed", "9", "--out-dir", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "scene.scene.bin").read_bytes() == (tmp_path / "b" / "scene.scene.bin").read_bytes()


def test_render_warmup_with_lod(tmp_path, spec_file):
    main(["gen-scene", "--spec", str(spec_file), "--out-dir", str(tmp_path)])
    assert main(["render", str(tmp_path / "scene.scene.json"), "--warmup", "--frames", "1:3",
                 "--lod-r", "4", "--out-dir", str(tmp_path / "r")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").glob("*.ppm")) == ["streamlined_0001.ppm", "streamlined_0002.ppm"]


def test_bench_small(tmp_path, spec_file, capsys):
    assert main(["bench", "--spec", str(spec_file), "--scales", "1,2", "--repeats", "1",
                 "--out-dir", str(tmp_path)]) == 0
    rows = io.read_json(tmp_path / "bench.json")["records"]
    assert len(rows) == 4
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert lines[0] == "mode,scale,gaussians,per_view_ms,filter_ms,project_ms,lod_ms,blend_ms"
    assert len(lines) == 5
    assert (tmp_path / "bench.dat").read_text().startswith("# workers 1")


def test_metrics_self(tmp_path, capsys):
    img = np.random.default_rng(0).uniform(0, 1, (20, 20, 3))
    io.write_ppm(tmp_path / "a.ppm", img)
    assert main(["metrics", str(tmp_path / "a.ppm"), str(tmp_path / "a.ppm")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["psnr"] == "inf" and res["ssim"] == 1.0


def test_augment(tmp_path, capsys):
    cloud = np.array([[3.0, 4.0, 1.0], [3.2, 4.1, 1.5], [20.0, 4.0, 0.0]])
    io.write_ply(tmp_path / "c.ply", cloud, np.array([1, 1, 0]))
    cam = look_y_camera([3.5, -10.0, 2.0])
    (tmp_path / "cams.json").write_text(json.dumps([cam.to_dict()]))
    (tmp_path / "labels.json").write_text(json.dumps({"0": "road", "1": "building"}))
    assert main(["augment", str(tmp_path / "c.ply"), "--cameras", str(tmp_path / "cams.json"),
                 "--labels", str(tmp_path / "labels.json"), "--targets", "building", "--bev-grid", "1",
                 "--dz", "1", "--height", "3", "--out-dir", str(tmp_path), "--ascii"]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res == {"original": 3, "augmented": 3, "total": 6, "out": str(tmp_path / "c_augmented.ply")}
    pts, labels = io.read_ply(tmp_path / "c_augmented.ply")
    assert np.allclose(pts[3:], [[3.5, 4.5, 1], [3.5, 4.5, 2], [3.5, 4.5, 3]])


def test_fit_track(tmp_path, capsys):
    rng = np.random.default_rng(0)
    frames = []
    for f in range(4):
        t = -1 + 2 * f / 3
        center = np.array([3.5 + 0.5 * f, 5.0, 1.0])
        d = rng.normal(0, 0.2, (30, 3))
        pts = center + np.r_[d, -d]
        cam = look_y_camera([3.5, -5.0, 1.0])
        cam = Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.rotation, cam.translation, t)
        u, v, inside = pixel_coords(pts, cam)
        m = np.zeros((cam.height, cam.width), dtype=np.uint8)
        m[v[inside], u[inside]] = 1
        io.write_ply(tmp_path / f"l{f}.ply", pts)
        io.write_pgm(tmp_path / f"m{f}.pgm", m)
        frames.append({"lidar": f"l{f}.ply", "camera": cam.to_dict(), "masks": {"7": f"m{f}.pgm"}})
    (tmp_path / "manifest.json").write_text(json.dumps({"frames": frames, "classes": {"7": "car"}}))
    assert main(["fit-track", str(tmp_path / "manifest.json"), "--iterations", "300",
                 "--out-dir", str(tmp_path)]) == 0
    out = io.read_json(tmp_path / "poses.json")
    assert out[0]["instance_id"] == 7 and out[0]["class"] == "car"
    assert len(out[0]["poses"]) == 4 and out[0]["rmse"] < 0.2


def test_runtime_errors_exit_one(tmp_path, capsys):
    assert main(["render", str(tmp_path / "missing.scene.json")]) == 1
    err = capsys.readouterr().err
    assert err.startswith("splatstream render: error:") and len(err.strip().splitlines()) == 1
    io.write_ppm(tmp_path / "a.ppm", np.zeros((20, 20, 3)))
    io.write_ppm(tmp_path / "b.ppm", np.zeros((20, 21, 3)))
    assert main(["metrics", str(tmp_path / "a.ppm"), str(tmp_path / "b.ppm")]) == 1


def test_usage_errors_exit_two():
    for argv in (["render"], ["bench", "--bogus"], ["render", "x", "--mode", "fast"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "splatstream", "metrics"], capture_output=True, text=True)
    assert res.returncode == 2 and "usage" in res.stderr
