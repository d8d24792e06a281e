"""Simulator contracts: rendering, threshold sampling, labels, datasets."""

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from evdetr.errors import ValidationError
from evdetr.events import parse_events_evt1
from evdetr.simulator import (
    CameraModel,
    SceneObject,
    SceneScript,
    SequenceSpec,
    VelocitySegment,
    emit_labels,
    generate_events,
    read_pgm,
    render_frame,
    render_scene_raw,
    write_dataset,
    write_pgm,
)
from evdetr.suites import make_scene, suite_sequences
from evdetr.tensor import RngStream

CAM = CameraModel(width=64, height=48)


def moving_scene(speed=40.0, intensity=0.8, bg=0.2, duration=0.5):
    obj = SceneObject(0, 20.0, 24.0, 14.0, 10.0, intensity, velocity=(VelocitySegment(0.0, speed, 0.0),))
    return SceneScript(duration=duration, background=bg, objects=(obj,))


class TestRenderFrame:
    def test_object_intensity_at_full_illumination(self):
        scene = moving_scene(speed=0.0, intensity=0.8)
        img = render_frame(scene, CAM, 0.0)
        assert img[24, 20] == pytest.approx(0.8)

    def test_uniform_background_without_objects(self):
        scene = SceneScript(duration=1.0, background=0.3, objects=())
        img = render_frame(scene, CAM, 0.25)
        assert np.allclose(img, 0.3)

    def test_painter_rule_higher_z_wins(self):
        lo = SceneObject(0, 20, 20, 16, 12, 0.5, z_order=0)
        hi = SceneObject(1, 24, 20, 16, 12, 0.9, z_order=1)
        scene = SceneScript(duration=1.0, background=0.1, objects=(lo, hi))
        img = render_scene_raw(scene, CAM, 0.0)
        assert img[20, 24] == pytest.approx(0.9)  # overlap pixel
        assert img[20, 13] == pytest.approx(0.5)  # lo-only pixel

    def test_illumination_multiplier_applies(self):
        scene = SceneScript(
            duration=1.0, background=0.4, objects=(), illumination=((0.0, 0.25),)
        )
        assert np.allclose(render_frame(scene, CAM, 0.5), 0.1)

    def test_blur_averages_subrenders(self):
        fast = SceneObject(0, 20, 24, 10, 10, 0.9, velocity=(VelocitySegment(0.0, 200.0, 0.0),))
        blurred = SceneScript(duration=1.0, background=0.1, objects=(fast,), blur_frames=frozenset({5}))
        sharp = SceneScript(duration=1.0, background=0.1, objects=(fast,))
        t = 5 * CAM.frame_period_us / 1e6
        img_blur = render_frame(blurred, CAM, t)
        img_sharp = render_frame(sharp, CAM, t)
        assert not np.allclose(img_blur, img_sharp)
        # blur preserves total light up to window clipping at borders
        assert 0.2 < len(np.unique(np.round(img_blur, 6))) / len(np.unique(np.round(img_sharp, 6)))

    def test_out_of_range_time_rejected(self):
        with pytest.raises(ValidationError):
            render_frame(moving_scene(), CAM, 0.9)


class TestGenerateEvents:
    def test_static_scene_emits_nothing(self):
        scene = moving_scene(speed=0.0)
        assert len(generate_events(scene, CAM, 0, 500_000)) == 0

    def test_multi_threshold_crossing_emits_multiple(self):
        # an edge crossing changes ln R by 2.5 theta -> exactly 2 events per crossing
        theta = CAM.theta_th
        bg = 0.2
        obj_intensity = bg * math.exp(2.5 * theta)
        obj = SceneObject(0, 8.0, 24.0, 10.0, 8.0, obj_intensity, velocity=(VelocitySegment(0.0, 16.0, 0.0),))
        scene = SceneScript(duration=0.5, background=bg, objects=(obj,))
        stream = generate_events(scene, CAM, 0, 500_000)
        assert len(stream) > 0
        # pick one pixel freshly covered by the leading edge: it got brighter
        lead = stream.x[stream.p > 0]
        counts = {}
        for x, y, p in zip(stream.x, stream.y, stream.p):
            counts.setdefault((x, y, p), 0)
            counts[(x, y, p)] += 1
        brightened = {k: v for k, v in counts.items() if k[2] == 1}
        assert brightened and all(v % 2 == 0 for v in brightened.values())

    def test_darkening_pixel_negative_polarity(self):
        # dark object entering a bright background pixel
        bg = 0.8
        obj = SceneObject(0, 8.0, 24.0, 10.0, 8.0, 0.2, velocity=(VelocitySegment(0.0, 16.0, 0.0),))
        scene = SceneScript(duration=0.25, background=bg, objects=(obj,))
        stream = generate_events(scene, CAM, 0, 250_000)
        covered = (stream.x >= 13) & (stream.x <= 16)  # pixels newly covered by the leading edge
        assert len(stream) and (stream.p[covered] == -1).all()

    def test_timestamps_within_window_and_sorted(self):
        stream = generate_events(moving_scene(), CAM, 100_000, 400_000)
        assert (np.diff(stream.t) >= 0).all()
        assert stream.t.min() > 100_000 and stream.t.max() <= 400_000

    def test_reconstruction_invariant(self):
        scene = moving_scene(speed=55.0)
        cam = CAM
        stream = generate_events(scene, cam, 0, 500_000)
        theta = cam.theta_th
        ref0 = np.log(render_scene_raw(scene, cam, 0.0))
        cum = np.zeros((cam.height, cam.width))
        ei = 0
        for t_now in range(cam.dt_sim_us, 500_001, cam.dt_sim_us):
            while ei < len(stream) and stream.t[ei] <= t_now:
                cum[stream.y[ei], stream.x[ei]] += stream.p[ei]
                ei += 1
            resid = np.abs(theta * cum - (np.log(render_scene_raw(scene, cam, t_now / 1e6)) - ref0))
            assert resid.max() <= theta + 1e-9

    def test_nonpositive_intensity_rejected(self):
        with pytest.raises(ValidationError):
            SceneScript(duration=1.0, background=0.0, objects=())


class TestEmitLabels:
    def test_box_geometry(self):
        cam = CameraModel(width=346, height=260)
        obj = SceneObject(1, 100.0, 100.0, 20.0, 10.0, 0.5)
        labels = emit_labels(SceneScript(duration=0.2, background=0.2, objects=(obj,)), cam)
        b = labels[0].boxes[0]
        assert (b.x, b.y, b.w, b.h, b.cls) == (90.0, 95.0, 20.0, 10.0, 1)

    def test_exited_object_omitted(self):
        obj = SceneObject(0, 10.0, 24.0, 8.0, 8.0, 0.5, velocity=(VelocitySegment(0.0, -200.0, 0.0),))
        labels = emit_labels(SceneScript(duration=0.5, background=0.2, objects=(obj,)), CAM)
        assert len(labels[0].boxes) == 1
        assert len(labels[-1].boxes) == 0

    def test_constant_velocity_centers(self):
        scene = moving_scene(speed=40.0)
        labels = emit_labels(scene, CAM)
        for a, b in zip(labels, labels[1:]):
            dx = (b.boxes[0].x + b.boxes[0].w / 2) - (a.boxes[0].x + a.boxes[0].w / 2)
            assert dx == pytest.approx(40.0 * CAM.frame_period_us / 1e6, abs=1e-9)

    def test_cadence(self):
        labels = emit_labels(moving_scene(duration=1.0), CAM)
        assert len(labels) == 25
        assert labels[1].t_us - labels[0].t_us == 40_000


def digest_dir(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.rglob("*")):
        if f.is_file():
            h.update(f.relative_to(path).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()


class TestWriteDataset:
    def test_cadence_arithmetic(self, tmp_path):
        spec = SequenceSpec("train/normal_000", "normal", moving_scene(duration=1.0))
        write_dataset([spec], CAM, tmp_path, seed=5)
        seq = tmp_path / "train" / "normal_000"
        assert len(list((seq / "frames").glob("*.pgm"))) == 25
        assert (seq / "events.evt1").exists()
        labels = (seq / "labels.csv").read_text().strip().splitlines()
        assert len(labels) == 26  # header + 25 rows (one object per timestamp)

    def test_deterministic_under_seed(self, tmp_path):
        specs = suite_sequences("desk-tiny", CAM, seed=3)[:2]
        write_dataset(specs, CAM, tmp_path / "a", seed=3)
        write_dataset(specs, CAM, tmp_path / "b", seed=3)
        assert digest_dir(tmp_path / "a") == digest_dir(tmp_path / "b")

    def test_event_roundtrip_matches_manifest(self, tmp_path):
        spec = SequenceSpec("train/normal_000", "normal", moving_scene(duration=0.5))
        write_dataset([spec], CAM, tmp_path, seed=1)
        seq = tmp_path / "train" / "normal_000"
        manifest = json.loads((seq / "manifest.json").read_text())
        stream = parse_events_evt1((seq / "events.evt1").read_bytes())
        assert manifest["n_events"] == len(stream)
        assert manifest["scenario"] == "normal"

    def test_pgm_roundtrip(self, tmp_path):
        img = np.linspace(0, 1, 64 * 48).reshape(48, 64)
        write_pgm(tmp_path / "x.pgm", img)
        back = read_pgm(tmp_path / "x.pgm")
        assert back.shape == (48, 64)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


class TestSuites:
    def test_scene_classes_have_distinct_shapes(self):
        rng = RngStream(0)
        for scenario in ("normal", "motion_blur", "low_light"):
            scene = make_scene(rng, scenario, CAM)
            assert scene.objects
            if scenario == "low_light":
                assert scene.illumination_at(0.0) < 0.2
            if scenario == "motion_blur":
                assert scene.blur_frames

    def test_desk_small_split_counts(self):
        specs = suite_sequences("desk-small", CAM, seed=0)
        splits = {"train": 0, "val": 0, "test": 0}
        for s in specs:
            splits[s.name.split("/")[0]] += 1
        assert splits == {"train": 40, "val": 10, "test": 10}
