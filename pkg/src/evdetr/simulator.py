"""DAVIS sensor simulator: paired frames + events + labels from scripted scenes.

Scenes are layered rectangles with piecewise-constant velocities over a
uniform background. The frame path renders intensity images at a fixed
period, degraded by the scene's illumination multiplier, optional motion
blur (average of sub-renders across the exposure window, centered on the
frame timestamp) and additive Gaussian noise. The event path supersamples
the *unblurred, unit-illumination* scene and emits an event whenever the
per-pixel log intensity drifts a full contrast threshold away from the
pixel's reference level:

    ln R(u, t) - ln R_ref(u) = p * theta_th

crossing k thresholds inside one supersampling step emits k events at
evenly interpolated sub-timestamps. This asymmetry (degraded frames,
clean events) is deliberate: it reproduces the complementarity of the two
modalities that the detector is supposed to exploit.

Dataset layout, per sequence directory:

    frames/%06d.pgm   8-bit grayscale
    events.evt1       binary event stream
    labels.csv        t_us, obj_idx, x, y, w, h, class
    manifest.json     geometry, threshold, frame period, counts, scenario
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .events import EventStream, SensorGeometry, write_events_evt1
from .tensor import RngStream

CLASS_NAMES = ("car", "pedestrian", "two-wheeler")
SCENARIOS = ("normal", "motion_blur", "low_light")


@dataclass(frozen=True)
class VelocitySegment:
    t_start: float  # seconds
    vx: float  # pixels / second
    vy: float


@dataclass(frozen=True)
class SceneObject:
    """A moving rectangle: class, geometry, brightness, and stacking order."""

    cls: int
    cx: float
    cy: float
    width: float
    height: float
    intensity: float
    velocity: tuple[VelocitySegment, ...] = (VelocitySegment(0.0, 0.0, 0.0),)
    z_order: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("object width and height must be positive")
        if not 0.0 < self.intensity <= 1.0:
            raise ValidationError("object intensity must be in (0, 1]")
        if self.cls not in range(len(CLASS_NAMES)):
            raise ValidationError(f"class id {self.cls} out of range")

    def center_at(self, t: float) -> tuple[float, float]:
        cx, cy = self.cx, self.cy
        segs = sorted(self.velocity, key=lambda s: s.t_start)
        for i, seg in enumerate(segs):
            seg_end = segs[i + 1].t_start if i + 1 < len(segs) else t
            dt = min(t, seg_end) - seg.t_start
            if dt <= 0:
                break
            cx += seg.vx * dt
            cy += seg.vy * dt
        return cx, cy


@dataclass(frozen=True)
class SceneScript:
    duration: float  # seconds
    background: float
    objects: tuple[SceneObject, ...]
    illumination: tuple[tuple[float, float], ...] = ((0.0, 1.0),)  # (t_start_s, multiplier)
    blur_frames: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValidationError("scene duration must be positive")
        if self.background <= 0:
            raise ValidationError("background intensity must be positive (log-intensity defined)")
        if any(v <= 0 for _, v in self.illumination):
            raise ValidationError("illumination multiplier must stay positive")

    def illumination_at(self, t: float) -> float:
        value = self.illumination[0][1]
        for t_start, v in self.illumination:
            if t >= t_start:
                value = v
        return value


@dataclass(frozen=True)
class CameraModel:
    """DAVIS-like sensor: frame cadence plus contrast-threshold event sampling."""

    width: int = 346
    height: int = 260
    theta_th: float = 0.15
    frame_period_us: int = 40_000  # 25 FPS
    dt_sim_us: int = 1_000
    exposure_us: int = 32_000
    exposure_samples: int = 8
    timestamp_jitter_us: float = 0.0
    frame_noise_sigma: float = 0.02
    event_noise_rate: float = 0.0  # background events / pixel / second
    refractory_us: int = 0  # hook, off by default
    threshold_mismatch: float = 0.0  # hook, off by default

    def __post_init__(self):
        if self.theta_th <= 0:
            raise ValidationError("theta_th must be positive")
        if self.dt_sim_us >= self.frame_period_us:
            raise ValidationError("simulation step must be finer than the frame period")

    @property
    def geometry(self) -> SensorGeometry:
        return SensorGeometry(self.width, self.height)


@dataclass(frozen=True)
class LabeledBox:
    obj_idx: int
    x: float
    y: float
    w: float
    h: float
    cls: int


@dataclass(frozen=True)
class GroundTruthLabel:
    t_us: int
    boxes: tuple[LabeledBox, ...]


def render_scene_raw(scene: SceneScript, camera: CameraModel, t: float) -> np.ndarray:
    """Painter's-algorithm intensity image, no illumination / blur / noise."""
    img = np.full((camera.height, camera.width), scene.background)
    for obj in sorted(scene.objects, key=lambda o: o.z_order):
        cx, cy = obj.center_at(t)
        x0 = max(int(np.ceil(cx - obj.width / 2 - 0.5)), 0)
        x1 = min(int(np.floor(cx + obj.width / 2 - 0.5)) + 1, camera.width)
        y0 = max(int(np.ceil(cy - obj.height / 2 - 0.5)), 0)
        y1 = min(int(np.floor(cy + obj.height / 2 - 0.5)) + 1, camera.height)
        if x1 > x0 and y1 > y0:
            img[y0:y1, x0:x1] = obj.intensity
    return img


def render_frame(scene: SceneScript, camera: CameraModel, t: float) -> np.ndarray:
    """Frame-path render at time t: illumination applied, blur if scheduled."""
    if not 0.0 <= t <= scene.duration:
        raise ValidationError(f"render time {t} outside [0, {scene.duration}]")
    frame_idx = int(round(t * 1e6 / camera.frame_period_us))
    if frame_idx in scene.blur_frames:
        half = camera.exposure_us / 2e6
        times = np.linspace(t - half, t + half, camera.exposure_samples)
        times = np.clip(times, 0.0, scene.duration)
        acc = np.zeros((camera.height, camera.width))
        for ts in times:
            acc += render_scene_raw(scene, camera, ts) * scene.illumination_at(ts)
        return acc / camera.exposure_samples
    return render_scene_raw(scene, camera, t) * scene.illumination_at(t)


def generate_events(
    scene: SceneScript,
    camera: CameraModel,
    t0_us: int,
    t1_us: int,
    rng: RngStream | None = None,
) -> EventStream:
    """Contrast-threshold event sampling of the clean scene over [t0, t1].

    Per pixel, a reference log intensity advances by whole multiples of
    theta_th whenever the supersampled log intensity has drifted at least
    that far; each multiple emits one event, timestamped by linear
    interpolation inside the supersampling step.
    """
    if t0_us >= t1_us:
        raise ValidationError("generate_events needs t0 < t1")
    theta = camera.theta_th
    raw0 = render_scene_raw(scene, camera, t0_us / 1e6)
    if raw0.min() <= 0:
        raise ValidationError("non-positive scene intensity: log undefined")
    ref = np.log(raw0)
    times = np.arange(t0_us + camera.dt_sim_us, t1_us + 1, camera.dt_sim_us, dtype=np.int64)
    if len(times) == 0 or times[-1] != t1_us:
        times = np.append(times, t1_us)
    xs, ys, ts, ps = [], [], [], []
    t_prev = t0_us
    for t_now in times:
        raw = render_scene_raw(scene, camera, t_now / 1e6)
        if raw.min() <= 0:
            raise ValidationError("non-positive scene intensity: log undefined")
        cur = np.log(raw)
        diff = cur - ref
        n = np.floor(np.abs(diff) / theta).astype(np.int64)
        active = n > 0
        if active.any():
            yy, xx = np.nonzero(active)
            counts = n[active]
            signs = np.sign(diff[active]).astype(np.int64)
            absdiff = np.abs(diff[active])
            step = t_now - t_prev
            for i in range(1, int(counts.max()) + 1):
                sel = counts >= i
                frac = i * theta / absdiff[sel]
                ev_t = t_prev + np.rint(step * frac).astype(np.int64)
                xs.append(xx[sel])
                ys.append(yy[sel])
                ts.append(ev_t)
                ps.append(signs[sel])
            ref[yy, xx] += signs * counts * theta
        t_prev = t_now
    if xs:
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        t = np.concatenate(ts)
        p = np.concatenate(ps)
    else:
        x = y = t = p = np.empty(0, np.int64)
    if camera.event_noise_rate > 0 and rng is not None:
        span_s = (t1_us - t0_us) / 1e6
        lam = camera.event_noise_rate * span_s * camera.width * camera.height
        count = int(rng.poisson(lam))
        if count:
            x = np.concatenate([x, rng.integers(0, camera.width, count)])
            y = np.concatenate([y, rng.integers(0, camera.height, count)])
            t = np.concatenate([t, rng.integers(t0_us + 1, t1_us + 1, count)])
            p = np.concatenate([p, rng.integers(0, 2, count) * 2 - 1])
    if camera.timestamp_jitter_us > 0 and rng is not None and len(t):
        t = np.clip(t + np.rint(rng.normal(camera.timestamp_jitter_us, len(t))).astype(np.int64), t0_us, t1_us)
    order = np.lexsort((p, x, y, t))
    return EventStream.from_arrays(camera.geometry, x[order], y[order], t[order], p[order], presorted=True)


def emit_labels(scene: SceneScript, camera: CameraModel) -> list[GroundTruthLabel]:
    """One label record per frame timestamp; boxes clipped, off-screen omitted."""
    labels = []
    n_frames = int(scene.duration * 1e6) // camera.frame_period_us
    for k in range(n_frames):
        t_us = k * camera.frame_period_us
        t = t_us / 1e6
        boxes = []
        for idx, obj in enumerate(scene.objects):
            cx, cy = obj.center_at(t)
            x0 = max(cx - obj.width / 2, 0.0)
            y0 = max(cy - obj.height / 2, 0.0)
            x1 = min(cx + obj.width / 2, float(camera.width))
            y1 = min(cy + obj.height / 2, float(camera.height))
            if x1 <= x0 or y1 <= y0:
                continue
            boxes.append(LabeledBox(idx, x0, y0, x1 - x0, y1 - y0, obj.cls))
        labels.append(GroundTruthLabel(t_us, tuple(boxes)))
    return labels


def write_pgm(path: Path, img: np.ndarray) -> None:
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5 {data.shape[1]} {data.shape[0]} 255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    header, rest = raw.split(b"\n", 1)
    magic, w, h, maxval = header.split()
    if magic != b"P5":
        raise ValidationError(f"{path}: not a binary PGM")
    w, h = int(w), int(h)
    img = np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)
    return img.astype(np.float64) / float(maxval)


@dataclass(frozen=True)
class SequenceSpec:
    name: str
    scenario: str
    scene: SceneScript


def write_sequence(spec: SequenceSpec, camera: CameraModel, out_dir: Path, rng: RngStream) -> dict:
    """Render one sequence to disk; returns its manifest dictionary."""
    seq_dir = Path(out_dir) / spec.name
    frame_dir = seq_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    scene = spec.scene
    labels = emit_labels(scene, camera)
    n_frames = len(labels)
    for k in range(n_frames):
        t = k * camera.frame_period_us / 1e6
        img = render_frame(scene, camera, t)
        if camera.frame_noise_sigma > 0:
            img = img + rng.normal(camera.frame_noise_sigma, img.shape)
        write_pgm(frame_dir / f"{k:06d}.pgm", np.clip(img, 0.0, 1.0))
    stream = generate_events(scene, camera, 0, int(scene.duration * 1e6), rng=rng)
    (seq_dir / "events.evt1").write_bytes(write_events_evt1(stream))
    with open(seq_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_us", "obj_idx", "x", "y", "w", "h", "class"])
        for label in labels:
            for b in label.boxes:
                writer.writerow([label.t_us, b.obj_idx, f"{b.x:.3f}", f"{b.y:.3f}", f"{b.w:.3f}", f"{b.h:.3f}", b.cls])
    manifest = {
        "width": camera.width,
        "height": camera.height,
        "theta_th": camera.theta_th,
        "frame_period_us": camera.frame_period_us,
        "n_frames": n_frames,
        "n_events": len(stream),
        "n_labels": sum(len(l.boxes) for l in labels),
        "scenario": spec.scenario,
        "duration_s": scene.duration,
    }
    with open(seq_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def write_dataset(sequences: list[SequenceSpec], camera: CameraModel, out_dir: str | Path, seed: int) -> dict:
    """Write every sequence plus a top-level index; deterministic under seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, spec in enumerate(sequences):
        rng = RngStream(seed).child(i)
        index[spec.name] = write_sequence(spec, camera, out_dir, rng)
    with open(out_dir / "dataset.json", "w") as fh:
        json.dump({"sequences": index, "seed": seed}, fh, indent=1, sort_keys=True)
    return index


def load_labels(seq_dir: Path) -> list[GroundTruthLabel]:
    by_t: dict[int, list[LabeledBox]] = {}
    with open(Path(seq_dir) / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            t = int(row["t_us"])
            by_t.setdefault(t, []).append(
                LabeledBox(int(row["obj_idx"]), float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"]), int(row["class"]))
            )
    manifest = json.loads((Path(seq_dir) / "manifest.json").read_text())
    labels = []
    for k in range(manifest["n_frames"]):
        t = k * manifest["frame_period_us"]
        labels.append(GroundTruthLabel(t, tuple(by_t.get(t, ()))))
    return labels
