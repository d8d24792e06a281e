"""Built-in scene suites: randomized scripted scenes per scenario.

Object classes are separable by shape and brightness: cars are wide and
bright, pedestrians tall and mid-gray, two-wheelers squarish and dark.
Scenario knobs follow the degradation model: motion-blur scenes move fast
with every frame blurred, low-light scenes drop the frame illumination to
near the noise floor. Events always come from the clean scene.
"""

from __future__ import annotations

import math

from .errors import ConfigError
from .simulator import CameraModel, SceneObject, SceneScript, SequenceSpec, VelocitySegment
from .tensor import RngStream

# (w_lo, w_hi, h_lo, h_hi, intensity_lo, intensity_hi) per class
_CLASS_SHAPES = (
    (32.0, 48.0, 15.0, 23.0, 0.72, 0.92),  # car
    (12.0, 18.0, 30.0, 44.0, 0.48, 0.62),  # pedestrian
    (20.0, 28.0, 20.0, 28.0, 0.28, 0.40),  # two-wheeler
)

_SPEED = {"normal": (25.0, 70.0), "motion_blur": (120.0, 240.0), "low_light": (30.0, 80.0)}


def make_scene(rng: RngStream, scenario: str, camera: CameraModel, duration: float = 1.0, max_objects: int = 2) -> SceneScript:
    w, h = camera.width, camera.height
    n_obj = int(rng.integers(1, max_objects + 1))
    objects = []
    centers: list[tuple[float, float]] = []
    for i in range(n_obj):
        cls = int(rng.integers(0, len(_CLASS_SHAPES)))
        w_lo, w_hi, h_lo, h_hi, i_lo, i_hi = _CLASS_SHAPES[cls]
        ow = float(rng.uniform(w_lo, w_hi))
        oh = float(rng.uniform(h_lo, h_hi))
        for _ in range(12):
            cx = float(rng.uniform(0.18 * w, 0.82 * w))
            cy = float(rng.uniform(0.22 * h, 0.78 * h))
            if all(abs(cx - px) + abs(cy - py) > 0.45 * (ow + oh) for px, py in centers):
                break
        centers.append((cx, cy))
        speed = float(rng.uniform(*_SPEED[scenario]))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        vx, vy = speed * math.cos(angle), speed * math.sin(angle) * 0.6
        # aim the first leg toward the far side so slow objects stay visible
        if (cx < w / 2) != (vx > 0):
            vx = -vx
        segments = (VelocitySegment(0.0, vx, vy), VelocitySegment(duration / 2, -vx, -vy))
        objects.append(
            SceneObject(
                cls=cls,
                cx=cx,
                cy=cy,
                width=ow,
                height=oh,
                intensity=float(rng.uniform(i_lo, i_hi)),
                velocity=segments,
                z_order=i,
            )
        )
    illumination = ((0.0, float(rng.uniform(0.08, 0.15))),) if scenario == "low_light" else ((0.0, 1.0),)
    n_frames = int(duration * 1e6) // camera.frame_period_us
    blur = frozenset(range(n_frames + 1)) if scenario == "motion_blur" else frozenset()
    return SceneScript(
        duration=duration,
        background=float(rng.uniform(0.08, 0.14)),
        objects=tuple(objects),
        illumination=illumination,
        blur_frames=blur,
    )


def _mix(counts: dict[str, int]) -> list[str]:
    out = []
    for scenario, n in counts.items():
        out.extend([scenario] * n)
    return out


_SUITES = {
    # split -> scenario -> sequence count
    "desk-small": {
        "train": {"normal": 24, "motion_blur": 8, "low_light": 8},
        "val": {"normal": 6, "motion_blur": 2, "low_light": 2},
        "test": {"normal": 4, "motion_blur": 3, "low_light": 3},
    },
    "desk-tiny": {
        "train": {"normal": 2, "motion_blur": 1, "low_light": 1},
        "val": {"normal": 1},
        "test": {"normal": 1, "motion_blur": 1, "low_light": 1},
    },
}


def suite_sequences(suite: str, camera: CameraModel, seed: int) -> list[SequenceSpec]:
    if suite not in _SUITES:
        raise ConfigError(f"unknown suite {suite!r}; available: {sorted(_SUITES)}")
    master = RngStream(seed)
    specs = []
    tag = 0
    for split, counts in _SUITES[suite].items():
        per_scenario: dict[str, int] = {}
        for scenario in _mix(counts):
            idx = per_scenario.get(scenario, 0)
            per_scenario[scenario] = idx + 1
            scene = make_scene(master.child(1000 + tag), scenario, camera)
            specs.append(SequenceSpec(f"{split}/{scenario}_{idx:03d}", scenario, scene))
            tag += 1
    return specs


def available_suites() -> list[str]:
    return sorted(_SUITES)
