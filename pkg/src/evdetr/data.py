"""Dataset access for simulator output: sequences of frames, events, labels."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import MissingInputError
from .events import EventStream, SensorGeometry, TemporalBin, parse_events_evt1, rasterize
from .simulator import GroundTruthLabel, load_labels, read_pgm


class SequenceData:
    """Lazy view of one sequence directory; caches frames and rasterized bins."""

    def __init__(self, seq_dir: str | Path):
        self.dir = Path(seq_dir)
        manifest_path = self.dir / "manifest.json"
        if not manifest_path.exists():
            raise MissingInputError(f"no manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        self.geometry = SensorGeometry(self.manifest["width"], self.manifest["height"])
        self.frame_period_us = int(self.manifest["frame_period_us"])
        self.n_frames = int(self.manifest["n_frames"])
        self.scenario = self.manifest["scenario"]
        self.duration_us = int(self.manifest["duration_s"] * 1e6)
        self._frames: dict[int, np.ndarray] = {}
        self._stream: EventStream | None = None
        self._labels: list[GroundTruthLabel] | None = None
        self._bin_cache: dict[tuple, np.ndarray] = {}

    @property
    def name(self) -> str:
        return self.dir.name

    def frame(self, idx: int) -> np.ndarray:
        if idx not in self._frames:
            self._frames[idx] = read_pgm(self.dir / "frames" / f"{idx:06d}.pgm")
        return self._frames[idx]

    def frame_time(self, idx: int) -> int:
        return idx * self.frame_period_us

    @property
    def stream(self) -> EventStream:
        if self._stream is None:
            self._stream = parse_events_evt1((self.dir / "events.evt1").read_bytes())
        return self._stream

    @property
    def labels(self) -> list[GroundTruthLabel]:
        if self._labels is None:
            self._labels = load_labels(self.dir)
        return self._labels

    def bin_ending_at(self, t_end: int, window_us: int) -> TemporalBin:
        s = self.stream
        lo = np.searchsorted(s.t, t_end - window_us, side="left")
        hi = np.searchsorted(s.t, t_end, side="left")
        return TemporalBin(t_end - window_us, t_end, s.x[lo:hi], s.y[lo:hi], s.t[lo:hi], s.p[lo:hi])

    def event_tensor(self, t_end: int, window_us: int, kind: str, voxel_channels=5, tau=10000.0, normalize=False) -> np.ndarray:
        key = (t_end, window_us, kind, voxel_channels, tau, normalize)
        if key not in self._bin_cache:
            b = self.bin_ending_at(t_end, window_us)
            self._bin_cache[key] = rasterize(
                b, self.geometry, kind, voxel_channels=voxel_channels, tau=tau, normalize=normalize
            ).tensor
        return self._bin_cache[key]

    def gt_arrays(self, label_idx: int) -> tuple[np.ndarray, np.ndarray]:
        """Normalized center-form gt boxes [n, 4] and class ids [n] at label idx."""
        label = self.labels[label_idx]
        w, h = self.geometry.width, self.geometry.height
        boxes = np.array(
            [[(b.x + b.w / 2) / w, (b.y + b.h / 2) / h, b.w / w, b.h / h] for b in label.boxes]
        ).reshape(-1, 4)
        cls = np.array([b.cls for b in label.boxes], dtype=np.int64)
        return boxes, cls


def resize_chw(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array (align-corners convention)."""
    c, h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr
    ys = np.linspace(0.0, h - 1, out_h)
    xs = np.linspace(0.0, w - 1, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    a = arr[:, y0[:, None], x0[None, :]]
    b = arr[:, y0[:, None], x1[None, :]]
    cc = arr[:, y1[:, None], x0[None, :]]
    d = arr[:, y1[:, None], x1[None, :]]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + cc * fy * (1 - fx) + d * fy * fx)


RESIZE_HEIGHTS = tuple(range(256, 577, 32))


def resize_target(rng, base_h: int, base_w: int) -> tuple[int, int]:
    """Training-time size draw: height from the documented range, width by aspect."""
    h = int(RESIZE_HEIGHTS[int(rng.integers(0, len(RESIZE_HEIGHTS)))])
    return h, max(1, int(round(h * base_w / base_h)))


class DatasetIndex:
    """Discovers sequences under a dataset root, grouped by split prefix."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not self.root.exists():
            raise MissingInputError(f"dataset root {self.root} does not exist")
        self.sequences: dict[str, SequenceData] = {}
        for manifest in sorted(self.root.rglob("manifest.json")):
            seq = SequenceData(manifest.parent)
            rel = manifest.parent.relative_to(self.root).as_posix()
            self.sequences[rel] = seq
        if not self.sequences:
            raise MissingInputError(f"no sequences under {self.root}")

    def split(self, name: str, scenario: str | None = None) -> list[SequenceData]:
        out = []
        for rel, seq in self.sequences.items():
            if rel.startswith(f"{name}/") and (scenario is None or seq.scenario == scenario):
                out.append(seq)
        return out
