"""Asynchronous event streams: parsing, binning, and dense representations.

An event is the AER tuple (x, y, t, p) with t in microseconds and polarity
p in {-1, +1}. Streams are immutable, columnar, and sorted by timestamp;
binning and rasterization are pure functions, safe to run in parallel over
bins.

Two interchange formats are supported:

* text: one event per line, ASCII ``t x y p``;
* binary ``evt1``: header {magic "EVT1", u16 width, u16 height, u64 count}
  followed by ``count`` little-endian 16-byte records
  {i64 t, u16 x, u16 y, i8 p, 3 pad bytes}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ParseError, ValidationError
from .tensor import _sigmoid_np

EVT1_MAGIC = b"EVT1"
EVT1_HEADER = struct.Struct("<4sHHQ")
EVT1_RECORD = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "<i1"), ("pad", "V3")])


class SensorGeometry(NamedTuple):
    width: int
    height: int


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-sorted event container over a fixed sensor geometry."""

    geometry: SensorGeometry
    x: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    y: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    t: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    @classmethod
    def from_arrays(cls, geometry: SensorGeometry, x, y, t, p, presorted: bool = False) -> "EventStream":
        x = np.asarray(x, np.int64)
        y = np.asarray(y, np.int64)
        t = np.asarray(t, np.int64)
        p = np.asarray(p, np.int64)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValidationError("event arrays must share one length")
        if len(x):
            if x.min() < 0 or x.max() >= geometry.width or y.min() < 0 or y.max() >= geometry.height:
                raise ValidationError(f"event coordinates outside {geometry.width}x{geometry.height} sensor")
            if not np.isin(p, (-1, 1)).all():
                raise ValidationError("polarity must be -1 or +1")
            if not presorted:
                order = np.argsort(t, kind="stable")
                x, y, t, p = x[order], y[order], t[order], p[order]
            elif np.any(np.diff(t) < 0):
                raise ValidationError("presorted stream has decreasing timestamps")
        return cls(geometry, x, y, t, p)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self.t)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def merge(self, other: "EventStream") -> "EventStream":
        if other.geometry != self.geometry:
            raise ValidationError("cannot merge streams with different geometries")
        return EventStream.from_arrays(
            self.geometry,
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.p, other.p]),
        )


@dataclass(frozen=True)
class BinningSpec:
    """Sliding-window layout: bins of ``window`` microseconds every ``stride``."""

    window: int
    stride: int
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise ValidationError("window and stride must be positive")
        if self.t_end <= self.t_start:
            raise ValidationError("t_end must exceed t_start")


@dataclass(frozen=True)
class TemporalBin:
    """Events of one half-open window [t_begin, t_end); queries at t_end."""

    t_begin: int
    t_end: int
    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray

    @property
    def t_stamp(self) -> int:
        return self.t_end

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class EventTensor:
    """Dense [C, H, W] rasterization of one temporal bin."""

    kind: str
    tensor: np.ndarray
    t_stamp: int
    source_bin: int


def parse_events(source: bytes, format: str, geometry: SensorGeometry | None = None) -> EventStream:
    """Parse a byte stream in either interchange format.

    Text needs the sensor geometry for validation; evt1 carries its own.
    """
    if format == "text":
        if geometry is None:
            raise ValidationError("text event parsing needs a sensor geometry")
        return parse_events_text(source, geometry)
    if format == "binary":
        return parse_events_evt1(source)
    raise ValidationError(f"unknown event format {format!r}")


def parse_events_text(source: bytes, geometry: SensorGeometry) -> EventStream:
    """Parse ``t x y p`` lines; errors carry the byte offset of the bad record."""
    xs, ys, ts, ps = [], [], [], []
    offset = 0
    for line in source.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            parts = stripped.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", offset)
            try:
                t, x, y, p = (int(v) for v in parts)
            except ValueError:
                raise ParseError(f"non-integer field in {stripped.decode(errors='replace')!r}", offset) from None
            if p not in (-1, 1):
                raise ParseError(f"polarity {p} not in {{-1, 1}}", offset)
            ts.append(t)
            xs.append(x)
            ys.append(y)
            ps.append(p)
        offset += len(line)
    return EventStream.from_arrays(geometry, xs, ys, ts, ps)


def write_events_text(stream: EventStream) -> bytes:
    lines = [f"{t} {x} {y} {p}\n" for x, y, t, p in zip(stream.x, stream.y, stream.t, stream.p)]
    return "".join(lines).encode("ascii")


def parse_events_evt1(source: bytes) -> EventStream:
    if len(source) < EVT1_HEADER.size:
        raise ParseError("truncated evt1 header", 0)
    magic, width, height, count = EVT1_HEADER.unpack_from(source, 0)
    if magic != EVT1_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    expected = EVT1_HEADER.size + count * EVT1_RECORD.itemsize
    if len(source) < expected:
        raise ParseError(f"expected {expected} bytes, got {len(source)}", len(source))
    rec = np.frombuffer(source, dtype=EVT1_RECORD, count=count, offset=EVT1_HEADER.size)
    return EventStream.from_arrays(SensorGeometry(width, height), rec["x"], rec["y"], rec["t"], rec["p"])


def write_events_evt1(stream: EventStream) -> bytes:
    rec = np.zeros(len(stream), dtype=EVT1_RECORD)
    rec["t"] = stream.t
    rec["x"] = stream.x
    rec["y"] = stream.y
    rec["p"] = stream.p
    header = EVT1_HEADER.pack(EVT1_MAGIC, stream.geometry.width, stream.geometry.height, len(stream))
    return header + rec.tobytes()


def slice_bins(stream: EventStream, spec: BinningSpec) -> list[TemporalBin]:
    """Cut the stream into sliding windows; possibly empty bins included.

    Bin k covers [t_start + k*stride, t_start + k*stride + window) for every
    k with the window fully inside [t_start, t_end]. Membership is by the
    half-open interval, so stride == window partitions the events exactly.
    """
    bins: list[TemporalBin] = []
    start = spec.t_start
    while start + spec.window <= spec.t_end:
        stop = start + spec.window
        lo = np.searchsorted(stream.t, start, side="left")
        hi = np.searchsorted(stream.t, stop, side="left")
        bins.append(TemporalBin(start, stop, stream.x[lo:hi], stream.y[lo:hi], stream.t[lo:hi], stream.p[lo:hi]))
        start += spec.stride
    return bins


def event_image(bin_: TemporalBin, geometry: SensorGeometry, normalize: bool = False, bin_id: int = 0) -> EventTensor:
    """Two-channel per-pixel counts: channel 0 positive, channel 1 negative."""
    w, h = geometry.width, geometry.height
    img = np.zeros((2, h, w))
    if len(bin_):
        flat = bin_.y * w + bin_.x
        pos = np.bincount(flat[bin_.p > 0], minlength=h * w)
        negc = np.bincount(flat[bin_.p < 0], minlength=h * w)
        img[0] = pos.reshape(h, w)
        img[1] = negc.reshape(h, w)
        if normalize and img.max() > 0:
            img /= img.max()
    return EventTensor("event_image", img, bin_.t_stamp, bin_id)


def voxel_grid(bin_: TemporalBin, geometry: SensorGeometry, channels: int = 5, bin_id: int = 0) -> EventTensor:
    """Polarity volume with linear weighting between temporal channel centers.

    The B channel centers are spaced uniformly across the bin, the first at
    t_begin and the last at t_end; each event splits its polarity between
    its two nearest centers, so total mass equals the polarity sum.
    """
    if channels < 1:
        raise ValidationError("voxel_grid needs at least one channel")
    duration = bin_.t_end - bin_.t_begin
    if duration <= 0:
        raise ValidationError("voxel_grid needs a bin of positive duration")
    w, h = geometry.width, geometry.height
    vox = np.zeros((channels, h, w))
    if len(bin_):
        if channels == 1:
            tstar = np.zeros(len(bin_))
        else:
            tstar = (bin_.t - bin_.t_begin) / duration * (channels - 1)
        lo = np.floor(tstar).astype(np.int64)
        hi = np.minimum(lo + 1, channels - 1)
        whi = tstar - lo
        flat = bin_.y * w + bin_.x
        voxf = vox.reshape(channels, h * w)
        np.add.at(voxf, (lo, flat), bin_.p * (1.0 - whi))
        np.add.at(voxf, (hi, flat), bin_.p * whi)
    return EventTensor("voxel_grid", vox, bin_.t_stamp, bin_id)


def timestamp_sigmoid(bin_: TemporalBin, geometry: SensorGeometry, tau: float = 10000.0, bin_id: int = 0) -> EventTensor:
    """Recency surface: logistic of (t_last - t_end)/tau per pixel and polarity.

    Pixels with no event of the matching polarity stay 0; the most recent
    event possible (t_last == t_end) maps to 0.5.
    """
    if tau <= 0:
        raise ValidationError("timestamp_sigmoid needs tau > 0")
    w, h = geometry.width, geometry.height
    out = np.zeros((2, h, w))
    if len(bin_):
        for ch, sign in ((0, 1), (1, -1)):
            mask = bin_.p == sign
            if not mask.any():
                continue
            last = np.full(h * w, -np.inf)
            np.maximum.at(last, bin_.y[mask] * w + bin_.x[mask], bin_.t[mask].astype(np.float64))
            hit = np.isfinite(last)
            vals = np.zeros(h * w)
            vals[hit] = _sigmoid_np((last[hit] - bin_.t_end) / tau)
            out[ch] = vals.reshape(h, w)
    return EventTensor("timestamp_sigmoid", out, bin_.t_stamp, bin_id)


REPRESENTATIONS = ("event_image", "voxel_grid", "timestamp_sigmoid")


def representation_channels(kind: str, voxel_channels: int = 5) -> int:
    if kind == "voxel_grid":
        return voxel_channels
    if kind in ("event_image", "timestamp_sigmoid"):
        return 2
    raise ValidationError(f"unknown event representation {kind!r}")


def rasterize(
    bin_: TemporalBin,
    geometry: SensorGeometry,
    kind: str,
    voxel_channels: int = 5,
    tau: float = 10000.0,
    normalize: bool = False,
    bin_id: int = 0,
) -> EventTensor:
    if kind == "event_image":
        return event_image(bin_, geometry, normalize=normalize, bin_id=bin_id)
    if kind == "voxel_grid":
        return voxel_grid(bin_, geometry, channels=voxel_channels, bin_id=bin_id)
    if kind == "timestamp_sigmoid":
        return timestamp_sigmoid(bin_, geometry, tau=tau, bin_id=bin_id)
    raise ValidationError(f"unknown event representation {kind!r}")
