"""COCO-style detection metrics and the evaluation / ablation harnesses.

AP per class follows the standard greedy protocol: detections sorted by
confidence (ties: earlier timestamp, then smaller x), each matched to the
highest-IoU unmatched ground truth of its class and timestamp at or above
the IoU threshold, precision-recall integrated by the 101-point rule.
Size buckets cut on ground-truth box height (small < 20 px <= medium <=
80 px < large); bucketed scores restrict both ground truths and
detections to the bucket, a documented simplification of the stock COCO
ignore machinery. Runtime is wall clock per query timestamp, median over
per-sequence means.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .config import EvalConfig, RunConfig
from .data import DatasetIndex, SequenceData
from .model import StreamingDetector, infer_sequence

SIZE_BUCKETS = ("small", "medium", "large")


class DetRecord(NamedTuple):
    seq: str
    t_us: int
    cls: int
    conf: float
    x: float
    y: float
    w: float
    h: float


class GtRecord(NamedTuple):
    seq: str
    t_us: int
    cls: int
    x: float
    y: float
    w: float
    h: float


def box_iou(a, b) -> float:
    ix0 = max(a[0], b[0])
    iy0 = max(a[1], b[1])
    ix1 = min(a[0] + a[2], b[0] + b[2])
    iy1 = min(a[1] + a[3], b[1] + b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def ap_per_class(dets: list[DetRecord], gts: list[GtRecord], iou_threshold: float) -> float | None:
    """101-point interpolated AP for one class; None when the class has no gt."""
    n_gt = len(gts)
    if n_gt == 0:
        return None
    if not dets:
        return 0.0
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, dets[i].t_us, dets[i].x))
    gt_by_group: dict[tuple, list[int]] = {}
    for gi, g in enumerate(gts):
        gt_by_group.setdefault((g.seq, g.t_us), []).append(gi)
    used = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(len(order))
    for rank, di in enumerate(order):
        d = dets[di]
        best_iou, best_gi = -1.0, -1
        for gi in gt_by_group.get((d.seq, d.t_us), ()):
            if used[gi]:
                continue
            iou = box_iou((d.x, d.y, d.w, d.h), (gts[gi].x, gts[gi].y, gts[gi].w, gts[gi].h))
            if iou >= iou_threshold and iou > best_iou:  # equal IoU: lowest gt index wins
                best_iou, best_gi = iou, gi
        if best_gi >= 0:
            used[best_gi] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    return ap_101(recall, precision)


def ap_101(recall: np.ndarray, precision: np.ndarray) -> float:
    """COCO 101-point rule: mean over r in {0, .01, ..., 1} of max precision at recall >= r."""
    # precision envelope: best precision achievable at recall >= r
    prec = precision.copy()
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < len(prec), prec[np.minimum(idx, len(prec) - 1)], 0.0)
    return float(vals.mean())


def _bucket_of(h: float, cfg: EvalConfig) -> str:
    if h < cfg.small_max_px:
        return "small"
    if h > cfg.large_min_px:
        return "large"
    return "medium"


def mean_ap(dets: list[DetRecord], gts: list[GtRecord], classes: int, thresholds: list[float]) -> float | None:
    vals = []
    for thr in thresholds:
        for c in range(classes):
            ap = ap_per_class([d for d in dets if d.cls == c], [g for g in gts if g.cls == c], thr)
            if ap is not None:
                vals.append(ap)
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    map: float | None
    map50: float | None
    map75: float | None
    per_class_ap50: dict[str, float | None]
    map_small: float | None
    map_medium: float | None
    map_large: float | None
    per_scenario_map50: dict[str, float | None]
    runtime_ms: float
    n_detections: int
    n_gt: int

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)


def compute_metrics(dets: list[DetRecord], gts: list[GtRecord], classes: int, cfg: EvalConfig, scenarios: dict[str, str], runtime_ms: float) -> MetricsReport:
    thresholds = cfg.thresholds()
    per_class = {
        str(c): ap_per_class([d for d in dets if d.cls == c], [g for g in gts if g.cls == c], 0.5)
        for c in range(classes)
    }
    buckets = {}
    for bucket in SIZE_BUCKETS:
        bg = [g for g in gts if _bucket_of(g.h, cfg) == bucket]
        bd = [d for d in dets if _bucket_of(d.h, cfg) == bucket]
        buckets[bucket] = mean_ap(bd, bg, classes, [0.5])
    per_scenario = {}
    for scenario in sorted(set(scenarios.values())):
        seqs = {name for name, s in scenarios.items() if s == scenario}
        per_scenario[scenario] = mean_ap(
            [d for d in dets if d.seq in seqs], [g for g in gts if g.seq in seqs], classes, [0.5]
        )
    return MetricsReport(
        map=mean_ap(dets, gts, classes, thresholds),
        map50=mean_ap(dets, gts, classes, [0.5]),
        map75=mean_ap(dets, gts, classes, [0.75]),
        per_class_ap50=per_class,
        map_small=buckets["small"],
        map_medium=buckets["medium"],
        map_large=buckets["large"],
        per_scenario_map50=per_scenario,
        runtime_ms=runtime_ms,
        n_detections=len(dets),
        n_gt=len(gts),
    )


def gather_gts(seqs: list[SequenceData]) -> list[GtRecord]:
    gts = []
    for seq in seqs:
        for label in seq.labels:
            for b in label.boxes:
                gts.append(GtRecord(seq.name, label.t_us, b.cls, b.x, b.y, b.w, b.h))
    return gts


def evaluate(
    model: StreamingDetector,
    dataset: DatasetIndex,
    cfg: EvalConfig,
    split: str = "test",
    scenario: str | None = None,
    frame_rate: float | None = None,
    cadence_hz: float | None = None,
) -> MetricsReport:
    """Run inference over a split and score it at the labeled timestamps.

    ``frame_rate`` below the native 25 Hz subsamples frames (every 2nd,
    3rd, ...) while event bins and labels stay at full cadence;
    ``cadence_hz`` above the label rate adds asynchronous query times
    between labels (scored timestamps remain the labeled ones).
    """
    seqs = dataset.split(split, scenario)
    native_rate = 1e6 / seqs[0].frame_period_us if seqs else 25.0
    frame_stride = max(1, int(round(native_rate / frame_rate))) if frame_rate else 1
    dets: list[DetRecord] = []
    per_seq_ms = []
    scenarios = {}
    for seq in seqs:
        scenarios[seq.name] = seq.scenario
        label_times = [l.t_us for l in seq.labels]
        times = list(label_times)
        if cadence_hz and cadence_hz > native_rate:
            stride = int(round(1e6 / cadence_hz))
            extra = range(seq.frame_period_us, seq.duration_us + 1, stride)
            times = sorted(set(times) | set(extra))
        t0 = time.perf_counter()
        results, _ = infer_sequence(model, seq, times, frame_stride=frame_stride, confidence_threshold=None)
        per_seq_ms.append((time.perf_counter() - t0) * 1000.0 / max(len(times), 1))
        labeled = set(label_times)
        for t_q, detections in results:
            if t_q not in labeled:
                continue
            for d in detections:
                x, y, w, h = d.to_pixels(seq.geometry)
                dets.append(DetRecord(seq.name, t_q, d.cls, d.confidence, x, y, w, h))
    gts = gather_gts(seqs)
    runtime = float(np.median(per_seq_ms)) if per_seq_ms else 0.0
    return compute_metrics(dets, gts, model.config.classes, cfg, scenarios, runtime)


DEFAULT_ABLATION_AXES = {
    "fusion": ("averaging", "concat", "attention"),
    "aggregation": (1, 3, 5, 9),
    "representation": ("event_image", "voxel_grid", "timestamp_sigmoid"),
}


def ablation_suite(
    base_config: RunConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    axes: dict[str, tuple] | None = None,
    train_fn: Callable[[RunConfig, Path, Path], Path] | None = None,
) -> list[dict]:
    """Train and evaluate one variant per axis value under a shared seed.

    A variant that raises is recorded as failed, not fatal. Emits
    ``ablation.csv`` with one row per variant.
    """
    from .train import train  # local import to avoid a cycle

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axes = axes or DEFAULT_ABLATION_AXES
    rows = []
    for axis, values in axes.items():
        for value in values:
            cfg = _variant_config(base_config, axis, value)
            run_dir = out_dir / f"{axis}_{value}"
            row = {"axis": axis, "variant": str(value), "map50": "", "runtime_ms": "", "status": "ok"}
            try:
                if train_fn is not None:
                    ckpt = train_fn(cfg, Path(dataset_dir), run_dir)
                else:
                    ckpt = train(cfg, dataset_dir, run_dir).checkpoint
                model = StreamingDetector(cfg.model, seed=cfg.training.seed)
                from .train import load_model_checkpoint

                load_model_checkpoint(ckpt, model)
                report = evaluate(model, DatasetIndex(dataset_dir), cfg.eval)
                row["map50"] = report.map50
                row["runtime_ms"] = report.runtime_ms
            except Exception as exc:  # noqa: BLE001 - a failed variant is data, not a crash
                row["status"] = f"failed: {exc}"
            rows.append(row)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "variant", "map50", "runtime_ms", "status"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def _variant_config(base: RunConfig, axis: str, value) -> RunConfig:
    if axis == "fusion":
        return replace(base, model=replace(base.model, fusion_mode=str(value)))
    if axis == "aggregation":
        return replace(base, model=replace(base.model, agg_size=int(value)))
    if axis == "representation":
        return replace(base, model=replace(base.model, representation=str(value)))
    raise ValueError(f"unknown ablation axis {axis!r}")
