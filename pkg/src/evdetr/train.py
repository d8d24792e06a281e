"""Training loop: windowed streaming with teacher-forced history.

Each optimization step samples one sequence window of ``window_length``
label timestamps. The window is replayed in order: every timestamp runs
both branches to populate the history rings and the frame cache (those
forwards are gradient-free, their outputs are the cached context), and
the loss is taken at the final timestamp (optionally at every timestamp)
where the forward is gradient-tracked. One Adam update per window.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetIndex, SequenceData, resize_chw, resize_target
from .detection import detection_loss, match
from .errors import NumericalAbort
from .events import EventTensor
from .model import StreamingDetector
from .optim import AdamState, adam_step, lr_for_epoch
from .tensor import RngStream, backward, no_grad


@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    steps: int
    final_loss: float


def _window_starts(seq: SequenceData, window: int) -> list[int]:
    return list(range(0, seq.n_frames - window + 1))


def window_forward(
    model: StreamingDetector,
    seq: SequenceData,
    start: int,
    window: int,
    drop_rng: RngStream | None,
    training: bool,
    loss_all: bool = False,
    resize_to: tuple[int, int] | None = None,
):
    """Run one window; returns [(label index, logits, boxes)] at supervised steps.

    ``resize_to`` rescales the window's inputs to (H, W) before the
    backbone (the random-resize augmentation); normalized boxes are
    resolution-invariant so labels need no adjustment.
    """
    cfg = model.config
    state = model.new_state()
    if resize_to is None:
        hw = model.feature_hw(seq.geometry)
    else:
        s = cfg.stride
        hw = (-(-resize_to[0] // s), -(-resize_to[1] // s))
    outputs = []
    for i in range(window):
        idx = start + i
        t = seq.frame_time(idx)
        supervised = loss_all or i == window - 1
        # context timesteps run clean (no dropout), exactly as at inference
        rng_i = drop_rng if supervised else None
        train_i = training and supervised
        grad_ctx = _NullCtx() if supervised else no_grad()
        with grad_ctx:
            if cfg.uses_frames:
                frame = seq.frame(idx)
                if resize_to is not None:
                    frame = resize_chw(frame[None], *resize_to)[0]
                model.process_frame(state, frame, t, rng_i, train_i)
            if cfg.uses_events:
                arr = seq.event_tensor(
                    t,
                    seq.frame_period_us,
                    cfg.representation,
                    voxel_channels=cfg.voxel_channels,
                    tau=cfg.sigmoid_tau_us,
                    normalize=cfg.normalize_event_image,
                )
                if resize_to is not None:
                    arr = resize_chw(arr, *resize_to)
                model.process_event_bin(state, EventTensor(cfg.representation, arr, t, idx), rng_i, train_i)
            if supervised:
                logits, boxes = model.detect_at(state, t, hw, rng_i, train_i)
                outputs.append((idx, logits, boxes))
    return outputs


def train_step(
    model: StreamingDetector,
    seq: SequenceData,
    start: int,
    window: int,
    adam: AdamState,
    drop_rng: RngStream,
    loss_all: bool = False,
    resize_to: tuple[int, int] | None = None,
):
    outputs = window_forward(model, seq, start, window, drop_rng, training=True, loss_all=loss_all, resize_to=resize_to)
    breakdowns = []
    total = None
    for idx, logits, boxes in outputs:
        gt_boxes, gt_cls = seq.gt_arrays(idx)
        with no_grad():
            matches = match(logits.data, boxes.data, gt_boxes, gt_cls)
        b = detection_loss(logits, boxes, gt_boxes, gt_cls, matches, model.config.classes)
        breakdowns.append(b)
        total = b.total if total is None else total + b.total
    total = total * (1.0 / len(outputs))
    breakdown = breakdowns[-1]
    breakdown.total = total
    if not np.isfinite(float(total.data)):
        raise NumericalAbort(
            f"non-finite loss at sequence {seq.name} window {start}: "
            f"cls={breakdown.cls} l1={breakdown.l1} giou={breakdown.giou}"
        )
    backward(total)
    for p in model.store:
        if p.grad is None:  # background-only window: box head sees no matches
            p.grad = np.zeros_like(p.data)
    adam_step(model.store, adam)
    return breakdown


def save_model_checkpoint(path: Path, model: StreamingDetector, adam: AdamState, extra: dict) -> None:
    arrays = dict(model.state_dict())
    for name, m in adam.m.items():
        arrays[f"optim/m/{name}"] = m
    for name, v in adam.v.items():
        arrays[f"optim/v/{name}"] = v
    save_checkpoint(path, arrays, extra)


def load_model_checkpoint(path: Path, model: StreamingDetector, adam: AdamState | None = None) -> dict:
    arrays, extra = load_checkpoint(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("optim/")}
    model.load_state_dict(params)
    if adam is not None:
        adam.m = {k[len("optim/m/") :]: v.copy() for k, v in arrays.items() if k.startswith("optim/m/")}
        adam.v = {k[len("optim/v/") :]: v.copy() for k, v in arrays.items() if k.startswith("optim/v/")}
        adam.step = int(extra.get("adam_step", 0))
    return extra


def train(
    config: RunConfig,
    dataset_dir: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    quiet: bool = True,
) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = DatasetIndex(dataset_dir)
    train_seqs = dataset.split("train")
    if not train_seqs:
        raise NumericalAbort("training split is empty")  # pragma: no cover - guarded by DatasetIndex

    model = StreamingDetector(config.model, seed=config.training.seed)
    opt_cfg = config.optimizer
    adam = AdamState(lr=opt_cfg.lr, beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.eps, weight_decay=opt_cfg.weight_decay)
    sample_rng = RngStream(config.training.seed).child(1)
    drop_rng = RngStream(config.training.seed).child(2)
    start_step = 0
    if resume is not None:
        extra = load_model_checkpoint(Path(resume), model, adam)
        start_step = int(extra.get("step", 0))
        sample_rng = RngStream.from_state(extra["sample_rng"])
        drop_rng = RngStream.from_state(extra["drop_rng"])

    window = config.window_length
    steps = config.training.steps
    steps_per_epoch = max(1, -(-steps // config.training.epochs))
    loss_path = out_dir / "loss.csv"
    ckpt_path = out_dir / "model.ckpt"
    mode = "a" if resume is not None and loss_path.exists() else "w"
    t0 = time.time()
    last_total = float("nan")
    with open(loss_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "total", "cls", "l1", "giou", "lr"])
        for step in range(start_step, steps):
            epoch = step // steps_per_epoch + 1
            adam.lr = lr_for_epoch(opt_cfg.lr, epoch, opt_cfg.decay_epoch, opt_cfg.decay_factor)
            seq = train_seqs[int(sample_rng.integers(0, len(train_seqs)))]
            starts = _window_starts(seq, window)
            start = starts[int(sample_rng.integers(0, len(starts)))]
            resize_to = None
            if config.training.random_resize:
                resize_to = resize_target(sample_rng, seq.geometry.height, seq.geometry.width)
            breakdown = train_step(
                model, seq, start, window, adam, drop_rng, config.training.loss_all_timestamps, resize_to
            )
            last_total = breakdown.total_value
            if (step + 1) % config.training.log_every == 0 or step == steps - 1:
                writer.writerow(
                    [step + 1, f"{last_total:.6f}", f"{breakdown.cls:.6f}", f"{breakdown.l1:.6f}", f"{breakdown.giou:.6f}", adam.lr]
                )
                fh.flush()
                if not quiet:
                    rate = (step + 1 - start_step) / max(time.time() - t0, 1e-9)
                    print(f"step {step + 1}/{steps} loss {last_total:.4f} ({rate:.2f} steps/s)", flush=True)
            if (step + 1) % config.training.checkpoint_every == 0 or step == steps - 1:
                save_model_checkpoint(
                    ckpt_path,
                    model,
                    adam,
                    {
                        "step": step + 1,
                        "adam_step": adam.step,
                        "sample_rng": sample_rng.state(),
                        "drop_rng": drop_rng.state(),
                        "config": config.to_dict(),
                    },
                )
    return TrainResult(ckpt_path, loss_path, steps, last_total)


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False
