"""Asynchronous attention-based fusion of event and frame features.

The event branch runs at event-bin cadence; the frame branch only when a
frame arrives. Fusion aligns each event timestamp with the most recent
cached frame feature, scores each branch per pixel by its softmax-free
attention row sums, normalizes the two scores against each other, and
takes the pixel-wise convex combination. Averaging and concatenation
variants live behind the same interface as ablation baselines.
"""

from __future__ import annotations

import math
from collections import deque

from .errors import NoPriorFrameError, ShapeError
from .tensor import (
    ParamStore,
    RngStream,
    Tensor,
    concat,
    linear,
    matmul,
    reshape,
    softmax,
    stack,
    transpose,
    tsum,
    uniform_init,
)

FUSION_MODES = ("attention", "averaging", "concat")


class FrameFeatureCache:
    """Ring of encoded frame features; lookup never returns a future frame."""

    def __init__(self, capacity: int = 2):
        self.capacity = capacity
        self._entries: deque[tuple[int, Tensor]] = deque(maxlen=capacity)

    def push(self, t_stamp: int, feat_flat: Tensor) -> None:
        if self._entries and t_stamp <= self._entries[-1][0]:
            raise ShapeError(f"frame cache timestamps must increase, got {t_stamp}")
        self._entries.append((t_stamp, feat_flat))

    def align(self, t_event: int) -> tuple[int, Tensor]:
        """Most recent entry with t <= t_event (the Δt >= 0 search)."""
        best = None
        for t, feat in self._entries:
            if t <= t_event and (best is None or t > best[0]):
                best = (t, feat)
        if best is None:
            raise NoPriorFrameError(f"no frame at or before t={t_event}")
        return best

    def __len__(self) -> int:
        return len(self._entries)


def weight_mask(feat_flat: Tensor, proj_q: Tensor, proj_k: Tensor) -> Tensor:
    """Softmax-free attention row sums: W[x] = sum_y <q_x, k_y> / sqrt(d).

    Equivalent to the explicit pixel-pair double loop, computed as a single
    matrix product against the summed key.
    """
    d = feat_flat.shape[-1]
    q = matmul(feat_flat, proj_q)
    k = matmul(feat_flat, proj_k)
    ksum = transpose(tsum(k, axis=0, keepdims=True), (1, 0))  # [d, 1]
    return reshape(matmul(q, ksum) * (1.0 / math.sqrt(d)), (feat_flat.shape[0],))


def normalize_masks(w_frame: Tensor, w_event: Tensor) -> tuple[Tensor, Tensor]:
    """Per-pixel two-way softmax; the two masks sum to one everywhere."""
    if w_frame.shape != w_event.shape:
        raise ShapeError(f"mask length mismatch: {w_frame.shape} vs {w_event.shape}")
    both = softmax(stack([w_frame, w_event], axis=1), axis=1)  # [N, 2]
    return both[:, 0], both[:, 1]


def fuse(x_frame: Tensor, x_event: Tensor, m_frame: Tensor, m_event: Tensor) -> Tensor:
    """Pixel-wise convex combination of the two [N, d] feature maps."""
    if x_frame.shape != x_event.shape:
        raise ShapeError(f"fused features must share a shape: {x_frame.shape} vs {x_event.shape}")
    n = x_frame.shape[0]
    return x_frame * reshape(m_frame, (n, 1)) + x_event * reshape(m_event, (n, 1))


class FusionModule:
    """Attention-mask fusion plus the averaging/concatenation baselines."""

    def __init__(self, store: ParamStore, prefix: str, d: int, rng: RngStream, mode: str = "attention"):
        if mode not in FUSION_MODES:
            raise ShapeError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.d = d
        if mode == "attention":
            self.mq_i = store.new(f"{prefix}.frame.q", uniform_init(rng, d, (d, d)))
            self.mk_i = store.new(f"{prefix}.frame.k", uniform_init(rng, d, (d, d)))
            self.mq_s = store.new(f"{prefix}.event.q", uniform_init(rng, d, (d, d)))
            self.mk_s = store.new(f"{prefix}.event.k", uniform_init(rng, d, (d, d)))
        elif mode == "concat":
            self.w_proj = store.new(f"{prefix}.proj.weight", uniform_init(rng, 2 * d, (2 * d, d)))
            self.b_proj = store.new(f"{prefix}.proj.bias", uniform_init(rng, 2 * d, (d,)))

    def masks(self, x_frame: Tensor, x_event: Tensor) -> tuple[Tensor, Tensor]:
        w_i = weight_mask(x_frame, self.mq_i, self.mk_i)
        w_s = weight_mask(x_event, self.mq_s, self.mk_s)
        return normalize_masks(w_i, w_s)

    def __call__(self, x_frame: Tensor, x_event: Tensor) -> Tensor:
        if self.mode == "attention":
            m_i, m_s = self.masks(x_frame, x_event)
            return fuse(x_frame, x_event, m_i, m_s)
        if self.mode == "averaging":
            return (x_frame + x_event) * 0.5
        return linear(concat([x_frame, x_event], axis=1), self.w_proj, self.b_proj)

    def fuse_async(self, x_event: Tensor, t_event: int, cache: FrameFeatureCache) -> tuple[Tensor, int]:
        """Fuse the event feature at t_event with the aligned cached frame.

        Returns (fused features stamped at the event time, aligned frame
        timestamp). Raises NoPriorFrameError when the cache has no frame at
        or before t_event; the caller decides on an event-only fallback.
        """
        t_frame, x_frame = cache.align(t_event)
        return self(x_frame, x_event), t_frame
