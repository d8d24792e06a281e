"""Attention stack: full self-attention, deformable attention, its temporal
extension, and the encoder/decoder blocks built from them.

Conventions shared by every operation here:

* sequences are [N, d] tensors, flattened row-major from [d, H, W] maps;
* positional encodings enter query/key projections only, never values;
* deformable offsets are predicted in normalized [0, 1] image units and
  added to reference points before bilinear sampling (zero border outside);
* attention weight heads are softmax-normalized per head - over the L
  points for the spatial variant, jointly over all L*K points across the
  K history maps for the temporal variant (a per-frame normalization is
  available behind ``weight_norm="per_frame"``).

History buffers hold *encoder outputs* of earlier timestamps as plain
arrays: cached features are constants with respect to the current step's
gradient, so a training step backpropagates through the present timestamp
only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .tensor import (
    ParamStore,
    RngStream,
    Tensor,
    dropout,
    gelu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    bilinear_sample_batched,
    transpose,
    tsum,
    uniform_init,
)


@dataclass(frozen=True)
class AttentionConfig:
    d: int = 64
    heads: int = 8
    points: int = 4
    agg_size: int = 9  # temporal aggregation size, k + 1
    enc_layers: int = 6
    dec_layers: int = 6
    dropout: float = 0.1
    ffn_mult: int = 4
    weight_norm: str = "joint"  # or "per_frame"
    offset_init_scale: float = 0.1

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"model dim {self.d} not divisible by {self.heads} heads")
        if self.points < 1 or self.agg_size < 1:
            raise ConfigError("points and aggregation size must be >= 1")
        if self.weight_norm not in ("joint", "per_frame"):
            raise ConfigError(f"unknown weight normalization {self.weight_norm!r}")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @property
    def history_size(self) -> int:
        return self.agg_size - 1


class FrameHistory:
    """Ring of up to k prior same-modality feature maps, oldest first.

    Entries are detached [H, W, d] arrays with strictly increasing
    timestamps; one ring belongs to exactly one stream of one modality.
    """

    def __init__(self, capacity: int, modality: str):
        self.capacity = capacity
        self.modality = modality
        self._entries: deque[tuple[int, np.ndarray]] = deque(maxlen=max(capacity, 1))

    def push(self, t_stamp: int, flat_map: np.ndarray) -> None:
        if self.capacity < 1:
            return
        if self._entries and t_stamp <= self._entries[-1][0]:
            raise ValidationError(
                f"history timestamps must increase: {t_stamp} after {self._entries[-1][0]}"
            )
        self._entries.append((t_stamp, flat_map))

    def maps(self) -> list[np.ndarray]:
        return [m for _, m in self._entries]

    def stacked(self) -> np.ndarray:
        """[K, H, W, d] view of the ring, oldest first; empty -> zero-length."""
        if not self._entries:
            return np.empty((0, 0, 0, 0))
        return np.stack(self.maps(), axis=0)

    def __len__(self) -> int:
        return len(self._entries)


class MultiHeadAttention:
    """Softmax attention over all query/key pairs, M heads in parallel."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        d = cfg.d
        self.heads = cfg.heads
        self.d_head = cfg.d_head
        self.wq = store.new(f"{prefix}.q.weight", uniform_init(rng, d, (d, d)))
        self.bq = store.new(f"{prefix}.q.bias", uniform_init(rng, d, (d,)))
        self.wk = store.new(f"{prefix}.k.weight", uniform_init(rng, d, (d, d)))
        self.bk = store.new(f"{prefix}.k.bias", uniform_init(rng, d, (d,)))
        self.wv = store.new(f"{prefix}.v.weight", uniform_init(rng, d, (d, d)))
        self.bv = store.new(f"{prefix}.v.bias", uniform_init(rng, d, (d,)))
        self.wo = store.new(f"{prefix}.out.weight", uniform_init(rng, d, (d, d)))
        self.bo = store.new(f"{prefix}.out.bias", uniform_init(rng, d, (d,)))

    def __call__(self, xq: Tensor, xk: Tensor, q_pos: Tensor | None = None, k_pos: Tensor | None = None) -> Tensor:
        if xq.shape[-1] != xk.shape[-1]:
            raise ShapeError(f"attention dims differ: {xq.shape} vs {xk.shape}")
        nq, d = xq.shape
        nk = xk.shape[0]
        m, dh = self.heads, self.d_head
        q = linear(xq + q_pos if q_pos is not None else xq, self.wq, self.bq)
        k = linear(xk + k_pos if k_pos is not None else xk, self.wk, self.bk)
        v = linear(xk, self.wv, self.bv)
        qh = transpose(reshape(q, (nq, m, dh)), (1, 0, 2))  # [M, Nq, dh]
        kh = transpose(reshape(k, (nk, m, dh)), (1, 2, 0))  # [M, dh, Nk]
        vh = transpose(reshape(v, (nk, m, dh)), (1, 0, 2))  # [M, Nk, dh]
        attn = softmax(matmul(qh, kh) * (1.0 / math.sqrt(dh)), axis=-1)
        out = transpose(matmul(attn, vh), (1, 0, 2))  # [Nq, M, dh]
        return linear(reshape(out, (nq, d)), self.wo, self.bo)


def _offset_spread(heads: int, points: int, slots: int, scale: float) -> np.ndarray:
    """Deterministic initial offsets: per head a direction, per point a radius."""
    out = np.zeros((heads, points, slots, 2))
    for m in range(heads):
        angle = 2.0 * math.pi * m / heads
        for l in range(points):
            r = scale * (l + 1) / points
            out[m, l, :, 0] = r * math.cos(angle)
            out[m, l, :, 1] = r * math.sin(angle)
    return out


class DeformableAttention:
    """Per head, attend L sampled points around each query's reference point."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        d, m, l = cfg.d, cfg.heads, cfg.points
        self.cfg = cfg
        self.wv = store.new(f"{prefix}.value.weight", uniform_init(rng, d, (d, d)))
        self.bv = store.new(f"{prefix}.value.bias", uniform_init(rng, d, (d,)))
        self.wo = store.new(f"{prefix}.out.weight", uniform_init(rng, d, (d, d)))
        self.bo = store.new(f"{prefix}.out.bias", uniform_init(rng, d, (d,)))
        self.w_off = store.new(f"{prefix}.offset.weight", np.zeros((d, m * l * 2)))
        self.b_off = store.new(f"{prefix}.offset.bias", _offset_spread(m, l, 1, cfg.offset_init_scale).reshape(-1))
        self.w_att = store.new(f"{prefix}.weight.weight", np.zeros((d, m * l)))
        self.b_att = store.new(f"{prefix}.weight.bias", np.zeros(m * l))

    def __call__(self, query: Tensor, feat_flat: Tensor, hw: tuple[int, int], ref: Tensor) -> Tensor:
        """query: [Q, d] (content + positional), feat_flat: [H*W, d], ref: [Q, 2]."""
        h, w = hw
        q_n, d = query.shape
        m, l, dh = self.cfg.heads, self.cfg.points, self.cfg.d_head
        v = linear(feat_flat, self.wv, self.bv)
        v = transpose(reshape(v, (h, w, m, dh)), (2, 0, 1, 3))  # [M, H, W, dh]
        off = transpose(reshape(linear(query, self.w_off, self.b_off), (q_n, m, l, 2)), (1, 0, 2, 3))
        locs = reshape(ref, (1, q_n, 1, 2)) + off  # [M, Q, L, 2]
        weights = softmax(transpose(reshape(linear(query, self.w_att, self.b_att), (q_n, m, l)), (1, 0, 2)), axis=-1)
        sampled = bilinear_sample_batched(v, locs)  # [M, Q, L, dh]
        agg = tsum(sampled * reshape(weights, (m, q_n, l, 1)), axis=2)  # [M, Q, dh]
        out = reshape(transpose(agg, (1, 0, 2)), (q_n, d))
        return linear(out, self.wo, self.bo)


class TemporalDeformableAttention:
    """Deformable attention over L points in each of up to k history maps.

    Slot j of the offset/weight heads serves history entry j, oldest first;
    with fewer than k cached maps only the leading slots participate and
    the softmax renormalizes over the live points.
    """

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        d, m, l, k = cfg.d, cfg.heads, cfg.points, cfg.history_size
        if k < 1:
            raise ConfigError("temporal attention needs aggregation size >= 2")
        self.cfg = cfg
        self.k_max = k
        self.wv = store.new(f"{prefix}.value.weight", uniform_init(rng, d, (d, d)))
        self.bv = store.new(f"{prefix}.value.bias", uniform_init(rng, d, (d,)))
        self.wo = store.new(f"{prefix}.out.weight", uniform_init(rng, d, (d, d)))
        self.bo = store.new(f"{prefix}.out.bias", uniform_init(rng, d, (d,)))
        self.w_off = store.new(f"{prefix}.offset.weight", np.zeros((d, m * l * k * 2)))
        self.b_off = store.new(
            f"{prefix}.offset.bias", _offset_spread(m, l, k, cfg.offset_init_scale).reshape(-1)
        )
        self.w_att = store.new(f"{prefix}.weight.weight", np.zeros((d, m * l * k)))
        self.b_att = store.new(f"{prefix}.weight.bias", np.zeros(m * l * k))

    def __call__(self, query: Tensor, history, hw: tuple[int, int], ref: Tensor) -> Tensor:
        """query: [Q, d]; history: K maps [H, W, d], oldest first; ref: [Q, 2]."""
        if len(history) == 0:
            raise ValidationError("temporal context required")
        h, w = hw
        q_n, d = query.shape
        m, l, dh = self.cfg.heads, self.cfg.points, self.cfg.d_head
        k = len(history)
        if k > self.k_max:
            raise ValidationError(f"history of {k} maps exceeds aggregation budget {self.k_max}")
        stacked = history if isinstance(history, np.ndarray) else np.stack(history, axis=0)
        off = reshape(linear(query, self.w_off, self.b_off), (q_n, m, l, self.k_max, 2))
        att = reshape(linear(query, self.w_att, self.b_att), (q_n, m, l, self.k_max))
        off = transpose(off[:, :, :, :k, :], (3, 1, 0, 2, 4))  # [K, M, Q, L, 2]
        att = att[:, :, :, :k]
        if self.cfg.weight_norm == "joint":
            weights = reshape(softmax(reshape(att, (q_n, m, l * k)), axis=-1), (q_n, m, l, k))
        else:
            weights = softmax(att, axis=2) * (1.0 / k)
        weights = transpose(weights, (3, 1, 0, 2))  # [K, M, Q, L]
        locs = reshape(ref, (1, 1, q_n, 1, 2)) + off
        v = linear(Tensor(stacked.reshape(k * h * w, d)), self.wv, self.bv)
        v = transpose(reshape(v, (k, h, w, m, dh)), (0, 3, 1, 2, 4))  # [K, M, H, W, dh]
        sampled = bilinear_sample_batched(v, locs)  # [K, M, Q, L, dh]
        agg = tsum(sampled * reshape(weights, (k, m, q_n, l, 1)), axis=(0, 3))  # [M, Q, dh]
        out = reshape(transpose(agg, (1, 0, 2)), (q_n, d))
        return linear(out, self.wo, self.bo)


class FeedForward:
    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        d, hidden = cfg.d, cfg.d * cfg.ffn_mult
        self.w1 = store.new(f"{prefix}.fc1.weight", uniform_init(rng, d, (d, hidden)))
        self.b1 = store.new(f"{prefix}.fc1.bias", uniform_init(rng, d, (hidden,)))
        self.w2 = store.new(f"{prefix}.fc2.weight", uniform_init(rng, hidden, (hidden, d)))
        self.b2 = store.new(f"{prefix}.fc2.bias", uniform_init(rng, hidden, (d,)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class _Sublayer:
    """Residual + dropout + layer norm around one attention/FFN operation."""

    def __init__(self, store: ParamStore, prefix: str, d: int, p: float):
        self.gamma = store.new(f"{prefix}.ln.gamma", np.ones(d))
        self.beta = store.new(f"{prefix}.ln.beta", np.zeros(d))
        self.p = p

    def __call__(self, x: Tensor, sub_out: Tensor, rng: RngStream | None, training: bool) -> Tensor:
        if training and rng is not None:
            sub_out = dropout(sub_out, self.p, rng, training)
        return layer_norm(x + sub_out, self.gamma, self.beta)


class EncoderBlock:
    """MSA, then temporal deformable attention over history, then FFN.

    At a sequence start (empty history) the temporal sublayer is skipped
    entirely; the block degenerates to self-attention + FFN.
    """

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        self.msa = MultiHeadAttention(store, f"{prefix}.msa", cfg, rng)
        self.tdmsa = (
            TemporalDeformableAttention(store, f"{prefix}.tdmsa", cfg, rng) if cfg.history_size > 0 else None
        )
        self.ffn = FeedForward(store, f"{prefix}.ffn", cfg, rng)
        self.sub1 = _Sublayer(store, f"{prefix}.sub1", cfg.d, cfg.dropout)
        self.sub2 = _Sublayer(store, f"{prefix}.sub2", cfg.d, cfg.dropout)
        self.sub3 = _Sublayer(store, f"{prefix}.sub3", cfg.d, cfg.dropout)

    def __call__(
        self,
        x: Tensor,
        pos: Tensor,
        history: list[np.ndarray],
        hw: tuple[int, int],
        ref: Tensor,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> Tensor:
        x = self.sub1(x, self.msa(x, x, q_pos=pos, k_pos=pos), rng, training)
        if len(history) and self.tdmsa is not None:
            x = self.sub2(x, self.tdmsa(x + pos, history, hw, ref), rng, training)
        x = self.sub3(x, self.ffn(x), rng, training)
        return x


class TemporalEncoder:
    """Stack of encoder blocks; output registers into the modality history."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        self.cfg = cfg
        self.blocks = [EncoderBlock(store, f"{prefix}.layer{i}", cfg, rng) for i in range(cfg.enc_layers)]

    def __call__(
        self,
        feat_flat: Tensor,
        hw: tuple[int, int],
        pos: Tensor,
        ref: Tensor,
        history: FrameHistory,
        t_stamp: int,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> Tensor:
        maps = history.stacked()
        x = feat_flat
        for block in self.blocks:
            x = block(x, pos, maps, hw, ref, rng, training)
        history.push(t_stamp, x.data.reshape(hw[0], hw[1], self.cfg.d).copy())
        return x


class DecoderBlock:
    """Self-attention among queries, deformable cross-attention, FFN."""

    def __init__(self, store: ParamStore, prefix: str, cfg: AttentionConfig, rng: RngStream):
        self.msa = MultiHeadAttention(store, f"{prefix}.msa", cfg, rng)
        self.cross = DeformableAttention(store, f"{prefix}.cross", cfg, rng)
        self.ffn = FeedForward(store, f"{prefix}.ffn", cfg, rng)
        self.sub1 = _Sublayer(store, f"{prefix}.sub1", cfg.d, cfg.dropout)
        self.sub2 = _Sublayer(store, f"{prefix}.sub2", cfg.d, cfg.dropout)
        self.sub3 = _Sublayer(store, f"{prefix}.sub3", cfg.d, cfg.dropout)

    def __call__(
        self,
        tgt: Tensor,
        query_pos: Tensor,
        fused_flat: Tensor,
        hw: tuple[int, int],
        ref: Tensor,
        rng: RngStream | None = None,
        training: bool = False,
    ) -> Tensor:
        tgt = self.sub1(tgt, self.msa(tgt, tgt, q_pos=query_pos, k_pos=query_pos), rng, training)
        tgt = self.sub2(tgt, self.cross(tgt + query_pos, fused_flat, hw, ref), rng, training)
        tgt = self.sub3(tgt, self.ffn(tgt), rng, training)
        return tgt
