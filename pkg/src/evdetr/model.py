"""The full streaming detector: backbones, temporal encoders, fusion, decoder.

A model instance owns the parameters; per-sequence state (history rings,
frame feature cache, operation counters) lives in a ``StreamState`` so
independent sequences never share mutable state. The processing contract:

* ``process_frame`` runs the frame branch once per arriving frame and
  caches the encoded map;
* ``process_event_bin`` runs the event branch once per event bin;
* ``detect_at`` fuses (or selects) features and decodes N_q detections.

Before the first frame of a stream, fused models fall back to event-only
decoding (the event mask forced to one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, DecoderBlock, FrameHistory, TemporalEncoder
from .backbone import BackboneConfig, ConvBackbone, grid_reference_points, positional_encoding
from .detection import Detection, PredictionHeads, detections_from_outputs
from .errors import ConfigError, NoPriorFrameError
from .events import EventTensor, representation_channels
from .fusion import FrameFeatureCache, FusionModule
from .tensor import ParamStore, RngStream, Tensor, linear, no_grad, sigmoid, uniform_init

MODALITIES = ("fused", "frame", "event")


@dataclass(frozen=True)
class ModelConfig:
    # inputs
    frame_channels: int = 1
    representation: str = "event_image"
    voxel_channels: int = 5
    sigmoid_tau_us: float = 10000.0
    normalize_event_image: bool = False
    event_input_scale: float = 0.25
    # backbone
    widths: tuple[int, ...] = (16, 32, 64)
    stride: int = 8
    d: int = 64
    # attention
    heads: int = 8
    points: int = 4
    agg_size: int = 9
    enc_layers: int = 6
    dec_layers: int = 6
    dropout: float = 0.1
    ffn_mult: int = 4
    weight_norm: str = "joint"
    offset_init_scale: float = 0.1
    # decoder / heads
    n_queries: int = 300
    classes: int = 3
    # branch selection
    modality: str = "fused"
    fusion_mode: str = "attention"
    frame_cache_capacity: int = 2

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")

    @property
    def event_channels(self) -> int:
        return representation_channels(self.representation, self.voxel_channels)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            d=self.d,
            heads=self.heads,
            points=self.points,
            agg_size=self.agg_size,
            enc_layers=self.enc_layers,
            dec_layers=self.dec_layers,
            dropout=self.dropout,
            ffn_mult=self.ffn_mult,
            weight_norm=self.weight_norm,
            offset_init_scale=self.offset_init_scale,
        )

    @property
    def uses_frames(self) -> bool:
        return self.modality in ("fused", "frame")

    @property
    def uses_events(self) -> bool:
        return self.modality in ("fused", "event")


@dataclass
class StreamState:
    """Per-sequence mutable state; create one per stream, never share."""

    frame_history: FrameHistory
    event_history: FrameHistory
    frame_cache: FrameFeatureCache
    last_event_feat: Tensor | None = None
    last_event_t: int | None = None
    counters: dict = field(default_factory=lambda: {"frame_forward": 0, "event_forward": 0, "fusion": 0, "event_only": 0})
    fusion_reuse: dict = field(default_factory=dict)  # frame t_stamp -> fusions served


class StreamingDetector:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.store = ParamStore()
        rng = RngStream(seed).child(0)
        att = config.attention
        if config.uses_frames:
            self.frame_backbone = ConvBackbone(
                self.store, "backbone.frame", BackboneConfig(config.frame_channels, config.widths, config.stride, config.d), rng
            )
            self.frame_encoder = TemporalEncoder(self.store, "encoder.frame", att, rng)
        if config.uses_events:
            self.event_backbone = ConvBackbone(
                self.store, "backbone.event", BackboneConfig(config.event_channels, config.widths, config.stride, config.d), rng
            )
            self.event_encoder = TemporalEncoder(self.store, "encoder.event", att, rng)
        if config.modality == "fused":
            self.fusion = FusionModule(self.store, "fusion", config.d, rng, mode=config.fusion_mode)
        self.decoder_blocks = [DecoderBlock(self.store, f"decoder.layer{i}", att, rng) for i in range(config.dec_layers)]
        self.query_pos = self.store.new("decoder.query_pos", rng.normal(1.0, (config.n_queries, config.d)))
        self.ref_w = self.store.new("decoder.ref.weight", uniform_init(rng, config.d, (config.d, 2)))
        self.ref_b = self.store.new("decoder.ref.bias", np.zeros(2))
        self.heads = PredictionHeads(self.store, "heads", config.d, config.classes, rng)
        self._pos_cache: dict[tuple[int, int], Tensor] = {}
        self._grid_cache: dict[tuple[int, int], Tensor] = {}

    # -- shared spatial context -----------------------------------------
    def _pos(self, hw: tuple[int, int]) -> Tensor:
        if hw not in self._pos_cache:
            pe = positional_encoding(hw[0], hw[1], self.config.d)
            self._pos_cache[hw] = Tensor(pe.transpose(1, 2, 0).reshape(hw[0] * hw[1], self.config.d))
        return self._pos_cache[hw]

    def _grid(self, hw: tuple[int, int]) -> Tensor:
        if hw not in self._grid_cache:
            self._grid_cache[hw] = Tensor(grid_reference_points(hw[0], hw[1]))
        return self._grid_cache[hw]

    def new_state(self) -> StreamState:
        k = self.config.agg_size - 1
        return StreamState(
            frame_history=FrameHistory(k, "frame"),
            event_history=FrameHistory(k, "event"),
            frame_cache=FrameFeatureCache(self.config.frame_cache_capacity),
        )

    # -- branch forwards --------------------------------------------------
    def _encode(self, backbone, encoder, history, image: np.ndarray, t_us: int, rng, training) -> tuple[Tensor, tuple[int, int]]:
        fmap = backbone(Tensor(image))
        h, w = fmap.shape[1], fmap.shape[2]
        out = encoder(_flatten_map(fmap), (h, w), self._pos((h, w)), self._grid((h, w)), history, t_us, rng, training)
        return out, (h, w)

    def process_frame(self, state: StreamState, frame: np.ndarray, t_us: int, rng=None, training=False) -> Tensor:
        """Run the frame branch on one arriving frame and cache its feature."""
        img = (np.asarray(frame, dtype=np.float64) - 0.5)[None]
        out, _ = self._encode(self.frame_backbone, self.frame_encoder, state.frame_history, img, t_us, rng, training)
        state.frame_cache.push(t_us, out)
        state.counters["frame_forward"] += 1
        return out

    def process_event_bin(self, state: StreamState, ev: EventTensor, rng=None, training=False) -> Tensor:
        arr = ev.tensor if isinstance(ev.tensor, np.ndarray) else np.asarray(ev.tensor)
        if self.config.representation == "event_image":
            arr = arr * self.config.event_input_scale
        out, _ = self._encode(self.event_backbone, self.event_encoder, state.event_history, arr, ev.t_stamp, rng, training)
        state.last_event_feat = out
        state.last_event_t = ev.t_stamp
        state.counters["event_forward"] += 1
        return out

    # -- fusion + decoding ------------------------------------------------
    def fused_feature(self, state: StreamState, t_us: int) -> Tensor:
        """Feature map the decoder should see at time t, per modality config."""
        cfg = self.config
        if cfg.modality == "frame":
            _, feat = state.frame_cache.align(t_us)
            return feat
        if state.last_event_feat is None:
            raise NoPriorFrameError(f"no event feature computed at or before t={t_us}")
        x_event = state.last_event_feat
        if cfg.modality == "event":
            return x_event
        try:
            fused, t_frame = self.fusion.fuse_async(x_event, t_us, state.frame_cache)
            state.counters["fusion"] += 1
            state.fusion_reuse[t_frame] = state.fusion_reuse.get(t_frame, 0) + 1
            return fused
        except NoPriorFrameError:
            state.counters["event_only"] += 1
            return x_event  # event mask forced to 1 before the first frame

    def decode(self, feat_flat: Tensor, hw: tuple[int, int], rng=None, training=False) -> tuple[Tensor, Tensor]:
        ref_logits = linear(self.query_pos, self.ref_w, self.ref_b)
        refs = sigmoid(ref_logits)
        tgt = Tensor(np.zeros((self.config.n_queries, self.config.d)))
        for block in self.decoder_blocks:
            tgt = block(tgt, self.query_pos, feat_flat, hw, refs, rng, training)
        return self.heads(tgt, ref_logits)

    def detect_at(self, state: StreamState, t_us: int, hw: tuple[int, int], rng=None, training=False) -> tuple[Tensor, Tensor]:
        feat = self.fused_feature(state, t_us)
        return self.decode(feat, hw, rng, training)

    def feature_hw(self, geometry) -> tuple[int, int]:
        s = self.config.stride
        return (-(-geometry.height // s), -(-geometry.width // s))

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return self.store.state_dict()

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.store.load_state_dict(state)


def _flatten_map(fmap: Tensor) -> Tensor:
    from .tensor import reshape, transpose

    d, h, w = fmap.shape
    return reshape(transpose(fmap, (1, 2, 0)), (h * w, d))


def infer_sequence(
    model: StreamingDetector,
    seq,
    query_times: list[int],
    frame_stride: int = 1,
    confidence_threshold: float | None = None,
    state: StreamState | None = None,
) -> tuple[list[tuple[int, list[Detection]]], StreamState]:
    """Detections at each query time, streaming frames/events causally.

    ``frame_stride`` keeps every n-th frame (frame-rate reduction while
    event bins and query times stay fixed). Detections below the threshold
    are dropped when a threshold is given; raw outputs otherwise.
    """
    cfg = model.config
    state = state or model.new_state()
    window = seq.frame_period_us
    frame_ids = list(range(0, seq.n_frames, frame_stride))
    next_frame = 0
    results = []
    hw = model.feature_hw(seq.geometry)
    with no_grad():
        for t_q in sorted(query_times):
            if cfg.uses_frames:
                while next_frame < len(frame_ids) and seq.frame_time(frame_ids[next_frame]) <= t_q:
                    idx = frame_ids[next_frame]
                    model.process_frame(state, seq.frame(idx), seq.frame_time(idx))
                    next_frame += 1
            if cfg.uses_events:
                arr = seq.event_tensor(
                    t_q,
                    window,
                    cfg.representation,
                    voxel_channels=cfg.voxel_channels,
                    tau=cfg.sigmoid_tau_us,
                    normalize=cfg.normalize_event_image,
                )
                model.process_event_bin(state, EventTensor(cfg.representation, arr, t_q, 0))
            try:
                logits, boxes = model.detect_at(state, t_q, hw)
            except NoPriorFrameError:
                results.append((t_q, []))
                continue
            dets = detections_from_outputs(logits.data, boxes.data, t_q)
            if confidence_threshold is not None:
                dets = [d for d in dets if d.confidence >= confidence_threshold]
            results.append((t_q, dets))
    return results, state
