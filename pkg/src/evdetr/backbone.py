"""Modal-specific convolutional feature extraction and positional encodings.

Each modality (frame, event) owns one parameter set, shared across every
timestamp of that modality; the extractor is a short stack of stride-2
convolutions followed by a 1x1 projection to the model dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import ParamStore, RngStream, Tensor, conv2d, gelu, uniform_init


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int
    widths: tuple[int, ...] = (16, 32, 64)
    stride: int = 8
    d: int = 64

    def __post_init__(self):
        stages = int(round(math.log2(self.stride)))
        if 2**stages != self.stride:
            raise ConfigError(f"backbone stride {self.stride} must be a power of two")
        if len(self.widths) != stages:
            raise ConfigError(f"{len(self.widths)} widths for {stages} stride-2 stages")


@dataclass
class FeatureMap:
    """[d, H', W'] features tagged with source timestamp and modality."""

    tensor: Tensor
    t_stamp: int
    modality: str

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[1], self.tensor.shape[2]


class ConvBackbone:
    """Stride-2 conv stack + 1x1 projection; weights keyed by the name prefix."""

    def __init__(self, store: ParamStore, prefix: str, config: BackboneConfig, rng: RngStream):
        self.config = config
        self.stages = []
        c_in = config.in_channels
        for i, c_out in enumerate(config.widths):
            fan = c_in * 9
            w = store.new(f"{prefix}.conv{i}.weight", uniform_init(rng, fan, (c_out, c_in, 3, 3)))
            b = store.new(f"{prefix}.conv{i}.bias", uniform_init(rng, fan, (c_out,)))
            self.stages.append((w, b))
            c_in = c_out
        self.proj_w = store.new(f"{prefix}.proj.weight", uniform_init(rng, c_in, (config.d, c_in, 1, 1)))
        self.proj_b = store.new(f"{prefix}.proj.bias", uniform_init(rng, c_in, (config.d,)))

    def __call__(self, image: Tensor) -> Tensor:
        """[C, H, W] -> [d, ceil(H/stride), ceil(W/stride)]."""
        if image.shape[0] != self.config.in_channels:
            raise ConfigError(
                f"backbone expects {self.config.in_channels} input channels, got {image.shape[0]}"
            )
        x = image
        for w, b in self.stages:
            x = gelu(conv2d(x, w, b, stride=2, padding=1))
        return conv2d(x, self.proj_w, self.proj_b, stride=1, padding=0)

    def extract(self, image, t_stamp: int, modality: str) -> FeatureMap:
        """Timestamped, modality-tagged feature extraction."""
        return FeatureMap(self(image if isinstance(image, Tensor) else Tensor(image)), t_stamp, modality)


def positional_encoding(h: int, w: int, d: int, temperature: float = 10000.0) -> np.ndarray:
    """2D sinusoidal encoding [d, h, w]; first half columns, second half rows.

    Within each half, pair k runs at frequency temperature^(2k/half), even
    channels sine, odd channels cosine, over raw integer pixel indices.
    """
    if d % 4 != 0:
        raise ConfigError(f"positional encoding needs d divisible by 4, got {d}")
    half = d // 2
    freqs = temperature ** (2 * (np.arange(half) // 2) / half)
    cols = np.arange(w)[None, :] / freqs[:, None, None]  # [half, 1, w]
    rows = np.arange(h)[:, None] / freqs[:, None, None]  # [half, h, 1]
    pe = np.zeros((d, h, w))
    pe[0:half:2] = np.broadcast_to(np.sin(cols[0::2]), (half // 2, h, w))
    pe[1:half:2] = np.broadcast_to(np.cos(cols[1::2]), (half // 2, h, w))
    pe[half::2] = np.broadcast_to(np.sin(rows[0::2]), (half // 2, h, w))
    pe[half + 1 :: 2] = np.broadcast_to(np.cos(rows[1::2]), (half // 2, h, w))
    return pe


def grid_reference_points(h: int, w: int) -> np.ndarray:
    """Normalized cell centers [h*w, 2] as (u, v), row-major like flattening."""
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu.reshape(-1), vv.reshape(-1)], axis=-1)
