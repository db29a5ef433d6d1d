"""Scratch CNN image encoder.

Stages of (3x3 same-padded conv, relu, 2x2 max-pool) followed by a 1x1
projection to ``feature_dim`` channels. The final ``g x g`` map is read out as
``n = g*g`` annotation vectors plus their mean as a pooled global feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .errors import DimensionError
from .layers import Conv2D, conv2d_forward, maxpool2d
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 128
    grid_side: int = 6

    @property
    def image_side(self) -> int:
        return self.grid_side * 2 ** len(self.channels)

    @property
    def num_regions(self) -> int:
        return self.grid_side * self.grid_side


@dataclass
class EncoderParams:
    stages: list[Conv2D]
    projection: Conv2D

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, in_channels: int = 3) -> "EncoderParams":
        stages = []
        prev = in_channels
        for k, width in enumerate(config.channels):
            stages.append(Conv2D.init(prev, width, 3, (seed, k), padding=1))
            prev = width
        projection = Conv2D.init(prev, config.feature_dim, 1, (seed, len(config.channels)))
        return cls(stages, projection)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for k, conv in enumerate(self.stages):
            for name, p in conv.parameters().items():
                params[f"stage{k}.{name}"] = p
        for name, p in self.projection.parameters().items():
            params[f"projection.{name}"] = p
        return params


@dataclass
class FeatureGrid:
    """Annotation vectors ``[n, D]`` (or ``[B, n, D]``) and their row mean."""

    annotations: Tensor
    pooled: Tensor = field(default=None)

    def __post_init__(self):
        if self.pooled is None:
            self.pooled = T.reduce(self.annotations, "mean", axis=-2)

    @property
    def num_regions(self) -> int:
        return self.annotations.shape[-2]

    @property
    def feature_dim(self) -> int:
        return self.annotations.shape[-1]


def global_pool(grid: FeatureGrid) -> Tensor:
    return T.reduce(grid.annotations, "mean", axis=-2)


def encode(config: EncoderConfig, params: EncoderParams, image: Tensor) -> FeatureGrid:
    """Encode ``[3, H, W]`` or ``[B, 3, H, W]`` images into a :class:`FeatureGrid`."""
    side = config.image_side
    if image.ndim not in (3, 4) or image.shape[-2:] != (side, side):
        raise DimensionError(f"encoder expects images of side {side}, got shape {image.shape}")
    batched = image.ndim == 4
    x = image if batched else T.reshape(image, (1, *image.shape))
    for conv in params.stages:
        x = maxpool2d(T.relu(conv2d_forward(conv, x)))
    x = conv2d_forward(params.projection, x)
    B, D, g, _ = x.shape
    annotations = T.transpose(T.reshape(x, (B, D, g * g)), (0, 2, 1))
    if not batched:
        annotations = T.reshape(annotations, (g * g, D))
    return FeatureGrid(annotations)
