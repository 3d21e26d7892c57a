"""Stride-8 convolutional encoder and the optional pre-context module."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    mean,
    relu,
)

CONTEXT_VARIANTS = ("identity", "pooling")


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=tuple(shape))


@dataclass(frozen=True)
class EncoderConfig:
    feature_channels: int = 32
    widths: tuple[int, int, int] | None = None
    in_channels: int = 3
    context_variant: str = "identity"

    def __post_init__(self):
        if self.context_variant not in CONTEXT_VARIANTS:
            raise ValueError(f"context_variant must be one of {CONTEXT_VARIANTS}")
        if self.widths is None:
            object.__setattr__(self, "widths", (16, 32, self.feature_channels))
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError("widths must be three positive ints")
        if self.widths[-1] != self.feature_channels:
            raise ValueError("last stage width must equal feature_channels")


class ToyBackbone:
    """Three ``[conv3x3/2, ReLU, conv3x3/1, ReLU]`` stages followed by ``C_e``.

    Parameters live in ``self.params`` keyed ``enc.<stage>.<a|b>.<w|b>`` and
    ``ctx.<w|b>``; they are plain tensors so the trainer can own them.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c_in = config.in_channels
        for stage, width in enumerate(config.widths):
            for part, c in (("a", c_in), ("b", width)):
                fan = c * 9
                self.params[f"enc.{stage}.{part}.w"] = Tensor(uniform_init(rng, (width, c, 3, 3), fan), True)
                self.params[f"enc.{stage}.{part}.b"] = Tensor(uniform_init(rng, (width,), fan), True)
            c_in = width
        if config.context_variant == "pooling":
            z = config.feature_channels
            self.params["ctx.w"] = Tensor(uniform_init(rng, (z, 2 * z, 1, 1), 2 * z), True)
            self.params["ctx.b"] = Tensor(uniform_init(rng, (z,), 2 * z), True)

    def encode(self, image) -> Tensor:
        """Map ``[3, H, W]`` or ``[B, 3, H, W]`` images to ``R_p`` at stride 8."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError(f"image extents {h}x{w} are not divisible by 8")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} channels, got {x.shape[1]}")
        p = self.params
        for stage in range(3):
            x = relu(conv2d(x, p[f"enc.{stage}.a.w"], p[f"enc.{stage}.a.b"], stride=2))
            x = relu(conv2d(x, p[f"enc.{stage}.b.w"], p[f"enc.{stage}.b.b"], stride=1))
        return x.reshape(x.shape[1:]) if single else x

    def apply_context(self, features: Tensor) -> Tensor:
        """``C_e``: identity, or global-pool concat projected back to Z channels."""
        if self.config.context_variant == "identity":
            return features
        single = features.ndim == 3
        x = features.reshape((1,) + features.shape) if single else features
        pooled = broadcast_to(mean(x, axis=(2, 3), keepdims=True), x.shape)
        out = conv2d(concat([x, pooled], axis=1), self.params["ctx.w"], self.params["ctx.b"])
        return out.reshape(out.shape[1:]) if single else out
