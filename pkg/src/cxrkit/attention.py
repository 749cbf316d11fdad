"""Residual images and the spatial attention maps derived from them.

Given an input and a generator that maps it toward the opposite class, the
absolute difference between the two localizes what changed. Downsampled to a
feature grid and normalized by its maximum, that residual becomes a spatial
attention map; features are modulated as ``f * (1 + alpha * a)`` so an
all-zero map (the normal-image case) leaves them untouched.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .image import Image, resize_area_array

GeneratorFn = Callable[[Image], Image]

_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class AttentionMap:
    """Feature-resolution weights in [0, 1]; ``weights`` is read-only (h, w)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.size == 0:
            raise ValueError(f"expected a non-empty 2-D weight array, got {w.shape}")
        if w.min() < 0.0 or w.max() > 1.0:
            raise ValueError("attention weights must lie in [0, 1]")
        w = w.copy()
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def height(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureRaster:
    """Channel-major feature stand-in; ``data`` is read-only (channels, h, w)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.size == 0:
            raise ValueError(f"expected a non-empty (channels, h, w) array, got {d.shape}")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[1]


def residual_map(x: Image, g: GeneratorFn) -> Image:
    """Per-pixel absolute difference between ``x`` and the generator's output."""
    gx = g(x)
    if gx.pixels.shape != x.pixels.shape:
        raise ValueError(
            f"generator changed dimensions: {x.width}x{x.height} -> {gx.width}x{gx.height}"
        )
    return Image(np.abs(x.pixels - gx.pixels))


def to_attention(residual: Image, feat_w: int, feat_h: int) -> AttentionMap:
    """Area-downsample to the feature grid, then normalize by the map maximum.

    A residual whose downsampled maximum is below 1e-6 yields an all-zero map,
    so normal inputs produce no attention.
    """
    if feat_w < 1 or feat_h < 1:
        raise ValueError("feature dimensions must be positive")
    if feat_w > residual.width or feat_h > residual.height:
        raise ValueError("feature grid cannot exceed the residual resolution")
    down = resize_area_array(residual.pixels, feat_w, feat_h)
    peak = float(down.max())
    if peak > _EPS:
        down = down / peak
    else:
        down = np.zeros_like(down)
    return AttentionMap(np.clip(down, 0.0, 1.0))


def apply_attention(f: FeatureRaster, a: AttentionMap, alpha: float = 1.0) -> FeatureRaster:
    """Modulate features channel-wise: ``out = f * (1 + alpha * a)``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if (f.height, f.width) != (a.height, a.width):
        raise ValueError(
            f"spatial dimensions differ: features {f.width}x{f.height} "
            f"vs attention {a.width}x{a.height}"
        )
    return FeatureRaster(f.data * (1.0 + alpha * a.weights)[None, :, :])
