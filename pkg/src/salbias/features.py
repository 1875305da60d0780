"""Feature providers: deterministic built-in low-level features and
precomputed FMAP tensors exported by external backbone tools.

A provider maps (image, stimulus meta, scale) to a (channels, h, w) float32
stack at that scale's resolution.  The same inputs always yield identical
features.
"""

from __future__ import annotations

from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .datasets import StimulusMeta
from .grids import bilinear_resize_array, read_fmap
from .images import to_grayscale
from .scales import ScaleSpec, scale_tag, scaled_size


class FeatureProvider(Protocol):
    provider_id: str
    channels: int

    def features(self, image: np.ndarray, meta: StimulusMeta, scale: ScaleSpec) -> np.ndarray:
        ...


def _resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if image.ndim == 2:
        return bilinear_resize_array(image, out_h, out_w)
    return np.stack(
        [bilinear_resize_array(image[..., c], out_h, out_w) for c in range(image.shape[2])],
        axis=-1,
    )


def _gaussian_px(values: np.ndarray, sigma_px: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma_px))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (offsets / sigma_px) ** 2)
    taps /= taps.sum()
    out = ndimage.correlate1d(values, taps, axis=0, mode="nearest")
    return ndimage.correlate1d(out, taps, axis=1, mode="nearest")


class BuiltinLowLevelProvider:
    """Eight deterministic low-level channels computed on the rescaled image.

    Channels: intensity, Sobel magnitude, local 5x5 std, three
    difference-of-Gaussian bands (sigma pairs 1/2, 2/4, 4/8 px), and two
    color-opponency channels (zero for grayscale input).  Computing them after
    rescaling makes the channels scale-sensitive, which is what lets the
    per-scale weights be identified.
    """

    provider_id = "builtin_lowlevel"
    channels = 8

    def features(self, image: np.ndarray, meta: StimulusMeta, scale: ScaleSpec) -> np.ndarray:
        out_h, out_w = scaled_size(meta, scale)
        scaled = _resize_image(np.asarray(image, dtype=np.float64), out_h, out_w)
        gray = to_grayscale(scaled)
        sobel_x = ndimage.sobel(gray, axis=1, mode="nearest")
        sobel_y = ndimage.sobel(gray, axis=0, mode="nearest")
        edges = np.hypot(sobel_x, sobel_y)
        mean = ndimage.uniform_filter(gray, size=5, mode="nearest")
        mean_sq = ndimage.uniform_filter(gray**2, size=5, mode="nearest")
        local_std = np.sqrt(np.maximum(mean_sq - mean**2, 0.0))
        dogs = [
            _gaussian_px(gray, lo) - _gaussian_px(gray, hi)
            for lo, hi in ((1.0, 2.0), (2.0, 4.0), (4.0, 8.0))
        ]
        if scaled.ndim == 3:
            red, green, blue = scaled[..., 0], scaled[..., 1], scaled[..., 2]
            opponency = [red - green, blue - (red + green) / 2.0]
        else:
            opponency = [np.zeros_like(gray), np.zeros_like(gray)]
        stack = np.stack([gray, edges, local_std, *dogs, *opponency])
        return stack.astype(np.float32)


class PrecomputedProvider:
    """Features read from ``<features_dir>/<stimulus_id>/<scale_tag>.fmap``."""

    provider_id = "precomputed"

    def __init__(self, features_dir, channels: int | None = None):
        self.features_dir = Path(features_dir)
        if not self.features_dir.is_dir():
            raise FileNotFoundError(f"features directory not found: {self.features_dir}")
        self._channels = channels

    @property
    def channels(self) -> int:
        if self._channels is None:
            fmaps = sorted(self.features_dir.glob("*/*.fmap"))
            if not fmaps:
                raise FileNotFoundError(f"no .fmap files under {self.features_dir}")
            self._channels = read_fmap(fmaps[0]).shape[0]
        return self._channels

    def features(self, image: np.ndarray, meta: StimulusMeta, scale: ScaleSpec) -> np.ndarray:
        path = self.features_dir / meta.stimulus_id / f"{scale_tag(scale)}.fmap"
        if not path.exists():
            raise FileNotFoundError(f"missing feature tensor {path}")
        stack = read_fmap(path)
        if stack.shape[0] != self.channels:
            raise ValueError(
                f"{path}: channel count {stack.shape[0]} != provider channels {self.channels}"
            )
        return stack


class FeatureStackCache:
    """Per-stimulus cache of the 1/8-resolution resized per-scale stacks."""

    def __init__(self) -> None:
        self._cache: dict[tuple, np.ndarray] = {}

    def get(self, key: tuple) -> np.ndarray | None:
        return self._cache.get(key)

    def put(self, key: tuple, value: np.ndarray) -> None:
        self._cache[key] = value
