"""Multiscale pyramid specifications.

Two scale families: absolute scales resize the image to a fixed px/dva
resolution (sensitive to physical object size); relative scales resize so the
longer image side hits a fixed pixel count (sensitive to size relative to the
frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import StimulusMeta

ABSOLUTE = "absolute_px_per_dva"
RELATIVE = "relative_px"

DEFAULT_ABSOLUTE_SCALES = (5.0, 10.0, 17.5, 24.0, 30.0)
DEFAULT_RELATIVE_SCALES = (128.0, 256.0, 512.0, 768.0, 1024.0)


@dataclass(frozen=True)
class ScaleSpec:
    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind not in (ABSOLUTE, RELATIVE):
            raise ValueError(f"unknown scale kind {self.kind!r}")
        if self.value <= 0:
            raise ValueError("scale value must be positive")


def default_scales() -> tuple[ScaleSpec, ...]:
    return tuple(ScaleSpec(ABSOLUTE, v) for v in DEFAULT_ABSOLUTE_SCALES) + tuple(
        ScaleSpec(RELATIVE, v) for v in DEFAULT_RELATIVE_SCALES
    )


def scale_tag(scale: ScaleSpec) -> str:
    """Stable file-name tag, e.g. dva_17.5 or px_256."""
    value = scale.value
    text = str(int(value)) if float(value).is_integer() else repr(float(value))
    return ("dva_" if scale.kind == ABSOLUTE else "px_") + text


def parse_scale_tag(tag: str) -> ScaleSpec:
    if tag.startswith("dva_"):
        return ScaleSpec(ABSOLUTE, float(tag[4:]))
    if tag.startswith("px_"):
        return ScaleSpec(RELATIVE, float(tag[3:]))
    raise ValueError(f"unrecognized scale tag {tag!r}")


def scaled_size(meta: StimulusMeta, scale: ScaleSpec) -> tuple[int, int]:
    """(height, width) of the image rescaled to the given scale."""
    if scale.kind == ABSOLUTE:
        factor = scale.value / meta.px_per_dva
    else:
        factor = scale.value / max(meta.width_px, meta.height_px)
    out_h = int(np.floor(meta.height_px * factor + 0.5))
    out_w = int(np.floor(meta.width_px * factor + 0.5))
    if out_h < 1 or out_w < 1:
        raise ValueError(
            f"scale {scale} shrinks {meta.width_px}x{meta.height_px} below one pixel"
        )
    return out_h, out_w
