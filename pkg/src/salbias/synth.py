"""Synthetic fixation datasets with planted bias parameters.

Images are procedural blob/edge textures; fixations are i.i.d. samples from
the exact model forward pass (built-in features, a seeded readout, and the
planted bias parameters), so the generating density is known per stimulus and
can serve as an oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .centerbias import CenterBiasModel, CenterBiasRenderCache, gaussian_centerbias
from .datasets import Fixation, FixationDataset, StimulusMeta, save_dataset
from .features import BuiltinLowLevelProvider, FeatureStackCache
from .grids import Grid, sample_fixations, write_fmap
from .images import write_pnm
from .model import DatasetBiasParams, ReadoutParams, init_readout, predict
from .rng import make_rng
from .scales import ScaleSpec, scale_tag


@dataclass
class SynthSpec:
    name: str
    n_images: int
    width_px: int
    height_px: int
    px_per_dva: float
    n_subjects: int
    fixations_per_subject: int
    scales: tuple[ScaleSpec, ...]
    scale_weights: tuple[float, ...]
    blur_sigma_dva: float
    priority_scale: float = 1.0
    centerbias_weight: float = 1.0
    centerbias_std_x: float = 0.22
    centerbias_std_y: float = 0.22
    centerbias_uniform_weight: float = 0.1
    readout_seed: int = 7
    n_blobs: int = 6
    n_bars: int = 3

    def __post_init__(self) -> None:
        if self.n_images < 1 or self.n_subjects < 1 or self.fixations_per_subject < 1:
            raise ValueError("synthetic spec needs at least one image, subject, and fixation")
        if len(self.scale_weights) != len(self.scales):
            raise ValueError("one planted weight per scale required")
        total = float(np.sum(self.scale_weights))
        if abs(total - 1.0) > 1e-9:
            raise ValueError("planted scale weights must sum to 1")


@dataclass
class SynthResult:
    dataset: FixationDataset
    densities: dict[str, Grid]  # generating density per stimulus (half-res grid)
    images: dict[str, np.ndarray]
    bias: DatasetBiasParams
    readout: ReadoutParams
    spec: SynthSpec = field(repr=False, default=None)


def generate_texture(rng: np.random.Generator, height: int, width: int,
                     n_blobs: int, n_bars: int) -> np.ndarray:
    """Blob/edge texture in [0, 1]: random Gaussian bumps plus oriented bars."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), 0.35)
    span = min(height, width)
    for _ in range(n_blobs):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        radius = rng.uniform(0.04, 0.18) * span
        amplitude = rng.uniform(0.25, 0.8) * rng.choice([-1.0, 1.0])
        img += amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius**2))
    for _ in range(n_bars):
        cx = rng.uniform(0, width)
        cy = rng.uniform(0, height)
        angle = rng.uniform(0, np.pi)
        thickness = rng.uniform(0.01, 0.04) * span
        length = rng.uniform(0.2, 0.6) * span
        nx, ny = -np.sin(angle), np.cos(angle)
        tx, ty = np.cos(angle), np.sin(angle)
        dist = np.abs((xx - cx) * nx + (yy - cy) * ny)
        along = np.abs((xx - cx) * tx + (yy - cy) * ty)
        bar = (dist < thickness) & (along < length / 2)
        img += rng.uniform(0.3, 0.7) * rng.choice([-1.0, 1.0]) * bar
    return np.clip(img, 0.0, 1.0)


def planted_bias_params(spec: SynthSpec) -> DatasetBiasParams:
    centerbias = gaussian_centerbias(
        spec.centerbias_std_x, spec.centerbias_std_y, spec.centerbias_uniform_weight,
        fitted_on=f"{spec.name}/planted",
    )
    return DatasetBiasParams(
        scales=tuple(spec.scales),
        scale_logits=np.log(np.maximum(np.asarray(spec.scale_weights, np.float64), 1e-300)),
        log_priority_scale=float(np.log(spec.priority_scale)),
        log_blur_sigma=float(np.log(spec.blur_sigma_dva)),
        centerbias_weight=spec.centerbias_weight,
        centerbias=centerbias,
    )


def synth_dataset(spec: SynthSpec, seed: int) -> SynthResult:
    """Generate a dataset plus its exact per-stimulus generating densities."""
    provider = BuiltinLowLevelProvider()
    readout = init_readout(provider.channels, spec.readout_seed)
    bias = planted_bias_params(spec)
    feature_cache = FeatureStackCache()
    cb_cache = CenterBiasRenderCache()

    stimuli: list[StimulusMeta] = []
    fixations: list[Fixation] = []
    densities: dict[str, Grid] = {}
    images: dict[str, np.ndarray] = {}
    for index in range(spec.n_images):
        sid = f"{spec.name}_{index:04d}"
        meta = StimulusMeta(
            stimulus_id=sid,
            width_px=spec.width_px,
            height_px=spec.height_px,
            px_per_dva=spec.px_per_dva,
            image_path=f"images/{sid}.pgm",
        )
        image = generate_texture(
            make_rng(seed, "image", spec.name, index),
            spec.height_px, spec.width_px, spec.n_blobs, spec.n_bars,
        )
        density = predict(image, meta, bias, readout, provider, feature_cache, cb_cache)
        stimuli.append(meta)
        images[sid] = image
        densities[sid] = density
        scale_x = meta.width_px / density.width
        scale_y = meta.height_px / density.height
        for subject in range(spec.n_subjects):
            subject_id = f"s{subject:02d}"
            samples = sample_fixations(
                density, spec.fixations_per_subject,
                make_rng(seed, "fixations", spec.name, sid, subject_id),
            )
            for ordinal, (gx, gy) in enumerate(samples):
                x = min(gx * scale_x, np.nextafter(meta.width_px, 0))
                y = min(gy * scale_y, np.nextafter(meta.height_px, 0))
                fixations.append(Fixation(sid, subject_id, float(x), float(y), ordinal))

    dataset = FixationDataset(
        name=spec.name,
        stimuli=tuple(stimuli),
        fixations=tuple(fixations),
        provenance=(f"synthetic (seed={seed})",),
    )
    return SynthResult(dataset, densities, images, bias, readout, spec)


def write_synth(result: SynthResult, out_dir) -> Path:
    """Persist a synthetic dataset: PGM images, manifest + fixation CSV,
    generating densities as FMAPs, and the generator parameters."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "densities").mkdir(parents=True, exist_ok=True)
    for sid, image in result.images.items():
        write_pnm(out_dir / "images" / f"{sid}.pgm", image)
    for sid, density in result.densities.items():
        write_fmap(out_dir / "densities" / f"{sid}.fmap", density.values[None])
    manifest_path = save_dataset(result.dataset, out_dir)
    spec = result.spec
    params = {
        "scales": [scale_tag(s) for s in spec.scales],
        "scale_weights": list(spec.scale_weights),
        "blur_sigma_dva": spec.blur_sigma_dva,
        "priority_scale": spec.priority_scale,
        "centerbias_weight": spec.centerbias_weight,
        "centerbias_std_x": spec.centerbias_std_x,
        "centerbias_std_y": spec.centerbias_std_y,
        "centerbias_uniform_weight": spec.centerbias_uniform_weight,
        "readout_seed": spec.readout_seed,
    }
    (out_dir / "generator.json").write_text(json.dumps(params, indent=2) + "\n", "utf-8")
    return manifest_path
