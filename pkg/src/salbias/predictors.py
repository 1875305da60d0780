"""Density-model wrappers evaluated by the metrics module.

Every model produces a per-image probability grid on the shared evaluation
grid (half the native resolution).  Models may additionally override the
per-fixation scoring path; the gold standard needs this because its
leave-one-subject-out density depends on which subject a fixation belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .centerbias import (
    CenterBiasModel,
    CenterBiasRenderCache,
    GoldStandardModel,
    StimulusGeometry,
    gold_standard_grid,
    gold_standard_log_densities,
)
from .datasets import FixationDataset, StimulusMeta
from .features import FeatureProvider, FeatureStackCache
from .grids import Grid
from .images import read_pnm
from .model import DatasetBiasParams, ReadoutParams, output_grid_shape, predict


class ImageSource:
    """Lookup of stimulus pixels; returns None when no pixels are available."""

    def get(self, meta: StimulusMeta) -> np.ndarray | None:
        raise NotImplementedError


@dataclass
class InMemoryImages(ImageSource):
    images: dict[str, np.ndarray]

    def get(self, meta: StimulusMeta) -> np.ndarray | None:
        return self.images.get(meta.stimulus_id)


@dataclass
class FileImages(ImageSource):
    root: Path
    _cache: dict[str, np.ndarray] = field(default_factory=dict)

    def get(self, meta: StimulusMeta) -> np.ndarray | None:
        if meta.image_path is None:
            return None
        if meta.stimulus_id not in self._cache:
            path = Path(meta.image_path)
            if not path.is_absolute():
                path = Path(self.root) / path
            self._cache[meta.stimulus_id] = read_pnm(path)
        return self._cache[meta.stimulus_id]


class DensityModel:
    def density_grid(self, meta: StimulusMeta) -> Grid:
        raise NotImplementedError

    def fixation_log_densities(self, ds: FixationDataset) -> np.ndarray | None:
        """Optional per-fixation scoring override (nats); None = grid lookup."""
        return None


@dataclass
class UniformDensityModel(DensityModel):
    def density_grid(self, meta: StimulusMeta) -> Grid:
        h, w = output_grid_shape(meta)
        return Grid(np.full((h, w), 1.0 / (h * w)), kind="probability")


class CenterBiasDensityModel(DensityModel):
    def __init__(self, model: CenterBiasModel, cache: CenterBiasRenderCache | None = None):
        self.model = model
        self.cache = cache or CenterBiasRenderCache()

    def density_grid(self, meta: StimulusMeta) -> Grid:
        h, w = output_grid_shape(meta)
        log_cb = self.cache.log_density(self.model, StimulusGeometry.of(meta), h, w)
        prob = np.exp(log_cb)
        return Grid(prob / prob.sum(), kind="probability")


@dataclass
class SaliencyDensityModel(DensityModel):
    readout: ReadoutParams
    bias: DatasetBiasParams
    provider: FeatureProvider
    images: ImageSource | None = None
    feature_cache: FeatureStackCache | None = None
    cb_cache: CenterBiasRenderCache | None = None

    def density_grid(self, meta: StimulusMeta) -> Grid:
        image = self.images.get(meta) if self.images is not None else None
        return predict(
            image, meta, self.bias, self.readout, self.provider,
            self.feature_cache, self.cb_cache,
        )


@dataclass
class FixedGridsModel(DensityModel):
    """Densities given explicitly per stimulus (e.g. synthetic ground truth)."""

    grids: dict[str, Grid]

    def density_grid(self, meta: StimulusMeta) -> Grid:
        return self.grids[meta.stimulus_id]


@dataclass
class EnsembleDensityModel(DensityModel):
    """Arithmetic mean of member densities (per-dataset-model ensembling)."""

    members: list[DensityModel]

    def density_grid(self, meta: StimulusMeta) -> Grid:
        grids = [m.density_grid(meta).values for m in self.members]
        mean = np.mean(grids, axis=0)
        return Grid(mean / mean.sum(), kind="probability")


@dataclass
class GoldStandardDensityModel(DensityModel):
    gold: GoldStandardModel
    ds: FixationDataset

    def density_grid(self, meta: StimulusMeta) -> Grid:
        h, w = output_grid_shape(meta)
        return gold_standard_grid(self.gold, self.ds, meta.stimulus_id, h, w)

    def fixation_log_densities(self, ds: FixationDataset) -> np.ndarray:
        return gold_standard_log_densities(self.gold, ds)
