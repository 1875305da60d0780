"""Spatial-prior models of fixation location (center bias) and the per-image
inter-observer (gold standard) model.

All models are mixtures of three component kinds evaluated in normalized image
coordinates: an isotropic Gaussian KDE with bandwidth in dva, a centered
anisotropic Gaussian, and a uniform component.  Rendering evaluates each
component at pixel centers on a target grid, normalizes it there, and mixes;
a rendered density therefore sums to 1 on any grid.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import FixationDataset, StimulusMeta
from .grids import Grid

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class StimulusGeometry:
    width_px: int
    height_px: int
    px_per_dva: float

    @classmethod
    def of(cls, meta: StimulusMeta) -> "StimulusGeometry":
        return cls(meta.width_px, meta.height_px, meta.px_per_dva)

    @property
    def dva_span_x(self) -> float:
        return self.width_px / self.px_per_dva

    @property
    def dva_span_y(self) -> float:
        return self.height_px / self.px_per_dva


@dataclass(frozen=True)
class UniformComponent:
    weight: float


@dataclass(frozen=True)
class GaussianComponent:
    """Gaussian centered at the image center, stds in normalized coordinates."""

    weight: float
    std_x: float
    std_y: float


@dataclass(frozen=True)
class KdeComponent:
    """Isotropic Gaussian KDE over normalized support points, bandwidth in dva."""

    weight: float
    points: np.ndarray  # (n, 2) columns (x_norm, y_norm)
    bandwidth_dva: float
    point_weights: np.ndarray | None = None  # (n,), sums to 1; None = uniform

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] == 0:
            raise ValueError("KDE support must be a non-empty (n, 2) array")
        if self.bandwidth_dva <= 0:
            raise ValueError("KDE bandwidth must be positive")
        if self.point_weights is not None:
            pw = np.asarray(self.point_weights, dtype=np.float64)
            object.__setattr__(self, "point_weights", pw)


Component = UniformComponent | GaussianComponent | KdeComponent


@dataclass(frozen=True)
class CenterBiasModel:
    variant: str  # kde_uniform | gaussian_uniform | kde_gaussian_uniform | averaged | fixed
    components: tuple[Component, ...]
    fitted_on: str = ""

    def __post_init__(self) -> None:
        total = sum(c.weight for c in self.components)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {total}, not 1")
        if any(c.weight < 0 for c in self.components):
            raise ValueError("mixture weights must be non-negative")

    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.variant.encode())
        for comp in self.components:
            h.update(type(comp).__name__.encode())
            h.update(np.float64(comp.weight).tobytes())
            if isinstance(comp, GaussianComponent):
                h.update(np.float64([comp.std_x, comp.std_y]).tobytes())
            elif isinstance(comp, KdeComponent):
                h.update(np.float64(comp.bandwidth_dva).tobytes())
                h.update(np.ascontiguousarray(comp.points).tobytes())
                if comp.point_weights is not None:
                    h.update(np.ascontiguousarray(comp.point_weights).tobytes())
        return h.hexdigest()


def uniform_centerbias() -> CenterBiasModel:
    return CenterBiasModel("fixed", (UniformComponent(1.0),))


def gaussian_centerbias(std_x: float, std_y: float, uniform_weight: float,
                        fitted_on: str = "") -> CenterBiasModel:
    """Centered Gaussian + uniform prior with explicit parameters (no fitting)."""
    return CenterBiasModel(
        "gaussian_uniform",
        (GaussianComponent(1.0 - uniform_weight, std_x, std_y), UniformComponent(uniform_weight)),
        fitted_on=fitted_on,
    )


# ---------------------------------------------------------------------------
# Density evaluation and rendering
# ---------------------------------------------------------------------------

def kde_density_at(
    xs_norm: np.ndarray,
    ys_norm: np.ndarray,
    points: np.ndarray,
    bandwidth_dva: float,
    geometry: StimulusGeometry,
    point_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Exact-sum KDE density (per dva^2) at query points in normalized coords."""
    xs = np.asarray(xs_norm, dtype=np.float64)
    ys = np.asarray(ys_norm, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    weights = np.full(n, 1.0 / n) if point_weights is None else np.asarray(point_weights, np.float64)
    sx, sy = geometry.dva_span_x, geometry.dva_span_y
    dx = (xs[:, None] - pts[None, :, 0]) * sx
    dy = (ys[:, None] - pts[None, :, 1]) * sy
    kernel = np.exp(-(dx**2 + dy**2) / (2.0 * bandwidth_dva**2))
    return kernel @ weights / (2.0 * np.pi * bandwidth_dva**2)


def _grid_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def component_grid(comp: Component, geometry: StimulusGeometry, grid_h: int, grid_w: int) -> np.ndarray:
    """Component density evaluated at pixel centers, normalized to sum 1."""
    if isinstance(comp, UniformComponent):
        return np.full((grid_h, grid_w), 1.0 / (grid_h * grid_w))
    xc = _grid_centers(grid_w)
    yc = _grid_centers(grid_h)
    if isinstance(comp, GaussianComponent):
        gx = np.exp(-((xc - 0.5) ** 2) / (2.0 * comp.std_x**2))
        gy = np.exp(-((yc - 0.5) ** 2) / (2.0 * comp.std_y**2))
        grid = gy[:, None] * gx[None, :]
    else:
        n = comp.points.shape[0]
        weights = comp.point_weights if comp.point_weights is not None else np.full(n, 1.0 / n)
        bw2 = 2.0 * comp.bandwidth_dva**2
        kx = np.exp(-(((xc[None, :] - comp.points[:, 0:1]) * geometry.dva_span_x) ** 2) / bw2)
        ky = np.exp(-(((yc[None, :] - comp.points[:, 1:2]) * geometry.dva_span_y) ** 2) / bw2)
        grid = (ky * weights[:, None]).T @ kx
    total = grid.sum()
    if total <= 0:
        # Degenerate support far outside the grid: fall back to uniform.
        return np.full((grid_h, grid_w), 1.0 / (grid_h * grid_w))
    return grid / total


def render_centerbias_probability(
    model: CenterBiasModel, geometry: StimulusGeometry, grid_h: int | None = None, grid_w: int | None = None
) -> np.ndarray:
    grid_h = geometry.height_px if grid_h is None else grid_h
    grid_w = geometry.width_px if grid_w is None else grid_w
    grid = np.zeros((grid_h, grid_w))
    for comp in model.components:
        if comp.weight:
            grid += comp.weight * component_grid(comp, geometry, grid_h, grid_w)
    return grid / grid.sum()


def render_centerbias(
    model: CenterBiasModel, geometry: StimulusGeometry, grid_h: int | None = None, grid_w: int | None = None
) -> Grid:
    """Render a center-bias model as a normalized log-density grid."""
    prob = render_centerbias_probability(model, geometry, grid_h, grid_w)
    return Grid(np.log(np.maximum(prob, LOG_FLOOR)), kind="log_density")


class CenterBiasRenderCache:
    """Memoizes rendered log-density grids keyed by model content and geometry."""

    def __init__(self) -> None:
        self._cache: dict[tuple, np.ndarray] = {}

    def log_density(self, model: CenterBiasModel, geometry: StimulusGeometry,
                    grid_h: int, grid_w: int) -> np.ndarray:
        key = (model.content_hash(), geometry, grid_h, grid_w)
        if key not in self._cache:
            self._cache[key] = render_centerbias(model, geometry, grid_h, grid_w).values
        return self._cache[key]


# ---------------------------------------------------------------------------
# Averaging (generalization setting)
# ---------------------------------------------------------------------------

def _scaled(comp: Component, factor: float) -> Component:
    if isinstance(comp, UniformComponent):
        return UniformComponent(comp.weight * factor)
    if isinstance(comp, GaussianComponent):
        return GaussianComponent(comp.weight * factor, comp.std_x, comp.std_y)
    return KdeComponent(comp.weight * factor, comp.points, comp.bandwidth_dva, comp.point_weights)


def average_centerbias(models: list[CenterBiasModel]) -> CenterBiasModel:
    """Model whose rendered density is the arithmetic mean of the members'.

    Implemented as the union of the members' components with weights scaled by
    1/K, which makes the mean exact at every rendering size.
    """
    if not models:
        raise ValueError("need at least one model to average")
    factor = 1.0 / len(models)
    components: list[Component] = []
    for model in models:
        components.extend(_scaled(c, factor) for c in model.components)
    fitted_on = "+".join(m.fitted_on for m in models if m.fitted_on)
    return CenterBiasModel("averaged", tuple(components), fitted_on=fitted_on)


# ---------------------------------------------------------------------------
# Fitting machinery
# ---------------------------------------------------------------------------

@dataclass
class CenterBiasSearchConfig:
    bandwidths_dva: np.ndarray = field(default_factory=lambda: np.geomspace(0.1, 10.0, 20))
    uniform_weights: tuple[float, ...] = (0.001, 0.003, 0.01, 0.03, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.97)
    simplex_step: float = 0.1
    gaussian_std_factors: np.ndarray = field(default_factory=lambda: np.geomspace(0.4, 2.5, 9))
    refine: bool = True
    grid_divisor: int = 2


@dataclass
class CenterBiasFitReport:
    """Every evaluated hyperparameter point with its objective (nats/fix)."""

    entries: list[tuple[dict, float]]
    selected: dict
    objective: float


def _simplex_lattice(step: float, dims: int = 3) -> list[tuple[float, ...]]:
    ticks = int(round(1.0 / step))
    points = []
    if dims == 3:
        for a in range(ticks + 1):
            for b in range(ticks + 1 - a):
                points.append((a * step, b * step, (ticks - a - b) * step))
    else:
        for a in range(ticks + 1):
            points.append((a * step, (ticks - a) * step))
    return points


def _simplex_neighbors(weights: tuple[float, ...], delta: float) -> list[tuple[float, ...]]:
    out = []
    for i in range(len(weights)):
        for j in range(len(weights)):
            if i == j or weights[i] < delta:
                continue
            moved = list(weights)
            moved[i] -= delta
            moved[j] += delta
            out.append(tuple(moved))
    return out


class _FitContext:
    """Per-(dataset, grid divisor) precomputation shared across the search.

    Discrete semantics throughout: a component's probability of a fixation is
    the normalized pixel-center value of the pixel containing it, exactly as
    produced by rendering.
    """

    def __init__(self, ds: FixationDataset, divisor: int):
        self.ds = ds
        self.divisor = divisor
        metas = ds.stimuli_by_id()
        self.stim_ids = [s.stimulus_id for s in ds.stimuli]
        self.geometry = {sid: StimulusGeometry.of(metas[sid]) for sid in self.stim_ids}
        self.grid_shape = {
            sid: (
                int(np.ceil(metas[sid].height_px / divisor)),
                int(np.ceil(metas[sid].width_px / divisor)),
            )
            for sid in self.stim_ids
        }
        n = len(ds.fixations)
        if n == 0:
            raise ValueError("cannot fit a center bias on an empty dataset")
        self.n_fix = n
        self.fix_image = np.empty(n, dtype=object)
        self.support = np.empty((n, 2))
        self.fix_cell = np.empty((n, 2), dtype=np.intp)  # (row, col) on eval grid
        for i, fx in enumerate(ds.fixations):
            meta = metas[fx.stimulus_id]
            gh, gw = self.grid_shape[fx.stimulus_id]
            self.fix_image[i] = fx.stimulus_id
            self.support[i] = (fx.x / meta.width_px, fx.y / meta.height_px)
            self.fix_cell[i] = (
                min(int(fx.y * gh / meta.height_px), gh - 1),
                min(int(fx.x * gw / meta.width_px), gw - 1),
            )
        self.image_fix_idx = {
            sid: np.flatnonzero(self.fix_image == sid) for sid in self.stim_ids
        }
        geometry_keys = sorted({(self.geometry[sid], self.grid_shape[sid]) for sid in self.stim_ids})
        self.geometry_groups = [
            (geo, shape, [sid for sid in self.stim_ids
                          if self.geometry[sid] == geo and self.grid_shape[sid] == shape])
            for geo, shape in geometry_keys
        ]

    def empirical_center_std(self) -> tuple[float, float]:
        dx = self.support[:, 0] - 0.5
        dy = self.support[:, 1] - 0.5
        return float(np.sqrt(np.mean(dx**2))), float(np.sqrt(np.mean(dy**2)))

    def component_fixation_mass(self, comp: Component) -> np.ndarray:
        """Per-fixation pixel mass of a parametric component (not LOO)."""
        out = np.empty(self.n_fix)
        for geo, (gh, gw), sids in self.geometry_groups:
            grid = component_grid(comp, geo, gh, gw)
            for sid in sids:
                idx = self.image_fix_idx[sid]
                cells = self.fix_cell[idx]
                out[idx] = grid[cells[:, 0], cells[:, 1]]
        return out

    def loo_kde_fixation_mass(self, bandwidth_dva: float) -> np.ndarray:
        """Per-fixation pixel mass of the leave-one-image-out KDE.

        For a fixation on image t, the support is every other image's
        fixations; values use the separable pixel-center kernel factorization,
        so they equal the rendered-grid lookup exactly.
        """
        out = np.empty(self.n_fix)
        bw2 = 2.0 * bandwidth_dva**2
        for geo, (gh, gw), sids in self.geometry_groups:
            xc = _grid_centers(gw)
            yc = _grid_centers(gh)
            kx = np.exp(-(((xc[None, :] - self.support[:, 0:1]) * geo.dva_span_x) ** 2) / bw2)
            ky = np.exp(-(((yc[None, :] - self.support[:, 1:2]) * geo.dva_span_y) ** 2) / bw2)
            mass_per_point = ky.sum(axis=1) * kx.sum(axis=1)
            total_mass = mass_per_point.sum()
            for sid in sids:
                idx = self.image_fix_idx[sid]
                rows = self.fix_cell[idx, 0]
                cols = self.fix_cell[idx, 1]
                value_all = np.einsum("nf,nf->f", ky[:, rows], kx[:, cols])
                value_own = np.einsum("nf,nf->f", ky[np.ix_(idx, rows)], kx[np.ix_(idx, cols)])
                z = total_mass - mass_per_point[idx].sum()
                if z <= 0:
                    out[idx] = 0.0
                else:
                    out[idx] = (value_all - value_own) / z
        return out


def _mean_log(mass: np.ndarray) -> float:
    return float(np.mean(np.log(np.maximum(mass, LOG_FLOOR))))


def fit_centerbias(
    train: FixationDataset,
    variant: str = "kde_uniform",
    search: CenterBiasSearchConfig | None = None,
) -> tuple[CenterBiasModel, CenterBiasFitReport]:
    """Maximum-likelihood center-bias fit.

    KDE-containing variants select bandwidth and mixture weights on a grid by
    leave-one-image-out log-likelihood; the parametric variant maximizes plain
    training likelihood.  Deterministic.
    """
    search = search or CenterBiasSearchConfig()
    ctx = _FitContext(train, search.grid_divisor)
    if variant == "gaussian_uniform":
        return _fit_gaussian_uniform(ctx, search, train.name)
    if variant in ("kde_uniform", "kde_gaussian_uniform"):
        if len(train.stimuli) < 2:
            logger.warning("%s: single-stimulus dataset, falling back to gaussian_uniform", train.name)
            return _fit_gaussian_uniform(ctx, search, train.name)
        return _fit_kde_variant(ctx, search, variant, train.name)
    raise ValueError(f"unknown center-bias variant {variant!r}")


def _fit_gaussian_uniform(ctx: _FitContext, search: CenterBiasSearchConfig, name: str):
    rms_x, rms_y = ctx.empirical_center_std()
    rms_x = max(rms_x, 1e-3)
    rms_y = max(rms_y, 1e-3)
    uniform_mass = ctx.component_fixation_mass(UniformComponent(1.0))

    def stage(std_xs, std_ys, weights):
        entries = []
        for std_x in std_xs:
            for std_y in std_ys:
                gauss_mass = ctx.component_fixation_mass(GaussianComponent(1.0, std_x, std_y))
                for w_u in weights:
                    score = _mean_log((1.0 - w_u) * gauss_mass + w_u * uniform_mass)
                    entries.append(({"std_x": std_x, "std_y": std_y, "uniform_weight": w_u}, score))
        return entries

    entries = stage(rms_x * search.gaussian_std_factors, rms_y * search.gaussian_std_factors,
                    search.uniform_weights)
    best, best_score = max(entries, key=lambda e: e[1])
    if search.refine:
        factor = np.geomspace(1 / 1.3, 1.3, 5)
        refined = stage(best["std_x"] * factor, best["std_y"] * factor,
                        search.uniform_weights)
        entries.extend(refined)
        best, best_score = max(entries, key=lambda e: e[1])
    model = gaussian_centerbias(best["std_x"], best["std_y"], best["uniform_weight"], fitted_on=name)
    return model, CenterBiasFitReport(entries, best, best_score)


def _fit_kde_variant(ctx: _FitContext, search: CenterBiasSearchConfig, variant: str, name: str):
    uniform_mass = ctx.component_fixation_mass(UniformComponent(1.0))
    if variant == "kde_gaussian_uniform":
        std_x, std_y = ctx.empirical_center_std()
        std_x, std_y = max(std_x, 1e-3), max(std_y, 1e-3)
        gauss_mass = ctx.component_fixation_mass(GaussianComponent(1.0, std_x, std_y))
        weight_grid = _simplex_lattice(search.simplex_step, dims=3)
    else:
        std_x = std_y = None
        gauss_mass = None
        weight_grid = [(1.0 - w, 0.0, w) for w in search.uniform_weights]

    def score_weights(kde_mass, weights):
        w_kde, w_gauss, w_u = weights
        mix = w_kde * kde_mass + w_u * uniform_mass
        if gauss_mass is not None:
            mix = mix + w_gauss * gauss_mass
        return _mean_log(mix)

    entries: list[tuple[dict, float]] = []

    def stage(bandwidths, weight_candidates):
        stage_entries = []
        for bw in bandwidths:
            kde_mass = ctx.loo_kde_fixation_mass(bw)
            for weights in weight_candidates:
                score = score_weights(kde_mass, weights)
                stage_entries.append(({"bandwidth_dva": float(bw), "weights": weights}, score))
        return stage_entries

    entries.extend(stage(search.bandwidths_dva, weight_grid))
    best, best_score = max(entries, key=lambda e: e[1])
    if search.refine:
        bws = np.asarray(search.bandwidths_dva, dtype=np.float64)
        ratio = (bws.max() / bws.min()) ** (1.0 / max(len(bws) - 1, 1)) if len(bws) > 1 else 1.5
        local_bw = np.geomspace(best["bandwidth_dva"] / ratio, best["bandwidth_dva"] * ratio, 7)
        local_weights = [best["weights"]] + _simplex_neighbors(best["weights"], search.simplex_step / 2)
        entries.extend(stage(local_bw, local_weights))
        best, best_score = max(entries, key=lambda e: e[1])

    w_kde, w_gauss, w_u = best["weights"]
    components: list[Component] = [KdeComponent(w_kde, ctx.support.copy(), best["bandwidth_dva"])]
    if variant == "kde_gaussian_uniform":
        components.append(GaussianComponent(w_gauss, std_x, std_y))
    components.append(UniformComponent(w_u))
    components = [c for c in components if c.weight > 0] or [UniformComponent(1.0)]
    total = sum(c.weight for c in components)
    components = [_scaled(c, 1.0 / total) for c in components]
    model = CenterBiasModel(variant, tuple(components), fitted_on=name)
    return model, CenterBiasFitReport(entries, best, best_score)


# ---------------------------------------------------------------------------
# Gold standard (per-image inter-observer consistency model)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GoldStandardImageParams:
    bandwidth_dva: float
    weight_kde: float
    weight_centerbias: float
    weight_uniform: float
    n_subjects: int


@dataclass(frozen=True)
class GoldStandardModel:
    per_image: dict[str, GoldStandardImageParams]
    centerbias: CenterBiasModel
    mode: str = "loso"  # loso | all_fixations_upper_bound
    grid_divisor: int = 2


def fit_gold_standard(
    ds: FixationDataset,
    dataset_cb: CenterBiasModel,
    search: CenterBiasSearchConfig | None = None,
) -> GoldStandardModel:
    """Fit per-image KDE bandwidth and mixture weights by LOSO likelihood.

    The KDE component for a subject's fixations uses the fixations of all
    other subjects on the same image.  Images with a single subject get a
    centerbias+uniform mixture only.
    """
    search = search or CenterBiasSearchConfig()
    divisor = search.grid_divisor
    per_image: dict[str, GoldStandardImageParams] = {}
    weight_grid3 = _simplex_lattice(search.simplex_step, dims=3)
    weight_grid2 = _simplex_lattice(search.simplex_step, dims=2)
    for meta in ds.stimuli:
        sid = meta.stimulus_id
        fixations = ds.fixations_for(sid)
        if not fixations:
            continue
        geo = StimulusGeometry.of(meta)
        gh = int(np.ceil(meta.height_px / divisor))
        gw = int(np.ceil(meta.width_px / divisor))
        cb_grid = render_centerbias_probability(dataset_cb, geo, gh, gw)
        xs = np.array([f.x / meta.width_px for f in fixations])
        ys = np.array([f.y / meta.height_px for f in fixations])
        rows = np.minimum((ys * gh).astype(np.intp), gh - 1)
        cols = np.minimum((xs * gw).astype(np.intp), gw - 1)
        cb_mass = cb_grid[rows, cols]
        unif_mass = np.full(len(fixations), 1.0 / (gh * gw))
        subjects = np.array([f.subject_id for f in fixations])
        n_subjects = len(set(subjects))
        if n_subjects < 2:
            logger.info("gold standard: image %s has one subject, centerbias+uniform only", sid)
            best_weights, _ = max(
                (
                    ((0.0, w_cb, w_u), _mean_log(w_cb * cb_mass + w_u * unif_mass))
                    for w_cb, w_u in weight_grid2
                ),
                key=lambda e: e[1],
            )
            per_image[sid] = GoldStandardImageParams(
                float(search.bandwidths_dva[0]), *best_weights, n_subjects
            )
            continue
        support = np.column_stack([xs, ys])
        xc, yc = _grid_centers(gw), _grid_centers(gh)
        best_params, best_score = None, -np.inf
        for bw in search.bandwidths_dva:
            bw2 = 2.0 * bw**2
            kx = np.exp(-(((xc[None, :] - support[:, 0:1]) * geo.dva_span_x) ** 2) / bw2)
            ky = np.exp(-(((yc[None, :] - support[:, 1:2]) * geo.dva_span_y) ** 2) / bw2)
            point_mass = ky.sum(axis=1) * kx.sum(axis=1)
            value_all = np.einsum("nf,nf->f", ky[:, rows], kx[:, cols])
            kde_mass = np.empty(len(fixations))
            for subject in set(subjects):
                sel = subjects == subject
                own_idx = np.flatnonzero(sel)
                value_own = np.einsum(
                    "nf,nf->f", ky[np.ix_(own_idx, rows[sel])], kx[np.ix_(own_idx, cols[sel])]
                )
                z = point_mass.sum() - point_mass[own_idx].sum()
                kde_mass[sel] = 0.0 if z <= 0 else (value_all[sel] - value_own) / z
            for w_kde, w_cb, w_u in weight_grid3:
                score = _mean_log(w_kde * kde_mass + w_cb * cb_mass + w_u * unif_mass)
                if score > best_score:
                    best_score = score
                    best_params = (float(bw), w_kde, w_cb, w_u)
        per_image[sid] = GoldStandardImageParams(*best_params, n_subjects)
    return GoldStandardModel(per_image, dataset_cb, mode="loso", grid_divisor=divisor)


def gold_standard_log_densities(gold: GoldStandardModel, ds: FixationDataset) -> np.ndarray:
    """Per-fixation log pixel mass (nats) under the gold standard.

    In "loso" mode the KDE support excludes the fixation's own subject; in
    "all_fixations_upper_bound" mode it includes every fixation of the image
    (same fitted parameters).
    """
    metas = ds.stimuli_by_id()
    out = np.empty(len(ds.fixations))
    divisor = gold.grid_divisor
    idx_by_stim: dict[str, list[int]] = {}
    for i, fx in enumerate(ds.fixations):
        idx_by_stim.setdefault(fx.stimulus_id, []).append(i)
    for sid in sorted(idx_by_stim):
        fix_idx = idx_by_stim[sid]
        fixations = [ds.fixations[i] for i in fix_idx]
        params = gold.per_image[sid]
        meta = metas[sid]
        geo = StimulusGeometry.of(meta)
        gh = int(np.ceil(meta.height_px / divisor))
        gw = int(np.ceil(meta.width_px / divisor))
        cb_grid = render_centerbias_probability(gold.centerbias, geo, gh, gw)
        xs = np.array([f.x / meta.width_px for f in fixations])
        ys = np.array([f.y / meta.height_px for f in fixations])
        rows = np.minimum((ys * gh).astype(np.intp), gh - 1)
        cols = np.minimum((xs * gw).astype(np.intp), gw - 1)
        cb_mass = cb_grid[rows, cols]
        unif = 1.0 / (gh * gw)
        if params.weight_kde == 0:
            mix = params.weight_centerbias * cb_mass + params.weight_uniform * unif
        else:
            support = np.column_stack([xs, ys])
            bw2 = 2.0 * params.bandwidth_dva**2
            xc, yc = _grid_centers(gw), _grid_centers(gh)
            kx = np.exp(-(((xc[None, :] - support[:, 0:1]) * geo.dva_span_x) ** 2) / bw2)
            ky = np.exp(-(((yc[None, :] - support[:, 1:2]) * geo.dva_span_y) ** 2) / bw2)
            point_mass = ky.sum(axis=1) * kx.sum(axis=1)
            value_all = np.einsum("nf,nf->f", ky[:, rows], kx[:, cols])
            if gold.mode == "all_fixations_upper_bound":
                kde_mass = value_all / point_mass.sum()
            else:
                subjects = np.array([f.subject_id for f in fixations])
                kde_mass = np.empty(len(fixations))
                for subject in set(subjects):
                    sel = subjects == subject
                    own_idx = np.flatnonzero(sel)
                    value_own = np.einsum(
                        "nf,nf->f", ky[np.ix_(own_idx, rows[sel])], kx[np.ix_(own_idx, cols[sel])]
                    )
                    z = point_mass.sum() - point_mass[own_idx].sum()
                    kde_mass[sel] = 0.0 if z <= 0 else (value_all[sel] - value_own) / z
            mix = (params.weight_kde * kde_mass + params.weight_centerbias * cb_mass
                   + params.weight_uniform * unif)
        mix = np.broadcast_to(np.asarray(mix, dtype=np.float64), (len(fix_idx),))
        out[fix_idx] = np.log(np.maximum(mix, LOG_FLOOR))
    return out


def gold_standard_grid(gold: GoldStandardModel, ds: FixationDataset, stimulus_id: str,
                       grid_h: int, grid_w: int) -> Grid:
    """All-fixations gold density grid for maps and scatter plots."""
    meta = ds.stimuli_by_id()[stimulus_id]
    geo = StimulusGeometry.of(meta)
    params = gold.per_image[stimulus_id]
    fixations = ds.fixations_for(stimulus_id)
    components: list[Component] = []
    if params.weight_kde > 0 and fixations:
        support = np.array([[f.x / meta.width_px, f.y / meta.height_px] for f in fixations])
        components.append(KdeComponent(params.weight_kde, support, params.bandwidth_dva))
    components.extend(_scaled(c, params.weight_centerbias) for c in gold.centerbias.components)
    components.append(UniformComponent(params.weight_uniform))
    total = sum(c.weight for c in components)
    model = CenterBiasModel("fixed", tuple(_scaled(c, 1.0 / total) for c in components))
    prob = render_centerbias_probability(model, geo, grid_h, grid_w)
    return Grid(prob, kind="probability")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_centerbias(model: CenterBiasModel, json_path) -> None:
    """Write a model as JSON plus a support-point CSV beside it."""
    json_path = Path(json_path)
    support_rows: list[tuple[int, float, float, float]] = []
    components = []
    for idx, comp in enumerate(model.components):
        if isinstance(comp, UniformComponent):
            components.append({"kind": "uniform", "weight": comp.weight})
        elif isinstance(comp, GaussianComponent):
            components.append({
                "kind": "gaussian", "weight": comp.weight,
                "std_x": comp.std_x, "std_y": comp.std_y,
            })
        else:
            n = comp.points.shape[0]
            weights = comp.point_weights if comp.point_weights is not None else np.full(n, 1.0 / n)
            for (x, y), w in zip(comp.points, weights):
                support_rows.append((idx, float(x), float(y), float(w)))
            components.append({
                "kind": "kde", "weight": comp.weight,
                "bandwidth_dva": comp.bandwidth_dva, "support_component": idx,
            })
    support_name = json_path.stem + "_support.csv"
    if support_rows:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["component", "x_norm", "y_norm", "point_weight"])
        writer.writerows(support_rows)
        (json_path.parent / support_name).write_text(buf.getvalue(), "utf-8")
    payload = {
        "variant": model.variant,
        "fitted_on": model.fitted_on,
        "components": components,
        "support_file": support_name if support_rows else None,
    }
    json_path.write_text(json.dumps(payload, indent=2) + "\n", "utf-8")


def load_centerbias(json_path) -> CenterBiasModel:
    json_path = Path(json_path)
    payload = json.loads(json_path.read_text("utf-8"))
    support: dict[int, list[tuple[float, float, float]]] = {}
    if payload.get("support_file"):
        text = (json_path.parent / payload["support_file"]).read_text("utf-8")
        reader = csv.reader(io.StringIO(text))
        next(reader)
        for comp_idx, x, y, w in reader:
            support.setdefault(int(comp_idx), []).append((float(x), float(y), float(w)))
    components: list[Component] = []
    for entry in payload["components"]:
        if entry["kind"] == "uniform":
            components.append(UniformComponent(entry["weight"]))
        elif entry["kind"] == "gaussian":
            components.append(GaussianComponent(entry["weight"], entry["std_x"], entry["std_y"]))
        else:
            rows = support[entry["support_component"]]
            pts = np.array([[x, y] for x, y, _ in rows])
            weights = np.array([w for _, _, w in rows])
            components.append(KdeComponent(entry["weight"], pts, entry["bandwidth_dva"], weights))
    return CenterBiasModel(payload["variant"], tuple(components), fitted_on=payload.get("fitted_on", ""))
