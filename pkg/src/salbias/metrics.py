"""Probabilistic and classical saliency metrics.

Log-likelihood and information gain are computed in natural log internally
and converted to bits only at the reporting boundary.  Aggregation rules:
LL/IG/NSS and AUC/sAUC are fixation-weighted means over images; CC/KLDiv/SIM
are unweighted image means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .datasets import FixationDataset, StimulusMeta
from .grids import Grid, blur_array, log_density_lookup
from .predictors import DensityModel
from .rng import make_rng

LN2 = math.log(2.0)
EPS_KL = 1e-12


@dataclass
class Evaluation:
    dataset: str
    n_fixations: int
    per_fixation_log_density: np.ndarray  # nats, aligned with ds.fixations
    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    aggregates: dict[str, float] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=dict)


def _image_fixation_indices(ds: FixationDataset) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for i, fx in enumerate(ds.fixations):
        groups.setdefault(fx.stimulus_id, []).append(i)
    return {sid: np.asarray(idx, dtype=np.intp) for sid, idx in groups.items()}


def _grid_coords(meta: StimulusMeta, grid: Grid, xs: np.ndarray, ys: np.ndarray):
    """Map full-resolution fixation coordinates onto the evaluation grid."""
    gx = xs * (grid.width / meta.width_px)
    gy = ys * (grid.height / meta.height_px)
    return gx, gy


def fixation_log_densities(model: DensityModel, ds: FixationDataset) -> np.ndarray:
    """Per-fixation log pixel mass (nats) under the model."""
    override = model.fixation_log_densities(ds)
    if override is not None:
        return np.asarray(override, dtype=np.float64)
    out = np.empty(len(ds.fixations))
    metas = ds.stimuli_by_id()
    for sid, idx in _image_fixation_indices(ds).items():
        meta = metas[sid]
        grid = model.density_grid(meta)
        grid.check()
        xs = np.array([ds.fixations[i].x for i in idx])
        ys = np.array([ds.fixations[i].y for i in idx])
        gx, gy = _grid_coords(meta, grid, xs, ys)
        out[idx] = log_density_lookup(grid, gx, gy)
    return out


def log_likelihood(model: DensityModel, ds: FixationDataset) -> float:
    """Mean log2 probability of the fixated pixel, in bits per fixation."""
    if ds.n_fixations == 0:
        raise ValueError("dataset has no fixations")
    return float(np.mean(fixation_log_densities(model, ds))) / LN2


def information_gain(model: DensityModel, baseline: DensityModel, ds: FixationDataset) -> float:
    """LL(model) - LL(baseline) in bits per fixation."""
    return log_likelihood(model, ds) - log_likelihood(baseline, ds)


# ---------------------------------------------------------------------------
# AUC family
# ---------------------------------------------------------------------------

def auc_from_values(positives: np.ndarray, negatives: np.ndarray) -> float:
    """Mann-Whitney AUC with midrank tie handling."""
    n_pos, n_neg = len(positives), len(negatives)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([positives, negatives]), method="average")
    rank_sum = ranks[:n_pos].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _image_positive_negative(grid: Grid, meta: StimulusMeta, xs, ys):
    gx, gy = _grid_coords(meta, grid, xs, ys)
    cols = np.floor(gx).astype(np.intp)
    rows = np.floor(gy).astype(np.intp)
    values = np.log(np.maximum(grid.values, 1e-300))
    positives = values[rows, cols]
    mask = np.ones(grid.values.shape, dtype=bool)
    mask[rows, cols] = False
    negatives = values[mask]
    return positives, negatives


def auc(model: DensityModel, ds: FixationDataset) -> tuple[float, dict[str, float]]:
    """Per image: fixated pixels vs all other pixels, on log densities.

    Aggregate is the fixation-count-weighted mean over images.
    """
    per_image: dict[str, float] = {}
    weighted = 0.0
    total = 0
    metas = ds.stimuli_by_id()
    for sid, idx in sorted(_image_fixation_indices(ds).items()):
        meta = metas[sid]
        grid = model.density_grid(meta)
        xs = np.array([ds.fixations[i].x for i in idx])
        ys = np.array([ds.fixations[i].y for i in idx])
        positives, negatives = _image_positive_negative(grid, meta, xs, ys)
        if len(negatives) == 0:
            continue
        value = auc_from_values(positives, negatives)
        per_image[sid] = value
        weighted += value * len(idx)
        total += len(idx)
    return weighted / total, per_image


def shuffled_auc(
    model: DensityModel, ds: FixationDataset, seed: int = 0,
    max_negatives: int | None = 10000,
) -> tuple[float, dict[str, float]]:
    """AUC with negatives sampled from other images' fixation locations,
    mapped onto the target image's grid via normalized coordinates."""
    image_idx = _image_fixation_indices(ds)
    if len(image_idx) < 2:
        raise ValueError("shuffled AUC needs at least two images")
    metas = ds.stimuli_by_id()
    norm_xy = np.empty((len(ds.fixations), 2))
    for i, fx in enumerate(ds.fixations):
        meta = metas[fx.stimulus_id]
        norm_xy[i] = (fx.x / meta.width_px, fx.y / meta.height_px)
    per_image: dict[str, float] = {}
    weighted = 0.0
    total = 0
    for sid, idx in sorted(image_idx.items()):
        meta = metas[sid]
        grid = model.density_grid(meta)
        values = np.log(np.maximum(grid.values, 1e-300))
        xs = np.array([ds.fixations[i].x for i in idx])
        ys = np.array([ds.fixations[i].y for i in idx])
        gx, gy = _grid_coords(meta, grid, xs, ys)
        positives = values[np.floor(gy).astype(np.intp), np.floor(gx).astype(np.intp)]
        other = np.setdiff1d(np.arange(len(ds.fixations)), idx)
        if max_negatives is not None and len(other) > max_negatives:
            rng = make_rng(seed, "sauc", ds.name, sid)
            other = other[rng.choice(len(other), size=max_negatives, replace=False)]
        cols = np.minimum((norm_xy[other, 0] * grid.width).astype(np.intp), grid.width - 1)
        rows = np.minimum((norm_xy[other, 1] * grid.height).astype(np.intp), grid.height - 1)
        negatives = values[rows, cols]
        value = auc_from_values(positives, negatives)
        per_image[sid] = value
        weighted += value * len(idx)
        total += len(idx)
    return weighted / total, per_image


# ---------------------------------------------------------------------------
# Distribution-comparison metrics
# ---------------------------------------------------------------------------

def empirical_density(
    ds: FixationDataset, meta: StimulusMeta, grid_shape: tuple[int, int],
    sigma_emp_dva: float = 1.0,
) -> Grid:
    """Blurred, normalized fixation histogram on the evaluation grid."""
    gh, gw = grid_shape
    hist = np.zeros((gh, gw))
    for fx in ds.fixations_for(meta.stimulus_id):
        col = min(int(fx.x * gw / meta.width_px), gw - 1)
        row = min(int(fx.y * gh / meta.height_px), gh - 1)
        hist[row, col] += 1.0
    if hist.sum() == 0:
        raise ValueError(f"no fixations on stimulus {meta.stimulus_id}")
    sigma_px = sigma_emp_dva * meta.px_per_dva * (gw / meta.width_px)
    blurred = blur_array(hist, sigma_px)
    return Grid(blurred / blurred.sum(), kind="probability")


def nss(model: DensityModel, ds: FixationDataset) -> tuple[float, dict[str, float]]:
    """Mean z-scored prediction density at fixation pixels (0 for flat maps)."""
    per_image: dict[str, float] = {}
    total_sum = 0.0
    total_n = 0
    metas = ds.stimuli_by_id()
    for sid, idx in sorted(_image_fixation_indices(ds).items()):
        meta = metas[sid]
        grid = model.density_grid(meta)
        values = grid.values
        std = values.std()
        if std == 0:
            per_image[sid] = 0.0
            total_n += len(idx)
            continue
        z = (values - values.mean()) / std
        xs = np.array([ds.fixations[i].x for i in idx])
        ys = np.array([ds.fixations[i].y for i in idx])
        gx, gy = _grid_coords(meta, grid, xs, ys)
        scores = z[np.floor(gy).astype(np.intp), np.floor(gx).astype(np.intp)]
        per_image[sid] = float(scores.mean())
        total_sum += scores.sum()
        total_n += len(idx)
    return total_sum / total_n, per_image


def _per_image_map_metric(model, ds, sigma_emp_dva, fn):
    per_image: dict[str, float] = {}
    metas = ds.stimuli_by_id()
    for sid in sorted(_image_fixation_indices(ds)):
        meta = metas[sid]
        grid = model.density_grid(meta)
        emp = empirical_density(ds, meta, grid.values.shape, sigma_emp_dva)
        per_image[sid] = fn(emp.values, grid.values)
    return float(np.mean(list(per_image.values()))), per_image


def cc(model: DensityModel, ds: FixationDataset, sigma_emp_dva: float = 1.0):
    """Pearson correlation between prediction and empirical map (image mean)."""

    def pearson(q, p):
        qf, pf = q.ravel(), p.ravel()
        qc, pc = qf - qf.mean(), pf - pf.mean()
        denom = np.sqrt((qc**2).sum() * (pc**2).sum())
        return float((qc * pc).sum() / denom) if denom > 0 else 0.0

    return _per_image_map_metric(model, ds, sigma_emp_dva, pearson)


def kldiv(model: DensityModel, ds: FixationDataset, sigma_emp_dva: float = 1.0):
    """KL divergence (nats) of prediction from empirical map (image mean)."""

    def kl(q, p):
        q = q / q.sum()
        p = p / p.sum()
        mask = q > 0
        return float(np.sum(q[mask] * np.log(q[mask] / (p[mask] + EPS_KL))))

    return _per_image_map_metric(model, ds, sigma_emp_dva, kl)


def sim(model: DensityModel, ds: FixationDataset, sigma_emp_dva: float = 1.0):
    """Histogram intersection of sum-normalized maps (image mean)."""

    def similarity(q, p):
        return float(np.minimum(q / q.sum(), p / p.sum()).sum())

    return _per_image_map_metric(model, ds, sigma_emp_dva, similarity)


# ---------------------------------------------------------------------------
# Pixelwise information-gain difference and per-image error tables
# ---------------------------------------------------------------------------

def pixelwise_ig_difference(p_gold: Grid, p_a: Grid, p_b: Grid) -> Grid:
    """Per-pixel p_gold * (ln p_a - ln p_b); sums to the expected log-ratio."""
    if p_gold.values.shape != p_a.values.shape or p_a.values.shape != p_b.values.shape:
        raise ValueError("pixelwise IG difference needs same-shape grids")
    log_a = np.log(np.maximum(p_a.values, 1e-300))
    log_b = np.log(np.maximum(p_b.values, 1e-300))
    return Grid(p_gold.values * (log_a - log_b), kind="feature")


def prediction_error_scatter(
    ds: FixationDataset, model_a: DensityModel, model_b: DensityModel, gold: DensityModel
) -> list[dict]:
    """Per-image IG deficit vs the gold standard for two models (bits/fix)."""
    idx_by_image = _image_fixation_indices(ds)
    gold_ld = fixation_log_densities(gold, ds)
    a_ld = fixation_log_densities(model_a, ds)
    b_ld = fixation_log_densities(model_b, ds)
    rows = []
    for sid in sorted(idx_by_image):
        idx = idx_by_image[sid]
        rows.append(
            {
                "image_id": sid,
                "n_fixations": int(len(idx)),
                "deficit_a_bits": float((gold_ld[idx] - a_ld[idx]).mean() / LN2),
                "deficit_b_bits": float((gold_ld[idx] - b_ld[idx]).mean() / LN2),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Bundled evaluation
# ---------------------------------------------------------------------------

ALL_METRICS = ("log_likelihood", "information_gain", "auc", "sauc", "nss", "cc", "kldiv", "sim")


def evaluate_model(
    model: DensityModel,
    ds: FixationDataset,
    baseline: DensityModel | None = None,
    metrics: tuple[str, ...] = ("log_likelihood", "information_gain", "auc"),
    seed: int = 0,
    sigma_emp_dva: float = 1.0,
) -> Evaluation:
    """Compute the requested metrics; IG needs a baseline model."""
    log_dens = fixation_log_densities(model, ds)
    ev = Evaluation(
        dataset=ds.name,
        n_fixations=ds.n_fixations,
        per_fixation_log_density=log_dens,
    )
    idx_by_image = _image_fixation_indices(ds)
    ll_per_image = {
        sid: float(log_dens[idx].mean() / LN2) for sid, idx in idx_by_image.items()
    }
    ll = float(log_dens.mean() / LN2)
    if "log_likelihood" in metrics:
        ev.aggregates["log_likelihood"] = ll
        ev.per_image["log_likelihood"] = ll_per_image
        ev.units["log_likelihood"] = "bit/fix"
    if "information_gain" in metrics:
        if baseline is None:
            raise ValueError("information_gain requires a baseline model")
        base_ld = fixation_log_densities(baseline, ds)
        ev.aggregates["information_gain"] = float((log_dens - base_ld).mean() / LN2)
        ev.per_image["information_gain"] = {
            sid: float((log_dens[idx] - base_ld[idx]).mean() / LN2)
            for sid, idx in idx_by_image.items()
        }
        ev.units["information_gain"] = "bit/fix"
    if "auc" in metrics:
        ev.aggregates["auc"], ev.per_image["auc"] = auc(model, ds)
    if "sauc" in metrics:
        ev.aggregates["sauc"], ev.per_image["sauc"] = shuffled_auc(model, ds, seed=seed)
    if "nss" in metrics:
        ev.aggregates["nss"], ev.per_image["nss"] = nss(model, ds)
    if "cc" in metrics:
        ev.aggregates["cc"], ev.per_image["cc"] = cc(model, ds, sigma_emp_dva)
    if "kldiv" in metrics:
        ev.aggregates["kldiv"], ev.per_image["kldiv"] = kldiv(model, ds, sigma_emp_dva)
        ev.units["kldiv"] = "nat"
    if "sim" in metrics:
        ev.aggregates["sim"], ev.per_image["sim"] = sim(model, ds, sigma_emp_dva)
    return ev
