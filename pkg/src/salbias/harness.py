"""Experiment orchestration: the four training setups, leave-one-dataset-out
gap accounting, bias-ablation ladder, low-data adaptation curves, and the
bias-source sensitivity matrix.

Stages are idempotent when given a store directory: a completed stage records
its config hash and is loaded instead of recomputed on reruns.  All report
values are recomputable from checkpoints, whose hashes the reports carry.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .centerbias import CenterBiasModel, CenterBiasRenderCache, CenterBiasSearchConfig, fit_centerbias
from .datasets import FixationDataset, make_crossval_split, split_dataset
from .features import FeatureProvider, FeatureStackCache
from .metrics import evaluate_model
from .model import (
    DatasetBiasParams,
    ReadoutParams,
    average_bias_params,
    checkpoint_hash,
    load_checkpoint,
    save_checkpoint,
)
from .predictors import (
    CenterBiasDensityModel,
    DensityModel,
    EnsembleDensityModel,
    ImageSource,
    SaliencyDensityModel,
)
from .scales import ScaleSpec
from .training import (
    ADAPT_CONFIG,
    BIAS_GROUPS,
    DatasetBundle,
    TrainConfig,
    TrainResult,
    adapt_biases,
    train,
)


def config_digest(payload) -> str:
    return hashlib.blake2b(
        json.dumps(payload, sort_keys=True, default=str).encode(), digest_size=12
    ).hexdigest()


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """Deterministic CSV output: floats via repr (shortest round-trip)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n", "utf-8")


class ExperimentStore:
    """Checkpoint directory with config-hash keyed, resumable stages."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def stage_dir(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    def train_stage(self, name: str, digest: str, compute) -> tuple[ReadoutParams, dict, str]:
        """Run (or reload) a training stage; returns (readout, biases, hash)."""
        stage = self.stage_dir(name)
        marker = stage / "stage.json"
        if marker.exists():
            recorded = json.loads(marker.read_text("utf-8"))
            if recorded.get("digest") == digest and (stage / "complete.json").exists():
                readout, biases = load_checkpoint(stage)
                return readout, biases, checkpoint_hash(stage)
        result: TrainResult = compute()
        stage.mkdir(parents=True, exist_ok=True)
        save_checkpoint(stage, result.readout, result.biases)
        write_csv(
            stage / "train_log.csv",
            ["epoch", "step", "lr", "train_nll", "val_ll_bits"],
            [[r["epoch"], r["step"], r["lr"], r["train_nll"], r["val_ll_bits"]] for r in result.log_rows],
        )
        marker.write_text(json.dumps({"digest": digest}) + "\n", "utf-8")
        return result.readout, result.biases, checkpoint_hash(stage)


# ---------------------------------------------------------------------------
# Experiment setup
# ---------------------------------------------------------------------------

@dataclass
class PreparedDataset:
    bundle: DatasetBundle
    baseline: CenterBiasModel  # fit on the train split; the IG reference


def prepare_dataset(
    ds: FixationDataset,
    images: ImageSource | None,
    folds: int = 10,
    val_folds: int = 1,
    seed: int = 0,
    cb_variant: str = "kde_uniform",
    cb_search: CenterBiasSearchConfig | None = None,
    stratify_attribute: str | None = None,
) -> PreparedDataset:
    """Split a dataset and fit its center bias on the training split."""
    split = make_crossval_split(ds, folds, val_folds, stratify_attribute, seed)
    train_ds, val_ds = split_dataset(ds, split)
    centerbias, _ = fit_centerbias(train_ds, cb_variant, cb_search)
    bundle = DatasetBundle(
        name=ds.name, train=train_ds, validation=val_ds, images=images, centerbias=centerbias
    )
    return PreparedDataset(bundle=bundle, baseline=centerbias)


@dataclass
class FourSetups:
    individual: dict[str, tuple[ReadoutParams, dict[str, DatasetBiasParams]]]
    loo_naive: dict[str, tuple[ReadoutParams, dict[str, DatasetBiasParams]]]
    loo_aware: dict[str, tuple[ReadoutParams, dict[str, DatasetBiasParams]]]
    joint: tuple[ReadoutParams, dict[str, DatasetBiasParams]]
    checkpoint_hashes: dict[str, str] = field(default_factory=dict)


def _stage(store, name, digest, compute):
    if store is None:
        result = compute()
        return result.readout, result.biases, ""
    return store.train_stage(name, digest, compute)


def run_four_setups(
    prepared: list[PreparedDataset],
    provider: FeatureProvider,
    scales: tuple[ScaleSpec, ...],
    config: TrainConfig,
    store: ExperimentStore | None = None,
    feature_cache: FeatureStackCache | None = None,
) -> FourSetups:
    """(1) per-dataset individual models, (2) per-target leave-one-out naive
    models (one shared bias set), (3) per-target leave-one-out bias-aware
    models, (4) the full joint bias-aware model."""
    if len(prepared) < 2:
        raise ValueError("the four setups need at least two datasets")
    feature_cache = feature_cache if feature_cache is not None else FeatureStackCache()
    bundles = {p.bundle.name: p.bundle for p in prepared}
    names = sorted(bundles)
    base_digest = {
        "scales": [str(s) for s in scales],
        "config": vars(config).copy(),
        "datasets": names,
    }
    hashes: dict[str, str] = {}

    def run_training(subset: list[str], shared: bool):
        return train(
            [bundles[n] for n in subset],
            provider,
            config,
            scales,
            shared_biases=shared,
            feature_cache=feature_cache,
        )

    individual = {}
    for name in names:
        digest = config_digest({**base_digest, "stage": f"individual/{name}"})
        readout, biases, chash = _stage(
            store, f"individual_{name}", digest, lambda n=name: run_training([n], False)
        )
        individual[name] = (readout, biases)
        hashes[f"individual_{name}"] = chash

    loo_naive = {}
    loo_aware = {}
    for target in names:
        sources = [n for n in names if n != target]
        digest = config_digest({**base_digest, "stage": f"loo_naive/{target}"})
        readout, biases, chash = _stage(
            store, f"loo_naive_{target}", digest, lambda s=sources: run_training(s, True)
        )
        loo_naive[target] = (readout, biases)
        hashes[f"loo_naive_{target}"] = chash
        digest = config_digest({**base_digest, "stage": f"loo_aware/{target}"})
        readout, biases, chash = _stage(
            store, f"loo_aware_{target}", digest, lambda s=sources: run_training(s, False)
        )
        loo_aware[target] = (readout, biases)
        hashes[f"loo_aware_{target}"] = chash

    digest = config_digest({**base_digest, "stage": "joint"})
    readout, biases, chash = _stage(store, "joint", digest, lambda: run_training(names, False))
    hashes["joint"] = chash
    return FourSetups(individual, loo_naive, loo_aware, (readout, biases), hashes)


def run_joint_naive(
    prepared: list[PreparedDataset],
    provider: FeatureProvider,
    scales: tuple[ScaleSpec, ...],
    config: TrainConfig,
    store: ExperimentStore | None = None,
    feature_cache: FeatureStackCache | None = None,
) -> tuple[ReadoutParams, dict[str, DatasetBiasParams]]:
    """Joint training on all datasets with a single shared bias set."""
    bundles = [p.bundle for p in prepared]
    names = sorted(b.name for b in bundles)
    digest = config_digest(
        {
            "scales": [str(s) for s in scales],
            "config": vars(config).copy(),
            "datasets": names,
            "stage": "joint_naive",
        }
    )
    readout, biases, _ = _stage(
        store,
        "joint_naive",
        digest,
        lambda: train(bundles, provider, config, scales, shared_biases=True,
                      feature_cache=feature_cache or FeatureStackCache()),
    )
    return readout, biases


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

@dataclass
class EvalContext:
    prepared: dict[str, PreparedDataset]
    provider: FeatureProvider
    feature_cache: FeatureStackCache = field(default_factory=FeatureStackCache)
    cb_cache: CenterBiasRenderCache = field(default_factory=CenterBiasRenderCache)

    def saliency_model(self, readout: ReadoutParams, bias: DatasetBiasParams, target: str):
        bundle = self.prepared[target].bundle
        return SaliencyDensityModel(
            readout=readout, bias=bias, provider=self.provider, images=bundle.images,
            feature_cache=self.feature_cache, cb_cache=self.cb_cache,
        )

    def baseline_model(self, target: str) -> DensityModel:
        return CenterBiasDensityModel(self.prepared[target].baseline, self.cb_cache)

    def information_gain(self, model: DensityModel, target: str) -> float:
        ev = evaluate_model(
            model,
            self.prepared[target].bundle.validation,
            baseline=self.baseline_model(target),
            metrics=("log_likelihood", "information_gain"),
        )
        return ev.aggregates["information_gain"]

    def ig_of_params(self, readout: ReadoutParams, bias: DatasetBiasParams, target: str) -> float:
        return self.information_gain(self.saliency_model(readout, bias, target), target)


def select_bias_source(
    biases: dict[str, DatasetBiasParams], source: str
) -> DatasetBiasParams:
    """Resolve a bias source: 'own:NAME', 'averaged', or 'foreign:NAME'."""
    if source == "averaged":
        return average_bias_params([biases[k] for k in sorted(biases)])
    kind, _, name = source.partition(":")
    if kind in ("own", "foreign"):
        if name not in biases:
            raise KeyError(f"no bias parameters for dataset {name!r}")
        return biases[name]
    raise ValueError(f"unknown bias source {source!r}")


# ---------------------------------------------------------------------------
# Gap accounting
# ---------------------------------------------------------------------------

@dataclass
class GapReport:
    per_target: dict[str, dict[str, float]]
    averages: dict[str, float]
    checkpoint_hashes: dict[str, str]

    HEADER = [
        "target",
        "ig_full",
        "ig_single_transfer",
        "ig_loo_naive",
        "ig_loo_generalized",
        "ig_loo_adapted",
        "inter_dataset_gap",
        "generalization_gap",
        "fraction_remaining",
        "fraction_closed_by_adaptation",
        "flagged",
    ]

    def rows(self) -> list[list]:
        rows = []
        for target in sorted(self.per_target):
            entry = self.per_target[target]
            rows.append([target] + [entry[k] for k in self.HEADER[1:]])
        rows.append(["average"] + [self.averages[k] for k in self.HEADER[1:]])
        return rows


def derive_gap_quantities(entry: dict[str, float]) -> dict[str, float]:
    inter = entry["ig_full"] - entry["ig_single_transfer"]
    gen = entry["ig_full"] - entry["ig_loo_generalized"]
    fraction_remaining = gen / inter if inter != 0 else math.nan
    fraction_closed = (
        (entry["ig_loo_adapted"] - entry["ig_loo_generalized"]) / gen if gen != 0 else math.nan
    )
    flagged = not (0.0 <= fraction_remaining <= 1.0 and 0.0 <= fraction_closed <= 1.0)
    return {
        **entry,
        "inter_dataset_gap": inter,
        "generalization_gap": gen,
        "fraction_remaining": fraction_remaining,
        "fraction_closed_by_adaptation": fraction_closed,
        "flagged": flagged,
    }


def compute_gaps(
    setups: FourSetups,
    ctx: EvalContext,
    adapt_config: TrainConfig | None = None,
    adapt_seed: int = 0,
    cb_search: CenterBiasSearchConfig | None = None,
) -> GapReport:
    """The five IG quantities per target plus the derived gap fractions."""
    per_target = {}
    names = sorted(ctx.prepared)
    for target in names:
        sources = [n for n in names if n != target]
        joint_readout, joint_biases = setups.joint
        ig_full = ctx.ig_of_params(joint_readout, joint_biases[target], target)
        transfer = [
            ctx.ig_of_params(
                setups.individual[source][0], setups.individual[source][1][source], target
            )
            for source in sources
        ]
        naive_readout, naive_biases = setups.loo_naive[target]
        ig_naive = ctx.ig_of_params(naive_readout, naive_biases["shared"], target)
        aware_readout, aware_biases = setups.loo_aware[target]
        averaged = average_bias_params([aware_biases[s] for s in sources])
        ig_generalized = ctx.ig_of_params(aware_readout, averaged, target)
        adapted = adapt_biases(
            aware_readout,
            [aware_biases[s] for s in sources],
            ctx.prepared[target].bundle,
            ctx.provider,
            config=adapt_config or ADAPT_CONFIG,
            seed=adapt_seed,
            cb_search=cb_search,
            feature_cache=ctx.feature_cache,
        )
        ig_adapted = ctx.ig_of_params(aware_readout, adapted, target)
        per_target[target] = derive_gap_quantities(
            {
                "ig_full": ig_full,
                "ig_single_transfer": float(np.mean(transfer)),
                "ig_loo_naive": ig_naive,
                "ig_loo_generalized": ig_generalized,
                "ig_loo_adapted": ig_adapted,
            }
        )
    averages = {}
    for key in GapReport.HEADER[1:6]:
        averages[key] = float(np.mean([per_target[t][key] for t in names]))
    averages = derive_gap_quantities(
        {k: averages[k] for k in GapReport.HEADER[1:6]}
    )
    return GapReport(per_target, averages, setups.checkpoint_hashes)


# ---------------------------------------------------------------------------
# Ablation ladder, low-data curve, sensitivity matrix, generalization modes
# ---------------------------------------------------------------------------

def bias_ablation_ladder(
    loo_readout: ReadoutParams,
    source_biases: list[DatasetBiasParams],
    target: str,
    ctx: EvalContext,
    order: tuple[str, ...] = BIAS_GROUPS,
    adapt_config: TrainConfig | None = None,
    seed: int = 0,
    cb_search: CenterBiasSearchConfig | None = None,
) -> list[dict]:
    """IG after cumulatively adapting bias groups in the given order.

    Rung 0 is pure generalization (averaged biases); rung k adapts the first
    k groups with the rest frozen at their averaged values.
    """
    for group in order:
        if group not in BIAS_GROUPS:
            raise ValueError(f"unknown bias group {group!r}; known: {BIAS_GROUPS}")
    bundle = ctx.prepared[target].bundle
    rows = []
    averaged = average_bias_params(source_biases)
    rows.append(
        {
            "rung": 0,
            "groups": "",
            "information_gain": ctx.ig_of_params(loo_readout, averaged, target),
        }
    )
    for k in range(1, len(order) + 1):
        adapted = adapt_biases(
            loo_readout,
            source_biases,
            bundle,
            ctx.provider,
            config=adapt_config or ADAPT_CONFIG,
            groups=frozenset(order[:k]),
            seed=seed,
            cb_search=cb_search,
            feature_cache=ctx.feature_cache,
        )
        rows.append(
            {
                "rung": k,
                "groups": "+".join(order[:k]),
                "information_gain": ctx.ig_of_params(loo_readout, adapted, target),
            }
        )
    return rows


def low_data_curve(
    loo_readout: ReadoutParams,
    source_biases: list[DatasetBiasParams],
    target: str,
    ctx: EvalContext,
    ns: list[int],
    seeds: list[int],
    adapt_config: TrainConfig | None = None,
    cb_search: CenterBiasSearchConfig | None = None,
) -> list[dict]:
    """Adaptation IG per (subset size, seed); evaluation always on the full
    validation split."""
    bundle = ctx.prepared[target].bundle
    n_train = len(bundle.train.stimuli)
    rows = []
    for n in ns:
        if n <= 0 or n > n_train:
            raise ValueError(f"subset size {n} outside 1..{n_train}")
        for seed in seeds:
            adapted = adapt_biases(
                loo_readout,
                source_biases,
                bundle,
                ctx.provider,
                config=adapt_config or ADAPT_CONFIG,
                n_images=n,
                seed=seed,
                cb_search=cb_search,
                feature_cache=ctx.feature_cache,
            )
            rows.append(
                {
                    "n": n,
                    "seed": seed,
                    "information_gain": ctx.ig_of_params(loo_readout, adapted, target),
                }
            )
    return rows


def sensitivity_matrix(
    joint: tuple[ReadoutParams, dict[str, DatasetBiasParams]],
    ctx: EvalContext,
) -> dict[tuple[str, str], float]:
    """IG of the joint model on every dataset under every bias source
    (each dataset's parameters plus the average)."""
    readout, biases = joint
    names = sorted(ctx.prepared)
    sources = names + ["averaged"]
    matrix = {}
    for target in names:
        for source in sources:
            bias = select_bias_source(
                biases, "averaged" if source == "averaged" else f"foreign:{source}"
            )
            matrix[(target, source)] = ctx.ig_of_params(readout, bias, target)
    return matrix


def generalization_modes(
    setups: FourSetups, target: str, ctx: EvalContext
) -> dict[str, float]:
    """IG of the three generalization strategies on a held-out dataset:
    naive-model transfer, bias-averaged transfer, and per-dataset-model
    density ensembling."""
    names = sorted(ctx.prepared)
    sources = [n for n in names if n != target]
    naive_readout, naive_biases = setups.loo_naive[target]
    aware_readout, aware_biases = setups.loo_aware[target]
    averaged = average_bias_params([aware_biases[s] for s in sources])
    ensemble = EnsembleDensityModel(
        [
            ctx.saliency_model(setups.individual[s][0], setups.individual[s][1][s], target)
            for s in sources
        ]
    )
    return {
        "naive": ctx.ig_of_params(naive_readout, naive_biases["shared"], target),
        "bias_averaged": ctx.ig_of_params(aware_readout, averaged, target),
        "ensemble": ctx.information_gain(ensemble, target),
    }


# ---------------------------------------------------------------------------
# Report writing
# ---------------------------------------------------------------------------

def write_gap_report(report: GapReport, out_dir) -> None:
    out_dir = Path(out_dir)
    write_csv(out_dir / "gap_report.csv", GapReport.HEADER, report.rows())
    lines = ["Gap report (bits/fix)", "====================", ""]
    for target in sorted(report.per_target):
        entry = report.per_target[target]
        lines.append(
            f"{target}: full={entry['ig_full']:.4f} "
            f"single-transfer={entry['ig_single_transfer']:.4f} "
            f"loo-naive={entry['ig_loo_naive']:.4f} "
            f"generalized={entry['ig_loo_generalized']:.4f} "
            f"adapted={entry['ig_loo_adapted']:.4f}"
        )
        lines.append(
            f"  inter-dataset gap={entry['inter_dataset_gap']:.4f} "
            f"generalization gap={entry['generalization_gap']:.4f} "
            f"remaining={entry['fraction_remaining']:.3f} "
            f"closed-by-adaptation={entry['fraction_closed_by_adaptation']:.3f}"
            + ("  [flagged]" if entry["flagged"] else "")
        )
    avg = report.averages
    lines.append("")
    lines.append(
        f"average: remaining={avg['fraction_remaining']:.3f} "
        f"closed-by-adaptation={avg['fraction_closed_by_adaptation']:.3f}"
    )
    lines.append("")
    lines.append("checkpoints:")
    for name in sorted(report.checkpoint_hashes):
        lines.append(f"  {name}: {report.checkpoint_hashes[name]}")
    (out_dir / "gap_report.txt").write_text("\n".join(lines) + "\n", "utf-8")


def write_sensitivity_csv(matrix: dict[tuple[str, str], float], path) -> None:
    targets = sorted({t for t, _ in matrix})
    sources = sorted({s for _, s in matrix})
    header = ["target"] + sources
    rows = [[t] + [matrix[(t, s)] for s in sources] for t in targets]
    write_csv(path, header, rows)


def write_evaluation_csv(evaluation, path) -> None:
    rows = []
    for metric in sorted(evaluation.per_image):
        for image_id in sorted(evaluation.per_image[metric]):
            rows.append([image_id, metric, evaluation.per_image[metric][image_id]])
    write_csv(path, ["image_id", "metric", "value"], rows)


def write_evaluation_summary(evaluation, path) -> None:
    payload = {
        "dataset": evaluation.dataset,
        "n_fixations": evaluation.n_fixations,
        "aggregates": {k: evaluation.aggregates[k] for k in sorted(evaluation.aggregates)},
        "units": evaluation.units,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", "utf-8")
