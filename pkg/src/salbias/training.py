"""Maximum-likelihood training of the readout and per-dataset biases, plus
bias-only adaptation to new datasets.

Gradients come from the fixed-graph adjoints (grids/model modules); the
optimizer is a from-scratch Adam with a step-count learning-rate schedule that
divides the rate by 10 at each configured (possibly fractional) epoch boundary
and stops at the last boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .centerbias import CenterBiasModel, CenterBiasRenderCache, CenterBiasSearchConfig, fit_centerbias
from .datasets import FixationDataset, StimulusMeta, select_stimuli
from .features import FeatureProvider, FeatureStackCache
from .grids import adjoint_softmax_nll, log_softmax_array
from .metrics import fixation_log_densities
from .model import (
    DatasetBiasParams,
    ReadoutParams,
    average_bias_params,
    backward_prediction,
    default_bias_params,
    forward_prediction,
    init_readout,
    output_grid_shape,
)
from .predictors import ImageSource, SaliencyDensityModel
from .rng import make_rng

LN2 = math.log(2.0)

BIAS_GROUPS = ("centerbias", "multiscale", "priority", "cbweight", "blur")
_BIAS_FIELD_OF_GROUP = {
    "multiscale": "scale_logits",
    "priority": "log_priority_scale",
    "cbweight": "centerbias_weight",
    "blur": "log_blur_sigma",
}
BIAS_SCALAR_FIELDS = ("scale_logits", "log_priority_scale", "log_blur_sigma", "centerbias_weight")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    decay_epochs: tuple[float, ...] = (3.0, 6.0, 7.0, 8.0)
    batch_size: int = 4
    seed: int = 0
    trainable: str | frozenset = "all"  # "all" | "biases_only" | frozenset of bias groups
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    divergence_margin: float = 10.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        decays = tuple(float(d) for d in self.decay_epochs)
        if list(decays) != sorted(decays) or len(set(decays)) != len(decays):
            raise ValueError("decay epochs must be strictly increasing")
        if not decays:
            raise ValueError("at least one decay epoch (the stop point) is required")
        self.decay_epochs = decays


# Schedule presets for the public datasets these experiments commonly target.
SCHEDULE_PRESETS: dict[str, TrainConfig] = {
    "mit1003": TrainConfig(learning_rate=0.005623, decay_epochs=(3, 9, 10, 11)),
    "cat2000": TrainConfig(learning_rate=0.01, decay_epochs=(6, 9, 10, 11)),
    "coco_freeview": TrainConfig(learning_rate=0.01, decay_epochs=(12, 15, 16, 17)),
    "daemons": TrainConfig(learning_rate=0.005012, decay_epochs=(12, 15, 16, 17)),
    "figrim": TrainConfig(learning_rate=0.01, decay_epochs=(9, 15, 16, 17)),
    "combined": TrainConfig(learning_rate=0.001585, decay_epochs=(15, 21, 22, 23)),
    "salicon_pretrain": TrainConfig(learning_rate=0.01, decay_epochs=(3.75, 7.5, 11.25)),
    "desk": TrainConfig(learning_rate=0.01, decay_epochs=(3, 6, 7, 8)),
}

ADAPT_CONFIG = TrainConfig(learning_rate=0.05, decay_epochs=(8, 12, 13, 14), trainable="biases_only")


@dataclass
class DatasetBundle:
    """One dataset prepared for training: splits, pixels, and center bias."""

    name: str
    train: FixationDataset
    validation: FixationDataset
    images: ImageSource | None
    centerbias: CenterBiasModel


@dataclass
class TrainState:
    readout: ReadoutParams
    biases: dict[str, DatasetBiasParams]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    loss_history: list[float] = field(default_factory=list)
    log_rows: list[dict] = field(default_factory=list)
    best_val_ll: float = -np.inf
    best_readout: ReadoutParams | None = None
    best_biases: dict[str, DatasetBiasParams] | None = None

    def snapshot_best(self, val_ll: float) -> None:
        if val_ll > self.best_val_ll:
            self.best_val_ll = val_ll
            self.best_readout = self.readout.copy()
            self.best_biases = {k: v.copy() for k, v in self.biases.items()}

    def best_state(self) -> tuple[ReadoutParams, dict[str, DatasetBiasParams]]:
        if self.best_readout is None:
            return self.readout, self.biases
        return self.best_readout, self.best_biases


# ---------------------------------------------------------------------------
# Parameter addressing
# ---------------------------------------------------------------------------

def _param_keys(state: TrainState) -> list[str]:
    keys = []
    for i, _ in enumerate(state.readout.layers):
        for fld in ("ln_scale", "ln_shift", "weight", "bias"):
            keys.append(f"readout/{i}/{fld}")
    for name in sorted(state.biases):
        for fld in BIAS_SCALAR_FIELDS:
            keys.append(f"bias/{name}/{fld}")
    return keys


def _get_param(state: TrainState, key: str) -> np.ndarray:
    kind, ident, fld = key.split("/")
    if kind == "readout":
        return np.atleast_1d(np.asarray(getattr(state.readout.layers[int(ident)], fld), dtype=np.float64))
    return np.atleast_1d(np.asarray(getattr(state.biases[ident], fld), dtype=np.float64))


def _set_param(state: TrainState, key: str, value: np.ndarray) -> None:
    kind, ident, fld = key.split("/")
    if kind == "readout":
        layer = state.readout.layers[int(ident)]
        current = getattr(layer, fld)
        setattr(layer, fld, value.reshape(np.shape(current)))
    else:
        params = state.biases[ident]
        if fld == "scale_logits":
            params.scale_logits = value.reshape(params.scale_logits.shape)
        else:
            setattr(params, fld, float(value.reshape(()).item()) if value.size == 1 else value)


def trainable_keys(state: TrainState, trainable: str | frozenset) -> list[str]:
    keys = _param_keys(state)
    if trainable == "all":
        return keys
    if trainable == "biases_only":
        return [k for k in keys if k.startswith("bias/")]
    fields = {_BIAS_FIELD_OF_GROUP[g] for g in trainable if g in _BIAS_FIELD_OF_GROUP}
    return [k for k in keys if k.startswith("bias/") and k.split("/")[2] in fields]


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def _fixation_counts(ds: FixationDataset, meta: StimulusMeta, grid_shape: tuple[int, int]) -> np.ndarray:
    gh, gw = grid_shape
    counts = np.zeros((gh, gw))
    for fx in ds.fixations_for(meta.stimulus_id):
        row = min(int(fx.y * gh / meta.height_px), gh - 1)
        col = min(int(fx.x * gw / meta.width_px), gw - 1)
        counts[row, col] += 1.0
    return counts


@dataclass
class _TrainingContext:
    bundles: dict[str, DatasetBundle]
    bias_key_of: dict[str, str]  # dataset name -> bias parameter key
    provider: FeatureProvider
    feature_cache: FeatureStackCache
    cb_cache: CenterBiasRenderCache
    counts_cache: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def counts(self, dataset: str, meta: StimulusMeta) -> np.ndarray:
        key = (dataset, meta.stimulus_id)
        if key not in self.counts_cache:
            bundle = self.bundles[dataset]
            self.counts_cache[key] = _fixation_counts(bundle.train, meta, output_grid_shape(meta))
        return self.counts_cache[key]


def nll_loss(
    batch: list[tuple[str, StimulusMeta]],
    state: TrainState,
    ctx: _TrainingContext,
    trainable: list[str],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-density (nats/fix) of the batch fixations plus
    gradients for every trainable scalar; frozen parameters get exact zeros."""
    total_fix = 0.0
    for dataset, meta in batch:
        total_fix += ctx.counts(dataset, meta).sum()
    if total_fix == 0:
        raise ValueError("batch contains no fixations")
    grads = {key: np.zeros_like(_get_param(state, key)) for key in _param_keys(state)}
    loss = 0.0
    for dataset, meta in batch:
        bias_key = ctx.bias_key_of[dataset]
        bias = state.biases[bias_key]
        bundle = ctx.bundles[dataset]
        image = bundle.images.get(meta) if bundle.images is not None else None
        _, cache = forward_prediction(
            image, meta, bias, state.readout, ctx.provider,
            ctx.feature_cache, ctx.cb_cache, want_cache=True,
        )
        counts = ctx.counts(dataset, meta)
        logp = log_softmax_array(cache.logits)
        loss += -float(np.sum(counts * logp))
        grad_logits = adjoint_softmax_nll(cache.logits, counts) / total_fix
        image_grads = backward_prediction(grad_logits, bias, state.readout, cache)
        for fld in ("scale_logits", "log_priority_scale", "log_blur_sigma", "centerbias_weight"):
            grads[f"bias/{bias_key}/{fld}"] += np.atleast_1d(np.asarray(image_grads[fld], np.float64))
        for i, layer_grads in enumerate(image_grads["readout"]):
            for fld in ("ln_scale", "ln_shift", "weight", "bias"):
                grads[f"readout/{i}/{fld}"] += np.atleast_1d(layer_grads[fld])
    loss /= total_fix
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss on batch {[m.stimulus_id for _, m in batch]}")
    trainable_set = set(trainable)
    for key in grads:
        if key not in trainable_set:
            grads[key][...] = 0.0
    return loss, grads


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
              trainable: list[str], config: TrainConfig) -> None:
    """Standard Adam update with bias correction on the trainable keys."""
    state.step += 1
    t = state.step
    for key in trainable:
        g = grads[key]
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {key}")
        m = state.adam_m.setdefault(key, np.zeros_like(g))
        v = state.adam_v.setdefault(key, np.zeros_like(g))
        m[...] = config.beta1 * m + (1 - config.beta1) * g
        v[...] = config.beta2 * v + (1 - config.beta2) * g * g
        m_hat = m / (1 - config.beta1**t)
        v_hat = v / (1 - config.beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + config.eps)
        _set_param(state, key, _get_param(state, key) - update)


# ---------------------------------------------------------------------------
# Validation scoring
# ---------------------------------------------------------------------------

def validation_ll_bits(
    state: TrainState, ctx: _TrainingContext, readout: ReadoutParams | None = None
) -> float:
    """Fixation-weighted validation log-likelihood (bits/fix) over all bundles."""
    readout = readout or state.readout
    total = 0.0
    n = 0
    for name in sorted(ctx.bundles):
        bundle = ctx.bundles[name]
        if bundle.validation.n_fixations == 0:
            continue
        model = SaliencyDensityModel(
            readout=readout,
            bias=state.biases[ctx.bias_key_of[name]],
            provider=ctx.provider,
            images=bundle.images,
            feature_cache=ctx.feature_cache,
            cb_cache=ctx.cb_cache,
        )
        ld = fixation_log_densities(model, bundle.validation)
        total += ld.sum()
        n += len(ld)
    return (total / n) / LN2 if n else -np.inf


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    readout: ReadoutParams
    biases: dict[str, DatasetBiasParams]
    log_rows: list[dict]
    best_val_ll: float
    final_train_nll: float
    initial_train_nll: float


def train(
    bundles: list[DatasetBundle],
    provider: FeatureProvider,
    config: TrainConfig,
    scales,
    shared_biases: bool = False,
    initial_readout: ReadoutParams | None = None,
    initial_biases: dict[str, DatasetBiasParams] | None = None,
    feature_cache: FeatureStackCache | None = None,
) -> TrainResult:
    """Epoch loop over the concatenated seeded-shuffled image list.

    Each dataset's bias parameters receive gradients only from that dataset's
    images (the naive/shared mode maps every dataset to one parameter set);
    the readout is shared.  Returns the best-validation-LL state.
    """
    if not bundles:
        raise ValueError("no datasets to train on")
    bundle_map = {b.name: b for b in bundles}
    if shared_biases:
        bias_key_of = {b.name: "shared" for b in bundles}
    else:
        bias_key_of = {b.name: b.name for b in bundles}

    if initial_biases is None:
        biases = {}
        if shared_biases:
            from .centerbias import average_centerbias

            shared_cb = average_centerbias([b.centerbias for b in bundles])
            biases["shared"] = default_bias_params(tuple(scales), shared_cb)
        else:
            for b in bundles:
                biases[b.name] = default_bias_params(tuple(scales), b.centerbias)
    else:
        biases = {k: v.copy() for k, v in initial_biases.items()}

    readout = (initial_readout or init_readout(provider.channels, config.seed)).copy()
    state = TrainState(readout=readout, biases=biases)
    ctx = _TrainingContext(
        bundles=bundle_map,
        bias_key_of=bias_key_of,
        provider=provider,
        feature_cache=feature_cache or FeatureStackCache(),
        cb_cache=CenterBiasRenderCache(),
    )
    trainable = trainable_keys(state, config.trainable)

    image_list = [
        (b.name, meta) for b in bundles for meta in b.train.stimuli
        if ctx.counts(b.name, meta).sum() > 0
    ]
    if not image_list:
        raise ValueError("training images have no fixations")
    steps_per_epoch = max(1, math.ceil(len(image_list) / config.batch_size))
    total_epochs = config.decay_epochs[-1]
    total_steps = math.ceil(total_epochs * steps_per_epoch)

    initial_loss = None
    final_loss = None
    epoch_order = None
    for step in range(total_steps):
        progress = step / steps_per_epoch
        lr = config.learning_rate * 0.1 ** sum(1 for d in config.decay_epochs if d <= progress)
        pos = step % steps_per_epoch
        if pos == 0:
            epoch_index = step // steps_per_epoch
            order = list(range(len(image_list)))
            make_rng(config.seed, "epoch-shuffle", epoch_index).shuffle(order)
            epoch_order = order
        batch_idx = epoch_order[pos * config.batch_size:(pos + 1) * config.batch_size]
        if not batch_idx:
            continue
        batch = [image_list[i] for i in batch_idx]
        loss, grads = nll_loss(batch, state, ctx, trainable)
        if initial_loss is None:
            initial_loss = loss
        if loss > initial_loss + config.divergence_margin:
            raise TrainingDiverged(
                f"loss {loss:.3f} exceeds initial {initial_loss:.3f} + {config.divergence_margin}"
            )
        final_loss = loss
        state.loss_history.append(loss)
        if trainable:
            adam_step(state, grads, lr, trainable, config)
        else:
            state.step += 1
        if pos == steps_per_epoch - 1 or step == total_steps - 1:
            val_ll = validation_ll_bits(state, ctx)
            state.snapshot_best(val_ll)
            state.log_rows.append(
                {
                    "epoch": (step + 1) / steps_per_epoch,
                    "step": state.step,
                    "lr": lr,
                    "train_nll": loss,
                    "val_ll_bits": val_ll,
                }
            )
    best_readout, best_biases = state.best_state()
    return TrainResult(
        readout=best_readout,
        biases=best_biases,
        log_rows=state.log_rows,
        best_val_ll=state.best_val_ll,
        final_train_nll=final_loss,
        initial_train_nll=initial_loss,
    )


# ---------------------------------------------------------------------------
# Bias adaptation
# ---------------------------------------------------------------------------

def adapt_biases(
    readout: ReadoutParams,
    source_biases: list[DatasetBiasParams],
    target: DatasetBundle,
    provider: FeatureProvider,
    config: TrainConfig | None = None,
    n_images: int | None = None,
    seed: int = 0,
    groups: frozenset | None = None,
    cb_search: CenterBiasSearchConfig | None = None,
    feature_cache: FeatureStackCache | None = None,
) -> DatasetBiasParams:
    """Adapt only the dataset bias parameters to a new dataset.

    The center bias is refit (kde_gaussian_uniform) on the adaptation subset;
    the remaining scalars start from the source average and are optimized by
    Adam with the readout frozen.  ``groups`` restricts the trainable bias
    groups (ablation ladder); ``n_images`` restricts fitting to a seeded
    random subset of the target's training images.
    """
    config = config or ADAPT_CONFIG
    groups = frozenset(BIAS_GROUPS) if groups is None else frozenset(groups)
    train_ds = target.train
    if n_images is not None:
        ids = sorted(s.stimulus_id for s in train_ds.stimuli)
        if n_images <= 0:
            raise ValueError("adaptation subset must be non-empty")
        if n_images < len(ids):
            rng = make_rng(seed, "adapt-subset", target.name, n_images)
            chosen = rng.choice(len(ids), size=n_images, replace=False)
            train_ds = select_stimuli(train_ds, [ids[i] for i in sorted(chosen)],
                                      note=f"adaptation subset n={n_images}")
    if train_ds.n_fixations == 0:
        raise ValueError("adaptation subset has no fixations")

    averaged = average_bias_params(source_biases)
    if "centerbias" in groups:
        centerbias, _ = fit_centerbias(train_ds, "kde_gaussian_uniform", cb_search)
    else:
        centerbias = averaged.centerbias
    start = replace(averaged.copy(), centerbias=centerbias)

    scalar_groups = frozenset(g for g in groups if g in _BIAS_FIELD_OF_GROUP)
    bundle = DatasetBundle(
        name=target.name, train=train_ds, validation=target.validation,
        images=target.images, centerbias=centerbias,
    )
    if not scalar_groups:
        return start
    trainable = scalar_groups if scalar_groups != frozenset(_BIAS_FIELD_OF_GROUP) else "biases_only"
    result = train(
        [bundle],
        provider,
        replace(config, trainable=trainable, seed=seed),
        scales=start.scales,
        initial_readout=readout,
        initial_biases={target.name: start},
        feature_cache=feature_cache,
    )
    return result.biases[target.name]
