"""The bias-aware saliency model.

Pipeline per image: multiscale features are resized to 1/8 of the native
resolution and combined as a convex combination (softmax of per-scale logits);
a five-layer 1x1-conv readout decodes them into a non-negative priority map;
the map is upscaled to 1/2 resolution, multiplied by the priority scaling,
blurred (sigma in dva), added to the weighted log center bias, and softmaxed
into a probability distribution over the half-resolution pixel grid.
Fixation coordinates map onto that grid by halving.

The readout forward keeps a cache so the training module can run the
hand-derived backward pass; the computation graph is fixed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .centerbias import (
    CenterBiasModel,
    CenterBiasRenderCache,
    StimulusGeometry,
    average_centerbias,
    load_centerbias,
    render_centerbias,
    save_centerbias,
)
from .datasets import StimulusMeta
from .features import FeatureProvider, FeatureStackCache
from .grids import (
    Grid,
    adjoint_bilinear_resize,
    adjoint_blur_input,
    adjoint_blur_sigma,
    bilinear_resize_array,
    blur_array,
    read_fmap,
    softmax_array,
    write_fmap,
)
from .rng import make_rng
from .scales import ScaleSpec, scale_tag, scaled_size

READOUT_CHANNELS = (8, 16, 1, 128, 1)
LAYERNORM_EPS = 1e-5
FEATURE_DOWNSAMPLING = 8
OUTPUT_DOWNSAMPLING = 2
MAX_SCALES = 10  # keeps the per-dataset parameter budget under 20


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class ReadoutLayer:
    ln_scale: np.ndarray
    ln_shift: np.ndarray
    weight: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)


@dataclass
class ReadoutParams:
    in_channels: int
    layers: list[ReadoutLayer]

    def copy(self) -> "ReadoutParams":
        return ReadoutParams(
            self.in_channels,
            [
                ReadoutLayer(
                    l.ln_scale.copy(), l.ln_shift.copy(), l.weight.copy(), l.bias.copy()
                )
                for l in self.layers
            ],
        )

    def checksum(self) -> str:
        import hashlib

        h = hashlib.blake2b(digest_size=16)
        for layer in self.layers:
            for arr in (layer.ln_scale, layer.ln_shift, layer.weight, layer.bias):
                h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_readout(in_channels: int, seed: int) -> ReadoutParams:
    """Seeded initialization: conv weights uniform in +-sqrt(6/(fan_in+fan_out)),
    layer-norm scale 1 / shift 0, conv bias 0."""
    rng = make_rng(seed, "readout-init", in_channels)
    layers = []
    c_in = in_channels
    for c_out in READOUT_CHANNELS:
        bound = math.sqrt(6.0 / (c_in + c_out))
        layers.append(
            ReadoutLayer(
                ln_scale=np.ones(c_in),
                ln_shift=np.zeros(c_in),
                weight=rng.uniform(-bound, bound, size=(c_in, c_out)),
                bias=np.zeros(c_out),
            )
        )
        c_in = c_out
    return ReadoutParams(in_channels, layers)


@dataclass
class DatasetBiasParams:
    """The per-dataset bias parameters: per-scale weights via softmax logits,
    priority scaling and blur sigma via exp, an unconstrained center-bias
    weight, and a reference to the dataset's center-bias model."""

    scales: tuple[ScaleSpec, ...]
    scale_logits: np.ndarray
    log_priority_scale: float
    log_blur_sigma: float
    centerbias_weight: float
    centerbias: CenterBiasModel

    def __post_init__(self) -> None:
        self.scale_logits = np.asarray(self.scale_logits, dtype=np.float64)
        if len(self.scales) == 0:
            raise ValueError("at least one scale must be enabled")
        if len(self.scales) > MAX_SCALES:
            raise ValueError(f"at most {MAX_SCALES} scales supported, got {len(self.scales)}")
        if self.scale_logits.shape != (len(self.scales),):
            raise ValueError("one logit per scale required")

    @property
    def scale_weights(self) -> np.ndarray:
        return softmax_array(self.scale_logits.reshape(1, -1)).ravel()

    @property
    def priority_scale(self) -> float:
        return math.exp(self.log_priority_scale)

    @property
    def blur_sigma_dva(self) -> float:
        return math.exp(self.log_blur_sigma)

    def copy(self) -> "DatasetBiasParams":
        return replace(self, scale_logits=self.scale_logits.copy())


def default_bias_params(scales: tuple[ScaleSpec, ...], centerbias: CenterBiasModel) -> DatasetBiasParams:
    return DatasetBiasParams(
        scales=tuple(scales),
        scale_logits=np.zeros(len(scales)),
        log_priority_scale=0.0,
        log_blur_sigma=math.log(0.35),
        centerbias_weight=1.0,
        centerbias=centerbias,
    )


def average_bias_params(params_list: list[DatasetBiasParams]) -> DatasetBiasParams:
    """Averaged biases for the generalization setting: scale weights averaged
    in weight space and renormalized, sigma and priority scaling averaged
    geometrically, center-bias weight arithmetically, center-bias models via
    density averaging."""
    if not params_list:
        raise ValueError("nothing to average")
    scales = params_list[0].scales
    for p in params_list[1:]:
        if p.scales != scales:
            raise ValueError("bias parameter sets use different scale sets")
    weights = np.mean([p.scale_weights for p in params_list], axis=0)
    weights = weights / weights.sum()
    return DatasetBiasParams(
        scales=scales,
        scale_logits=np.log(np.maximum(weights, 1e-300)),
        log_priority_scale=float(np.mean([p.log_priority_scale for p in params_list])),
        log_blur_sigma=float(np.mean([p.log_blur_sigma for p in params_list])),
        centerbias_weight=float(np.mean([p.centerbias_weight for p in params_list])),
        centerbias=average_centerbias([p.centerbias for p in params_list]),
    )


# ---------------------------------------------------------------------------
# Multiscale feature stack
# ---------------------------------------------------------------------------

def build_scale_pyramid(image: np.ndarray, meta: StimulusMeta, scales) -> list[np.ndarray]:
    """The input image resized to every scale (aspect ratio preserved)."""
    out = []
    for scale in scales:
        h, w = scaled_size(meta, scale)
        if image.ndim == 2:
            out.append(bilinear_resize_array(image, h, w))
        else:
            out.append(
                np.stack(
                    [bilinear_resize_array(image[..., c], h, w) for c in range(image.shape[2])],
                    axis=-1,
                )
            )
    return out


def feature_grid_shape(meta: StimulusMeta) -> tuple[int, int]:
    return (
        int(np.ceil(meta.height_px / FEATURE_DOWNSAMPLING)),
        int(np.ceil(meta.width_px / FEATURE_DOWNSAMPLING)),
    )


def output_grid_shape(meta: StimulusMeta) -> tuple[int, int]:
    return (
        int(np.ceil(meta.height_px / OUTPUT_DOWNSAMPLING)),
        int(np.ceil(meta.width_px / OUTPUT_DOWNSAMPLING)),
    )


def compute_feature_stack(
    provider: FeatureProvider,
    image: np.ndarray | None,
    meta: StimulusMeta,
    scales: tuple[ScaleSpec, ...],
    cache: FeatureStackCache | None = None,
) -> np.ndarray:
    """Per-scale features resized to the 1/8-resolution grid: (K, C, h8, w8)."""
    h8, w8 = feature_grid_shape(meta)
    key = (meta.stimulus_id, provider.provider_id, tuple(scale_tag(s) for s in scales), h8, w8)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    per_scale = []
    for scale in scales:
        raw = provider.features(image, meta, scale)
        resized = np.stack(
            [bilinear_resize_array(raw[c], h8, w8) for c in range(raw.shape[0])]
        )
        per_scale.append(resized.astype(np.float32))
    stack = np.stack(per_scale)
    if cache is not None:
        cache.put(key, stack)
    return stack


def extract_and_average(stack: np.ndarray, scale_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of per-scale stacks; returns (averaged, weights)."""
    weights = softmax_array(np.asarray(scale_logits, np.float64).reshape(1, -1)).ravel()
    averaged = np.tensordot(weights, stack.astype(np.float64, copy=False), axes=(0, 0))
    return averaged, weights


# ---------------------------------------------------------------------------
# Readout network (forward + hand-derived backward)
# ---------------------------------------------------------------------------

@dataclass
class _LayerCache:
    x: np.ndarray
    z: np.ndarray
    inv_std: np.ndarray | None
    pre_act: np.ndarray


def readout_forward(
    averaged: np.ndarray, params: ReadoutParams, want_cache: bool = False
):
    """Priority map from averaged features.

    Each layer: layer norm over channels (pass-through affine when the layer
    input is a single channel, where channel statistics are degenerate), then
    1x1 convolution, then softplus.  Strictly pixelwise.
    """
    c, h, w = averaged.shape
    if c != params.in_channels:
        raise ValueError(f"feature stack has {c} channels, readout expects {params.in_channels}")
    x = averaged.reshape(c, h * w).T.astype(np.float64)
    caches: list[_LayerCache] = []
    for layer in params.layers:
        if x.shape[1] > 1:
            mu = x.mean(axis=1, keepdims=True)
            centered = x - mu
            var = (centered**2).mean(axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LAYERNORM_EPS)
            z = centered * inv_std
        else:
            inv_std = None
            z = x
        affine = z * layer.ln_scale + layer.ln_shift
        pre_act = affine @ layer.weight + layer.bias
        if want_cache:
            caches.append(_LayerCache(x=x, z=z, inv_std=inv_std, pre_act=pre_act))
        x = np.logaddexp(0.0, pre_act)
    priority = x[:, 0].reshape(h, w)
    if not np.all(np.isfinite(priority)):
        raise FloatingPointError("non-finite activations in readout")
    if want_cache:
        return priority, caches
    return priority


def readout_backward(
    grad_priority: np.ndarray, params: ReadoutParams, caches: list[_LayerCache]
) -> tuple[list[dict[str, np.ndarray]], np.ndarray]:
    """Gradients of a scalar loss w.r.t. readout parameters and input stack."""
    h, w = grad_priority.shape
    grad_x = grad_priority.reshape(h * w, 1)
    layer_grads: list[dict[str, np.ndarray]] = [None] * len(params.layers)
    for idx in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[idx]
        cache = caches[idx]
        grad_pre = grad_x * expit(cache.pre_act)
        affine = cache.z * layer.ln_scale + layer.ln_shift
        grads = {
            "bias": grad_pre.sum(axis=0),
            "weight": affine.T @ grad_pre,
        }
        grad_affine = grad_pre @ layer.weight.T
        grads["ln_scale"] = (grad_affine * cache.z).sum(axis=0)
        grads["ln_shift"] = grad_affine.sum(axis=0)
        grad_z = grad_affine * layer.ln_scale
        if cache.inv_std is not None:
            mean_gz = grad_z.mean(axis=1, keepdims=True)
            mean_gz_z = (grad_z * cache.z).mean(axis=1, keepdims=True)
            grad_x = cache.inv_std * (grad_z - mean_gz - cache.z * mean_gz_z)
        else:
            grad_x = grad_z
        layer_grads[idx] = grads
    c = params.in_channels
    grad_stack = grad_x.T.reshape(c, h, w)
    return layer_grads, grad_stack


# ---------------------------------------------------------------------------
# Full forward pass
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    stack: np.ndarray
    scale_weights: np.ndarray
    averaged: np.ndarray
    readout_caches: list[_LayerCache]
    priority: np.ndarray
    upscaled: np.ndarray
    blurred_input: np.ndarray
    log_cb: np.ndarray
    logits: np.ndarray
    sigma_px: float
    half_px_per_dva: float


def forward_prediction(
    image: np.ndarray | None,
    meta: StimulusMeta,
    bias: DatasetBiasParams,
    readout: ReadoutParams,
    provider: FeatureProvider,
    feature_cache: FeatureStackCache | None = None,
    cb_cache: CenterBiasRenderCache | None = None,
    want_cache: bool = False,
):
    """Probability grid over the half-resolution pixel grid (+ training cache)."""
    stack = compute_feature_stack(provider, image, meta, bias.scales, feature_cache)
    averaged, weights = extract_and_average(stack, bias.scale_logits)
    if want_cache:
        priority, readout_caches = readout_forward(averaged, readout, want_cache=True)
    else:
        priority = readout_forward(averaged, readout)
        readout_caches = []
    h2, w2 = output_grid_shape(meta)
    upscaled = bilinear_resize_array(priority, h2, w2)
    scaled = bias.priority_scale * upscaled
    half_ppd = meta.px_per_dva / OUTPUT_DOWNSAMPLING
    sigma_px = bias.blur_sigma_dva * half_ppd
    blurred = blur_array(scaled, sigma_px)
    geometry = StimulusGeometry.of(meta)
    if cb_cache is not None:
        log_cb = cb_cache.log_density(bias.centerbias, geometry, h2, w2)
    else:
        log_cb = render_centerbias(bias.centerbias, geometry, h2, w2).values
    logits = blurred + bias.centerbias_weight * log_cb
    probability = softmax_array(logits)
    if not want_cache:
        return probability
    cache = ForwardCache(
        stack=stack,
        scale_weights=weights,
        averaged=averaged,
        readout_caches=readout_caches,
        priority=priority,
        upscaled=upscaled,
        blurred_input=scaled,
        log_cb=log_cb,
        logits=logits,
        sigma_px=sigma_px,
        half_px_per_dva=half_ppd,
    )
    return probability, cache


def predict(
    image: np.ndarray | None,
    meta: StimulusMeta,
    bias: DatasetBiasParams,
    readout: ReadoutParams,
    provider: FeatureProvider,
    feature_cache: FeatureStackCache | None = None,
    cb_cache: CenterBiasRenderCache | None = None,
) -> Grid:
    """Per-image fixation distribution on the half-resolution grid."""
    probability = forward_prediction(
        image, meta, bias, readout, provider, feature_cache, cb_cache, want_cache=False
    )
    return Grid(probability, kind="probability")


def backward_prediction(
    grad_logits: np.ndarray,
    bias: DatasetBiasParams,
    readout: ReadoutParams,
    cache: ForwardCache,
) -> dict:
    """Backpropagate a gradient w.r.t. the pre-softmax logits through the
    fixed graph; returns gradients for all bias scalars and readout params."""
    grad_cb_weight = float(np.sum(grad_logits * cache.log_cb))
    grad_blur_out = grad_logits
    grad_sigma_px = adjoint_blur_sigma(cache.blurred_input, grad_blur_out, cache.sigma_px)
    grad_log_sigma = grad_sigma_px * cache.sigma_px  # sigma_px = exp(log_sigma) * ppd/2
    grad_scaled = adjoint_blur_input(grad_blur_out, cache.sigma_px)
    priority_scale = bias.priority_scale
    grad_priority_scale = float(np.sum(grad_scaled * cache.upscaled))
    grad_log_priority = grad_priority_scale * priority_scale
    grad_upscaled = priority_scale * grad_scaled
    grad_priority = adjoint_bilinear_resize(
        grad_upscaled, cache.priority.shape[0], cache.priority.shape[1]
    )
    layer_grads, grad_averaged = readout_backward(grad_priority, readout, cache.readout_caches)
    stack64 = cache.stack.astype(np.float64, copy=False)
    grad_weights = np.tensordot(stack64, grad_averaged, axes=([1, 2, 3], [0, 1, 2]))
    w = cache.scale_weights
    grad_scale_logits = w * (grad_weights - float(np.dot(w, grad_weights)))
    return {
        "scale_logits": grad_scale_logits,
        "log_priority_scale": grad_log_priority,
        "log_blur_sigma": grad_log_sigma,
        "centerbias_weight": grad_cb_weight,
        "readout": layer_grads,
    }


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_readout(readout: ReadoutParams, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = {"in_channels": readout.in_channels, "layers": []}
    for i, layer in enumerate(readout.layers):
        spec["layers"].append(
            {"c_in": int(layer.weight.shape[0]), "c_out": int(layer.weight.shape[1])}
        )
        write_fmap(out_dir / f"layer{i}.ln_scale.fmap", layer.ln_scale.reshape(1, 1, -1))
        write_fmap(out_dir / f"layer{i}.ln_shift.fmap", layer.ln_shift.reshape(1, 1, -1))
        write_fmap(out_dir / f"layer{i}.weight.fmap", layer.weight[None])
        write_fmap(out_dir / f"layer{i}.bias.fmap", layer.bias.reshape(1, 1, -1))
    _atomic_write_bytes(out_dir / "readout.json", (json.dumps(spec, indent=2) + "\n").encode())


def load_readout(out_dir) -> ReadoutParams:
    out_dir = Path(out_dir)
    spec = json.loads((out_dir / "readout.json").read_text("utf-8"))
    layers = []
    for i, _ in enumerate(spec["layers"]):
        layers.append(
            ReadoutLayer(
                ln_scale=read_fmap(out_dir / f"layer{i}.ln_scale.fmap").ravel().astype(np.float64),
                ln_shift=read_fmap(out_dir / f"layer{i}.ln_shift.fmap").ravel().astype(np.float64),
                weight=read_fmap(out_dir / f"layer{i}.weight.fmap")[0].astype(np.float64),
                bias=read_fmap(out_dir / f"layer{i}.bias.fmap").ravel().astype(np.float64),
            )
        )
    return ReadoutParams(spec["in_channels"], layers)


def save_bias_params(biases: dict[str, DatasetBiasParams], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "centerbias").mkdir(exist_ok=True)
    payload = {}
    for name in sorted(biases):
        params = biases[name]
        cb_file = f"centerbias/{name}.json"
        save_centerbias(params.centerbias, out_dir / cb_file)
        payload[name] = {
            "scales": [scale_tag(s) for s in params.scales],
            "scale_logits": [float(v) for v in params.scale_logits],
            "log_priority_scale": params.log_priority_scale,
            "log_blur_sigma": params.log_blur_sigma,
            "centerbias_weight": params.centerbias_weight,
            "centerbias_file": cb_file,
        }
    _atomic_write_bytes(out_dir / "biases.json", (json.dumps(payload, indent=2) + "\n").encode())


def load_bias_params(out_dir) -> dict[str, DatasetBiasParams]:
    from .scales import parse_scale_tag

    out_dir = Path(out_dir)
    payload = json.loads((out_dir / "biases.json").read_text("utf-8"))
    biases = {}
    for name, entry in payload.items():
        biases[name] = DatasetBiasParams(
            scales=tuple(parse_scale_tag(t) for t in entry["scales"]),
            scale_logits=np.asarray(entry["scale_logits"], dtype=np.float64),
            log_priority_scale=entry["log_priority_scale"],
            log_blur_sigma=entry["log_blur_sigma"],
            centerbias_weight=entry["centerbias_weight"],
            centerbias=load_centerbias(out_dir / entry["centerbias_file"]),
        )
    return biases


def save_checkpoint(out_dir, readout: ReadoutParams, biases: dict[str, DatasetBiasParams]) -> None:
    out_dir = Path(out_dir)
    save_readout(readout, out_dir / "readout")
    save_bias_params(biases, out_dir)
    _atomic_write_bytes(out_dir / "complete.json", b'{"complete": true}\n')


def load_checkpoint(out_dir) -> tuple[ReadoutParams, dict[str, DatasetBiasParams]]:
    out_dir = Path(out_dir)
    if not (out_dir / "complete.json").exists():
        raise FileNotFoundError(f"incomplete checkpoint at {out_dir}")
    return load_readout(out_dir / "readout"), load_bias_params(out_dir)


def checkpoint_hash(out_dir) -> str:
    import hashlib

    out_dir = Path(out_dir)
    h = hashlib.blake2b(digest_size=16)
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(out_dir)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
