"""Dense 2D grid primitives: resampling, blur, softmax, lookup, sampling.

Every operation that sits on the training path has a hand-derived adjoint in
this module; the computation graph of the model is fixed, so no generic
autodiff is needed.  The loss path is float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

GRID_KINDS = ("feature", "priority", "logits", "log_density", "probability")

# Blurs narrower than this (in pixels) are returned unchanged; the kernel
# would be a single tap anyway.
BLUR_SIGMA_PX_SHORTCIRCUIT = 0.05

FMAP_MAGIC = b"FMAP1\n"


@dataclass
class Grid:
    """A dense 2D scalar field with a semantic kind tag."""

    values: np.ndarray
    kind: str = "feature"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"Grid values must be 2D, got shape {self.values.shape}")
        if self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise ValueError(f"Grid must be at least 1x1, got {self.values.shape}")
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def check(self) -> None:
        """Validate the kind-specific normalization invariants."""
        if self.kind == "probability":
            if np.any(self.values < 0):
                raise ValueError("probability grid has negative values")
            total = float(self.values.sum())
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"probability grid sums to {total}, not 1")
        elif self.kind == "log_density":
            lse = logsumexp(self.values)
            if abs(lse) > 1e-6:
                raise ValueError(f"log_density grid has logsumexp {lse}, not 0")


@dataclass
class GridStack:
    """A stack of same-shape grids (one per channel)."""

    values: np.ndarray  # (channels, height, width)
    kind: str = "feature"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError(f"GridStack values must be 3D, got {self.values.shape}")
        if self.kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def logsumexp(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=np.float64)
    m = v.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


# ---------------------------------------------------------------------------
# Bilinear resampling
# ---------------------------------------------------------------------------

def _resize_plan(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index pairs and fractions for 1D bilinear resampling (align_corners=False)."""
    out = np.arange(n_out, dtype=np.float64)
    src = (out + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.intp)
    lo = np.minimum(lo, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize_array(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize of a 2D array."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if out_h < 1 or out_w < 1:
        raise ValueError("output dimensions must be >= 1")
    if (out_h, out_w) == (h, w):
        return values.copy()
    lo, hi, t = _resize_plan(h, out_h)
    rows = values[lo, :] * (1.0 - t)[:, None] + values[hi, :] * t[:, None]
    lo, hi, t = _resize_plan(w, out_w)
    return rows[:, lo] * (1.0 - t)[None, :] + rows[:, hi] * t[None, :]


def bilinear_resize(grid: Grid, out_h: int, out_w: int) -> Grid:
    return Grid(bilinear_resize_array(grid.values, out_h, out_w), kind=grid.kind)


def adjoint_bilinear_resize(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Gradient of bilinear_resize w.r.t. its input (exact transpose)."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    out_h, out_w = grad_out.shape
    if (out_h, out_w) == (in_h, in_w):
        return grad_out.copy()
    # Undo the column pass first, then the row pass.
    lo, hi, t = _resize_plan(in_w, out_w)
    cols = np.zeros((out_h, in_w), dtype=np.float64)
    np.add.at(cols, (slice(None), lo), grad_out * (1.0 - t)[None, :])
    np.add.at(cols, (slice(None), hi), grad_out * t[None, :])
    lo, hi, t = _resize_plan(in_h, out_h)
    grad_in = np.zeros((in_h, in_w), dtype=np.float64)
    np.add.at(grad_in, (lo, slice(None)), cols * (1.0 - t)[:, None])
    np.add.at(grad_in, (hi, slice(None)), cols * t[:, None])
    return grad_in


# ---------------------------------------------------------------------------
# Gaussian blur (dva-calibrated), with input and sigma adjoints
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma_px: float) -> np.ndarray:
    """1D Gaussian taps truncated at +-ceil(3*sigma), renormalized to sum 1."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    radius = int(np.ceil(3.0 * sigma_px))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    raw = np.exp(-0.5 * (offsets / sigma_px) ** 2)
    return raw / raw.sum()


def gaussian_kernel_sigma_derivative(sigma_px: float) -> np.ndarray:
    """d(taps)/d(sigma_px) at fixed truncation radius; taps sum to zero."""
    radius = int(np.ceil(3.0 * sigma_px))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    raw = np.exp(-0.5 * (offsets / sigma_px) ** 2)
    draw = raw * offsets**2 / sigma_px**3
    total = raw.sum()
    kernel = raw / total
    return (draw - kernel * draw.sum()) / total


def _correlate1d(values: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    return ndimage.correlate1d(values, taps, axis=axis, mode="nearest")


def _correlate1d_adjoint(grad: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of edge-clamped 1D correlation (scatter with clamped indices)."""
    grad = np.asarray(grad, dtype=np.float64)
    n = grad.shape[axis]
    radius = (len(taps) - 1) // 2
    out = np.zeros_like(grad)
    moved = np.moveaxis(out, axis, 0)
    grad_moved = np.moveaxis(grad, axis, 0)
    idx = np.arange(n)
    for tap_i, tap in enumerate(taps):
        src = np.clip(idx + tap_i - radius, 0, n - 1)
        np.add.at(moved, src, tap * grad_moved)
    return out


def blur_array(values: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian blur with replicate padding; identity below cutoff."""
    values = np.asarray(values, dtype=np.float64)
    if sigma_px < BLUR_SIGMA_PX_SHORTCIRCUIT:
        return values.copy()
    taps = gaussian_kernel(sigma_px)
    return _correlate1d(_correlate1d(values, taps, axis=0), taps, axis=1)


def gaussian_blur_dva(grid: Grid, sigma_dva: float, px_per_dva: float) -> Grid:
    if sigma_dva <= 0:
        raise ValueError("sigma_dva must be positive")
    if px_per_dva <= 0:
        raise ValueError("px_per_dva must be positive")
    return Grid(blur_array(grid.values, sigma_dva * px_per_dva), kind=grid.kind)


def adjoint_blur_input(grad_out: np.ndarray, sigma_px: float) -> np.ndarray:
    """Gradient of blur_array w.r.t. its input."""
    if sigma_px < BLUR_SIGMA_PX_SHORTCIRCUIT:
        return np.asarray(grad_out, dtype=np.float64).copy()
    taps = gaussian_kernel(sigma_px)
    return _correlate1d_adjoint(_correlate1d_adjoint(grad_out, taps, axis=1), taps, axis=0)


def adjoint_blur_sigma(values: np.ndarray, grad_out: np.ndarray, sigma_px: float) -> float:
    """Gradient of sum(grad_out * blur(values)) w.r.t. sigma_px.

    The truncation radius is held fixed at the current sigma, so this is the
    almost-everywhere derivative (exact away from tap-count boundaries).
    """
    if sigma_px < BLUR_SIGMA_PX_SHORTCIRCUIT:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    taps = gaussian_kernel(sigma_px)
    dtaps = gaussian_kernel_sigma_derivative(sigma_px)
    d_first = _correlate1d(_correlate1d(values, dtaps, axis=0), taps, axis=1)
    d_second = _correlate1d(_correlate1d(values, taps, axis=0), dtaps, axis=1)
    return float(np.sum(grad_out * (d_first + d_second)))


# ---------------------------------------------------------------------------
# Softmax over pixels and the fixation NLL adjoint
# ---------------------------------------------------------------------------

def softmax_array(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input must be finite")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_normalize(logits: Grid) -> Grid:
    """Convert a logit grid into a probability distribution over pixels."""
    return Grid(softmax_array(logits.values), kind="probability")


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax input must be finite")
    m = logits.max()
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum())


def softmax_nll(logits: np.ndarray, fixation_counts: np.ndarray) -> float:
    """Total negative log-likelihood (nats) of per-pixel fixation counts."""
    logp = log_softmax_array(logits)
    return float(-np.sum(fixation_counts * logp))


def adjoint_softmax_nll(logits: np.ndarray, fixation_counts: np.ndarray) -> np.ndarray:
    """Gradient of softmax_nll w.r.t. the logits: n * softmax(l) - counts."""
    fixation_counts = np.asarray(fixation_counts, dtype=np.float64)
    if logits.shape != fixation_counts.shape:
        raise ValueError("shape mismatch between logits and fixation counts")
    total = fixation_counts.sum()
    return total * softmax_array(logits) - fixation_counts


# ---------------------------------------------------------------------------
# Scalar scale and weighted sum (trivial forwards, listed for the adjoint suite)
# ---------------------------------------------------------------------------

def scalar_scale(values: np.ndarray, factor: float) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * factor


def adjoint_scalar_scale(values: np.ndarray, grad_out: np.ndarray, factor: float) -> tuple[np.ndarray, float]:
    """Gradients of factor*values w.r.t. (values, factor)."""
    if np.shape(values) != np.shape(grad_out):
        raise ValueError("shape mismatch in scalar_scale adjoint")
    return factor * np.asarray(grad_out, np.float64), float(np.sum(grad_out * values))


def weighted_sum(stacks: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Convex/linear combination over the leading axis: sum_k w_k * stacks[k]."""
    stacks = np.asarray(stacks)
    weights = np.asarray(weights, dtype=np.float64)
    if stacks.shape[0] != weights.shape[0]:
        raise ValueError("one weight per stack required")
    return np.tensordot(weights, stacks, axes=(0, 0))


def adjoint_weighted_sum(stacks: np.ndarray, grad_out: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of weighted_sum w.r.t. (weights, stacks)."""
    stacks = np.asarray(stacks, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if stacks.shape[1:] != grad_out.shape:
        raise ValueError("shape mismatch in weighted_sum adjoint")
    grad_weights = np.tensordot(stacks, grad_out, axes=(tuple(range(1, stacks.ndim)), tuple(range(grad_out.ndim))))
    grad_stacks = weights.reshape((-1,) + (1,) * grad_out.ndim) * grad_out[None]
    return grad_weights, grad_stacks


# ---------------------------------------------------------------------------
# Density lookup and sampling
# ---------------------------------------------------------------------------

LOG_CLAMP_FLOOR = 1e-300


def pixel_index(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    """Map continuous (x, y) to the containing pixel's (row, col)."""
    if not (0 <= x < width and 0 <= y < height):
        raise ValueError(f"coordinates ({x}, {y}) outside {width}x{height} grid")
    return int(np.floor(y)), int(np.floor(x))


def log_density_at(grid: Grid, x: float, y: float) -> float:
    """Log density of the pixel containing (x, y)."""
    row, col = pixel_index(x, y, grid.width, grid.height)
    value = grid.values[row, col]
    if grid.kind == "probability":
        return float(np.log(max(value, LOG_CLAMP_FLOOR)))
    if grid.kind == "log_density":
        return float(value)
    raise ValueError(f"log_density_at needs probability or log_density grid, got {grid.kind!r}")


def log_density_lookup(grid: Grid, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized log_density_at over fixation coordinate arrays."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(xs < 0) or np.any(xs >= grid.width) or np.any(ys < 0) or np.any(ys >= grid.height):
        raise ValueError("fixation coordinates outside grid")
    rows = np.floor(ys).astype(np.intp)
    cols = np.floor(xs).astype(np.intp)
    values = grid.values[rows, cols]
    if grid.kind == "probability":
        return np.log(np.maximum(values, LOG_CLAMP_FLOOR))
    if grid.kind == "log_density":
        return values.astype(np.float64)
    raise ValueError(f"log density lookup needs probability or log_density grid, got {grid.kind!r}")


def sample_fixations(grid: Grid, n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. (x, y) samples from a probability grid, jittered within pixels."""
    if grid.kind != "probability":
        raise ValueError("sample_fixations needs a probability grid")
    p = grid.values.ravel()
    p = p / p.sum()
    flat = rng.choice(p.size, size=n, p=p)
    rows, cols = np.divmod(flat, grid.width)
    jitter = rng.random((n, 2))
    xs = cols + jitter[:, 0]
    ys = rows + jitter[:, 1]
    return np.column_stack([xs, ys])


# ---------------------------------------------------------------------------
# FMAP tensor files
# ---------------------------------------------------------------------------

def write_fmap(path, values: np.ndarray) -> None:
    """Write a (channels, height, width) float tensor as an FMAP file."""
    values = np.asarray(values)
    if values.ndim == 2:
        values = values[None]
    if values.ndim != 3:
        raise ValueError(f"FMAP tensors are (channels, height, width), got {values.shape}")
    c, h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(FMAP_MAGIC)
        fh.write(f"{c} {h} {w}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    """Read an FMAP file into a (channels, height, width) float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(len(FMAP_MAGIC))
        if magic != FMAP_MAGIC:
            raise ValueError(f"{path}: not an FMAP file (bad magic {magic!r})")
        header = fh.readline().decode("ascii").split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed FMAP header")
        c, h, w = (int(tok) for tok in header)
        data = np.frombuffer(fh.read(c * h * w * 4), dtype="<f4")
        if data.size != c * h * w:
            raise ValueError(f"{path}: truncated FMAP payload")
    return data.reshape(c, h, w).copy()
