"""Ground-truth density maps from head annotations.

Each head contributes a truncated isotropic Gaussian that is renormalized
over its in-image support, so the integral of the map equals the head count
exactly (up to float64 rounding) even for heads near borders. Accumulation
runs in annotation order in float64 for determinism.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError


@dataclass
class HeadAnnotations:
    """Sub-pixel head positions inside an (h, w) image."""
    points: np.ndarray          # (count, 2) as (x, y) pixels
    image_dims: tuple           # (h, w)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image_dims
        if h <= 0 or w <= 0:
            raise DimensionError(f"empty image dims {self.image_dims}")
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ConfigurationError(f"head ({x}, {y}) outside [0,{w})x[0,{h})")

    @property
    def count(self):
        return len(self.points)


@dataclass
class KernelSpec:
    """Gaussian kernel parameters for density construction."""
    mode: str = "fixed"          # "fixed" | "adaptive"
    sigma: float = 4.0           # pixels; also the adaptive fallback
    beta: float = 0.3            # adaptive: sigma = beta * mean kNN distance
    k_nn: int = 3
    truncation_radius: float = 4.0   # multiples of sigma

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ConfigurationError(f"kernel mode {self.mode!r}")
        if self.sigma <= 0 or self.beta <= 0:
            raise ConfigurationError("sigma and beta must be positive")
        if self.k_nn < 1:
            raise ConfigurationError("k_nn must be >= 1")
        if self.truncation_radius < 3:
            raise ConfigurationError("truncation_radius must be >= 3")


@dataclass
class DensityMap:
    """Non-negative people-per-pixel grid."""
    values: np.ndarray           # (h, w) float64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"density map must be 2-D, got {self.values.shape}")

    @property
    def dims(self):
        return self.values.shape


def total_count(density):
    """Integral of the map: the people count it encodes.

    Uses exact summation (single final rounding), so the result does not
    depend on element order. That makes count conservation under mirroring
    and sum-pooling a bit-for-bit guarantee rather than a tolerance.
    """
    return float(math.fsum(density.values.ravel()))


def _splat_head(values, x, y, sigma, truncation_radius):
    """Add one renormalized truncated Gaussian centered at (x, y)."""
    h, w = values.shape
    r = truncation_radius * sigma
    x0 = max(0, int(np.floor(x - r)))
    x1 = min(w, int(np.ceil(x + r)) + 1)
    y0 = max(0, int(np.floor(y - r)))
    y1 = min(h, int(np.ceil(y + r)) + 1)
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    gx = np.exp(-((xs - x) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((ys - y) ** 2) / (2 * sigma * sigma))
    patch = gy[:, None] * gx[None, :]
    mask = ((xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2) <= r * r
    patch = patch * mask
    mass = patch.sum()
    if mass <= 0:
        # degenerate sigma << pixel: put the whole head on the nearest pixel
        values[min(h - 1, max(0, int(round(y)))), min(w - 1, max(0, int(round(x))))] += 1.0
        return
    values[y0:y1, x0:x1] += patch / mass


def fixed_kernel_density(ann, spec):
    """Density map with one fixed-sigma Gaussian per head."""
    if spec.mode != "fixed":
        raise ConfigurationError(f"fixed_kernel_density called with mode {spec.mode!r}")
    h, w = ann.image_dims
    values = np.zeros((h, w), dtype=np.float64)
    for x, y in ann.points:
        _splat_head(values, x, y, spec.sigma, spec.truncation_radius)
    return DensityMap(values, meta={"mode": "fixed", "sigma": spec.sigma})


def _knn_sigmas(points, beta, k_nn):
    """Per-head sigma from the mean distance to the k nearest neighbors."""
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    part = np.sort(dist, axis=1)[:, :k_nn]
    return beta * part.mean(axis=1)


def adaptive_kernel_density(ann, spec):
    """Geometry-adaptive density: sigma scales with local head spacing.

    Images with too few heads for a kNN estimate fall back to the fixed
    sigma; the fallback is flagged in the returned map's metadata.
    """
    if spec.mode != "adaptive":
        raise ConfigurationError(f"adaptive_kernel_density called with mode {spec.mode!r}")
    h, w = ann.image_dims
    values = np.zeros((h, w), dtype=np.float64)
    fallback = ann.count < spec.k_nn + 1
    if fallback:
        sigmas = np.full(ann.count, spec.sigma)
    else:
        sigmas = _knn_sigmas(ann.points, spec.beta, spec.k_nn)
    for (x, y), sigma in zip(ann.points, sigmas):
        _splat_head(values, x, y, float(sigma), spec.truncation_radius)
    return DensityMap(values, meta={"mode": "adaptive", "fallback": fallback,
                                    "sigmas": sigmas})


def density_from_spec(ann, spec):
    if spec.mode == "fixed":
        return fixed_kernel_density(ann, spec)
    return adaptive_kernel_density(ann, spec)


def downsample_density(density, factor):
    """Sum-pool by an integer factor; the total count is preserved exactly."""
    h, w = density.dims
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"dims {h}x{w} not divisible by factor {factor}")
    v = density.values.reshape(h // factor, factor, w // factor, factor)
    pooled = v.sum(axis=(1, 3))
    # Count conservation must be bit-exact under total_count: absorb the
    # pooling round-off into the largest cell (a last-ulp perturbation).
    # total_count rounds the exact sum once, so the total is a monotone
    # function of the cell with one-ulp granularity -- the walk below cannot
    # jump over the target and terminates in a few steps.
    target = total_count(density)
    flat = pooled.reshape(-1)
    hot = int(flat.argmax())
    for _ in range(256):
        diff = target - math.fsum(flat)
        if diff == 0.0:
            break
        bumped = flat[hot] + diff
        if bumped == flat[hot]:
            bumped = np.nextafter(flat[hot], np.copysign(np.inf, diff))
        flat[hot] = bumped
    return DensityMap(pooled, meta=dict(density.meta))
