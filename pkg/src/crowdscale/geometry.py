"""Perspective geometry: pixels-per-meter maps from ground-plane
homographies, ROI masks and image-plane vs ground-plane densities.

A homography maps ground coordinates (meters) to image coordinates
(pixels). The local scale at a pixel is sqrt(|det J|) of the ground-to-
image Jacobian evaluated at the ground point below that pixel, i.e. an
isotropic pixels-per-meter value (exact for similarity transforms).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, GeometryError
from .groundtruth import DensityMap

NORM_EPS = 1e-8


@dataclass
class Homography:
    """3x3 ground(m) -> image(px) map, normalized so H[2][2] == 1."""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ConfigurationError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise ConfigurationError("singular homography")
        if m[2, 2] == 0:
            raise ConfigurationError("homography has H[2][2] == 0, cannot normalize")
        self.matrix = m / m[2, 2]


@dataclass
class PerspectiveMap:
    """Per-pixel pixels-per-meter field, optionally normalized to [0, 255]."""
    values: np.ndarray                 # (h, w) strictly positive
    normalized_values: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError(f"perspective map must be 2-D, got {self.values.shape}")

    @property
    def dims(self):
        return self.values.shape


@dataclass
class RoiMask:
    """Binary region-of-interest mask."""
    values: np.ndarray                 # (h, w) in {0, 1}

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DimensionError(f"ROI mask must be 2-D, got {v.shape}")
        self.values = (v != 0).astype(np.uint8)

    @property
    def dims(self):
        return self.values.shape


def camera_homography(height_m, tilt_deg, focal_px, image_dims):
    """Ground->image homography for a pinhole camera at `height_m` above a
    flat ground plane, pitched down by `tilt_deg`, principal point at the
    image center. Ground axes: X lateral (right), Z forward."""
    h, w = image_dims
    theta = np.deg2rad(tilt_deg)
    c, s = np.cos(theta), np.sin(theta)
    # camera-frame basis rows for a pitch-down rotation (x right, y down, z forward)
    col_x = np.array([1.0, 0.0, 0.0])
    col_z = np.array([0.0, -s, c])
    col_y = np.array([0.0, c, s])
    k = np.array([[focal_px, 0.0, w / 2.0],
                  [0.0, focal_px, h / 2.0],
                  [0.0, 0.0, 1.0]])
    m = k @ np.column_stack([col_x, col_z, height_m * col_y])
    return Homography(m)


def project_ground_points(homography, points_m):
    """Project (X, Z) ground points (meters) to pixel coordinates.

    Returns (uv (k, 2), in_front (k,) bool); points behind the camera get
    in_front=False and non-finite pixel coordinates.
    """
    pts = np.asarray(points_m, dtype=np.float64).reshape(-1, 2)
    hom = np.column_stack([pts, np.ones(len(pts))])
    img = hom @ homography.matrix.T
    wcoord = img[:, 2]
    in_front = wcoord > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = img[:, :2] / wcoord[:, None]
    return uv, in_front


def perspective_map_from_homography(homography, dims):
    """Evaluate sqrt(|det J|) of the ground->image map at every pixel.

    Pixels that do not back-project to a finite ground point in front of
    the camera (on/above the horizon) are flagged invalid and filled with
    the minimum valid value so the map stays finite.
    """
    h, w = dims
    if h <= 0 or w <= 0:
        raise DimensionError(f"empty dims {dims}")
    m = homography.matrix
    inv = np.linalg.inv(m)
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    gx = inv[0, 0] * us + inv[0, 1] * vs + inv[0, 2]
    gz = inv[1, 0] * us + inv[1, 1] * vs + inv[1, 2]
    gw = inv[2, 0] * us + inv[2, 1] * vs + inv[2, 2]

    # reference sign from the pixel farthest from the horizon line
    ref = gw.flat[np.abs(gw).argmax()]
    if ref == 0:
        raise GeometryError("entire image lies on the horizon")
    sign = 1.0 if ref > 0 else -1.0
    valid = sign * gw > 1e-9 * np.abs(gw).max()

    with np.errstate(divide="ignore", invalid="ignore"):
        X = gx / gw
        Z = gz / gw
        den = m[2, 0] * X + m[2, 1] * Z + m[2, 2]
        nu = m[0, 0] * X + m[0, 1] * Z + m[0, 2]
        nv = m[1, 0] * X + m[1, 1] * Z + m[1, 2]
        du_dx = (m[0, 0] * den - nu * m[2, 0]) / den ** 2
        du_dz = (m[0, 1] * den - nu * m[2, 1]) / den ** 2
        dv_dx = (m[1, 0] * den - nv * m[2, 0]) / den ** 2
        dv_dz = (m[1, 1] * den - nv * m[2, 1]) / den ** 2
        det = du_dx * dv_dz - du_dz * dv_dx
        values = np.sqrt(np.abs(det))

    valid &= np.isfinite(values) & (values > 0)
    if not valid.any():
        raise GeometryError("no pixel back-projects to a valid ground point")
    fill = values[valid].min()
    values = np.where(valid, values, fill)
    return PerspectiveMap(values, meta={"valid_mask": valid,
                                        "all_valid": bool(valid.all())})


def normalize_perspective_map(pmap, stats=None):
    """Affinely map raw values to [0, 255].

    `stats` is a (lo, hi) pair frozen from the training split; pass None to
    compute it from this map. Returns (PerspectiveMap, stats_dict); a
    constant map is mapped to 127.5 and flagged degenerate.
    """
    valid = pmap.meta.get("valid_mask")
    vals = pmap.values[valid] if valid is not None else pmap.values
    if vals.size == 0:
        raise GeometryError("no valid pixels to normalize")
    if stats is None:
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = float(stats[0]), float(stats[1])
    degenerate = hi == lo
    if degenerate:
        normalized = np.full_like(pmap.values, 127.5)
    else:
        normalized = 255.0 * (pmap.values - lo) / (hi - lo + NORM_EPS)
    out = PerspectiveMap(pmap.values, normalized_values=normalized,
                         meta=dict(pmap.meta, degenerate=degenerate))
    return out, {"min": lo, "max": hi, "degenerate": degenerate}


def resample_field(values, dims):
    """Sample a 2-D field at another resolution (half-pixel bilinear)."""
    src_h, src_w = values.shape
    dst_h, dst_w = dims
    if (src_h, src_w) == (dst_h, dst_w):
        return values.copy()

    def coeffs(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0, src - 1)
        i0 = np.minimum(np.floor(pos).astype(np.intp), src - 1)
        i1 = np.minimum(i0 + 1, src - 1)
        return i0, i1, pos - i0

    y0, y1, wy = coeffs(src_h, dst_h)
    x0, x1, wx = coeffs(src_w, dst_w)
    wy = wy[:, None]
    wx = wx[None, :]
    return ((1 - wy) * (1 - wx) * values[y0[:, None], x0[None, :]]
            + (1 - wy) * wx * values[y0[:, None], x1[None, :]]
            + wy * (1 - wx) * values[y1[:, None], x0[None, :]]
            + wy * wx * values[y1[:, None], x1[None, :]])


def ground_density_normalize(density, pmap):
    """Convert people-per-pixel to people-per-square-meter: D * M^2."""
    mvals = pmap.values
    if mvals.shape != density.dims:
        mvals = resample_field(mvals, density.dims)
    if mvals.shape != density.dims:
        raise DimensionError(f"perspective map {mvals.shape} vs density {density.dims}")
    return DensityMap(density.values * mvals ** 2,
                      meta=dict(density.meta, unit="people_per_m2"))


def apply_roi(density, mask):
    """Zero the density outside the region of interest."""
    if mask.dims != density.dims:
        raise DimensionError(f"ROI {mask.dims} vs density {density.dims}")
    return DensityMap(density.values * mask.values, meta=dict(density.meta))


def downsample_mask(mask, factor):
    """Majority-vote block downsampling; exact ties round to 1."""
    h, w = mask.dims
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"mask dims {h}x{w} not divisible by {factor}")
    blocks = mask.values.reshape(h // factor, factor, w // factor, factor)
    frac = blocks.mean(axis=(1, 3))
    return RoiMask((frac >= 0.5).astype(np.uint8))
