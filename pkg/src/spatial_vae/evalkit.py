"""Held-out ELBO, latent/ground-truth correlations, latent-space figures and PNG output."""

from dataclasses import dataclass
import csv
import hashlib
import math
import os

import numpy as np

from . import diffcore as dc
from .data import ImageDataset, wrap_angle
from .model import LatentSample, VAEModel, decode_image, encoder_forward
from .objective import ElboBreakdown, model_elbo

CHUNK = 500


def _check_geometry(ds, model):
    if (ds.height, ds.width) != (model.height, model.width):
        raise ValueError(f"dataset is {ds.height}x{ds.width}, model expects "
                         f"{model.height}x{model.width}")
    if ds.pixel_model != model.pixel_model:
        raise ValueError(f"dataset pixels are {ds.pixel_model!r}, model is {model.pixel_model!r}")


def image_noise(flat, n_latent, k_samples, seed):
    """``(k, count, n_latent)`` standard-normal draws keyed by ``seed`` and each image's bytes.

    Identical images receive identical draws wherever they sit in a dataset,
    while distinct images get independent ones.
    """
    out = np.empty((k_samples, len(flat), n_latent))
    for i, row in enumerate(np.ascontiguousarray(flat, dtype=np.float64)):
        key = np.frombuffer(hashlib.sha256(row.tobytes()).digest()[:16], dtype="<u4")
        out[:, i] = np.random.default_rng([seed, 3, *key.tolist()]).standard_normal(
            (k_samples, n_latent))
    return out


def estimate_elbo(ds: ImageDataset, model: VAEModel, priors, k_samples=1, seed=0):
    """Dataset-mean ELBO breakdown, each image's bound averaged over ``k_samples`` draws.

    Noise comes from :func:`image_noise`, so an image scores the same wherever
    it sits in the dataset and the estimate averages over independent draws.
    """
    _check_geometry(ds, model)
    if k_samples < 1:
        raise ValueError("k_samples must be at least 1")
    flat = ds.flat()
    totals = dict.fromkeys(ElboBreakdown.FIELDS, 0.0)
    for start in range(0, len(flat), CHUNK):
        batch = flat[start:start + CHUNK]
        noise = image_noise(batch, model.encoder.n_latent, k_samples, seed)
        for eps in noise:
            br = model_elbo(model, batch, eps, priors)
            for f in ElboBreakdown.FIELDS:
                totals[f] += float(np.sum(getattr(br, f).data))
    scale = 1.0 / (len(flat) * k_samples)
    return ElboBreakdown(*(totals[f] * scale for f in ElboBreakdown.FIELDS))


@dataclass
class PosteriorMeans:
    z: np.ndarray               # (count, z_dim)
    theta: np.ndarray = None    # (count,) wrapped to (-pi, pi]
    dx: np.ndarray = None       # (count, 2) normalized units


def posterior_means(ds: ImageDataset, model: VAEModel):
    _check_geometry(ds, model)
    flat = ds.flat()
    parts = [encoder_forward(flat[s:s + CHUNK], model.encoder) for s in range(0, len(flat), CHUNK)]
    z = np.concatenate([p.mu_z.data for p in parts])
    theta = dx = None
    if model.encoder.rotation:
        theta = wrap_angle(np.concatenate([p.mu_theta.data for p in parts]))
    if model.encoder.translation:
        dx = np.concatenate([p.mu_dx.data for p in parts])
    return PosteriorMeans(z, theta, dx)


# ---------------------------------------------------------------------------
# correlation measures
# ---------------------------------------------------------------------------

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two observations")
    return a, b


def pearson_corr(a, b):
    """Sample Pearson correlation; raises ValueError when either side is constant."""
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = np.dot(da, da), np.dot(db, db)
    if saa == 0 or sbb == 0:
        raise ValueError("Pearson correlation is undefined for a constant sample")
    r = np.dot(da, db) / math.sqrt(saa * sbb)
    return float(min(1.0, max(-1.0, r)))


def circular_mean(a):
    a = np.asarray(a, dtype=np.float64)
    return math.atan2(np.mean(np.sin(a)), np.mean(np.cos(a)))


def circular_corr(alpha, beta):
    """Circular correlation of two angle samples (radians).

    ``sum sin(a - a_bar) sin(b - b_bar) / sqrt(sum sin^2(a - a_bar) sum sin^2(b - b_bar))``
    with circular means ``a_bar``, ``b_bar``. Adding a constant to either
    argument leaves it unchanged.
    """
    alpha, beta = _pair(alpha, beta)
    sa = np.sin(alpha - circular_mean(alpha))
    sb = np.sin(beta - circular_mean(beta))
    den = math.sqrt(np.dot(sa, sa) * np.dot(sb, sb))
    if den == 0:
        raise ValueError("circular correlation is undefined for a degenerate angular spread")
    r = np.dot(sa, sb) / den
    return float(min(1.0, max(-1.0, r)))


@dataclass
class Correlation:
    latent: str
    factor: str
    method: str
    coefficient: float

    @property
    def magnitude(self):
        return abs(self.coefficient)


class CorrelationReport(list):
    """List of :class:`Correlation` rows, one per latent and ground-truth factor."""

    HEADER = ("latent", "factor", "method", "coefficient", "abs_coefficient")

    def get(self, latent, factor):
        for row in self:
            if row.latent == latent and row.factor == factor:
                return row
        raise KeyError((latent, factor))

    def rows(self):
        return [(r.latent, r.factor, r.method, repr(r.coefficient), repr(r.magnitude)) for r in self]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(self.HEADER)
            w.writerows(self.rows())


def correlation_report(ds: ImageDataset, model: VAEModel):
    """Correlate posterior means with whatever ground truth ``ds`` carries.

    Every z dimension is paired with the conformation factor (Pearson), the
    rotation mean with the true angle (circular), and each translation
    component with the true shift along the same axis (Pearson).
    """
    truth = ds.manifest
    report = CorrelationReport()
    if truth is None:
        return report
    pm = posterior_means(ds, model)
    if truth.conformation is not None:
        for j in range(pm.z.shape[1]):
            report.append(Correlation(f"z{j}", "conformation", "pearson",
                                      pearson_corr(pm.z[:, j], truth.conformation)))
    if pm.theta is not None and truth.theta is not None:
        report.append(Correlation("theta", "theta", "circular", circular_corr(pm.theta, truth.theta)))
    if pm.dx is not None and truth.dx_px is not None:
        for j, axis in enumerate("xy"):
            if np.ptp(truth.dx_px[:, j]) > 0:
                report.append(Correlation(f"d{axis}", f"d{axis}", "pearson",
                                          pearson_corr(pm.dx[:, j], truth.dx_px[:, j])))
    return report


# ---------------------------------------------------------------------------
# standard normal quantile
# ---------------------------------------------------------------------------

# Acklam's rational approximation (relative error about 1e-9), followed by
# one Halley step against erfc which brings it to machine precision.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _poly(coeffs, x):
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc


def normal_ppf(p):
    """Inverse standard-normal CDF for ``0 < p < 1``."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = _poly(_C, q) / (_poly(_D, q) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = _poly(_A, r) * q / (_poly(_B, r) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log1p(-p))
        x = -_poly(_C, q) / (_poly(_D, q) * q + 1.0)
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def quantile_axis(grid_n):
    """``Phi^-1(k / (grid_n + 1))`` for ``k = 1..grid_n``, mirrored so it is exactly symmetric."""
    if grid_n < 1:
        raise ValueError("grid_n must be at least 1")
    vals = np.zeros(grid_n)
    for k in range(1, grid_n // 2 + 1):
        vals[k - 1] = normal_ppf(k / (grid_n + 1))
        vals[grid_n - k] = -vals[k - 1]
    return vals


# ---------------------------------------------------------------------------
# latent-space figures
# ---------------------------------------------------------------------------

def decode_at_origin(model: VAEModel, z):
    """Images decoded from ``z`` ``(m, z_dim)`` with zero rotation and translation.

    Returns ``(m, h, w)`` means (real pixels) or probabilities (binary pixels).
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m = len(z)
    sample = LatentSample(dc.Tensor(z), dc.Tensor(np.zeros(m)), dc.Tensor(np.zeros((m, 2))),
                          np.zeros((m, 0)))
    out = decode_image(sample, model.grid, model.generator)
    return out.mean.data.reshape(m, model.height, model.width)


def manifold_grid(model: VAEModel, grid_n=15):
    """Decodings over a ``grid_n``-per-axis grid of standard-normal quantiles.

    Returns ``(images, z)``. For ``z_dim == 2`` rows follow the second
    coordinate (descending) and columns the first.
    """
    if model.z_dim > 2:
        raise ValueError(f"a manifold grid needs z_dim <= 2, model has z_dim={model.z_dim}")
    axis = quantile_axis(grid_n)
    if model.z_dim == 1:
        z = axis[:, None]
    else:
        z1, z0 = np.meshgrid(axis[::-1], axis, indexing="ij")
        z = np.stack([z0.reshape(-1), z1.reshape(-1)], axis=1)
    return decode_at_origin(model, z), z


def interpolate_latents(model: VAEModel, image_a, image_b, steps):
    """Decodings along the straight line between the posterior means of two images."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    flat = np.stack([np.asarray(image_a, dtype=np.float64).reshape(-1),
                     np.asarray(image_b, dtype=np.float64).reshape(-1)])
    mu = encoder_forward(flat, model.encoder).mu_z.data
    t = np.linspace(0.0, 1.0, steps)[:, None]
    # offset form: identical endpoints give identical frames
    z = mu[0] + t * (mu[1] - mu[0])
    z[0], z[-1] = mu[0], mu[1]
    return decode_at_origin(model, z), z


def sample_images(model: VAEModel, n, seed=0):
    """Decodings of ``n`` prior draws of ``z`` at zero pose."""
    z = np.random.default_rng([seed, 4]).standard_normal((n, model.z_dim))
    return decode_at_origin(model, z), z


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

SEPARATOR = 255


def tile_images(images, cols):
    """Min-max normalize a stack jointly to 8 bits and lay it out with 1-pixel separators."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    if images.ndim != 3 or len(images) == 0:
        raise ValueError("expected a non-empty (count, h, w) stack")
    if cols < 1:
        raise ValueError("cols must be at least 1")
    n, h, w = images.shape
    lo, hi = images.min(), images.max()
    if hi > lo:
        scaled = np.rint((images - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(images.shape, 128, dtype=np.uint8)
    cols = min(cols, n)
    rows = -(-n // cols)
    canvas = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), SEPARATOR, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = scaled[i]
    return canvas


def render_png_grid(images, cols, path):
    from PIL import Image

    canvas = tile_images(images, cols)
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return canvas
