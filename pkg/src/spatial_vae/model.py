"""Spatial generator, per-pixel (vanilla) generator, and inference network.

Weights live as plain numpy arrays in the parameter dataclasses. Forward
functions take an optional list of :class:`~spatial_vae.diffcore.Tensor`
leaves standing in for those arrays, which is how the training loop gets
gradients; without it the stored arrays are used as constants.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffcore as dc
from .geometry import CoordGrid, make_grid, pixels_to_normalized, transform_coords

PIXEL_MODELS = ("binary", "real")
GENERATOR_KINDS = ("spatial", "vanilla")
THETA_PRIOR_MODES = ("gaussian", "uniform")
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -7.0, 7.0


def init_mlp(sizes, rng):
    """Glorot-uniform weights and zero biases, as a flat ``[W1, b1, W2, b2, ...]`` list."""
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        weights.append(np.zeros(fan_out))
    return weights


def _mlp(x, weights):
    n_layers = len(weights) // 2
    h = x
    for k in range(n_layers - 1):
        h = dc.tanh_act(dc.linear(h, weights[2 * k], weights[2 * k + 1]))
    return dc.linear(h, weights[-2], weights[-1])


def _as_leaves(weights, tensors):
    if tensors is None:
        return [dc.Tensor(w) for w in weights]
    if len(tensors) != len(weights):
        raise ValueError("weight tensor count does not match the parameter list")
    return list(tensors)


@dataclass
class PriorConfig:
    s_theta: float = np.pi / 4
    s_dx: float = 1.4  # pixels
    theta_prior_mode: str = "gaussian"

    def __post_init__(self):
        if not (self.s_theta > 0 and self.s_dx > 0):
            raise ValueError("prior standard deviations must be positive")
        if self.theta_prior_mode not in THETA_PRIOR_MODES:
            raise ValueError(f"unknown theta prior mode {self.theta_prior_mode!r}")


@dataclass
class GeneratorParams:
    kind: str
    z_dim: int
    hidden: tuple
    pixel_model: str
    n_pixels: int
    clamp_nonneg_mean: bool = False
    weights: list = field(default_factory=list)

    @property
    def in_dim(self):
        return self.z_dim + 2 if self.kind == "spatial" else self.z_dim

    @property
    def out_dim(self):
        per_pixel = 1 if self.pixel_model == "binary" else 2
        return per_pixel if self.kind == "spatial" else per_pixel * self.n_pixels


@dataclass
class InferenceParams:
    n_pixels: int
    z_dim: int
    rotation: bool
    translation: bool
    hidden: tuple
    weights: list = field(default_factory=list)

    @property
    def n_latent(self):
        return self.z_dim + int(self.rotation) + 2 * int(self.translation)


@dataclass
class PixelDistribution:
    """Per-pixel likelihood parameters; ``sigma`` is None for the binary model."""
    mean: dc.Tensor
    sigma: Optional[dc.Tensor] = None


@dataclass
class Posterior:
    mu_z: dc.Tensor
    sigma_z: dc.Tensor
    mu_theta: Optional[dc.Tensor] = None
    sigma_theta: Optional[dc.Tensor] = None
    mu_dx: Optional[dc.Tensor] = None
    sigma_dx: Optional[dc.Tensor] = None

    @property
    def has_rotation(self):
        return self.mu_theta is not None

    @property
    def has_translation(self):
        return self.mu_dx is not None


@dataclass
class LatentSample:
    z: dc.Tensor
    theta: dc.Tensor
    dx: dc.Tensor
    noise: np.ndarray


@dataclass
class VAEModel:
    generator: GeneratorParams
    encoder: InferenceParams
    height: int
    width: int

    @property
    def grid(self) -> CoordGrid:
        return make_grid(self.height, self.width)

    @property
    def n_pixels(self):
        return self.height * self.width

    @property
    def pixel_model(self):
        return self.generator.pixel_model

    @property
    def z_dim(self):
        return self.generator.z_dim

    def parameters(self):
        return list(self.generator.weights) + list(self.encoder.weights)

    def split(self, items):
        k = 2 * (len(self.generator.hidden) + 1)
        return list(items[:k]), list(items[k:])

    def with_parameters(self, arrays):
        gen, enc = self.split(arrays)
        return VAEModel(replace(self.generator, weights=gen), replace(self.encoder, weights=enc),
                        self.height, self.width)

    def architecture(self):
        g, e = self.generator, self.encoder
        return {
            "height": self.height, "width": self.width,
            "generator": {"kind": g.kind, "z_dim": g.z_dim, "hidden": list(g.hidden),
                          "pixel_model": g.pixel_model, "n_pixels": g.n_pixels,
                          "clamp_nonneg_mean": g.clamp_nonneg_mean},
            "encoder": {"n_pixels": e.n_pixels, "z_dim": e.z_dim, "rotation": e.rotation,
                        "translation": e.translation, "hidden": list(e.hidden)},
            "init": "glorot-uniform weights, zero biases",
        }

    @classmethod
    def from_architecture(cls, arch, arrays):
        g, e = arch["generator"], arch["encoder"]
        gen = GeneratorParams(g["kind"], g["z_dim"], tuple(g["hidden"]), g["pixel_model"],
                              g["n_pixels"], g["clamp_nonneg_mean"])
        enc = InferenceParams(e["n_pixels"], e["z_dim"], e["rotation"], e["translation"],
                              tuple(e["hidden"]))
        model = cls(gen, enc, arch["height"], arch["width"])
        shapes = [w.shape for w in _init_weights(model, np.random.default_rng(0))]
        if [tuple(a.shape) for a in arrays] != shapes:
            raise ValueError("stored parameter shapes do not match the architecture")
        return model.with_parameters(arrays)


def _init_weights(model, rng):
    g, e = model.generator, model.encoder
    gen = init_mlp([g.in_dim, *g.hidden, g.out_dim], rng)
    enc = init_mlp([e.n_pixels, *e.hidden, 2 * e.n_latent], rng)
    return gen + enc


def build_model(height, width, z_dim, hidden=(500, 500), pixel_model="binary",
                kind="spatial", rotation=True, translation=True, clamp_nonneg_mean=False,
                encoder_hidden=None, seed=0):
    """A freshly initialized model. The encoder defaults to the generator's hidden sizes."""
    if pixel_model not in PIXEL_MODELS:
        raise ValueError(f"unknown pixel model {pixel_model!r}")
    if kind not in GENERATOR_KINDS:
        raise ValueError(f"unknown generator kind {kind!r}")
    if z_dim < 1:
        raise ValueError("z_dim must be at least 1")
    if kind == "vanilla" and (rotation or translation):
        raise ValueError("the vanilla generator has no pose inputs; disable rotation and translation")
    n = height * width
    hidden = tuple(int(h) for h in hidden)
    if not hidden:
        raise ValueError("the generator needs at least one hidden layer")
    enc_hidden = hidden if encoder_hidden is None else tuple(int(h) for h in encoder_hidden)
    gen = GeneratorParams(kind, z_dim, hidden, pixel_model, n, clamp_nonneg_mean)
    enc = InferenceParams(n, z_dim, rotation, translation, enc_hidden)
    model = VAEModel(gen, enc, height, width)
    return model.with_parameters(_init_weights(model, np.random.default_rng(seed)))


def _pixel_head(out, params):
    if params.pixel_model == "binary":
        return PixelDistribution(dc.sigmoid(out[0]))
    mean, log_sigma = out
    if params.clamp_nonneg_mean:
        mean = dc.relu(mean)
    return PixelDistribution(mean, dc.exp(dc.clip(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)))


def generator_forward(coords, z, params: GeneratorParams, weights=None):
    """Decode every coordinate row with the same MLP, conditioned on ``z``.

    ``coords`` is ``(n, 2)`` or ``(B, n, 2)``; ``z`` is ``(z_dim,)`` or
    ``(B, z_dim)``. Equivalent to feeding ``concat(x_i, z)`` to the MLP; the
    first layer is split into its coordinate and latent blocks so the latent
    block is applied once per image rather than once per pixel.
    """
    if params.kind != "spatial":
        raise ValueError("generator_forward needs a spatial generator")
    coords, z = dc.as_tensor(coords), dc.as_tensor(z)
    if z.shape[-1] != params.z_dim:
        raise ValueError(f"z has {z.shape[-1]} dims, generator expects {params.z_dim}")
    w = _as_leaves(params.weights, weights)
    w1, b1 = w[0], w[1]
    z_part = dc.linear(z, w1[2:], b1)
    if z.ndim == 2:
        z_part = dc.reshape(z_part, (z.shape[0], 1, z_part.shape[-1]))
    h = dc.tanh_act(dc.add(dc.matmul(coords, w1[:2]), z_part))
    out = _mlp(h, w[2:]) if len(w) > 2 else h
    heads = [out[..., k] for k in range(params.out_dim)]
    return _pixel_head(heads, params)


def vanilla_generator_forward(z, params: GeneratorParams, weights=None):
    """Map ``z`` straight to the distribution parameters of every pixel index."""
    if params.kind != "vanilla":
        raise ValueError("vanilla_generator_forward needs a vanilla generator")
    z = dc.as_tensor(z)
    if z.shape[-1] != params.z_dim:
        raise ValueError(f"z has {z.shape[-1]} dims, generator expects {params.z_dim}")
    out = _mlp(z, _as_leaves(params.weights, weights))
    n = params.n_pixels
    if params.pixel_model == "binary":
        return _pixel_head([out], params)
    return _pixel_head([out[..., :n], out[..., n:]], params)


def encoder_forward(image, params: InferenceParams, weights=None):
    """Approximate posterior for a flattened image ``(n,)`` or a batch ``(B, n)``."""
    image = dc.as_tensor(image)
    if image.shape[-1] != params.n_pixels:
        raise ValueError(f"image has {image.shape[-1]} pixels, encoder expects {params.n_pixels}")
    out = _mlp(image, _as_leaves(params.weights, weights))
    L = params.n_latent
    mu = out[..., :L]
    sigma = dc.exp(dc.clip(out[..., L:], LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    zd = params.z_dim
    post = Posterior(mu[..., :zd], sigma[..., :zd])
    k = zd
    if params.rotation:
        post.mu_theta, post.sigma_theta = mu[..., k], sigma[..., k]
        k += 1
    if params.translation:
        post.mu_dx, post.sigma_dx = mu[..., k:k + 2], sigma[..., k:k + 2]
    return post


def noise_dim(post: Posterior):
    return post.mu_z.shape[-1] + int(post.has_rotation) + 2 * int(post.has_translation)


def reparameterize(post: Posterior, noise, freeze_z=False):
    """``mu + sigma * eps`` for each active latent; inactive pose latents are exactly 0.

    ``noise`` is laid out as ``[z..., theta?, dx?, dy?]`` over the last axis.
    With ``freeze_z`` the z columns of ``noise`` are still consumed but ``z``
    is set to zero.
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != noise_dim(post):
        raise ValueError(f"noise has {noise.shape[-1]} columns, posterior needs {noise_dim(post)}")
    lead = post.mu_z.shape[:-1]
    zd = post.mu_z.shape[-1]
    if freeze_z:
        z = dc.Tensor(np.zeros(lead + (zd,)))
    else:
        z = post.mu_z + post.sigma_z * noise[..., :zd]
    k = zd
    if post.has_rotation:
        theta = post.mu_theta + post.sigma_theta * noise[..., k]
        k += 1
    else:
        theta = dc.Tensor(np.zeros(lead))
    if post.has_translation:
        dx = post.mu_dx + post.sigma_dx * noise[..., k:k + 2]
    else:
        dx = dc.Tensor(np.zeros(lead + (2,)))
    return LatentSample(z, theta, dx, noise)


def decode_image(sample: LatentSample, grid: CoordGrid, params: GeneratorParams, weights=None):
    """Pixel distribution parameters of the image with pose and content from ``sample``.

    For the spatial generator this is exactly
    ``generator_forward(transform_coords(grid.coords, theta, dx), z)``; the
    vanilla generator ignores pose.
    """
    if params.kind == "vanilla":
        return vanilla_generator_forward(sample.z, params, weights)
    coords = transform_coords(grid.coords, sample.theta, sample.dx)
    return generator_forward(coords, sample.z, params, weights)


def translation_scale(model: VAEModel):
    """Normalized units per pixel; used to express pixel-valued priors in model units."""
    fx, fy = pixels_to_normalized(model.height, model.width)
    if fx != fy:
        raise ValueError("translation priors in pixels need square pixels in normalized units")
    return fx
