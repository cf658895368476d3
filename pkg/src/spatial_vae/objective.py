"""Pixel log-likelihoods, KL terms and the evidence lower bound.

All quantities are per image: log-likelihoods are summed over pixels and KL
terms over latent dimensions, leaving any leading batch axes in place.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import diffcore as dc
from .model import decode_image, encoder_forward, reparameterize, translation_scale

P_CLAMP = 1e-7
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def bernoulli_loglik(y, p):
    """``sum y log p + (1 - y) log(1 - p)`` with ``p`` clamped to ``[1e-7, 1 - 1e-7]``."""
    y = np.asarray(y.data if isinstance(y, dc.Tensor) else y, dtype=np.float64)
    p = dc.as_tensor(p)
    if y.shape[-1:] != p.shape[-1:]:
        raise ValueError(f"image has {y.shape[-1]} pixels, prediction has {p.shape[-1]}")
    pc = dc.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    ll = dc.add(dc.mul(y, dc.log(pc)), dc.mul(1.0 - y, dc.log(dc.sub(1.0, pc))))
    return dc.tsum(ll, axis=-1)


def gaussian_loglik(y, mu, sigma):
    """``sum -0.5 log(2 pi) - log sigma - (y - mu)^2 / (2 sigma^2)`` over pixels."""
    y = np.asarray(y.data if isinstance(y, dc.Tensor) else y, dtype=np.float64)
    mu, sigma = dc.as_tensor(mu), dc.as_tensor(sigma)
    if np.any(sigma.data <= 0):
        raise ValueError("pixel standard deviations must be positive")
    if y.shape[-1:] != mu.shape[-1:]:
        raise ValueError(f"image has {y.shape[-1]} pixels, prediction has {mu.shape[-1]}")
    resid = dc.div(dc.sub(y, mu), sigma)
    ll = dc.sub(dc.neg(dc.log(sigma)), dc.mul(0.5, dc.square(resid)))
    n = y.shape[-1]
    return dc.sub(dc.tsum(ll, axis=-1), n * HALF_LOG_2PI)


def _positive(x, what):
    x = dc.as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError(f"{what} must be positive")
    return x


def kl_gaussian(mu, sigma, s, event_dims=0):
    """``KL(N(mu, sigma^2) || N(0, s^2)) = log(s / sigma) + (sigma^2 + mu^2) / (2 s^2) - 1/2``.

    ``event_dims`` trailing axes are summed (1 for a latent vector).
    """
    sigma = _positive(sigma, "posterior sigma")
    s = _positive(s, "prior sigma")
    mu = dc.as_tensor(mu)
    two_s2 = dc.mul(2.0, dc.square(s))
    kl = dc.add(dc.sub(dc.log(s), dc.log(sigma)),
                dc.sub(dc.div(dc.add(dc.square(sigma), dc.square(mu)), two_s2), 0.5))
    for _ in range(event_dims):
        kl = dc.tsum(kl, axis=-1)
    return kl


def kl_theta_uniform(sigma_theta, s_theta):
    """Rotation KL that leaves the posterior mean unpenalized.

    ``-log sigma + log s + sigma^2 / (2 s^2) - 1/2``; identical to
    :func:`kl_gaussian` with the mean set to zero.
    """
    sigma = _positive(sigma_theta, "posterior sigma")
    s = _positive(s_theta, "prior sigma")
    two_s2 = dc.mul(2.0, dc.square(s))
    return dc.sub(dc.add(dc.add(dc.neg(dc.log(sigma)), dc.log(s)),
                         dc.div(dc.square(sigma), two_s2)), 0.5)


@dataclass
class ElboBreakdown:
    recon_loglik: object
    kl_z: object
    kl_theta: object
    kl_dx: object
    elbo: object

    FIELDS = ("recon_loglik", "kl_z", "kl_theta", "kl_dx", "elbo")

    def mean(self):
        """Batch means as plain floats."""
        def m(t):
            return float(np.mean(t.data if isinstance(t, dc.Tensor) else t))
        return ElboBreakdown(*(m(getattr(self, f)) for f in self.FIELDS))

    def as_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


def elbo(image, posterior, decoded, priors, rotation, translation, dx_scale,
         include_kl_z=True):
    """Single-sample ELBO for each image.

    ``decoded`` must come from the sample drawn from ``posterior``.
    ``dx_scale`` converts the pixel-valued translation prior to normalized
    units. Terms for latents that are not inferred are exactly zero.
    """
    if rotation != posterior.has_rotation or translation != posterior.has_translation:
        raise ValueError("inference flags do not match the posterior")
    y = np.asarray(image, dtype=np.float64)
    if decoded.sigma is None:
        recon = bernoulli_loglik(y, decoded.mean)
    else:
        recon = gaussian_loglik(y, decoded.mean, decoded.sigma)
    zero = dc.Tensor(np.zeros(recon.shape))
    kl_z = kl_gaussian(posterior.mu_z, posterior.sigma_z, 1.0, event_dims=1) if include_kl_z else zero
    if rotation:
        if priors.theta_prior_mode == "uniform":
            kl_t = kl_theta_uniform(posterior.sigma_theta, priors.s_theta)
        else:
            kl_t = kl_gaussian(posterior.mu_theta, posterior.sigma_theta, priors.s_theta)
    else:
        kl_t = zero
    if translation:
        kl_d = kl_gaussian(posterior.mu_dx, posterior.sigma_dx, priors.s_dx * dx_scale, event_dims=1)
    else:
        kl_d = zero
    total = dc.sub(recon, dc.add(dc.add(kl_z, kl_t), kl_d))
    return ElboBreakdown(recon, kl_z, kl_t, kl_d, total)


def model_elbo(model, images, noise, priors, weights=None, freeze_z=False,
               encoder_images=None, theta_offset=None):
    """Encode, sample once with the given ``noise``, decode and score a batch.

    ``images`` is ``(B, n)``; it is always the reconstruction target.
    ``encoder_images`` (default: ``images``) is what the inference network
    sees, and ``theta_offset`` is subtracted from the predicted rotation mean
    before sampling. Together they implement rotation augmentation.
    """
    gen_w, enc_w = model.split(weights) if weights is not None else (None, None)
    enc_in = images if encoder_images is None else encoder_images
    post = encoder_forward(enc_in, model.encoder, enc_w)
    if theta_offset is not None:
        if not post.has_rotation:
            raise ValueError("a rotation offset needs rotation inference")
        post.mu_theta = dc.sub(post.mu_theta, theta_offset)
    sample = reparameterize(post, noise, freeze_z=freeze_z)
    decoded = decode_image(sample, model.grid, model.generator, gen_w)
    enc = model.encoder
    scale = translation_scale(model) if enc.translation else 1.0
    return elbo(images, post, decoded, priors, enc.rotation, enc.translation, scale,
                include_kl_z=not freeze_z)
