"""Pixel coordinate grids and rigid transforms of coordinates.

Coordinates are Cartesian with the origin at the image center. Pixel
centers at the image edges sit at exactly -1 and +1. Pixels are stored
row-major with row 0 at the top, and the top row maps to ``y = +1``.

A pose ``(theta, dx)`` acts on a row vector ``x`` as ``x R(theta) + dx`` with
``R(theta) = [[cos, sin], [-sin, cos]]``, i.e. a counter-clockwise rotation of
the point by ``theta`` followed by a shift.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import _kernels
from .diffcore import as_tensor, custom_op


@dataclass(frozen=True)
class CoordGrid:
    height: int
    width: int
    coords: np.ndarray  # (height*width, 2), columns (x, y)

    @property
    def n(self):
        return self.height * self.width


def _axis(count, first, last):
    if count == 1:
        return np.zeros(1)
    return np.linspace(first, last, count)


def make_grid(height, width):
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    xs = _axis(width, -1.0, 1.0)
    ys = _axis(height, 1.0, -1.0)
    gx, gy = np.meshgrid(xs, ys)
    coords = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    coords.setflags(write=False)
    return CoordGrid(height, width, coords)


def pixels_to_normalized(height, width):
    """Normalized-units-per-pixel factors ``(fx, fy)`` along x and y."""
    fx = 2.0 / (width - 1) if width > 1 else 0.0
    fy = 2.0 / (height - 1) if height > 1 else 0.0
    return fx, fy


def rotation_matrix(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def inverse_pose(theta, dx):
    """The pose undoing ``x -> x R(theta) + dx``: ``(-theta, -dx R(-theta))``."""
    dx = np.asarray(dx, dtype=np.float64)
    return -theta, -(dx @ rotation_matrix(-theta))


def transform_coords(coords, theta, dx):
    """``coords R(theta) + dx``, differentiable in ``theta`` and ``dx``.

    ``coords`` is a constant ``(n, 2)`` array. ``theta`` is a scalar or a
    batch ``(B,)``; ``dx`` is ``(2,)`` or ``(B, 2)``. Batched inputs give a
    ``(B, n, 2)`` result. The angle is never reduced modulo 2*pi; cos and sin
    take care of the wrap.
    """
    coords = np.asarray(coords, dtype=np.float64)
    theta, dx = as_tensor(theta), as_tensor(dx)
    if dx.shape[-1] != 2:
        raise ValueError(f"translation must have 2 components, got shape {dx.shape}")
    X = coords[:, 0]
    Y = coords[:, 1]
    c = np.cos(theta.data)[..., None]
    s = np.sin(theta.data)[..., None]
    rx = X * c - Y * s
    ry = X * s + Y * c
    u = rx + dx.data[..., 0:1]
    v = ry + dx.data[..., 1:2]
    out = np.stack([u, v], axis=-1)

    def backward(g):
        gu = g[..., 0]
        gv = g[..., 1]
        gtheta = (gv * rx - gu * ry).sum(axis=-1) if theta.requires_grad else None
        if gtheta is not None and theta.ndim == 0:
            gtheta = np.asarray(gtheta.sum())
        gdx = g.sum(axis=-2) if dx.requires_grad else None
        if gdx is not None and dx.ndim == 1 and gdx.ndim > 1:
            gdx = gdx.sum(axis=0)
        return gtheta, gdx

    return custom_op(out, (theta, dx), backward, "transform_coords")


def resample(image, theta, dx_pixels, fill=0.0):
    """Bilinear resampling of one ``(h, w)`` image under a rigid pose.

    The output pixel at grid coordinate ``x`` reads the input at
    ``x R(theta) + dx``, where ``dx`` is given in pixels along (x, y).
    Reads landing outside ``[-1, 1]^2`` take ``fill``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    fx, fy = pixels_to_normalized(h, w)
    shift = np.array([[dx_pixels[0] * fx, dx_pixels[1] * fy]])
    return _kernels.resample(image[None], np.array([float(theta)]), shift, fill)[0]


def resample_stack(images, thetas, shifts, fill=0.0):
    """Batch form of :func:`resample` with shifts already in normalized units."""
    return _kernels.resample(images, thetas, shifts, fill)
