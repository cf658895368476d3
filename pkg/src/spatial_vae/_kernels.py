"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba is importable and ``SPATIAL_VAE_NUMBA`` is
not set to ``0``. Both paths produce the same values up to floating-point
reassociation; the numpy path is the reference.
"""

import math
import os

import numpy as np

# positions within this distance of a lattice point snap onto it, so that
# quarter-turn rotations permute pixels exactly
SNAP_TOL = 1e-9

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the dev env
    numba = None

USE_NUMBA = numba is not None and os.environ.get("SPATIAL_VAE_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# tanh backward: g * (1 - t^2)
# ---------------------------------------------------------------------------

def tanh_grad_numpy(g, t):
    out = np.multiply(t, t)
    np.subtract(1.0, out, out=out)
    np.multiply(out, g, out=out)
    return out


def _tanh_grad_loop(g, t):
    out = np.empty(g.shape)
    gf = g.reshape(-1)
    tf = t.reshape(-1)
    of = out.reshape(-1)
    for i in range(gf.shape[0]):
        ti = tf[i]
        of[i] = gf[i] * (1.0 - ti * ti)
    return out


# ---------------------------------------------------------------------------
# bilinear resampling of an image stack under a rigid coordinate transform
# ---------------------------------------------------------------------------

def _axis_positions(h, w):
    xs = np.linspace(-1.0, 1.0, w)
    ys = np.linspace(1.0, -1.0, h)
    return xs, ys


def resample_numpy(images, thetas, shifts, fill=0.0):
    """Reference implementation; see :func:`spatial_vae.geometry.resample`."""
    m, h, w = images.shape
    xs, ys = _axis_positions(h, w)
    gx, gy = np.meshgrid(xs, ys)
    out = np.empty_like(images)
    sx = (w - 1) / 2.0
    sy = (h - 1) / 2.0
    for k in range(m):
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        u = gx * c - gy * s + shifts[k, 0]
        v = gx * s + gy * c + shifts[k, 1]
        col = (u + 1.0) * sx
        row = (1.0 - v) * sy
        rc = np.rint(col)
        col = np.where(np.abs(col - rc) < SNAP_TOL, rc, col)
        rr = np.rint(row)
        row = np.where(np.abs(row - rr) < SNAP_TOL, rr, row)
        inside = (col >= 0.0) & (col <= w - 1) & (row >= 0.0) & (row <= h - 1)
        col = np.clip(col, 0.0, w - 1)
        row = np.clip(row, 0.0, h - 1)
        c0 = np.floor(col).astype(np.int64)
        r0 = np.floor(row).astype(np.int64)
        c1 = np.minimum(c0 + 1, w - 1)
        r1 = np.minimum(r0 + 1, h - 1)
        fc = col - c0
        fr = row - r0
        img = images[k]
        top = (1.0 - fc) * img[r0, c0] + fc * img[r0, c1]
        bot = (1.0 - fc) * img[r1, c0] + fc * img[r1, c1]
        val = (1.0 - fr) * top + fr * bot
        out[k] = np.where(inside, val, fill)
    return out


def _resample_loop(images, thetas, shifts, fill, xs, ys):
    m, h, w = images.shape
    out = np.empty_like(images)
    sx = (w - 1) / 2.0
    sy = (h - 1) / 2.0
    for k in range(m):
        c = math.cos(thetas[k])
        s = math.sin(thetas[k])
        dx = shifts[k, 0]
        dy = shifts[k, 1]
        for r in range(h):
            y = ys[r]
            for q in range(w):
                x = xs[q]
                u = x * c - y * s + dx
                v = x * s + y * c + dy
                col = (u + 1.0) * sx
                row = (1.0 - v) * sy
                rc = np.rint(col)
                if abs(col - rc) < SNAP_TOL:
                    col = rc
                rr = np.rint(row)
                if abs(row - rr) < SNAP_TOL:
                    row = rr
                if col < 0.0 or col > w - 1 or row < 0.0 or row > h - 1:
                    out[k, r, q] = fill
                    continue
                c0 = int(math.floor(col))
                r0 = int(math.floor(row))
                c1 = min(c0 + 1, w - 1)
                r1 = min(r0 + 1, h - 1)
                fc = col - c0
                fr = row - r0
                top = (1.0 - fc) * images[k, r0, c0] + fc * images[k, r0, c1]
                bot = (1.0 - fc) * images[k, r1, c0] + fc * images[k, r1, c1]
                out[k, r, q] = (1.0 - fr) * top + fr * bot
    return out


if numba is not None:
    tanh_grad_numba = numba.njit(cache=True)(_tanh_grad_loop)
    _resample_loop_jit = numba.njit(cache=True)(_resample_loop)

    def resample_numba(images, thetas, shifts, fill=0.0):
        xs, ys = _axis_positions(images.shape[1], images.shape[2])
        return _resample_loop_jit(images, thetas, shifts, float(fill), xs, ys)
else:  # pragma: no cover
    tanh_grad_numba = None
    resample_numba = None


def tanh_grad(g, t):
    if USE_NUMBA:
        return tanh_grad_numba(np.ascontiguousarray(g), np.ascontiguousarray(t))
    return tanh_grad_numpy(g, t)


def resample(images, thetas, shifts, fill=0.0):
    images = np.ascontiguousarray(images, dtype=np.float64)
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    shifts = np.ascontiguousarray(shifts, dtype=np.float64)
    m, h, w = images.shape
    if h < 2 or w < 2:
        raise ValueError("resampling needs at least 2 pixels along each axis")
    if USE_NUMBA:
        return resample_numba(images, thetas, shifts, fill)
    return resample_numpy(images, thetas, shifts, fill)
