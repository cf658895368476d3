"""Datasets: IDX ingestion, random pose pipelines, the hinged-particle
generator, the on-disk dataset container, and minibatch schedules.

Every random draw for image ``i`` comes from its own generator seeded with
``(seed, i)``, so results do not depend on how the work is chunked.
"""

from dataclasses import asdict, dataclass, field
import csv
import gzip
import json
import math
import os
import struct
from typing import Optional

import numpy as np

from .geometry import make_grid, pixels_to_normalized, resample_stack

GENERATOR_VERSION = 1
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class DatasetError(Exception):
    """Malformed or inconsistent dataset input."""


@dataclass
class GroundTruth:
    theta: Optional[np.ndarray] = None          # radians, wrapped to (-pi, pi]
    dx_px: Optional[np.ndarray] = None          # (count, 2) pixels along (x, y)
    conformation: Optional[np.ndarray] = None   # hinge fraction in [0, 1]

    def __len__(self):
        for a in (self.theta, self.dx_px, self.conformation):
            if a is not None:
                return len(a)
        return 0

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return GroundTruth(pick(self.theta), pick(self.dx_px), pick(self.conformation))


@dataclass
class ImageDataset:
    images: np.ndarray              # (count, h, w) float64
    pixel_model: str = "binary"
    manifest: Optional[GroundTruth] = None
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 3:
            raise DatasetError(f"images must be (count, h, w), got {self.images.shape}")
        if self.manifest is not None and len(self.manifest) != len(self.images):
            raise DatasetError("manifest length does not match the image count")

    def __len__(self):
        return len(self.images)

    @property
    def height(self):
        return self.images.shape[1]

    @property
    def width(self):
        return self.images.shape[2]

    def flat(self):
        return self.images.reshape(len(self.images), -1)

    def subset(self, idx, split=None):
        idx = np.asarray(idx)
        man = None if self.manifest is None else self.manifest.subset(idx)
        return ImageDataset(self.images[idx], self.pixel_model, man, split or self.split,
                            dict(self.meta))


def wrap_angle(a):
    """Map angles to ``(-pi, pi]``."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), 2.0 * math.pi)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def _open(path, mode):
    path = os.fspath(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def read_idx(path):
    """Raw unsigned-byte IDX array (images ``0x803`` or labels ``0x801``)."""
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DatasetError(f"{path}: unsupported IDX type 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
        if count > len(raw):
            raise DatasetError(f"{path}: IDX dimensions {dims} exceed the file size")
    if len(raw) - header != count:
        raise DatasetError(f"{path}: truncated IDX payload ({len(raw) - header} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path, array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError("IDX writer only stores unsigned bytes")
    if array.ndim not in (1, 3):
        raise DatasetError("IDX writer stores label vectors or image stacks")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    buf = payload + np.ascontiguousarray(array).tobytes()
    if os.fspath(path).endswith(".gz"):
        # no name or mtime in the gzip header, so rewrites are byte-identical
        with open(path, "wb") as raw, \
                gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as f:
            f.write(buf)
    else:
        with open(path, "wb") as f:
            f.write(buf)


def load_idx(path):
    """An IDX image file as a binary-pixel dataset scaled to ``[0, 1]``."""
    arr = read_idx(path)
    if arr.ndim != 3:
        raise DatasetError(f"{path}: expected an image stack, got {arr.ndim} dims")
    return ImageDataset(arr / 255.0, "binary", meta={"source": os.path.basename(os.fspath(path))})


def find_idx_images(directory):
    names = sorted(os.listdir(directory))
    for name in names:
        if "idx3" in name:
            return os.path.join(directory, name)
    raise DatasetError(f"no IDX image file (*idx3*) in {directory}")


# ---------------------------------------------------------------------------
# random pose pipeline
# ---------------------------------------------------------------------------

def apply_random_transforms(ds: ImageDataset, theta_sigma, t_sigma, seed):
    """Rotate by ``theta ~ N(0, theta_sigma^2)`` then shift by ``N(0, t_sigma^2)`` pixels.

    The output pixel at ``x`` reads the input at ``x R(theta) + dx``. Draws
    are recorded in the manifest (theta wrapped to ``(-pi, pi]``).
    """
    count = len(ds)
    theta = np.empty(count)
    dx_px = np.empty((count, 2))
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        theta[i] = rng.normal(0.0, theta_sigma) if theta_sigma > 0 else 0.0
        dx_px[i] = rng.normal(0.0, t_sigma, size=2) if t_sigma > 0 else 0.0
    theta = wrap_angle(theta)
    fx, fy = pixels_to_normalized(ds.height, ds.width)
    shifts = dx_px * np.array([fx, fy])
    images = resample_stack(ds.images, theta, shifts)
    meta = dict(ds.meta)
    meta["transform"] = {"theta_sigma": theta_sigma, "t_sigma_px": t_sigma, "seed": seed}
    return ImageDataset(images, ds.pixel_model, GroundTruth(theta, dx_px), ds.split, meta)


# ---------------------------------------------------------------------------
# hinged two-lobe particles
# ---------------------------------------------------------------------------

@dataclass
class HingeConfig:
    """A fixed elongated body plus an arm swinging about a pivot at the body's end."""
    height: int = 40
    width: int = 40
    n_steps: int = 20
    step_degrees: float = 2.0
    noise_sigma: float = 25.0     # on the 0-255 template scale
    count: int = 20000
    seed: int = 0
    # lobe geometry, normalized coordinates of the unrotated template
    body_center: tuple = (-0.22, -0.05)
    body_sigma: tuple = (0.28, 0.15)
    pivot: tuple = (0.06, -0.05)
    arm_length: float = 0.34
    arm_sigma: tuple = (0.2, 0.09)   # along, across the arm
    arm_start_degrees: float = 40.0
    peak: float = 255.0

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError("n_steps must be at least 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")


def _lobe(x, y, center, sigma_along, sigma_across, angle):
    c, s = math.cos(angle), math.sin(angle)
    px, py = x - center[0], y - center[1]
    along = px * c + py * s
    across = -px * s + py * c
    return np.exp(-0.5 * ((along / sigma_along) ** 2 + (across / sigma_across) ** 2))


def render_hinge(cfg: HingeConfig, step, theta, coords=None):
    """Noise-free template for conformation ``step`` under in-plane rotation ``theta``.

    Rendering is analytic: pixel ``x`` shows the template density at
    ``x R(theta)``, the same convention as the model and the resampler. The
    two lobes combine as ``1 - (1 - body)(1 - arm)``, which keeps the peak at
    ``cfg.peak``.
    """
    if coords is None:
        coords = make_grid(cfg.height, cfg.width).coords
    c, s = math.cos(theta), math.sin(theta)
    x = coords[:, 0] * c - coords[:, 1] * s
    y = coords[:, 0] * s + coords[:, 1] * c
    body = _lobe(x, y, cfg.body_center, cfg.body_sigma[0], cfg.body_sigma[1], 0.0)
    phi = math.radians(cfg.arm_start_degrees + step * cfg.step_degrees)
    arm_center = (cfg.pivot[0] + cfg.arm_length * math.cos(phi),
                  cfg.pivot[1] + cfg.arm_length * math.sin(phi))
    arm = _lobe(x, y, arm_center, cfg.arm_sigma[0], cfg.arm_sigma[1], phi)
    density = 1.0 - (1.0 - body) * (1.0 - arm)
    return (cfg.peak * density).reshape(cfg.height, cfg.width)


def generate_hinge_dataset(cfg: HingeConfig, standardize=True):
    """Random conformation, uniform in-plane rotation, additive Gaussian noise.

    With ``standardize`` the stack is shifted and scaled to zero mean and
    unit variance over all images; use :func:`standardize_split` instead when
    the statistics should come from a training split only.
    """
    coords = make_grid(cfg.height, cfg.width).coords
    images = np.empty((cfg.count, cfg.height, cfg.width))
    steps = np.empty(cfg.count, dtype=np.int64)
    theta = np.empty(cfg.count)
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        steps[i] = rng.integers(cfg.n_steps)
        # uniform on (-pi, pi]
        theta[i] = math.pi - rng.uniform(0.0, 2.0 * math.pi)
        img = render_hinge(cfg, steps[i], theta[i], coords)
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        images[i] = img
    conformation = steps / (cfg.n_steps - 1)
    meta = {"generator": "hinge", "generator_version": GENERATOR_VERSION,
            "config": _jsonable(asdict(cfg)), "seed": cfg.seed}
    ds = ImageDataset(images, "real", GroundTruth(theta, None, conformation), "all", meta)
    if standardize:
        mean, std = float(images.mean()), float(images.std())
        ds = _apply_standardization(ds, mean, std)
    return ds


def _apply_standardization(ds, mean, std):
    if not std > 0:
        raise DatasetError("cannot standardize a constant image stack")
    meta = dict(ds.meta)
    meta["standardization"] = {"mean": mean, "std": std}
    return ImageDataset((ds.images - mean) / std, ds.pixel_model, ds.manifest, ds.split, meta)


def standardize_split(train: ImageDataset, test: ImageDataset):
    """Zero-mean unit-variance scaling of both splits with training statistics."""
    mean, std = float(train.images.mean()), float(train.images.std())
    return _apply_standardization(train, mean, std), _apply_standardization(test, mean, std)


def train_test_split(ds: ImageDataset, n_test):
    """First ``len - n_test`` images train, the rest test (images are i.i.d. by construction)."""
    n_train = len(ds) - n_test
    if n_train < 1 or n_test < 0:
        raise DatasetError(f"cannot hold out {n_test} of {len(ds)} images")
    return (ds.subset(np.arange(n_train), "train"),
            ds.subset(np.arange(n_train, len(ds)), "test"))


# ---------------------------------------------------------------------------
# container on disk
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_dataset(ds: ImageDataset, directory):
    """Write ``meta.json``, ``images.f32`` and, when ground truth exists, ``manifest.csv``."""
    os.makedirs(directory, exist_ok=True)
    fx, fy = pixels_to_normalized(ds.height, ds.width)
    meta = dict(ds.meta)
    meta.update({"format_version": 1, "shape": list(ds.images.shape),
                 "pixel_model": ds.pixel_model, "split": ds.split,
                 "px_to_norm": [fx, fy], "dtype": "float32-le", "order": "row-major"})
    meta.setdefault("standardization", None)
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(_jsonable(meta), f, indent=2, sort_keys=True)
        f.write("\n")
    ds.images.astype("<f4").tofile(os.path.join(directory, "images.f32"))
    path = os.path.join(directory, "manifest.csv")
    if ds.manifest is None:
        if os.path.exists(path):
            os.remove(path)
        return
    m = ds.manifest
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "theta_rad", "dx_px", "dy_px", "conformation"])
        for i in range(len(ds)):
            w.writerow([i,
                        "" if m.theta is None else repr(float(m.theta[i])),
                        "" if m.dx_px is None else repr(float(m.dx_px[i, 0])),
                        "" if m.dx_px is None else repr(float(m.dx_px[i, 1])),
                        "" if m.conformation is None else repr(float(m.conformation[i]))])


def load_dataset(directory):
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"{directory}: not a dataset directory (missing meta.json)")
    with open(meta_path) as f:
        meta = json.load(f)
    shape = tuple(meta["shape"])
    raw = np.fromfile(os.path.join(directory, "images.f32"), dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise DatasetError(f"{directory}: images.f32 holds {raw.size} values, expected {shape}")
    images = raw.reshape(shape).astype(np.float64)
    manifest = None
    man_path = os.path.join(directory, "manifest.csv")
    if os.path.exists(man_path):
        with open(man_path, newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != shape[0]:
            raise DatasetError(f"{directory}: manifest has {len(rows)} rows for {shape[0]} images")

        def column(name):
            if not rows or rows[0][name] == "":
                return None
            return np.array([float(r[name]) for r in rows])

        dx, dy = column("dx_px"), column("dy_px")
        manifest = GroundTruth(column("theta_rad"),
                               None if dx is None else np.stack([dx, dy], axis=1),
                               column("conformation"))
    keep = {k: v for k, v in meta.items()
            if k not in ("shape", "pixel_model", "split", "dtype", "order", "format_version")}
    return ImageDataset(images, meta["pixel_model"], manifest, meta["split"], keep)


# ---------------------------------------------------------------------------
# minibatches
# ---------------------------------------------------------------------------

def make_batches(ds, batch_size, seed, epoch=0):
    """Index batches of a fresh permutation for ``(seed, epoch)``; the last may be short.

    ``ds`` is a dataset or an item count.
    """
    n_items = ds if isinstance(ds, (int, np.integer)) else len(ds)
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    return [perm[i:i + batch_size] for i in range(0, n_items, batch_size)]
