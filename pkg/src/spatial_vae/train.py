"""ADAM training of spatial and vanilla VAEs, with latent-freeze warmup,
rotation augmentation of the inference network, and checkpoints.

Randomness is keyed, not sequential: the noise for minibatch ``b`` of epoch
``e`` comes from a generator seeded with ``(seed, stream, e, b)``. A run
resumed from a checkpoint therefore replays exactly the draws an
uninterrupted run would have made.
"""

from dataclasses import asdict, dataclass, field, fields
import hashlib
import json
import logging
import math
import os
from typing import Optional

import numpy as np

from . import diffcore as dc
from .data import ImageDataset, make_batches
from .geometry import resample_stack
from .model import PriorConfig, VAEModel, build_model
from .objective import ElboBreakdown, model_elbo

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "spatial-vae-checkpoint/1"
NOISE_STREAM, AUGMENT_STREAM = 1, 2


class TrainingDivergedError(FloatingPointError):
    """The objective or its gradient stopped being finite."""


class CheckpointError(Exception):
    pass


@dataclass
class TrainConfig:
    z_dim: int = 2
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-4
    hidden: tuple = (500, 500)
    encoder_hidden: Optional[tuple] = None
    generator: str = "spatial"
    rotation: bool = True
    translation: bool = True
    s_theta: float = math.pi / 4
    s_dx: float = 1.4
    theta_prior: str = "gaussian"
    freeze_z_epochs: int = 0
    augment_rotation: bool = False
    clamp_nonneg_mean: bool = False
    seed: int = 0
    eval_every: int = 1
    eval_samples: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.encoder_hidden is not None:
            self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 <= self.freeze_z_epochs <= self.epochs:
            raise ValueError("freeze_z_epochs must lie in [0, epochs]")
        if self.augment_rotation and not self.rotation:
            raise ValueError("rotation augmentation needs rotation inference")
        if self.generator == "vanilla" and (self.rotation or self.translation):
            raise ValueError("the vanilla generator cannot infer rotation or translation")
        self.priors  # validates the prior settings

    @property
    def priors(self):
        return PriorConfig(self.s_theta, self.s_dx, self.theta_prior)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["encoder_hidden"] = None if self.encoder_hidden is None else list(self.encoder_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    model: VAEModel
    opt: dc.AdamState
    config: TrainConfig
    epoch: int = 0                  # completed epochs
    history: list = field(default_factory=list)


def init_state(ds: ImageDataset, cfg: TrainConfig):
    model = build_model(ds.height, ds.width, cfg.z_dim, cfg.hidden, ds.pixel_model,
                        cfg.generator, cfg.rotation, cfg.translation,
                        cfg.clamp_nonneg_mean, cfg.encoder_hidden, seed=cfg.seed)
    opt = dc.AdamState.for_params(model.parameters(), lr=cfg.lr)
    return TrainState(model, opt, cfg)


def _rng(cfg, stream, epoch, batch):
    return np.random.default_rng([cfg.seed, stream, epoch, batch])


def rotation_augment(images, rng):
    """Rotate each ``(h, w)`` image by ``gamma ~ U[0, 2 pi)``; returns images and gammas.

    An image with pose ``theta`` comes out with pose ``theta + gamma``, so
    subtracting ``gamma`` from the predicted rotation recovers ``theta``.
    """
    gammas = rng.uniform(0.0, 2.0 * math.pi, size=len(images))
    rotated = resample_stack(images, gammas, np.zeros((len(images), 2)))
    return rotated, gammas


def batch_objective(model, images, cfg, epoch, noise, weights=None, gammas=None):
    """ELBO breakdown of a batch of ``(B, h, w)`` images under the training rules."""
    flat = images.reshape(len(images), -1)
    enc_in = None
    if gammas is not None:
        rotated = resample_stack(images, gammas, np.zeros((len(images), 2)))
        enc_in = rotated.reshape(len(images), -1)
    return model_elbo(model, flat, noise, cfg.priors, weights,
                      freeze_z=epoch < cfg.freeze_z_epochs,
                      encoder_images=enc_in, theta_offset=gammas)


def _noise(model, n, rng):
    enc = model.encoder
    return rng.standard_normal((n, enc.n_latent))


def train_step(images, model, opt, cfg, epoch, batch_index=0):
    """One ADAM step on the batch-mean negative ELBO.

    Returns the updated model, optimizer state and the batch-mean breakdown
    (evaluated before the update).
    """
    noise = _noise(model, len(images), _rng(cfg, NOISE_STREAM, epoch, batch_index))
    gammas = None
    if cfg.augment_rotation:
        gammas = _rng(cfg, AUGMENT_STREAM, epoch, batch_index).uniform(
            0.0, 2.0 * math.pi, size=len(images))
    leaves = [dc.parameter(p) for p in model.parameters()]
    try:
        br = batch_objective(model, images, cfg, epoch, noise, leaves, gammas)
        loss = dc.neg(dc.tmean(br.elbo))
        grads = dc.backprop(loss, wrt=leaves)
        params, opt = dc.adam_step(model.parameters(), grads, opt)
    except FloatingPointError as exc:
        raise TrainingDivergedError(
            f"training diverged at epoch {epoch}, batch {batch_index}: {exc}") from exc
    return model.with_parameters(params), opt, br.mean()


def _weighted(acc, br, n):
    for f in ElboBreakdown.FIELDS:
        acc[f] = acc.get(f, 0.0) + getattr(br, f) * n


def fit(train_ds, cfg, test_ds=None, state=None, checkpoint_dir=None, checkpoint_every=0,
        stop_after=None):
    """Train until ``cfg.epochs`` epochs are complete.

    ``state`` resumes a previous run. ``stop_after`` ends this call after
    that many completed epochs (for interrupted-run tests). A checkpoint
    is written every ``checkpoint_every`` epochs and after the last epoch when
    ``checkpoint_dir`` is set.
    """
    from .evalkit import estimate_elbo

    state = state or init_state(train_ds, cfg)
    if (train_ds.height, train_ds.width) != (state.model.height, state.model.width):
        raise ValueError("dataset geometry does not match the model")
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(state.epoch, last):
        acc = {}
        for b, idx in enumerate(make_batches(len(train_ds), cfg.batch_size, cfg.seed, epoch)):
            state.model, state.opt, br = train_step(train_ds.images[idx], state.model,
                                                    state.opt, cfg, epoch, b)
            _weighted(acc, br, len(idx))
        row = {"epoch": epoch + 1}
        row.update({f"train_{f}": acc[f] / len(train_ds) for f in ElboBreakdown.FIELDS})
        if test_ds is not None and (epoch + 1) % cfg.eval_every == 0:
            te = estimate_elbo(test_ds, state.model, cfg.priors, cfg.eval_samples, seed=cfg.seed)
            row.update({f"test_{f}": getattr(te, f) for f in ElboBreakdown.FIELDS})
        state.history.append(row)
        state.epoch = epoch + 1
        log.info("epoch %d train elbo %.3f%s", epoch + 1, row["train_elbo"],
                 f" test elbo {row['test_elbo']:.3f}" if "test_elbo" in row else "")
        if checkpoint_dir and (
                state.epoch == last or (checkpoint_every and state.epoch % checkpoint_every == 0)):
            save_checkpoint(checkpoint_dir, state)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(directory, state: TrainState):
    """Write ``header.json``, ``params.f64`` and ``adam.f64``.

    Parameters are stored in model order (generator layers then encoder
    layers, each ``W`` then ``b``, row-major). ``adam.f64`` holds every first
    moment in the same order followed by every second moment. Values are
    little-endian float64 so a resumed run continues bit-exactly.
    """
    os.makedirs(directory, exist_ok=True)
    params_path = os.path.join(directory, "params.f64")
    adam_path = os.path.join(directory, "adam.f64")
    params = state.model.parameters()
    np.concatenate([p.reshape(-1) for p in params]).astype("<f8").tofile(params_path)
    np.concatenate([a.reshape(-1) for a in state.opt.m + state.opt.v]).astype("<f8").tofile(adam_path)
    opt = state.opt
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture": state.model.architecture(),
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "adam": {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
                 "step": opt.step},
        "shapes": [list(p.shape) for p in params],
        "rng": {"scheme": "keyed (seed, stream, epoch, batch)", "seed": state.config.seed,
                "next_epoch": state.epoch},
        "history": state.history,
        "checksums": {"params.f64": _digest(params_path), "adam.f64": _digest(adam_path)},
    }
    with open(os.path.join(directory, "header.json"), "w") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(directory):
    """Read a checkpoint directory back into a :class:`TrainState`."""
    try:
        with open(os.path.join(directory, "header.json")) as f:
            header = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: unreadable checkpoint header ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{directory}: unsupported checkpoint version {header.get('version')!r}")
    for name, digest in header["checksums"].items():
        path = os.path.join(directory, name)
        if not os.path.exists(path) or _digest(path) != digest:
            raise CheckpointError(f"{directory}: checksum mismatch for {name}")
    shapes = [tuple(s) for s in header["shapes"]]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.fromfile(os.path.join(directory, "params.f64"), dtype="<f8")
    moments = np.fromfile(os.path.join(directory, "adam.f64"), dtype="<f8")
    if flat.size != sum(sizes) or moments.size != 2 * sum(sizes):
        raise CheckpointError(f"{directory}: parameter files do not match the recorded shapes")

    def unpack(buf):
        out, k = [], 0
        for s, n in zip(shapes, sizes):
            out.append(buf[k:k + n].reshape(s).astype(np.float64))
            k += n
        return out

    model = VAEModel.from_architecture(header["architecture"], unpack(flat))
    a = header["adam"]
    opt = dc.AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                       unpack(moments[:sum(sizes)]), unpack(moments[sum(sizes):]))
    cfg = TrainConfig.from_dict(header["config"])
    return TrainState(model, opt, cfg, header["epoch"], header["history"])


def gradient_check(height=6, width=6, z_dim=2, hidden=(8, 8), n_images=3, pixel_model="binary",
                   rotation=True, translation=True, epsilon=1e-5, seed=0):
    """Max relative error between backprop and central differences on the full ELBO.

    A small random model and random images are scored with frozen noise, so
    the objective is a deterministic function of the parameters.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng([seed, 5])
    if pixel_model == "binary":
        images = rng.random((n_images, height * width))
    else:
        images = rng.standard_normal((n_images, height * width))
    model = build_model(height, width, z_dim, hidden, pixel_model, "spatial", rotation,
                        translation, seed=seed)
    noise = rng.standard_normal((n_images, model.encoder.n_latent))
    priors = PriorConfig()

    def objective(leaves):
        return dc.neg(dc.tmean(model_elbo(model, images, noise, priors, leaves).elbo))

    return dc.finite_diff_check(objective, model.parameters(), eps=epsilon)
