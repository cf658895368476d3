"""Command-line entry point: ``spatial-vae {generate,train,eval,figures,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np

from . import data as D
from .evalkit import (correlation_report, estimate_elbo, interpolate_latents, manifold_grid,
                      render_png_grid, sample_images)
from .objective import ElboBreakdown
from .train import (CheckpointError, TrainConfig, fit, gradient_check, load_checkpoint)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ROOT_ENV = "SPATIAL_VAE_DATA_ROOT"

log = logging.getLogger("spatial_vae")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

# Dataset recipes: pose noise applied to MNIST digits (radians, pixels).
MNIST_RECIPES = {
    "mnist-plain": (0.0, 0.0),
    "mnist-rotated": (math.pi / 4, 1.4),
    "mnist-rot-trans": (math.pi / 4, 14.0),
}
DATASETS = ("hinge",) + tuple(MNIST_RECIPES)

_MNIST = dict(z_dim=2, epochs=100, hidden=(64, 64), s_dx=1.4)
_HINGE = dict(z_dim=1, epochs=500, hidden=(32, 32), theta_prior="uniform", s_theta=math.pi,
              rotation=True, translation=False, freeze_z_epochs=2, augment_rotation=True)
_HINGE_VANILLA = dict(epochs=500, hidden=(32, 32), generator="vanilla", rotation=False,
                      translation=False)
_WIDE = dict(s_theta=math.pi, s_dx=14.0)

PRESETS = {
    "mnist-plain": ("mnist-plain", dict(_MNIST, s_theta=math.pi / 8)),
    "mnist-rotated": ("mnist-rotated", dict(_MNIST, s_theta=math.pi / 4)),
    "mnist-rot-trans": ("mnist-rot-trans", dict(_MNIST, s_theta=math.pi / 4)),
    "mnist-rotated-wide": ("mnist-rotated", dict(_MNIST, **_WIDE)),
    "mnist-rot-trans-wide": ("mnist-rot-trans", dict(_MNIST, **_WIDE)),
    "hinge": ("hinge", _HINGE),
    "hinge-vanilla-1d": ("hinge", dict(_HINGE_VANILLA, z_dim=1)),
    "hinge-vanilla-2d": ("hinge", dict(_HINGE_VANILLA, z_dim=2)),
}


def preset_config(name, **overrides):
    """The :class:`TrainConfig` of a named preset with keyword overrides applied."""
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    values = dict(PRESETS[name][1])
    values.update(overrides)
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# flat key=value config files
# ---------------------------------------------------------------------------

_TUPLE_KEYS = {"hidden", "encoder_hidden"}
_BOOL_KEYS = {"rotation", "translation", "augment_rotation", "clamp_nonneg_mean"}
_INT_KEYS = {"z_dim", "epochs", "batch_size", "freeze_z_epochs", "seed", "eval_every",
             "eval_samples"}
_FLOAT_KEYS = {"lr", "s_theta", "s_dx"}
_STR_KEYS = {"generator", "theta_prior", "preset"}


def _parse_value(key, text):
    text = text.strip()
    if key in _TUPLE_KEYS:
        if text.lower() in ("", "none"):
            return None
        return tuple(int(p) for p in text.replace(" ", "").split(","))
    if key in _BOOL_KEYS:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if key in _INT_KEYS:
        return int(text)
    if key in _FLOAT_KEYS:
        return float(text)
    if key in _STR_KEYS:
        return text
    raise ValueError(f"unknown config key {key!r}")


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, text = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            try:
                values[key] = _parse_value(key, text)
            except ValueError as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from exc
    return values


def write_config_file(path, cfg: TrainConfig):
    with open(path, "w") as f:
        for key, value in cfg.to_dict().items():
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            f.write(f"{key} = {value}\n")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _data_root():
    return os.environ.get(DATA_ROOT_ENV, os.path.join(os.getcwd(), "data"))


def _load_split(path):
    """A dataset directory, or the ``train`` / ``test`` pair inside a generate output."""
    if os.path.exists(os.path.join(path, "meta.json")):
        return [D.load_dataset(path)]
    found = [os.path.join(path, s) for s in ("train", "test")
             if os.path.exists(os.path.join(path, s, "meta.json"))]
    if not found:
        raise D.DatasetError(f"{path}: no dataset found (expected meta.json or train/, test/)")
    return [D.load_dataset(p) for p in found]


def _train_test(path):
    parts = {ds.split: ds for ds in _load_split(path)}
    train = parts.get("train") or next(iter(parts.values()))
    return train, parts.get("test")


def _write_csv(path, header, rows):
    parent = os.path.dirname(os.fspath(path))
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    if args.dataset == "hinge":
        count = 20000 if args.count is None else args.count
        cfg = D.HingeConfig(count=count, seed=args.seed, height=args.size, width=args.size)
        ds = D.generate_hinge_dataset(cfg, standardize=False)
        ds.meta["dataset"] = "hinge"
        n_test = count // 5 if args.n_test is None else args.n_test
        train, test = D.train_test_split(ds, n_test)
        train, test = D.standardize_split(train, test)
    else:
        src = args.input or os.path.join(_data_root(), "mnist")
        path = D.find_idx_images(src) if os.path.isdir(src) else src
        if not os.path.exists(path):
            raise D.DatasetError(f"MNIST input not found: {path}")
        base = D.load_idx(path)
        if args.count is not None:
            if args.count > len(base):
                raise D.DatasetError(f"{path} holds {len(base)} images, {args.count} requested")
            base = base.subset(np.arange(args.count))
        theta_sigma, t_sigma = MNIST_RECIPES[args.dataset]
        ds = D.apply_random_transforms(base, theta_sigma, t_sigma, args.seed)
        ds.meta.update({"dataset": args.dataset, "source": os.path.basename(path),
                        "seed": args.seed})
        n_test = len(ds) // 5 if args.n_test is None else args.n_test
        train, test = D.train_test_split(ds, n_test)
    D.save_dataset(train, os.path.join(args.out, "train"))
    D.save_dataset(test, os.path.join(args.out, "test"))
    print(f"wrote {len(train)} train and {len(test)} test images to {args.out}")
    return EXIT_OK


TRAIN_FLAGS = ("z_dim", "epochs", "batch_size", "lr", "hidden", "encoder_hidden", "generator",
               "s_theta", "s_dx", "theta_prior", "freeze_z_epochs", "seed", "eval_every",
               "eval_samples")


def _train_config(args):
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    preset = args.preset or values.pop("preset", None)
    values.pop("preset", None)
    for key in TRAIN_FLAGS:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    if args.no_rotation:
        values["rotation"] = False
        values["augment_rotation"] = False
    if args.no_translation:
        values["translation"] = False
    if args.no_augment:
        values["augment_rotation"] = False
    if values.get("generator") == "vanilla":
        values["rotation"] = values["translation"] = values["augment_rotation"] = False
    if "seed" not in values:
        raise UsageError("train needs an explicit --seed (or seed in the config file)")
    if preset:
        return preset_config(preset, **values)
    return TrainConfig(**values)


HISTORY_HEADER = ("epoch",) + tuple(f"train_{f}" for f in ElboBreakdown.FIELDS) + \
    tuple(f"test_{f}" for f in ElboBreakdown.FIELDS)


def write_history(path, history):
    _write_csv(path, HISTORY_HEADER, [[_fmt(row.get(k)) for k in HISTORY_HEADER] for row in history])


def cmd_train(args):
    train, test = _train_test(args.data)
    if args.resume:
        state = load_checkpoint(args.resume)
        cfg = state.config
        if args.epochs is not None:
            cfg.epochs = args.epochs
            cfg.__post_init__()
    else:
        try:
            cfg = _train_config(args)
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from exc
        state = None
    os.makedirs(args.out, exist_ok=True)
    write_config_file(os.path.join(args.out, "config.txt"), cfg)
    try:
        state = fit(train, cfg, test, state, checkpoint_dir=os.path.join(args.out, "checkpoint"),
                    checkpoint_every=args.checkpoint_every)
    except ValueError as exc:
        raise D.DatasetError(str(exc)) from exc
    write_history(os.path.join(args.out, "history.csv"), state.history)
    last = state.history[-1] if state.history else {}
    print(f"trained {state.epoch} epochs; final train elbo {last.get('train_elbo', float('nan')):.4f}"
          + (f", test elbo {last['test_elbo']:.4f}" if "test_elbo" in last else ""))
    return EXIT_OK


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    datasets = []
    for path in args.data:
        datasets.extend(_load_split(path))
    rows, corr_keys = [], []
    for ds in datasets:
        try:
            br = estimate_elbo(ds, state.model, state.config.priors, args.k, seed=args.seed)
            report = correlation_report(ds, state.model)
        except ValueError as exc:
            raise D.DatasetError(str(exc)) from exc
        row = {"split": ds.split, "n_images": len(ds)}
        row.update({f: getattr(br, f) for f in ElboBreakdown.FIELDS})
        for c in report:
            key = f"corr_{c.latent}_{c.factor}"
            row[key] = c.coefficient
            row["abs_" + key] = c.magnitude
            if key not in corr_keys:
                corr_keys.append(key)
        rows.append(row)
    header = ["split", "n_images", *ElboBreakdown.FIELDS]
    for k in corr_keys:
        header += [k, "abs_" + k]
    out_rows = [[_fmt(r.get(h)) for h in header] for r in rows]
    if args.out:
        _write_csv(args.out, header, out_rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(out_rows)
    return EXIT_OK


def cmd_figures(args):
    state = load_checkpoint(args.checkpoint)
    model = state.model
    if args.kind == "manifold":
        if model.z_dim > 2:
            raise UsageError(f"manifold figures need z_dim <= 2; this model has z_dim={model.z_dim}")
        images, _ = manifold_grid(model, args.grid)
        cols = args.grid
    elif args.kind == "samples":
        images, _ = sample_images(model, args.n, seed=args.seed)
        cols = args.cols or int(math.ceil(math.sqrt(args.n)))
    else:
        if not args.data:
            raise UsageError("interpolate needs --data")
        ds = _load_split(args.data)[0]
        if (ds.height, ds.width) != (model.height, model.width):
            raise D.DatasetError("dataset geometry does not match the model")
        a, b = args.pair
        if not (0 <= a < len(ds) and 0 <= b < len(ds)):
            raise UsageError(f"image indices must lie in [0, {len(ds)})")
        images, _ = interpolate_latents(model, ds.images[a], ds.images[b], args.steps)
        cols = args.steps
    render_png_grid(images, cols, args.out)
    print(f"wrote {len(images)} tiles to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    if not args.epsilon > 0:
        raise UsageError("--epsilon must be positive")
    err = gradient_check(args.size, args.size, args.z_dim, tuple(args.hidden), args.images,
                         args.pixel_model, not args.no_rotation, not args.no_translation,
                         args.epsilon, args.seed)
    ok = err <= args.tolerance
    print(f"max relative error {err:.3e} (tolerance {args.tolerance:.0e}): {'ok' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    p = _Parser(prog="spatial-vae", description="Spatial VAEs with explicit pose inference.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="build a dataset directory with train/ and test/ splits")
    g.add_argument("dataset", choices=DATASETS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, help="images before splitting (hinge default 20000)")
    g.add_argument("--n-test", type=int, help="held-out images (default count / 5)")
    g.add_argument("--in", dest="input", help=f"MNIST IDX file or directory "
                                               f"(default ${DATA_ROOT_ENV}/mnist)")
    g.add_argument("--size", type=int, default=40, help="hinge image side in pixels")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model; writes checkpoint/, history.csv, config.txt")
    t.add_argument("--data", required=True, help="dataset directory (with train/ and test/)")
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--config", help="flat key = value file; flags override it")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--z-dim", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--hidden", type=_int_list)
    t.add_argument("--encoder-hidden", type=_int_list)
    t.add_argument("--generator", choices=("spatial", "vanilla"))
    t.add_argument("--s-theta", type=float)
    t.add_argument("--s-dx", type=float, help="translation prior std in pixels")
    t.add_argument("--theta-prior", choices=("gaussian", "uniform"))
    t.add_argument("--freeze-z-epochs", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-samples", type=int)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--no-rotation", action="store_true")
    t.add_argument("--no-translation", action="store_true")
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out ELBO and latent correlations as CSV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, nargs="+")
    e.add_argument("--k", type=int, default=1, help="noise samples per image")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="also write the CSV here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("figures", help="render manifold, interpolation or sample PNGs")
    f.add_argument("kind", choices=("manifold", "interpolate", "samples"))
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--grid", type=int, default=15)
    f.add_argument("--n", type=int, default=64)
    f.add_argument("--cols", type=int)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--data")
    f.add_argument("--pair", type=int, nargs=2, default=(0, 1), metavar=("A", "B"))
    f.add_argument("--steps", type=int, default=10)
    f.set_defaults(func=cmd_figures)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full ELBO gradient")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epsilon", type=float, default=1e-5)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--size", type=int, default=6)
    c.add_argument("--z-dim", type=int, default=2)
    c.add_argument("--hidden", type=_int_list, default=(8, 8))
    c.add_argument("--images", type=int, default=3)
    c.add_argument("--pixel-model", choices=("binary", "real"), default="binary")
    c.add_argument("--no-rotation", action="store_true")
    c.add_argument("--no-translation", action="store_true")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"spatial-vae: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, CheckpointError, OSError) as exc:
        print(f"spatial-vae: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"spatial-vae: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
