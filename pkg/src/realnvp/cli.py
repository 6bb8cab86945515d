"""``nvp`` command-line front end.

Configuration is a flat ``key = value`` text file (``#`` starts a comment).
Trailing ``key=value`` arguments override the file and ``--seed`` overrides
both. Every key is checked against :data:`SCHEMA` before any computation.

Exit codes: 0 success, 2 configuration or input error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import latent
from .data import (TOY_KINDS, ImageDataset, LabeledDataset, gen_toy2d, load_nvpd, load_points_csv,
                   logit_transform, dequantize, make_labeled_sprites, make_sprites, save_nvpd,
                   save_points_csv, to_pixels)
from .errors import ConfigError, DomainError, FormatError, NumericalDivergence, ShapeError
from .imageio import heatmap, tile, write_png
from .train import TrainConfig, evaluate, load_checkpoint, train

logger = logging.getLogger("realnvp")

COMMANDS = ("train", "eval", "sample", "interpolate", "compress", "extrapolate", "attr-transfer", "make-data")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


_TYPES = {int: int, float: float, bool: _bool, str: str}

# Keys beyond the training configuration, with (parser, default).
RUN_KEYS = {
    "train_data": (str, ""),
    "valid_data": (str, ""),
    "num_samples": (int, 64),
    "grid_cols": (int, 8),
    "inputs": (_ints, (0, 1, 2, 3)),
    "grid_steps": (int, 8),
    "fractions": (_floats, latent.DEFAULT_FRACTIONS),
    "num_inputs": (int, 8),
    "factor": (int, 2),
    "density_extent": (float, 6.0),
    "density_step": (float, 0.05),
    "dataset": (str, "sprites"),
    "num_train": (int, 4096),
    "num_valid": (int, 512),
    "image_size": (int, 8),
    "channels": (int, 1),
}

SCHEMA = {f.name: (_TYPES[type(f.default)], f.default) for f in dataclasses.fields(TrainConfig)}
SCHEMA.update(RUN_KEYS)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def resolve(raw: dict) -> dict:
    """Validate raw string values against the schema and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (parser, default) in SCHEMA.items():
        if key not in raw:
            values[key] = default
            continue
        try:
            values[key] = parser(raw[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return values


@dataclasses.dataclass
class RunConfig:
    command: str
    values: dict
    out: Path
    checkpoint: Path

    @property
    def train_config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.values.items() if k in names}).validate()

    def __getitem__(self, key):
        return self.values[key]


def build_run_config(args: argparse.Namespace) -> RunConfig:
    raw = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw.update(parse_config_text(path.read_text()))
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    values = resolve(raw)
    out = Path(args.out)
    checkpoint = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.npz"
    run = RunConfig(args.command, values, out, checkpoint)
    if args.command == "train":
        run.train_config  # validate before touching data
    return run


# ---------------------------------------------------------------------------
# data helpers


def load_dataset(path_text: str, kind: str, what: str):
    if not path_text:
        raise ConfigError(f"{what} is not set")
    path = Path(path_text)
    if not path.is_file():
        raise ConfigError(f"{what} not found: {path}")
    if kind == "toy":
        return load_points_csv(path)
    return load_nvpd(path, split=what)


def _valid(run: RunConfig, kind: str):
    return load_dataset(run["valid_data"] or run["train_data"], kind, "valid_data")


def _pick(data: ImageDataset, indices) -> ImageDataset:
    if max(indices) >= len(data) or min(indices) < 0:
        raise ConfigError(f"input index out of range for {len(data)} images")
    idx = list(indices)
    if isinstance(data, LabeledDataset):
        return LabeledDataset(data.images[idx], data.split, labels=data.labels[idx])
    return ImageDataset(data.images[idx], data.split)


def _to_model_space(data: ImageDataset, seed: int) -> np.ndarray:
    return logit_transform(dequantize(data.images, np.random.default_rng(seed)))[0]


def _checkpoint(run: RunConfig):
    if not run.checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {run.checkpoint}")
    return load_checkpoint(run.checkpoint)


def _require_image(ckpt, command):
    if ckpt.config.kind != "image":
        raise ConfigError(f"{command} needs an image checkpoint")


def _save_grid(run: RunConfig, name: str, u: np.ndarray, cols=None) -> Path:
    path = run.out / name
    write_png(path, tile(to_pixels(u), cols=cols))
    print(path)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train(run: RunConfig) -> int:
    config = run.train_config
    train_data = load_dataset(run["train_data"], config.kind, "train_data")
    valid_data = _valid(run, config.kind)
    result = train(config, train_data, valid_data, run.out)
    print(f"val_bpd {result.metrics[-1].split(',')[2]}")
    return EXIT_OK


def cmd_eval(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    data = _valid(run, ckpt.config.kind)
    bpd = evaluate(ckpt.model, data, ckpt.config.seed)
    line = f"val_bpd {bpd:.12g}"
    (run.out / "eval.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _sample_cond(ckpt, run, n):
    if not ckpt.config.cond_dim:
        return None
    rng = np.random.default_rng([run["seed"], 1])
    return rng.integers(0, 2, (n, ckpt.config.cond_dim)).astype(np.float64)


def cmd_sample(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    model, n = ckpt.model, run["num_samples"]
    model.eval()
    samples = model.sample(n, run["seed"], _sample_cond(ckpt, run, n))
    if ckpt.config.kind == "image":
        _save_grid(run, "samples.png", samples, run["grid_cols"])
        return EXIT_OK
    save_points_csv(run.out / "samples.csv", samples)
    print(run.out / "samples.csv")
    ext, step = run["density_extent"], run["density_step"]
    axis = np.arange(-ext, ext + step / 2, step)
    xx, yy = np.meshgrid(axis, axis, indexing="xy")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.concatenate([np.exp(model.log_likelihood(pts[i:i + 4096]).data)
                           for i in range(0, len(pts), 4096)])
    write_png(run.out / "density.png", heatmap(dens.reshape(xx.shape)[::-1]))
    print(run.out / "density.png")
    return EXIT_OK


def cmd_interpolate(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    _require_image(ckpt, "interpolate")
    if len(run["inputs"]) != 4:
        raise ConfigError(f"interpolate needs exactly 4 inputs, got {len(run['inputs'])}")
    data = _pick(_valid(run, "image"), run["inputs"])
    angles = tuple(k * 2 * math.pi / run["grid_steps"] for k in range(run["grid_steps"]))
    cond = data.labels[:1].repeat(4, 0).astype(np.float64) if ckpt.config.cond_dim else None
    grid = latent.interpolate(ckpt.model, _to_model_space(data, run["seed"]), angles, cond=cond)
    _save_grid(run, "interpolate.png", grid)
    return EXIT_OK


def cmd_compress(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    _require_image(ckpt, "compress")
    valid = _valid(run, "image")
    data = _pick(valid, range(min(run["num_inputs"], len(valid))))
    cond = data.labels.astype(np.float64) if ckpt.config.cond_dim else None
    rows = latent.compress(ckpt.model, _to_model_space(data, run["seed"]), run["fractions"], run["seed"], cond)
    _save_grid(run, "compress.png", rows)
    return EXIT_OK


def cmd_extrapolate(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    _require_image(ckpt, "extrapolate")
    n = run["num_samples"]
    samples = latent.extrapolate(ckpt.model, run["factor"], n, run["seed"], _sample_cond(ckpt, run, n))
    _save_grid(run, f"extrapolate_x{run['factor']}.png", samples, run["grid_cols"])
    return EXIT_OK


def cmd_attr_transfer(run: RunConfig) -> int:
    ckpt = _checkpoint(run)
    _require_image(ckpt, "attr-transfer")
    if not ckpt.config.cond_dim:
        raise ConfigError("attr-transfer needs a checkpoint trained with cond_dim > 0")
    valid = _valid(run, "image")
    if not isinstance(valid, LabeledDataset):
        raise ConfigError("attr-transfer needs a labeled dataset")
    data = _pick(valid, range(min(run["num_inputs"], len(valid))))
    labels = data.labels.astype(np.float64)
    new_labels = latent.permuted_labels(labels, run["seed"])
    u = _to_model_space(data, run["seed"])
    out = latent.attr_transfer(ckpt.model, u, labels, new_labels)
    _save_grid(run, "attr_transfer.png", np.stack([u, out]))
    rows = ["index,y,y_new"] + [f"{i},{''.join(map(str, a.astype(int)))},{''.join(map(str, b.astype(int)))}"
                                for i, (a, b) in enumerate(zip(labels, new_labels))]
    (run.out / "attr_transfer.csv").write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_make_data(run: RunConfig) -> int:
    kind, seed = run["dataset"], run["seed"]
    if kind in TOY_KINDS:
        for split, n, s in (("train", run["num_train"], seed), ("valid", run["num_valid"], seed + 1)):
            save_points_csv(run.out / f"{split}.csv", gen_toy2d(kind, n, s)[0])
            print(run.out / f"{split}.csv")
        return EXIT_OK
    makers = {"sprites": make_sprites, "labeled-sprites": make_labeled_sprites}
    if kind not in makers:
        raise ConfigError(f"unknown dataset {kind!r}; expected one of {sorted(makers) + list(TOY_KINDS)}")
    for split, n, s in (("train", run["num_train"], seed), ("valid", run["num_valid"], seed + 1)):
        ds = makers[kind](n, run["image_size"], run["channels"], s, split)
        save_nvpd(run.out / f"{split}.nvpd", ds)
        print(run.out / f"{split}.nvpd")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "compress": cmd_compress,
    "extrapolate": cmd_extrapolate,
    "attr-transfer": cmd_attr_transfer,
    "make-data": cmd_make_data,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nvp", description="Real NVP normalizing-flow toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", default="out", help="output directory (default: out)")
    parser.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.npz)")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_intermixed_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        run = build_run_config(args)
        run.out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[run.command](run)
    except NumericalDivergence as exc:
        print(f"nvp: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, FormatError, ShapeError, DomainError, OSError) as exc:
        print(f"nvp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
