"""Maximum-likelihood training: Adam, L2 on weight scales, metrics and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .conditioner import l2_penalty, weight_scale_params
from .data import ImageDataset, LabeledDataset, dequantize, logit_transform, random_flips
from .errors import ConfigError, FormatError, NumericalDivergence
from .flow import FlowModel, build_image_flow, build_vector_flow
from .layers import preserved_statistics
from .tensor import GradTape, Parameter

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "realnvp-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,train_nll,val_bpd"
_VALID_STREAM = 0x7661_6C69  # seed-sequence tag for the validation jitter stream
_EVAL_CHUNK = 256


@dataclass
class TrainConfig:
    kind: str = "image"  # "image" | "toy"
    batch_size: int = 64
    max_steps: int = 1000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2: float = 5e-5
    clip_norm: float = 100.0
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    batch_norm: bool = True
    num_levels: int = 2
    num_blocks: int = 1
    hidden: int = 16
    kernel_size: int = 3
    final_couplings: int = 4
    toy_couplings: int = 8
    cond_dim: int = 0
    flip: bool = True
    seed: int = 0
    eval_interval: int = 100
    checkpoint_interval: int = 0

    _TOPOLOGY = ("kind", "batch_norm", "num_levels", "num_blocks", "hidden", "kernel_size",
                 "final_couplings", "toy_couplings", "cond_dim")

    def validate(self) -> "TrainConfig":
        if self.kind not in ("image", "toy"):
            raise ConfigError(f"kind must be 'image' or 'toy', got {self.kind!r}")
        positive = ("batch_size", "max_steps", "lr", "adam_eps", "clip_norm", "bn_eps",
                    "num_levels", "num_blocks", "hidden", "kernel_size", "final_couplings",
                    "toy_couplings", "eval_interval")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if not 0 <= self.bn_momentum < 1:
            raise ConfigError("bn_momentum must lie in [0, 1)")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.l2 < 0 or self.cond_dim < 0 or self.checkpoint_interval < 0:
            raise ConfigError("l2, cond_dim and checkpoint_interval must be non-negative")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.checkpoint_interval % self.eval_interval:
            raise ConfigError("checkpoint_interval must be a multiple of eval_interval")
        return self

    def topology(self) -> dict:
        return {k: getattr(self, k) for k in self._TOPOLOGY}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def topology_hash(config: TrainConfig, event_shape) -> str:
    blob = json.dumps({"topology": config.topology(), "event_shape": list(event_shape)}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_model(config: TrainConfig, event_shape) -> FlowModel:
    event_shape = tuple(int(v) for v in event_shape)
    opts = dict(cond_dim=config.cond_dim, batch_norm=config.batch_norm,
                momentum=config.bn_momentum, eps=config.bn_eps)
    if config.kind == "image":
        return build_image_flow(event_shape, config.num_levels, config.hidden, config.num_blocks, config.seed,
                                kernel_size=config.kernel_size, final_couplings=config.final_couplings, **opts)
    return build_vector_flow(event_shape[0], config.toy_couplings, config.hidden, config.num_blocks,
                             config.seed, **opts)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Parameter], grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, applied to every parameter or to none."""
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise NumericalDivergence("non-finite gradient", where=f"parameter {p.name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g in zip(params, grads):
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        p.assign(p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# objective


class Loss(NamedTuple):
    objective: T.Tensor
    nll: T.Tensor
    penalty: T.Tensor


def nll_loss(model: FlowModel, batch, cond=None, l2: float = 0.0) -> Loss:
    """Mean negative log-likelihood of a preprocessed batch plus ``l2 * ||weight scales||^2``."""
    nll = -T.mean(model.log_likelihood(batch, cond))
    penalty = l2_penalty(weight_scale_params(model))
    objective = nll + penalty * l2
    return Loss(objective, nll, penalty)


def _is_image(data) -> bool:
    return isinstance(data, ImageDataset)


def _labels(data):
    return data.labels.astype(np.float64) if isinstance(data, LabeledDataset) else None


def preprocess(pixels: np.ndarray, rng: np.random.Generator, flip: bool = False):
    """uint8 images -> (logit-space batch, per-sample logit log-det)."""
    if flip:
        pixels = random_flips(pixels, rng)
    return logit_transform(dequantize(pixels, rng))


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_batch(data, config: TrainConfig, step: int):
    """Deterministic batch for ``step``: (model input, pre-transform log-det, cond)."""
    rng = step_rng(config.seed, step)
    n = len(data)
    idx = rng.choice(n, size=config.batch_size, replace=n < config.batch_size)
    if _is_image(data):
        u, ld = preprocess(data.images[idx], rng, config.flip)
        labels = _labels(data)
        return u, ld, None if labels is None else labels[idx]
    x = np.asarray(data)[idx]
    return x, np.zeros(len(idx)), None


def evaluate(model: FlowModel, data, seed: int = 0) -> float:
    """Bits/dim in eval mode (frozen running statistics), pixel scale for images.

    Validation jitter comes from a fixed stream so repeated calls agree bit for bit.
    """
    was_training = model.training
    model.eval()
    try:
        rng = np.random.default_rng([seed, _VALID_STREAM])
        labels = _labels(data) if _is_image(data) else None
        total, count = 0.0, 0
        n = len(data)
        dims = data.dims if _is_image(data) else int(np.asarray(data).shape[1])
        for start in range(0, n, _EVAL_CHUNK):
            stop = min(start + _EVAL_CHUNK, n)
            if _is_image(data):
                u, ld = preprocess(data.images[start:stop], rng)
                cond = None if labels is None else labels[start:stop]
            else:
                u, ld, cond = np.asarray(data)[start:stop], 0.0, None
            ll = model.log_likelihood(u, cond).data + ld
            total += float(np.sum(ll))
            count += stop - start
        return -total / count / dims / math.log(2.0)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: FlowModel
    config: TrainConfig
    adam: AdamState
    step: int
    event_shape: tuple


def save_checkpoint(path, model: FlowModel, config: TrainConfig, adam: AdamState, step: int) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for name, arr in model.buffers().items():
        arrays[f"buffer/{name}"] = arr
    for name in adam.m:
        arrays[f"adam_m/{name}"] = adam.m[name]
        arrays[f"adam_v/{name}"] = adam.v[name]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": config.to_dict(),
        "event_shape": list(model.event_shape),
        "topology_hash": topology_hash(config, model.event_shape),
        "adam": {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step},
        "dtype": np.dtype(T.get_default_dtype()).name,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: TrainConfig | None = None) -> Checkpoint:
    """Rebuild model and optimizer state; rejects version or topology-hash mismatches."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a checkpoint archive ({exc})") from exc
    with archive:
        if "meta" not in archive.files:
            raise FormatError(f"{path}: missing metadata")
        meta = json.loads(archive["meta"].tobytes().decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint format/version "
                              f"{meta.get('format')!r}/{meta.get('version')!r}")
        config = TrainConfig.from_dict(meta["config"])
        shape = tuple(meta["event_shape"])
        digest = topology_hash(config, shape)
        if meta.get("topology_hash") != digest:
            raise FormatError(f"{path}: topology hash does not match stored configuration")
        if expected_config is not None and topology_hash(expected_config, shape) != digest:
            raise FormatError(f"{path}: checkpoint topology differs from the requested configuration")
        model = build_model(config, shape)
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in archive.files:
                raise FormatError(f"{path}: missing parameter {name}")
            p.assign(archive[key])
        model.load_buffers({name: archive[f"buffer/{name}"] for name in model.buffers()})
        a = meta["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"])
        for key in archive.files:
            if key.startswith("adam_m/"):
                name = key[len("adam_m/"):]
                adam.m[name] = archive[key]
                adam.v[name] = archive[f"adam_v/{name}"]
    return Checkpoint(model, config, adam, int(meta["step"]), shape)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: FlowModel
    adam: AdamState
    step: int
    metrics: list = field(default_factory=list)


def _snapshot(model: FlowModel, adam: AdamState) -> dict:
    # updates replace arrays rather than mutate them, so references suffice
    return {
        "params": {p.name: p.data for p in model.parameters()},
        "buffers": dict(model.buffers()),
        "m": dict(adam.m),
        "v": dict(adam.v),
        "step": adam.step,
    }


def _restore(model: FlowModel, adam: AdamState, snap: dict) -> None:
    for p in model.parameters():
        p.data = snap["params"][p.name]
    model.load_buffers(snap["buffers"])
    adam.m, adam.v, adam.step = dict(snap["m"]), dict(snap["v"]), snap["step"]


def _metrics_line(step, train_nll, val_bpd) -> str:
    return f"{step},{train_nll:.12g},{val_bpd:.12g}"


def _event_shape(data) -> tuple:
    return data.shape if _is_image(data) else (int(np.asarray(data).shape[1]),)


def _dims(data) -> int:
    return int(np.prod(_event_shape(data)))


def train(config: TrainConfig, train_data, valid_data, out_dir=None, resume: Checkpoint | None = None,
          clock=time.perf_counter) -> TrainResult:
    """Run seeded maximum-likelihood training.

    ``train_data``/``valid_data`` are image datasets or (N, D) point arrays.
    With ``out_dir`` set, ``metrics.csv`` (step, train_nll, val_bpd),
    ``timing.csv`` (step, wallclock) and ``checkpoint.npz`` are written there.
    ``train_nll`` is the window-averaged training NLL in nats/dim on the data
    scale; ``val_bpd`` is :func:`evaluate` on ``valid_data``. On divergence the
    last good state is checkpointed and :class:`NumericalDivergence` propagates.
    """
    config.validate()
    event_shape = _event_shape(train_data)
    dims = _dims(train_data)
    if resume is not None:
        if topology_hash(resume.config, resume.event_shape) != topology_hash(config, event_shape):
            raise ConfigError("resume checkpoint topology differs from the configuration")
        model, adam, start = resume.model, resume.adam, resume.step
    else:
        model = build_model(config, event_shape)
        adam = AdamState(config.lr, config.beta1, config.beta2, config.adam_eps)
        start = 0
    params = model.parameters()
    model.train()

    out = Path(out_dir) if out_dir is not None else None
    metrics: list[str] = []
    timing: list[str] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is not None and (out / "metrics.csv").exists():
            for line in (out / "metrics.csv").read_text().splitlines()[1:]:
                if line and int(line.split(",")[0]) <= start:
                    metrics.append(line)

    def flush():
        if out is None:
            return
        (out / "metrics.csv").write_text("\n".join([METRICS_HEADER, *metrics]) + "\n")
        (out / "timing.csv").write_text("\n".join(["step,wallclock", *timing]) + "\n")

    def checkpoint(step):
        if out is not None:
            save_checkpoint(out / "checkpoint.npz", model, config, adam, step)

    t0 = clock()
    window = []
    step = start
    good = _snapshot(model, adam)
    try:
        if start == 0:
            u, ld, cond = sample_batch(train_data, config, 0)
            with preserved_statistics(model):
                nll0 = float(-np.mean(model.log_likelihood(u, cond).data + ld)) / dims
            metrics.append(_metrics_line(0, nll0, evaluate(model, valid_data, config.seed)))
            timing.append(f"0,{clock() - t0:.3f}")
        for step in range(start + 1, config.max_steps + 1):
            good = _snapshot(model, adam)
            u, ld, cond = sample_batch(train_data, config, step)
            with GradTape() as tape:
                loss = nll_loss(model, u, cond, config.l2)
            grads = tape.backward(loss.objective, params)
            T.zero_grad(params)
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            adam_step(adam, params, grads)
            window.append((loss.nll.item() - float(np.mean(ld))) / dims)
            if step % config.eval_interval == 0 or step == config.max_steps:
                val = evaluate(model, valid_data, config.seed)
                metrics.append(_metrics_line(step, float(np.mean(window)), val))
                timing.append(f"{step},{clock() - t0:.3f}")
                logger.info("step %d train_nll %.4f val_bpd %.4f", step, np.mean(window), val)
                window = []
                if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                    checkpoint(step)
                flush()
    except NumericalDivergence:
        _restore(model, adam, good)
        last = max(step - 1, start)
        checkpoint(last)
        flush()
        logger.error("divergence at step %d; state after step %d saved", step, last)
        raise
    checkpoint(step)
    flush()
    return TrainResult(model, adam, step, metrics)


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, (float(v) for v in line.split(",")))) for line in lines[1:] if line]


def metrics_text(result: TrainResult) -> str:
    return "\n".join([METRICS_HEADER, *result.metrics]) + "\n"


def config_bytes(config: TrainConfig) -> bytes:
    buf = io.StringIO()
    json.dump(config.to_dict(), buf, sort_keys=True)
    return buf.getvalue().encode()
