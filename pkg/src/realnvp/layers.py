"""Module container, weight-normalized convolution and moving-average batch norm."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Parameter, Tensor


class Module:
    """Attribute-walking container for parameters, buffers and submodules."""

    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        """Yield ``(qualified_name, owner, attribute)`` for every non-trainable state array."""
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, self, key
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def buffers(self) -> dict[str, np.ndarray]:
        return {name: getattr(owner, attr) for name, owner, attr in self.named_buffers()}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for name, owner, attr in self.named_buffers():
            setattr(owner, attr, np.array(values[name], dtype=getattr(owner, attr).dtype))

    def assign_names(self) -> None:
        """Stamp every parameter with its dotted attribute path."""
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)


@contextmanager
def preserved_statistics(model: Module):
    """Snapshot running statistics and restore them on exit.

    Used by finite-difference oracles that call a train-mode forward many times.
    """
    saved = {k: v.copy() for k, v in model.buffers().items()}
    try:
        yield model
    finally:
        model.load_buffers(saved)


@contextmanager
def reusing_statistics(model: Module):
    """Make every batch norm replay the statistics of its most recent train-mode call.

    A train-mode inverse pass runs under this so it undoes the preceding forward
    pass exactly instead of re-estimating (and re-updating) statistics.
    """
    norms = [m for m in model.modules() if isinstance(m, BatchNorm)]
    previous = [m.reuse_last for m in norms]
    for m in norms:
        m.reuse_last = True
    try:
        yield model
    finally:
        for m, flag in zip(norms, previous):
            m.reuse_last = flag


class BatchNorm(Module):
    """Per-channel statistics with the lagged moving-average rule.

    In train mode the statistics used for normalization are
    ``rho * running + (1 - rho) * batch``; they also become the new running
    values. Gradients flow only through the batch part. ``momentum=0`` gives
    plain per-batch statistics. Reduction runs over every axis except the last.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.reuse_last = False
        self._last = None

    def statistics(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-1] != self.channels:
            raise ShapeError("batch norm", x.shape, (self.channels,))
        if self.reuse_last and self._last is not None:
            return Tensor(self._last[0]), Tensor(self._last[1])
        if not self.training:
            return Tensor(self.running_mean), Tensor(self.running_var)
        if x.shape[0] < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        axes = tuple(range(x.ndim - 1))
        batch_mean = T.mean(x, axes)
        batch_var = T.mean(T.square(x - batch_mean), axes)
        rho = self.momentum
        if rho:
            mu = batch_mean * (1.0 - rho) + rho * self.running_mean
            var = batch_var * (1.0 - rho) + rho * self.running_var
        else:
            mu, var = batch_mean, batch_var
        self.running_mean = mu.data.copy()
        self.running_var = var.data.copy()
        self._last = (self.running_mean, self.running_var)
        return mu, var

    def __call__(self, x: Tensor) -> Tensor:
        mu, var = self.statistics(x)
        return (x - mu) / T.sqrt(var + self.eps)


class WeightNormConv2d(Module):
    """Same-padded convolution with kernel ``g * v / ||v||`` (norm per output channel)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, zero_init: bool = False):
        self.in_channels = in_channels
        self.out_channels = out_channels
        shape = (kernel_size, kernel_size, in_channels, out_channels)
        self.v = Parameter(rng.normal(0.0, 0.05, size=shape), "v")
        self.g = Parameter(np.zeros(out_channels) if zero_init else np.ones(out_channels), "g")
        self.bias = Parameter(np.zeros(out_channels), "bias")

    def kernel(self) -> Tensor:
        norm = T.sqrt(T.sum(T.square(self.v), axis=(0, 1, 2)))
        return self.v * (self.g / norm)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel(), self.bias)
