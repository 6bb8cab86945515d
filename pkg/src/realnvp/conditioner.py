"""Residual convolutional networks producing the scale and translation fields."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .layers import BatchNorm, Module, WeightNormConv2d
from .tensor import Parameter, Tensor


class ResidualBlock(Module):
    """norm -> relu -> conv -> norm -> relu -> conv, plus the identity skip."""

    def __init__(self, channels, kernel_size, rng, momentum=0.99, eps=1e-5):
        self.norm1 = BatchNorm(channels, momentum, eps)
        self.conv1 = WeightNormConv2d(channels, channels, kernel_size, rng)
        self.norm2 = BatchNorm(channels, momentum, eps)
        self.conv2 = WeightNormConv2d(channels, channels, kernel_size, rng)

    def __call__(self, h: Tensor) -> Tensor:
        r = self.conv1(T.relu(self.norm1(h)))
        r = self.conv2(T.relu(self.norm2(r)))
        return h + r


class ResidualConditioner(Module):
    """Shared convolutional trunk with a fused two-headed output.

    ``s = learned_scale * tanh(head_s)`` and ``t = head_t``. The output
    convolution starts with zero magnitude, so a fresh conditioner emits
    ``s == t == 0`` for every input. Attribute vectors (``cond``) are tiled to
    constant feature maps and concatenated onto the input channels.
    """

    def __init__(self, channels: int, hidden: int, num_blocks: int, rng: np.random.Generator,
                 kernel_size: int = 3, cond_channels: int = 0,
                 momentum: float = 0.99, eps: float = 1e-5):
        self.channels = channels
        self.hidden = hidden
        self.cond_channels = cond_channels
        self.num_blocks = num_blocks
        self.stem = WeightNormConv2d(channels + cond_channels, hidden, kernel_size, rng)
        self.blocks = [ResidualBlock(hidden, kernel_size, rng, momentum, eps) for _ in range(num_blocks)]
        self.out_norm = BatchNorm(hidden, momentum, eps)
        self.head = WeightNormConv2d(hidden, 2 * channels, kernel_size, rng, zero_init=True)
        self.learned_scale = Parameter(np.ones(channels), "learned_scale")

    def __call__(self, masked_x: Tensor, cond=None) -> tuple[Tensor, Tensor]:
        if masked_x.ndim != 4 or masked_x.shape[-1] != self.channels:
            raise ShapeError("conditioner input", masked_x.shape, (None, None, None, self.channels))
        h = masked_x
        if self.cond_channels:
            if cond is None:
                raise ValueError("conditioner was built for attribute conditioning; cond is required")
            h = T.concat([h, attribute_maps(cond, masked_x.shape)], axis=-1)
        h = self.stem(h)
        for block in self.blocks:
            h = block(h)
        out = self.head(T.relu(self.out_norm(h)))
        c = self.channels
        s = self.learned_scale * T.tanh(T.take_last(out, 0, c))
        t = T.take_last(out, c, 2 * c)
        return s, t

    def weight_scale_params(self) -> list[Parameter]:
        convs = [m for m in self.modules() if isinstance(m, WeightNormConv2d)]
        return [conv.g for conv in convs] + [self.learned_scale]


def attribute_maps(cond, shape) -> Tensor:
    """Broadcast an (N, k) attribute batch to constant (N, H, W, k) feature maps."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=T.get_default_dtype())
    n, h, w, _ = shape
    if cond.ndim != 2 or cond.shape[0] != n:
        raise ShapeError("attribute maps", cond.shape, (n, "k"))
    return Tensor(np.broadcast_to(cond[:, None, None, :], (n, h, w, cond.shape[1])))


def weight_scale_params(module: Module) -> list[Parameter]:
    """All weight-norm magnitudes and learned s-scales under ``module`` (the L2 target set)."""
    out = []
    for m in module.modules():
        if isinstance(m, ResidualConditioner):
            out.extend(m.weight_scale_params())
    return out


def l2_penalty(params) -> Tensor:
    total = Tensor(0.0)
    for p in params:
        total = total + T.sum(T.square(p))
    return total
