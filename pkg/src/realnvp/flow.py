"""Bijections and the multi-scale flow built from them.

Every bijection maps NHWC tensors and exposes ``forward(x, cond) -> (y, log_det)``
with a per-sample log-determinant of shape (N,), plus ``inverse(y, cond) -> x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .conditioner import ResidualConditioner
from .errors import NumericalDivergence, ShapeError
from .layers import BatchNorm, Module, reusing_statistics
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Mask:
    pattern: np.ndarray
    kind: str
    parity: int


def make_checkerboard_mask(height: int, width: int, channels: int, parity: int) -> Mask:
    """Spatial mask equal to 1 where ``i + j + parity`` is odd, repeated over channels."""
    if height < 1 or width < 1 or channels < 1:
        raise ValueError(f"mask extents must be positive, got {(height, width, channels)}")
    i, j = np.indices((height, width))
    plane = ((i + j + parity) % 2 == 1).astype(T.get_default_dtype())
    pattern = np.repeat(plane[:, :, None], channels, axis=2)
    return Mask(pattern, "checkerboard", parity % 2)


def make_channel_mask(channels: int, parity: int) -> Mask:
    """1 on the first half of the channels for parity 0, the complement for parity 1."""
    if channels < 2 or channels % 2:
        raise ValueError(f"channel mask needs an even channel count >= 2, got {channels}")
    pattern = np.zeros(channels, dtype=T.get_default_dtype())
    pattern[: channels // 2] = 1.0
    if parity % 2:
        pattern = 1.0 - pattern
    return Mask(pattern, "channelwise", parity % 2)


def _zeros_logdet(n: int) -> Tensor:
    return Tensor(np.zeros(n))


class Bijection(Module):
    def forward(self, x: Tensor, cond=None) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def inverse(self, y: Tensor, cond=None) -> Tensor:
        raise NotImplementedError


class CouplingLayer(Bijection):
    """Affine coupling ``y = b*x + (1-b)*(x*exp(s(b*x)) + t(b*x))``.

    The mask is rebuilt (and cached) for whatever spatial size comes in, so a
    trained layer also runs on larger images.
    """

    def __init__(self, kind: str, parity: int, conditioner: ResidualConditioner, index: int | None = None):
        if kind not in ("checkerboard", "channelwise"):
            raise ValueError(f"unknown mask kind {kind!r}")
        self.kind = kind
        self.parity = parity
        self.conditioner = conditioner
        self.index = index
        self._masks: dict[tuple, Mask] = {}

    def mask(self, shape: tuple) -> Mask:
        h, w, c = shape[-3:]
        key = (h, w, c)
        m = self._masks.get(key)
        if m is None:
            if self.kind == "checkerboard":
                m = make_checkerboard_mask(h, w, c, self.parity)
            else:
                m = make_channel_mask(c, self.parity)
            self._masks[key] = m
        return m

    def scale_translation(self, x: Tensor, cond=None) -> tuple[Tensor, Tensor]:
        """Masked conditioner outputs; zero at pass-through positions."""
        if x.ndim != 4 or x.shape[-1] != self.conditioner.channels:
            raise ShapeError(f"coupling layer {self.index}", x.shape, (None, None, None, self.conditioner.channels))
        b = self.mask(x.shape).pattern
        s, t = self.conditioner(x * b, cond)
        keep = 1.0 - b
        s, t = s * keep, t * keep
        if not (np.isfinite(s.data).all() and np.isfinite(t.data).all()):
            raise NumericalDivergence("non-finite scale/translation", where=f"coupling layer {self.index}")
        return s, t

    def forward(self, x, cond=None):
        s, t = self.scale_translation(x, cond)
        y = x * T.exp(s) + t
        if not np.isfinite(y.data).all():
            raise NumericalDivergence("non-finite coupling output", where=f"coupling layer {self.index}")
        return y, T.sum(s, axis=(1, 2, 3))

    def inverse(self, y, cond=None):
        s, t = self.scale_translation(y, cond)
        return (y - t) * T.exp(-s)


class BatchNormBijection(Bijection):
    """``x -> (x - mean) / sqrt(var + eps)`` with per-channel statistics.

    The log-determinant is ``-0.5 * sum log(var + eps)`` over every dimension
    of a sample, i.e. the per-channel term times the number of spatial positions.
    """

    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        self.norm = BatchNorm(channels, momentum, eps)

    @property
    def running_mean(self):
        return self.norm.running_mean

    @property
    def running_var(self):
        return self.norm.running_var

    @property
    def eps(self):
        return self.norm.eps

    def forward(self, x, cond=None):
        mu, var = self.norm.statistics(x)
        shifted = var + self.eps
        y = (x - mu) / T.sqrt(shifted)
        positions = int(np.prod(x.shape[1:-1])) if x.ndim > 2 else 1
        log_det = T.sum(T.log(shifted)) * (-0.5 * positions)
        return y, log_det + np.zeros(x.shape[0])

    def inverse(self, y, cond=None):
        norm = self.norm
        if norm.training and norm._last is not None:
            mu, var = norm._last
        else:
            mu, var = norm.running_mean, norm.running_var
        return y * np.sqrt(var + self.eps) + mu


def squeeze(x: Tensor) -> Tensor:
    """(..., s, s, c) -> (..., s/2, s/2, 4c).

    Each 2x2 block becomes one position whose channels are ordered top-left,
    top-right, bottom-left, bottom-right, each sub-pixel carrying its ``c``
    channels contiguously.
    """
    x = T.as_tensor(x)
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("squeeze (spatial extents must be even)", x.shape)
    k = len(lead)
    r = T.reshape(x, (*lead, h // 2, 2, w // 2, 2, c))
    r = T.transpose(r, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(r, (*lead, h // 2, w // 2, 4 * c))


def unsqueeze(x: Tensor) -> Tensor:
    x = T.as_tensor(x)
    *lead, h, w, c4 = x.shape
    if c4 % 4:
        raise ShapeError("unsqueeze (channels must be a multiple of 4)", x.shape)
    c = c4 // 4
    k = len(lead)
    r = T.reshape(x, (*lead, h, w, 2, 2, c))
    r = T.transpose(r, (*range(k), k, k + 2, k + 1, k + 3, k + 4))
    return T.reshape(r, (*lead, 2 * h, 2 * w, c))


class Squeeze(Bijection):
    def forward(self, x, cond=None):
        return squeeze(x), _zeros_logdet(x.shape[0])

    def inverse(self, y, cond=None):
        return unsqueeze(y)


def compose_forward(bijections: Sequence[Bijection], x: Tensor, cond=None, log_det: Tensor | None = None):
    """Apply in order, accumulating log-determinants left to right."""
    total = _zeros_logdet(x.shape[0]) if log_det is None else log_det
    for b in bijections:
        x, ld = b.forward(x, cond)
        total = total + ld
    return x, total


def compose_inverse(bijections: Sequence[Bijection], z: Tensor, cond=None) -> Tensor:
    for b in reversed(bijections):
        z = b.inverse(z, cond)
    return z


class Sequential(Bijection):
    def __init__(self, layers: Sequence[Bijection]):
        self.layers = list(layers)

    def forward(self, x, cond=None, log_det=None):
        return compose_forward(self.layers, x, cond, log_det)

    def inverse(self, y, cond=None):
        return compose_inverse(self.layers, y, cond)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


class Level(Module):
    """One scale: checkerboard couplings, squeeze, channel-wise couplings."""

    def __init__(self, checker: Sequential, channel: Sequential):
        self.checker = checker
        self.channel = channel


def _coupling_stack(kind, count, channels, hidden, num_blocks, rng, *, kernel_size, cond_channels,
                    batch_norm, momentum, eps):
    layers = []
    for i in range(count):
        net = ResidualConditioner(channels, hidden, num_blocks, rng, kernel_size=kernel_size,
                                  cond_channels=cond_channels, momentum=momentum, eps=eps)
        layers.append(CouplingLayer(kind, i % 2, net))
        if batch_norm:
            layers.append(BatchNormBijection(channels, momentum, eps))
    return Sequential(layers)


class MultiScaleFlow(Bijection):
    """Recursive coupling-squeeze-coupling stack with factor-out.

    At every level but the last, the channel-wise first half of the squeezed
    tensor is emitted as a latent block and the second half continues. The
    final level applies ``final_couplings`` checkerboard couplings. Hidden
    width doubles per level.
    """

    def __init__(self, in_channels: int, num_levels: int, hidden: int, num_blocks: int,
                 rng: np.random.Generator, *, kernel_size: int = 3, cond_channels: int = 0,
                 final_couplings: int = 4, batch_norm: bool = True,
                 momentum: float = 0.99, eps: float = 1e-5):
        if num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        opts = dict(kernel_size=kernel_size, cond_channels=cond_channels,
                    batch_norm=batch_norm, momentum=momentum, eps=eps)
        self.num_levels = num_levels
        self.in_channels = in_channels
        self.levels = []
        c = in_channels
        for i in range(num_levels - 1):
            width = hidden * 2 ** i
            checker = _coupling_stack("checkerboard", 3, c, width, num_blocks, rng, **opts)
            channel = _coupling_stack("channelwise", 3, 4 * c, width, num_blocks, rng, **opts)
            self.levels.append(Level(checker, channel))
            c = 2 * c
        self.final = _coupling_stack("checkerboard", final_couplings, c,
                                     hidden * 2 ** (num_levels - 1), num_blocks, rng, **opts)
        for index, layer in enumerate(l for l in self.modules() if isinstance(l, CouplingLayer)):
            layer.index = index

    def check_shape(self, shape: tuple) -> None:
        h, w, c = shape[-3:]
        factor = 2 ** self.num_levels
        if h % factor or w % factor or c != self.in_channels:
            raise ShapeError(f"multi-scale flow with {self.num_levels} levels "
                             f"(spatial extents must be divisible by {factor}, channels {self.in_channels})",
                             tuple(shape))

    def factored_shapes(self, shape: tuple) -> list[tuple]:
        self.check_shape(shape)
        h, w, c = shape[-3:]
        out = []
        for _ in self.levels:
            h, w, c = h // 2, w // 2, 4 * c
            out.append((h, w, c // 2))
            c //= 2
        out.append((h, w, c))
        return out

    def forward(self, x, cond=None):
        self.check_shape(x.shape)
        total = _zeros_logdet(x.shape[0])
        zs = []
        h = x
        for level in self.levels:
            h, total = level.checker.forward(h, cond, total)
            h = squeeze(h)
            h, total = level.channel.forward(h, cond, total)
            c = h.shape[-1]
            zs.append(T.take_last(h, 0, c // 2))
            h = T.take_last(h, c // 2, c)
        h, total = self.final.forward(h, cond, total)
        zs.append(h)
        return zs, total

    def inverse(self, zs, cond=None):
        h = self.final.inverse(zs[-1], cond)
        for level, z in zip(reversed(self.levels), reversed(zs[:-1])):
            h = T.concat([z, h], axis=-1)
            h = level.channel.inverse(h, cond)
            h = unsqueeze(h)
            h = level.checker.inverse(h, cond)
        return h

    def bijections(self) -> list[Bijection]:
        """Flat list of the layers in forward order (squeezes included, factor-out excluded)."""
        out = []
        for level in self.levels:
            out.extend(level.checker.layers)
            out.append(Squeeze())
            out.extend(level.channel.layers)
        out.extend(self.final.layers)
        return out


class VectorFlow(Bijection):
    """Flat stack of channel-wise couplings for D-vectors viewed as 1x1xD images."""

    def __init__(self, dim: int, num_couplings: int, hidden: int, num_blocks: int,
                 rng: np.random.Generator, *, cond_channels: int = 0, batch_norm: bool = True,
                 momentum: float = 0.99, eps: float = 1e-5):
        self.dim = dim
        self.stack = _coupling_stack("channelwise", num_couplings, dim, hidden, num_blocks, rng,
                                     kernel_size=1, cond_channels=cond_channels,
                                     batch_norm=batch_norm, momentum=momentum, eps=eps)
        for index, layer in enumerate(l for l in self.modules() if isinstance(l, CouplingLayer)):
            layer.index = index

    def check_shape(self, shape):
        if tuple(shape[-3:]) != (1, 1, self.dim):
            raise ShapeError("vector flow", tuple(shape), (1, 1, self.dim))

    def factored_shapes(self, shape):
        self.check_shape(shape)
        return [(1, 1, self.dim)]

    def forward(self, x, cond=None):
        self.check_shape(x.shape)
        y, ld = self.stack.forward(x, cond)
        return [y], ld

    def inverse(self, zs, cond=None):
        return self.stack.inverse(zs[-1], cond)


class FlowModel(Module):
    """A flow plus an isotropic standard Gaussian prior.

    ``event_shape`` is the per-sample data shape: (H, W, C) for images or (D,)
    for vectors. Latents are exchanged as flat (N, D) arrays ordered
    z^(1), ..., z^(L), each block flattened row-major.
    """

    def __init__(self, net: MultiScaleFlow | VectorFlow, event_shape: tuple, cond_dim: int = 0):
        self.net = net
        self.event_shape = tuple(event_shape)
        self.cond_dim = cond_dim
        net.factored_shapes(self._net_shape(self.event_shape))
        self.assign_names()

    @property
    def is_image(self) -> bool:
        return len(self.event_shape) == 3

    def _net_shape(self, event_shape):
        return tuple(event_shape) if len(event_shape) == 3 else (1, 1, event_shape[0])

    def _event_of(self, x_shape) -> tuple:
        return tuple(x_shape[1:])

    def factored_shapes(self, event_shape=None) -> list[tuple]:
        return self.net.factored_shapes(self._net_shape(event_shape or self.event_shape))

    def dim(self, event_shape=None) -> int:
        return int(np.prod(event_shape or self.event_shape))

    def coupling_layers(self) -> list[CouplingLayer]:
        return [m for m in self.modules() if isinstance(m, CouplingLayer)]

    def _check_cond(self, cond, n):
        if self.cond_dim and cond is None:
            raise ValueError("model is attribute-conditional; cond is required")
        if not self.cond_dim and cond is not None:
            raise ValueError("model is unconditional; cond must be None")
        if cond is not None:
            cond = np.asarray(cond, dtype=T.get_default_dtype())
            if cond.shape != (n, self.cond_dim):
                raise ShapeError("cond", cond.shape, (n, self.cond_dim))
        return cond

    def encode(self, x, cond=None) -> tuple[Tensor, Tensor]:
        """x -> (flat latent (N, D), log|det J| per sample)."""
        x = T.as_tensor(x)
        n = x.shape[0]
        cond = self._check_cond(cond, n)
        h = T.reshape(x, (n, *self._net_shape(self._event_of(x.shape))))
        zs, log_det = self.net.forward(h, cond)
        flat = T.concat([T.reshape(z, (n, -1)) for z in zs], axis=-1) if len(zs) > 1 else T.reshape(zs[0], (n, -1))
        return flat, log_det

    def decode(self, z, cond=None, event_shape=None) -> Tensor:
        """Flat latent (N, D) -> data tensor (N, *event_shape)."""
        z = T.as_tensor(z)
        n = z.shape[0]
        event_shape = tuple(event_shape or self.event_shape)
        cond = self._check_cond(cond, n)
        shapes = self.factored_shapes(event_shape)
        sizes = [int(np.prod(s)) for s in shapes]
        if z.shape[1] != sum(sizes):
            raise ShapeError("decode", z.shape, (n, sum(sizes)))
        zs, start = [], 0
        for s, k in zip(shapes, sizes):
            zs.append(T.reshape(T.take_last(z, start, start + k), (n, *s)))
            start += k
        if self.training:
            with reusing_statistics(self):
                h = self.net.inverse(zs, cond)
        else:
            h = self.net.inverse(zs, cond)
        return T.reshape(h, (n, *event_shape))

    def forward(self, x, cond=None):
        return self.encode(x, cond)

    def inverse(self, z, cond=None):
        return self.decode(z, cond)

    def log_likelihood(self, x, cond=None) -> Tensor:
        """Exact log density per sample under the change of variables."""
        z, log_det = self.encode(x, cond)
        d = z.shape[1]
        log_pz = T.sum(T.square(z), axis=1) * -0.5 - 0.5 * d * LOG_2PI
        out = log_pz + log_det
        if not np.isfinite(out.data).all():
            raise NumericalDivergence("non-finite log-likelihood", where="model output")
        return out

    def sample(self, n: int, seed: int, cond=None, event_shape=None) -> np.ndarray:
        """Draw ``n`` samples by pushing standard Gaussian noise through the inverse."""
        event_shape = tuple(event_shape or self.event_shape)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.dim(event_shape)))
        return self.decode(z, cond, event_shape).data


def build_image_flow(shape: tuple, num_levels: int = 2, hidden: int = 16, num_blocks: int = 1, seed: int = 0,
                     *, kernel_size: int = 3, cond_dim: int = 0, final_couplings: int = 4,
                     batch_norm: bool = True, momentum: float = 0.99, eps: float = 1e-5) -> FlowModel:
    h, w, c = shape
    if min(h, w) < 1:
        raise ShapeError("image shape", shape)
    rng = np.random.default_rng(seed)
    net = MultiScaleFlow(c, num_levels, hidden, num_blocks, rng, kernel_size=kernel_size,
                         cond_channels=cond_dim, final_couplings=final_couplings,
                         batch_norm=batch_norm, momentum=momentum, eps=eps)
    return FlowModel(net, shape, cond_dim)


def build_vector_flow(dim: int = 2, num_couplings: int = 8, hidden: int = 64, num_blocks: int = 1, seed: int = 0,
                      *, cond_dim: int = 0, batch_norm: bool = True,
                      momentum: float = 0.99, eps: float = 1e-5) -> FlowModel:
    rng = np.random.default_rng(seed)
    net = VectorFlow(dim, num_couplings, hidden, num_blocks, rng, cond_channels=cond_dim,
                     batch_norm=batch_norm, momentum=momentum, eps=eps)
    return FlowModel(net, (dim,), cond_dim)
