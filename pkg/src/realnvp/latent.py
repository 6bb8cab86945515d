"""Latent-space manipulations: manifold grids, scale ablation, extrapolation, attribute transfer.

All functions take and return model-space arrays (logit space for images) and
run the model with frozen running statistics.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, ShapeError
from .flow import FlowModel, MultiScaleFlow

ANGLES = tuple(k * math.pi / 4 for k in range(8))
DEFAULT_FRACTIONS = (100.0, 50.0, 25.0, 12.5, 6.25)
_CHUNK = 64


@contextmanager
def evaluation(model: FlowModel):
    was_training = model.training
    model.eval()
    try:
        yield model
    finally:
        model.train(was_training)


def _decode_chunked(model, z, cond=None, event_shape=None) -> np.ndarray:
    parts = []
    for start in range(0, len(z), _CHUNK):
        c = None if cond is None else cond[start:start + _CHUNK]
        parts.append(model.decode(z[start:start + _CHUNK], c, event_shape).data)
    return np.concatenate(parts)


def reconstruct(model: FlowModel, x, cond=None) -> np.ndarray:
    with evaluation(model):
        z = model.encode(x, cond)[0].data
        return _decode_chunked(model, z, cond)


# ---------------------------------------------------------------------------
# manifold


def manifold_latent(z1, z2, z3, z4, phi: float, phi_prime: float) -> np.ndarray:
    """Point on the 2-D manifold spanned by four latents, parametrized by two angles."""
    inner_a = math.cos(phi_prime) * z1 + math.sin(phi_prime) * z2
    inner_b = math.cos(phi_prime) * z3 + math.sin(phi_prime) * z4
    return math.cos(phi) * inner_a + math.sin(phi) * inner_b


def interpolate(model: FlowModel, inputs, angles=ANGLES, angles_prime=None, cond=None) -> np.ndarray:
    """Decode the manifold grid through four inputs.

    Returns ``(len(angles), len(angles_prime), *event_shape)``; cell ``[i, j]``
    decodes ``manifold_latent(..., angles[i], angles_prime[j])``.
    """
    inputs = np.asarray(inputs)
    if inputs.shape[0] != 4:
        raise ConfigError(f"manifold interpolation needs exactly 4 inputs, got {inputs.shape[0]}")
    angles_prime = angles if angles_prime is None else angles_prime
    with evaluation(model):
        z = model.encode(inputs, cond)[0].data
        grid = np.stack([manifold_latent(*z, a, b) for a in angles for b in angles_prime])
        grid_cond = None if cond is None else np.repeat(np.asarray(cond)[:1], len(grid), axis=0)
        out = _decode_chunked(model, grid, grid_cond)
    return out.reshape(len(angles), len(angles_prime), *out.shape[1:])


# ---------------------------------------------------------------------------
# conceptual compression


def latent_sizes(model: FlowModel, event_shape=None) -> list[int]:
    """Dimension count of each factored latent block, finest scale first."""
    return [int(np.prod(s)) for s in model.factored_shapes(event_shape)]


def achievable_fractions(model: FlowModel, event_shape=None) -> list[float]:
    """Keep percentages reachable by retaining whole coarse-scale blocks (0 included)."""
    sizes = latent_sizes(model, event_shape)
    total = sum(sizes)
    kept, out = 0, [0.0]
    for size in reversed(sizes):
        kept += size
        out.append(100.0 * kept / total)
    return out


def kept_dims(model: FlowModel, fraction: float, event_shape=None) -> int:
    options = achievable_fractions(model, event_shape)
    for option in options:
        if math.isclose(option, fraction, rel_tol=0, abs_tol=1e-9):
            return round(option / 100.0 * model.dim(event_shape))
    listed = ", ".join(f"{o:g}%" for o in options)
    raise ConfigError(f"keep fraction {fraction:g}% is not achievable by this scale structure; "
                      f"achievable: {listed}")


def compress(model: FlowModel, inputs, fractions=DEFAULT_FRACTIONS, seed: int = 0, cond=None) -> np.ndarray:
    """Keep the coarsest latents covering each fraction, resample the rest from the prior.

    Returns ``(len(fractions), N, *event_shape)``.
    """
    keeps = [kept_dims(model, f) for f in fractions]
    rng = np.random.default_rng(seed)
    rows = []
    with evaluation(model):
        z = model.encode(inputs, cond)[0].data
        d = z.shape[1]
        for keep in keeps:
            zz = z.copy()
            zz[:, :d - keep] = rng.standard_normal((z.shape[0], d - keep))
            rows.append(_decode_chunked(model, zz, cond))
    return np.stack(rows)


# ---------------------------------------------------------------------------
# extrapolation


def shape_chain(model: FlowModel, event_shape) -> list[tuple[str, tuple, tuple]]:
    """Per-layer (name, input shape, output shape) through the flow at ``event_shape``.

    Raises :class:`ShapeError` if a squeeze meets an odd extent or the total
    dimension is not conserved across the chain.
    """
    net = model.net
    h, w, c = event_shape if len(event_shape) == 3 else (1, 1, event_shape[0])
    total = h * w * c
    chain, emitted = [], 0
    if isinstance(net, MultiScaleFlow):
        for i, level in enumerate(net.levels):
            chain.append((f"level{i}.checkerboard", (h, w, c), (h, w, c)))
            if h % 2 or w % 2:
                raise ShapeError(f"squeeze at level {i}", (h, w, c))
            chain.append((f"level{i}.squeeze", (h, w, c), (h // 2, w // 2, 4 * c)))
            h, w, c = h // 2, w // 2, 4 * c
            chain.append((f"level{i}.channelwise", (h, w, c), (h, w, c)))
            chain.append((f"level{i}.factor_out", (h, w, c), (h, w, c // 2)))
            emitted += h * w * (c // 2)
            c //= 2
        chain.append(("final.checkerboard", (h, w, c), (h, w, c)))
    else:
        chain.append(("couplings", (h, w, c), (h, w, c)))
    emitted += h * w * c
    if emitted != total:
        raise ShapeError("latent dimension not conserved", (total,), (emitted,))
    return chain


def extrapolated_shape(model: FlowModel, factor: int) -> tuple:
    if not model.is_image:
        raise ConfigError("extrapolation needs an image model")
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"factor must be an integer >= 1, got {factor}")
    h, w, c = model.event_shape
    shape = (h * int(factor), w * int(factor), c)
    model.factored_shapes(shape)
    shape_chain(model, shape)
    return shape


def extrapolate(model: FlowModel, factor: int, n: int, seed: int = 0, cond=None) -> np.ndarray:
    """Sample at ``factor`` times the training resolution; factor 1 is plain sampling."""
    shape = extrapolated_shape(model, factor)
    with evaluation(model):
        return model.sample(n, seed, cond, shape)


# ---------------------------------------------------------------------------
# attribute transfer


def attr_transfer(model: FlowModel, inputs, labels, new_labels) -> np.ndarray:
    """Encode each input under its own attributes and decode under ``new_labels``."""
    if not model.cond_dim:
        raise ConfigError("attribute transfer needs a checkpoint trained with cond_dim > 0")
    labels = np.asarray(labels, dtype=np.float64)
    new_labels = np.asarray(new_labels, dtype=np.float64)
    if labels.shape != new_labels.shape:
        raise ShapeError("attribute transfer labels", labels.shape, new_labels.shape)
    with evaluation(model):
        z = model.encode(inputs, labels)[0].data
        return _decode_chunked(model, z, new_labels)


def permuted_labels(labels, seed: int = 0) -> np.ndarray:
    return np.asarray(labels)[np.random.default_rng(seed).permutation(len(labels))]
