"""Datasets, preprocessing with log-det accounting, and on-disk formats.

Images are uint8 arrays laid out (N, H, W, C). Preprocessing maps pixels to
the unbounded space the flow models:

    x  = pixel + u,  u ~ U[0, 1)                    (dequantize)
    p  = alpha + (1 - alpha) * x / 256
    u  = log(p) - log(1 - p)                         (logit_transform)

and the log-determinant of the second step is carried along so likelihoods
can be reported on the pixel scale.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

ALPHA = 0.05
LOG_256 = math.log(256.0)
NVPD_MAGIC = b"NVPD"
NVPD_VERSION = 1
_HEADER = struct.Struct("<4sIIHHH")

# Reference test-set result for the full-size CIFAR-10 model, for documentation only.
CIFAR10_REFERENCE_BPD = 3.49


# ---------------------------------------------------------------------------
# preprocessing


def dequantize(pixels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. Uniform[0, 1) jitter to integer pixels."""
    pixels = np.asarray(pixels)
    return pixels.astype(np.float64) + rng.random(pixels.shape)


def logit_transform(x: np.ndarray, alpha: float = ALPHA) -> tuple[np.ndarray, np.ndarray]:
    """Map x in [0, 256) to logit space; returns ``(u, log_det)`` with one log-det per sample."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x >= 256) or not np.all(np.isfinite(x)):
        raise DomainError("logit transform expects values in [0, 256)")
    p = alpha + (1.0 - alpha) * x / 256.0
    u = np.log(p) - np.log1p(-p)
    terms = math.log1p(-alpha) - LOG_256 - np.log(p) - np.log1p(-p)
    return u, _per_sample_sum(terms)


def inverse_logit(u: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-np.asarray(u, dtype=np.float64)))
    return (p - alpha) / (1.0 - alpha) * 256.0


def logit_log_det(x: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    return logit_transform(x, alpha)[1]


def _per_sample_sum(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], -1).sum(axis=1) if a.ndim > 1 else a


def to_pixels(u: np.ndarray, alpha: float = ALPHA) -> np.ndarray:
    """Display mapping: inverse logit, scale to [0, 256), floor, clamp to [0, 255]."""
    x = inverse_logit(u, alpha)
    return np.clip(np.floor(np.nan_to_num(x, nan=0.0)), 0, 255).astype(np.uint8)


def bits_per_dim(log_lik_u, logit_log_det, dims: int):
    """Negative base-2 log-likelihood per dimension on the pixel scale."""
    if dims < 1:
        raise ValueError("dims must be >= 1")
    return -(np.asarray(log_lik_u) + np.asarray(logit_log_det)) / (dims * math.log(2.0))


def horizontal_flip(x: np.ndarray, apply: bool = True) -> np.ndarray:
    """Reverse the width axis of an HWC image (or NHWC batch)."""
    x = np.asarray(x)
    return x[..., ::-1, :] if apply else x


def random_flips(batch: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flips = rng.random(batch.shape[0]) < p
    out = batch.copy()
    out[flips] = out[flips][..., ::-1, :]
    return out


# ---------------------------------------------------------------------------
# toy 2-d densities


@dataclass(frozen=True)
class GaussianMixture:
    means: np.ndarray
    std: float
    weights: np.ndarray

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, self.means.shape[1]))

    def log_density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        d = points.shape[1]
        sq = ((points[:, None, :] - self.means[None]) ** 2).sum(-1)
        log_comp = -0.5 * sq / self.std ** 2 - d * math.log(self.std) - 0.5 * d * math.log(2 * math.pi)
        a = log_comp + np.log(self.weights)[None]
        m = a.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]

    def density(self, points: np.ndarray) -> np.ndarray:
        return np.exp(self.log_density(points))

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    @property
    def covariance(self) -> np.ndarray:
        mu = self.mean
        centred = self.means - mu
        d = self.means.shape[1]
        return (self.weights[:, None, None] * np.einsum("ki,kj->kij", centred, centred)).sum(0) \
            + self.std ** 2 * np.eye(d)

    def entropy(self, n: int = 200_000, seed: int = 0) -> float:
        """Monte-Carlo differential entropy (nats, whole vector)."""
        x = self.sample(n, np.random.default_rng(seed))
        return float(-self.log_density(x).mean())


def symmetric_mixture(offset: float = 1.5, std: float = 0.5) -> GaussianMixture:
    """Four equal-weight isotropic components at (+-offset, +-offset)."""
    means = np.array([[offset, offset], [-offset, offset], [-offset, -offset], [offset, -offset]])
    return GaussianMixture(means, std, np.full(4, 0.25))


@dataclass(frozen=True)
class CheckerboardDensity:
    """Uniform density on the dark cells of a 4x4 unit checkerboard over [-2, 2]^2."""

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        x1 = rng.random(n) * 4 - 2
        x2 = rng.random(n) - rng.integers(0, 2, n) * 2
        x2 = x2 + np.floor(x1) % 2
        return np.stack([x1, x2], axis=1)

    def density(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points)
        inside = np.all(np.abs(points) < 2, axis=1)
        cell = (np.floor(points[:, 0]) + np.floor(points[:, 1])) % 2 == 0
        return np.where(inside & cell, 1.0 / 8.0, 0.0)


def two_moons(n: int, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    n_top = n // 2
    a = rng.random(n) * math.pi
    top = np.stack([np.cos(a), np.sin(a)], axis=1)
    bottom = np.stack([1 - np.cos(a), 0.5 - np.sin(a)], axis=1)
    pts = np.where((np.arange(n) < n_top)[:, None], top, bottom)
    return pts + noise * rng.standard_normal((n, 2))


TOY_KINDS = ("gaussian-mixture", "two-moons", "checkerboard-density")


def gen_toy2d(kind: str, n: int, seed: int, **params):
    """Seeded toy samples plus the generating distribution (``None`` when it has no closed form)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "gaussian-mixture":
        dist = symmetric_mixture(**params)
        return dist.sample(n, rng), dist
    if kind == "two-moons":
        return two_moons(n, rng, **params), None
    if kind == "checkerboard-density":
        dist = CheckerboardDensity()
        return dist.sample(n, rng), dist
    raise ValueError(f"unknown toy dataset kind {kind!r}; expected one of {TOY_KINDS}")


def save_points_csv(path, points: np.ndarray, header: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["x1", "x2"])
        for row in np.asarray(points):
            w.writerow([repr(float(v)) for v in row])


def load_points_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                if i == 0:
                    continue  # header line
                raise
    pts = np.asarray(rows, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"{path}: expected two numeric columns")
    return pts


# ---------------------------------------------------------------------------
# image datasets


@dataclass
class ImageDataset:
    images: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if self.images.dtype != np.uint8:
            if np.any(self.images < 0) or np.any(self.images > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            self.images = self.images.astype(np.uint8)

    def __len__(self):
        return self.images.shape[0]

    @property
    def shape(self) -> tuple:
        return self.images.shape[1:]

    @property
    def dims(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class LabeledDataset(ImageDataset):
    labels: np.ndarray = field(default=None)

    def __post_init__(self):
        super().__post_init__()
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.shape[0] != len(self):
            raise ValueError("labels must be (N, k) with one row per image")
        if np.any(self.labels > 1):
            raise ValueError("labels must be binary")

    @property
    def num_attributes(self) -> int:
        return self.labels.shape[1]


def save_nvpd(path, dataset: ImageDataset) -> None:
    """Write ``NVPD`` container: magic, u32 version, u32 count, u16 H/W/C, raw bytes."""
    imgs = np.ascontiguousarray(dataset.images, dtype=np.uint8)
    n, h, w, c = imgs.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(NVPD_MAGIC, NVPD_VERSION, n, h, w, c))
        fh.write(imgs.tobytes())
    if isinstance(dataset, LabeledDataset):
        save_labels_csv(labels_path(path), dataset.labels)


def load_nvpd(path, split: str = "train") -> ImageDataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    magic, version, n, h, w, c = _HEADER.unpack_from(blob, 0)
    if magic != NVPD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != NVPD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    expected = n * h * w * c
    payload = len(blob) - _HEADER.size
    if payload < expected:
        raise FormatError(f"{path}: truncated payload ({payload} of {expected} bytes)", offset=len(blob))
    if payload > expected:
        raise FormatError(f"{path}: {payload - expected} trailing bytes", offset=_HEADER.size + expected)
    images = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, h, w, c).copy()
    lp = labels_path(path)
    if lp.exists():
        return LabeledDataset(images, split, labels=load_labels_csv(lp))
    return ImageDataset(images, split)


def labels_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".labels.csv")


def save_labels_csv(path, labels: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in labels:
            w.writerow([int(v) for v in row])


def load_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[int(v) for v in row] for row in csv.reader(fh) if row], dtype=np.uint8)


# ---------------------------------------------------------------------------
# procedural sprites


def _gradient(size, rng):
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.random() * 2 * math.pi
    ramp = math.cos(angle) * xx + math.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    lo, hi = sorted(rng.integers(0, 256, 2))
    return lo + (hi - lo) * ramp


def _rectangle(size, rng, background=None, foreground=None):
    bg = rng.integers(0, 256) if background is None else background
    fg = rng.integers(0, 256) if foreground is None else foreground
    img = np.full((size, size), float(bg))
    h0, w0 = rng.integers(0, size // 2, 2)
    h1 = rng.integers(h0 + 2, size + 1)
    w1 = rng.integers(w0 + 2, size + 1)
    img[h0:h1, w0:w1] = fg
    return img


def _texture(size, rng):
    base = rng.random((size // 2, size // 2))
    img = np.kron(base, np.ones((2, 2)))
    return 64 + 128 * img


def make_sprites(n: int, size: int = 8, channels: int = 1, seed: int = 0, split: str = "train") -> ImageDataset:
    """Gradients, rectangles and blocky noise textures with small pixel noise."""
    rng = np.random.default_rng(seed)
    makers = (_gradient, _rectangle, _texture)
    out = np.empty((n, size, size, channels), dtype=np.uint8)
    for i in range(n):
        kind = makers[rng.integers(0, len(makers))]
        for c in range(channels):
            img = kind(size, rng) + rng.normal(0, 4, (size, size))
            out[i, :, :, c] = np.clip(np.rint(img), 0, 255)
    return ImageDataset(out, split)


def make_labeled_sprites(n: int, size: int = 8, channels: int = 1, seed: int = 0,
                         split: str = "train") -> LabeledDataset:
    """Sprites with two binary attributes: (bright background, rectangle present)."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, size, size, channels), dtype=np.uint8)
    labels = rng.integers(0, 2, (n, 2)).astype(np.uint8)
    for i in range(n):
        bright, rect = labels[i]
        bg = 200 if bright else 50
        for c in range(channels):
            if rect:
                img = _rectangle(size, rng, background=bg, foreground=255 - bg)
            else:
                img = np.full((size, size), float(bg))
            img = img + rng.normal(0, 6, (size, size))
            out[i, :, :, c] = np.clip(np.rint(img), 0, 255)
    return LabeledDataset(out, split, labels=labels)
