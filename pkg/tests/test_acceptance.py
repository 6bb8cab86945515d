"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints after
the run (see conftest.py).
"""

import dataclasses
import math
import time

import numpy as np
import pytest
from scipy import integrate, stats

from realnvp import latent
from realnvp.cli import main
from realnvp.data import dequantize, gen_toy2d, logit_transform, make_sprites, save_nvpd, to_pixels
from realnvp.conditioner import ResidualConditioner
from realnvp.flow import (BatchNormBijection, CouplingLayer, Squeeze, build_image_flow, compose_forward,
                          make_channel_mask, make_checkerboard_mask, squeeze, unsqueeze)
from realnvp.imageio import read_png
from realnvp.layers import preserved_statistics
from realnvp.tensor import GradTape, Tensor
from realnvp.train import AdamState, TrainConfig, build_model, evaluate, nll_loss, save_checkpoint, train

from conftest import ACCEPTANCE_LINES
from helpers import central_grad, log_abs_det, numerical_jacobian, randomize

# Toy mixture fit shared by criteria 5 and 11; criterion 4 runs a shorter version.
TOY_CONFIG = TrainConfig(kind="toy", batch_size=64, max_steps=5000, hidden=64, toy_couplings=8, num_blocks=1,
                         bn_momentum=0.9, eval_interval=500, seed=0)
IMAGE_CONFIG = TrainConfig(kind="image", batch_size=32, max_steps=10_000, hidden=8, num_levels=2,
                           bn_momentum=0.9, eval_interval=1000, seed=0)


def report(number, title, ok, detail, elapsed=None, budget=None):
    timing = "" if elapsed is None else f" [{elapsed:.1f}s of {budget:g}s]"
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}: {detail}{timing}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    assert ok, line


def warmed(model, rng, steps=5):
    """Give every batch-norm layer non-trivial running statistics, then switch to eval."""
    shape = (16, *model.event_shape)
    for _ in range(steps):
        model.encode(rng.normal(0.5, 2.0, size=shape))
    return model.eval()


@pytest.fixture(scope="module")
def toy_data():
    x, dist = gen_toy2d("gaussian-mixture", 20_000, 0)
    xv, _ = gen_toy2d("gaussian-mixture", 5000, 1)
    return x, xv, dist


@pytest.fixture(scope="module")
def toy_run(toy_data, tmp_path_factory):
    x, xv, _ = toy_data
    out = tmp_path_factory.mktemp("toy_a")
    start = time.perf_counter()
    result = train(TOY_CONFIG, x, xv, out)
    return result, out, time.perf_counter() - start


def test_01_invertibility():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    model = warmed(randomize(build_image_flow((8, 8, 1), num_levels=2, hidden=8, seed=1), rng, 0.2), rng)
    x = rng.normal(size=(100, 8, 8, 1)) * 2
    z, _ = model.encode(x)
    err = float(np.max(np.abs(model.decode(z).data - x)))
    elapsed = time.perf_counter() - start
    report(1, "invertibility", err < 1e-9 and elapsed < 60, f"max |f^-1(f(x)) - x| = {err:.2e} (< 1e-9)",
           elapsed, 60)


def _jacobian_gap(fn, x, analytic):
    return abs(analytic - log_abs_det(numerical_jacobian(fn, x)))


def test_02_jacobian_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    gaps = {"coupling": [], "batch-norm": [], "squeeze stack": [], "full model": []}
    for trial in range(20):
        net = randomize(ResidualConditioner(2, 4, 1, np.random.default_rng(trial)), rng).eval()
        layer = CouplingLayer("checkerboard" if trial % 2 else "channelwise", trial % 2, net)
        x = rng.normal(size=(1, 4, 4, 2))
        f = lambda v: layer.forward(Tensor(v.reshape(x.shape)))[0].data
        gaps["coupling"].append(_jacobian_gap(f, x, layer.forward(Tensor(x))[1].item()))

        bn = BatchNormBijection(3, momentum=0.9)
        bn.forward(Tensor(rng.normal(1.0, 2.0, size=(8, 2, 2, 3))))
        bn.eval()
        x = rng.normal(size=(1, 2, 2, 3))
        f = lambda v: bn.forward(Tensor(v.reshape(x.shape)))[0].data
        gaps["batch-norm"].append(_jacobian_gap(f, x, bn.forward(Tensor(x))[1].item()))

        nets = [randomize(ResidualConditioner(c, 4, 1, np.random.default_rng(100 + trial + c)), rng).eval()
                for c in (1, 4)]
        stack = [CouplingLayer("checkerboard", 0, nets[0]), Squeeze(), CouplingLayer("channelwise", 1, nets[1])]
        x = rng.normal(size=(1, 4, 4, 1))
        f = lambda v: compose_forward(stack, Tensor(v.reshape(x.shape)))[0].data
        gaps["squeeze stack"].append(_jacobian_gap(f, x, compose_forward(stack, Tensor(x))[1].item()))

        model = warmed(randomize(build_image_flow((4, 4, 2), num_levels=2, hidden=4, seed=trial), rng, 0.2),
                       rng)
        x = rng.normal(size=(1, 4, 4, 2))
        f = lambda v: model.encode(v.reshape(x.shape))[0].data
        gaps["full model"].append(_jacobian_gap(f, x, model.encode(x)[1].item()))
    worst = {k: max(v) for k, v in gaps.items()}
    elapsed = time.perf_counter() - start
    ok = all(len(v) == 20 for v in gaps.values()) and max(worst.values()) < 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (max gap < 1e-4, 20 trials each)"
    report(2, "jacobian oracle", ok, detail, elapsed, 300)


def test_03_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    model = randomize(build_image_flow((4, 4, 1), num_levels=2, hidden=1, seed=3), rng, 0.3)
    x = rng.normal(size=(3, 4, 4, 1))
    params = model.parameters()
    with preserved_statistics(model):
        with GradTape() as tape:
            loss = nll_loss(model, x).nll
        grads = tape.backward(loss, params)

    def nll(p, value):
        saved = p.data
        p.data = value
        with preserved_statistics(model):
            out = nll_loss(model, x).nll.item()
        p.data = saved
        return out

    worst, worst_name, count = 0.0, "", 0
    for p, g in zip(params, grads):
        numeric = central_grad(lambda v, p=p: nll(p, v), p.data, h=1e-6)
        err = np.max(np.abs(g - numeric) / np.maximum(np.maximum(np.abs(g), np.abs(numeric)), 1e-6))
        count += p.data.size
        if err > worst:
            worst, worst_name = float(err), p.name
    elapsed = time.perf_counter() - start
    report(3, "gradient oracle", worst < 1e-3 and elapsed < 300,
           f"{len(params)} tensors / {count} entries, worst rel err {worst:.1e} at {worst_name} (< 1e-3)",
           elapsed, 300)


def test_04_normalization(toy_data):
    x, xv, _ = toy_data
    start = time.perf_counter()
    config = dataclasses.replace(TOY_CONFIG, max_steps=1000)
    model = train(config, x, xv).model.eval()
    axis = np.arange(-6.0, 6.0 + 0.025, 0.05)
    xx, yy = np.meshgrid(axis, axis)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    dens = np.concatenate([np.exp(model.log_likelihood(pts[i:i + 8192]).data) for i in range(0, len(pts), 8192)])
    mass = float(integrate.trapezoid(integrate.trapezoid(dens.reshape(xx.shape), axis, axis=1), axis))
    elapsed = time.perf_counter() - start
    report(4, "normalization", abs(mass - 1) < 1e-2 and elapsed < 120,
           f"trapezoid mass on [-6,6]^2 step 0.05 = {mass:.5f} (1 +- 1e-2)", elapsed, 120)


def test_05_toy_density_fit(toy_run, toy_data):
    result, _, train_seconds = toy_run
    _, xv, dist = toy_data
    start = time.perf_counter()
    model = result.model.eval()
    val_nll = evaluate(model, xv) * math.log(2)
    entropy = dist.entropy(200_000, seed=11) / 2
    z = model.encode(gen_toy2d("gaussian-mixture", 10_000, 7)[0])[0].data
    ks = [float(stats.kstest(z[:, i], "norm").statistic) for i in range(2)]
    elapsed = train_seconds + time.perf_counter() - start
    gap = val_nll - entropy
    ok = abs(gap) < 0.3 and max(ks) < 0.05 and elapsed < 600
    report(5, "toy density fit", ok,
           f"val NLL {val_nll:.4f} vs entropy {entropy:.4f} nats/dim (gap {gap:+.4f}, |gap| < 0.3); "
           f"KS {ks[0]:.4f}, {ks[1]:.4f} (< 0.05)", elapsed, 600)


def test_06_image_fit(tmp_path):
    start = time.perf_counter()
    train_data = make_sprites(4096, size=8, seed=0)
    valid = make_sprites(512, size=8, seed=1, split="valid")
    identity_bpd = evaluate(build_model(IMAGE_CONFIG, (8, 8, 1)), valid, IMAGE_CONFIG.seed)
    result = train(IMAGE_CONFIG, train_data, valid, tmp_path)
    bpd = float(result.metrics[-1].split(",")[2])
    elapsed = time.perf_counter() - start
    ok = bpd < 8.0 and identity_bpd - bpd >= 1.0 and elapsed < 1800
    report(6, "desk-scale image fit", ok,
           f"val bpd {bpd:.4f} (< 8.0), identity {identity_bpd:.4f}, gain {identity_bpd - bpd:.4f} (>= 1.0)",
           elapsed, 1800)


def test_07_batch_norm_moving_average():
    start = time.perf_counter()
    bn = BatchNormBijection(1, momentum=0.9)
    batch = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
    exact, worst, mean = True, 0.0, 0.0
    for t in range(1, 51):
        bn.forward(batch)
        mean = 0.9 * mean + (1 - 0.9) * 1.0
        exact &= bn.running_mean[0] == mean
        worst = max(worst, abs(bn.running_mean[0] - (1 - 0.9 ** t)))
    elapsed = time.perf_counter() - start
    report(7, "batch-norm moving average", exact and worst < 1e-15 and elapsed < 1,
           f"50 steps bit-equal to the recursion; max |mu_t - (1 - 0.9^t)| = {worst:.1e}", elapsed, 1)


def test_08_squeeze_and_masks():
    start = time.perf_counter()
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    y = squeeze(Tensor(x)).data
    expected = np.array([[[0, 1, 4, 5], [2, 3, 6, 7]], [[8, 9, 12, 13], [10, 11, 14, 15]]], dtype=float)
    shape_ok = y.shape == (1, 2, 2, 4) and np.array_equal(y[0], expected)
    rnd = np.random.default_rng(808).normal(size=(3, 4, 4, 1))
    roundtrip = unsqueeze(squeeze(Tensor(rnd))).data.tobytes() == rnd.tobytes()
    checker = np.array_equal(make_checkerboard_mask(2, 2, 1, 0).pattern[..., 0], [[0, 1], [1, 0]])
    channel = np.array_equal(make_channel_mask(4, 0).pattern.ravel(), [1, 1, 0, 0])
    elapsed = time.perf_counter() - start
    report(8, "squeeze and masks", shape_ok and roundtrip and checker and channel and elapsed < 1,
           f"4x4x1 -> 2x2x4 {shape_ok}, bit-exact roundtrip {roundtrip}, checkerboard {checker}, "
           f"channel {channel}", elapsed, 1)


@pytest.fixture(scope="module")
def image_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("latent")
    rng = np.random.default_rng(909)
    config = TrainConfig(kind="image", num_levels=2, hidden=4, seed=5)
    model = warmed(randomize(build_model(config, (8, 8, 1)), rng, 0.2), rng)
    save_checkpoint(root / "checkpoint.npz", model, config, AdamState(), 0)
    valid = make_sprites(16, size=8, seed=9, split="valid")
    save_nvpd(root / "valid.nvpd", valid)
    return root, model, valid


def _model_space(images, seed):
    return logit_transform(dequantize(images, np.random.default_rng(seed)))[0]


def _cells(raster, rows, cols, size=8, pad=1):
    return np.stack([np.stack([raster[i * (size + pad):i * (size + pad) + size,
                                      j * (size + pad):j * (size + pad) + size] for j in range(cols)])
                     for i in range(rows)])


def test_09_manifold_endpoints(image_checkpoint):
    root, model, valid = image_checkpoint
    start = time.perf_counter()
    inputs = _model_space(valid.images[:4], 5)
    grid = latent.interpolate(model, inputs)
    recon = latent.reconstruct(model, inputs)
    err = float(np.max(np.abs(grid[0, 0] - recon[0])))
    code = main(["interpolate", "--out", str(root), f"valid_data={root}/valid.nvpd", "seed=5"])
    cells = _cells(read_png(root / "interpolate.png"), 8, 8)
    png_ok = code == 0 and np.array_equal(cells[0, 0], to_pixels(recon[0]))
    elapsed = time.perf_counter() - start
    report(9, "manifold endpoints", err < 1e-6 and png_ok and elapsed < 60,
           f"grid(0,0) vs reconstruction of input 1: {err:.1e} (< 1e-6); cmd_interpolate cell matches {png_ok}",
           elapsed, 60)


def test_10_compression_fractions(image_checkpoint):
    root, model, valid = image_checkpoint
    start = time.perf_counter()
    inputs = _model_space(valid.images[:8], 5)
    full = latent.compress(model, inputs, (100.0,), seed=5)
    err = float(np.max(np.abs(full[0] - inputs)))
    code = main(["compress", "--out", str(root), f"valid_data={root}/valid.nvpd", "seed=5", "fractions=100"])
    cells = _cells(read_png(root / "compress.png"), 1, 8)
    png_ok = code == 0 and np.array_equal(cells[0], valid.images[:8])
    ladder_ok = latent.DEFAULT_FRACTIONS == (100.0, 50.0, 25.0, 12.5, 6.25)
    deep = build_image_flow((32, 32, 1), num_levels=5, hidden=2).eval()
    kept = [latent.kept_dims(deep, f) for f in latent.DEFAULT_FRACTIONS]
    ladder_ok &= kept == [1024, 512, 256, 128, 64]
    rows = latent.compress(deep, np.random.default_rng(10).normal(size=(2, 32, 32, 1)), seed=1)
    ladder_ok &= rows.shape == (5, 2, 32, 32, 1)
    elapsed = time.perf_counter() - start
    report(10, "compression fractions", err < 1e-6 and png_ok and ladder_ok and elapsed < 60,
           f"100% keep error {err:.1e} (< 1e-6), cmd_compress cells equal inputs {png_ok}; "
           f"ladder {latent.DEFAULT_FRACTIONS} kept dims {kept}", elapsed, 60)


def test_11_determinism(toy_run, toy_data, tmp_path):
    _, first_dir, _ = toy_run
    x, xv, _ = toy_data
    train(TOY_CONFIG, x, xv, tmp_path)
    a = (first_dir / "metrics.csv").read_bytes()
    b = (tmp_path / "metrics.csv").read_bytes()
    rows = len(a.splitlines())
    report(11, "determinism", a == b and rows > 1,
           f"metrics.csv byte-identical across two seeded runs ({len(a)} bytes, {rows} lines)")
