import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realnvp import tensor as T
from realnvp.errors import DomainError, ShapeError
from realnvp.tensor import GradTape, Parameter, Tensor

from helpers import central_grad, rel_err


def grad_of(fn, *arrays):
    """Analytic gradients of scalar ``fn`` with respect to each array."""
    params = [Parameter(a.copy(), f"p{i}") for i, a in enumerate(arrays)]
    with GradTape() as tape:
        loss = fn(*params)
    return tape.backward(loss, params)


class TestElementwise:
    def test_exp_of_zero_is_one(self):
        np.testing.assert_array_equal(T.exp(Tensor(np.zeros((3, 2)))).data, np.ones((3, 2)))

    def test_tanh_zero_and_bounds(self):
        assert T.tanh(Tensor(0.0)).item() == 0.0
        x = np.random.default_rng(0).normal(0, 3, 1000)
        y = T.tanh(Tensor(x)).data
        assert np.all(np.abs(y) <= 1.0)
        assert np.all(np.abs(y[np.abs(x) < 15]) < 1.0)

    def test_mul_gradient_is_other_operand(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        ga, gb = grad_of(lambda p, q: T.sum(p * q), a, b)
        np.testing.assert_array_equal(ga, b)
        fd = central_grad(lambda v: np.sum(v * b), a)
        assert rel_err(ga, fd) < 1e-6

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as info:
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
        assert "(2, 3)" in str(info.value) and "(3, 2)" in str(info.value)

    def test_leading_dim_broadcast_is_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) * Tensor(np.ones((2, 1)))

    def test_trailing_vector_broadcast(self):
        x = np.arange(6.0).reshape(2, 3)
        v = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal((Tensor(x) + Tensor(v)).data, x + v)
        gv, = grad_of(lambda p: T.sum(Tensor(x) * p), v)
        np.testing.assert_array_equal(gv, x.sum(0))

    def test_log_of_non_positive_rejected(self):
        with pytest.raises(DomainError):
            T.log(Tensor(np.array([1.0, 0.0])))
        with pytest.raises(DomainError):
            T.log(Tensor(-1.0))

    def test_sqrt_of_negative_rejected(self):
        with pytest.raises(DomainError):
            T.sqrt(Tensor(np.array([-1e-3])))

    def test_elementwise_dispatch(self):
        a = Tensor(np.array([1.0, 2.0]))
        b = Tensor(np.array([3.0, 5.0]))
        np.testing.assert_array_equal(T.elementwise("sub", a, b).data, [-2.0, -3.0])
        np.testing.assert_array_equal(T.elementwise("neg", a).data, [-1.0, -2.0])
        with pytest.raises(ValueError):
            T.elementwise("cosh", a)

    def test_zero_size_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_forward_is_deterministic(self):
        x = np.random.default_rng(2).normal(size=(5, 5))
        f = lambda: T.sum(T.tanh(Tensor(x)) * T.exp(Tensor(x))).data
        assert f().tobytes() == f().tobytes()


UNARY = {
    "exp": T.exp,
    "tanh": T.tanh,
    "neg": T.neg,
    "square": T.square,
    "log": lambda a: T.log(T.square(a) + 0.5),
    "sqrt": lambda a: T.sqrt(T.square(a) + 0.5),
    "relu": lambda a: T.relu(a) * a,
}

BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.square(b) + 1.0),
}


class TestGradientProperties:
    @settings(max_examples=100, deadline=None)
    @given(kind=st.sampled_from(sorted(UNARY)), seed=st.integers(0, 2**31 - 1),
           shape=st.sampled_from([(3,), (2, 3), (2, 2, 2)]))
    def test_unary_matches_finite_differences(self, kind, seed, shape):
        x = np.random.default_rng(seed).normal(size=shape)
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        fn = UNARY[kind]
        g, = grad_of(lambda p: T.sum(fn(p) * fn(p)), x)
        fd = central_grad(lambda v: float(np.sum(fn(Tensor(v)).data ** 2)), x)
        assert rel_err(g, fd, floor=1e-6) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(kind=st.sampled_from(sorted(BINARY)), seed=st.integers(0, 2**31 - 1),
           broadcast=st.booleans())
    def test_binary_matches_finite_differences(self, kind, seed, broadcast):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(3,) if broadcast else (2, 3))
        fn = BINARY[kind]
        ga, gb = grad_of(lambda p, q: T.sum(T.tanh(fn(p, q))), a, b)
        loss = lambda u, v: float(np.sum(np.tanh(fn(Tensor(u), Tensor(v)).data)))
        assert rel_err(ga, central_grad(lambda u: loss(u, b), a), floor=1e-6) < 1e-4
        assert rel_err(gb, central_grad(lambda v: loss(a, v), b), floor=1e-6) < 1e-4

    def test_structural_ops_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(3, 2, 4))

        def fn(p):
            y = T.transpose(p, (1, 0, 2))
            y = T.concat([y, T.take_last(y, 1, 3)], axis=-1)
            z = T.reshape(T.take_last(y, 0, 4), (3, 2, 4))
            return T.sum(T.mean(z * Tensor(w), axis=1)) + T.sum(T.square(y))

        g, = grad_of(fn, x)
        assert rel_err(g, central_grad(lambda v: fn(Tensor(v)).item(), x)) < 1e-6


class TestBackward:
    def test_sum_of_squares_grad_is_exactly_2x(self):
        x = np.random.default_rng(4).normal(size=(3, 4))
        g, = grad_of(lambda p: T.sum(T.square(p)), x)
        np.testing.assert_array_equal(g, 2 * x)

    def test_unreachable_parameter_gets_exact_zero(self):
        a = Parameter(np.ones(3), "a")
        b = Parameter(np.ones((2, 2)), "b")
        with GradTape() as tape:
            loss = T.sum(a * 3.0)
        ga, gb = T.backward(tape, loss, [a, b])
        np.testing.assert_array_equal(ga, 3.0)
        np.testing.assert_array_equal(gb, np.zeros((2, 2)))

    def test_chain_rule_matches_finite_differences(self):
        x = np.random.default_rng(5).normal(size=(4,))
        fn = lambda p: T.sum(T.log(T.exp(T.tanh(p) * 2.0) + 1.0))
        g, = grad_of(fn, x)
        assert rel_err(g, central_grad(lambda v: fn(Tensor(v)).item(), x)) < 1e-5

    def test_non_scalar_loss_rejected(self):
        p = Parameter(np.ones(3))
        with GradTape() as tape:
            y = p * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y, [p])

    def test_reused_node_accumulates(self):
        x = np.array([1.5, -2.0])
        g, = grad_of(lambda p: T.sum(p * p * p), x)
        np.testing.assert_allclose(g, 3 * x ** 2, rtol=1e-15)

    def test_no_recording_outside_tape(self):
        p = Parameter(np.ones(2))
        y = p * 2.0
        assert not y.requires_grad

    def test_zero_grad_clears_accumulators(self):
        p = Parameter(np.ones(2))
        with GradTape() as tape:
            loss = T.sum(p)
        tape.backward(loss, [p])
        T.zero_grad([p])
        assert p.grad is None

    def test_assign_rejects_shape_change(self):
        p = Parameter(np.ones(2))
        with pytest.raises(ShapeError):
            p.assign(np.ones(3))


def direct_conv(x, k):
    """Loop-based zero-padded cross-correlation oracle (HWC)."""
    h, w, _ = x.shape
    kh, kw, _, co = k.shape
    out = np.zeros((h, w, co))
    for i in range(h):
        for j in range(w):
            for a in range(kh):
                for b in range(kw):
                    ii, jj = i + a - kh // 2, j + b - kw // 2
                    if 0 <= ii < h and 0 <= jj < w:
                        out[i, j] += x[ii, jj] @ k[a, b]
    return out


class TestConv2d:
    def test_identity_1x1_kernel(self):
        x = np.random.default_rng(6).normal(size=(5, 5, 3))
        k = np.eye(3)[None, None]
        np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(k)).data, x)

    def test_ones_kernel_on_one_hot(self):
        x = np.zeros((3, 3, 1))
        x[1, 1, 0] = 1.0
        out = T.conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1)))).data
        np.testing.assert_array_equal(out, np.ones((3, 3, 1)))

    @pytest.mark.parametrize("ci,co,ksize", [(2, 3, 3), (9, 2, 3), (4, 4, 1), (3, 2, 5)])
    def test_matches_loop_oracle(self, ci, co, ksize):
        rng = np.random.default_rng(ci * 10 + co)
        x = rng.normal(size=(2, 6, 5, ci))
        k = rng.normal(size=(ksize, ksize, ci, co))
        out = T.conv2d(Tensor(x), Tensor(k)).data
        for n in range(2):
            np.testing.assert_allclose(out[n], direct_conv(x[n], k), atol=1e-12)

    @pytest.mark.parametrize("ci", [2, 9])
    def test_gradients_match_finite_differences(self, ci):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 5, ci))
        k = rng.normal(size=(3, 3, ci, 2))
        w = rng.normal(size=(5, 5, 2))
        fn = lambda a, b: T.sum(T.conv2d(a, b) * Tensor(w))
        gx, gk = grad_of(fn, x, k)
        loss = lambda u, v: fn(Tensor(u), Tensor(v)).item()
        assert rel_err(gk, central_grad(lambda v: loss(x, v), k)) < 1e-5
        assert rel_err(gx, central_grad(lambda u: loss(u, k), x)) < 1e-5

    def test_bias_gradient(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        bias = rng.normal(size=3)
        gb, = grad_of(lambda b: T.sum(T.square(T.conv2d(Tensor(x), Tensor(k), b))), bias)
        fd = central_grad(lambda b: float(np.sum(T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data ** 2)), bias)
        assert rel_err(gb, fd) < 1e-6

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((2, 2, 1, 1))))

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((3, 3, 1, 1))))


class TestDtype:
    def test_float32_opt_in(self):
        previous = T.get_default_dtype()
        T.set_default_dtype(np.float32)
        try:
            assert Tensor([1.0, 2.0]).data.dtype == np.float32
            assert T.relu(Tensor([1.0, -2.0])).data.dtype == np.float32
        finally:
            T.set_default_dtype(previous)
        assert Tensor([1.0]).data.dtype == np.float64
