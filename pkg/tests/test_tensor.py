"""Tensor core: forward semantics, masked softmax, and gradient correctness.

Gradient tests compare reverse-mode results against central finite
differences in float64, the independent oracle for every differentiable op.
"""

import math

import numpy as np
import pytest

from micerank import tensor
from micerank.tensor import (
    GradUsageError,
    MaskedRowError,
    ShapeError,
    Tensor,
    concat,
    gather_rows,
    gelu,
    layernorm,
    linear,
    masked_softmax,
    matmul,
    select,
)

from conftest import assert_grads_close, fd_gradient


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(matmul(eye, a).data, a.data)

    def test_zero_annihilates(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        z = Tensor(np.zeros((2, 2)))
        assert np.array_equal(matmul(a, z).data, np.zeros((2, 2)))

    def test_matches_scalar_triple_loop(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        got = matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rejects_vectors(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones((2, 2), dtype=np.float32))
        b = Tensor(np.ones((2, 2), dtype=np.float64))
        with pytest.raises(ShapeError):
            matmul(a, b)


class TestMaskedSoftmax:
    def test_single_allowed_entry(self):
        out = masked_softmax(Tensor([5.0, 9.0, 2.0]), np.array([True, False, False]))
        assert np.array_equal(out.data, [1.0, 0.0, 0.0])

    def test_uniform_over_allowed(self):
        for c in (-3.0, 0.0, 17.5):
            out = masked_softmax(
                Tensor([c, c, c, c]), np.array([True, True, False, True])
            )
            np.testing.assert_array_equal(out.data, [1 / 3, 1 / 3, 0.0, 1 / 3])

    def test_hand_exponentiation(self):
        # exp(0), exp(ln 2), exp(ln 4) = 1, 2, 4 -> normalized 1/7, 2/7, 4/7
        out = masked_softmax(
            Tensor([0.0, math.log(2.0), math.log(4.0)]), np.array([True, True, True])
        )
        np.testing.assert_allclose(out.data, [1 / 7, 2 / 7, 4 / 7], rtol=1e-14)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(MaskedRowError):
            masked_softmax(
                Tensor([[1.0, 2.0], [3.0, 4.0]]),
                np.array([[True, True], [False, False]]),
            )

    def test_rows_sum_to_one_and_exact_zeros(self, rng):
        for _ in range(25):
            logits = Tensor(rng.standard_normal((3, 5, 7)) * 10)
            allow = rng.random((3, 5, 7)) < 0.5
            allow[..., 0] = True  # keep every row non-empty
            out = masked_softmax(logits, allow).data
            assert np.all(out[~allow] == 0.0)
            np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_broadcast_mask(self, rng):
        logits = Tensor(rng.standard_normal((2, 4, 3, 3)))
        allow = np.tril(np.ones((3, 3), dtype=bool))
        out = masked_softmax(logits, allow).data
        assert np.all(out[..., ~allow] == 0.0)

    def test_float32_masking_is_exact(self, rng):
        logits = Tensor(rng.standard_normal((4, 6)).astype(np.float32))
        allow = rng.random((4, 6)) < 0.4
        allow[:, 2] = True
        out = masked_softmax(logits, allow).data
        assert out.dtype == np.float32
        assert np.all(out[~allow] == 0.0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestSublayerPrimitives:
    def test_layernorm_constant_row_returns_bias(self):
        x = Tensor(np.full((2, 4), 3.7))
        gain = Tensor(np.ones(4) * 2.0)
        bias = Tensor([0.5, -1.0, 2.0, 0.0])
        out = layernorm(x, gain, bias, eps=1e-5).data
        np.testing.assert_allclose(out, np.tile(bias.data, (2, 1)), atol=1e-6)

    def test_gelu_zero(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_gelu_limits(self):
        out = gelu(Tensor([-20.0, 20.0])).data
        np.testing.assert_allclose(out, [0.0, 20.0], atol=1e-6)

    def test_linear_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        out = linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_linear_shape_errors(self):
        x = Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            linear(x, Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))
        with pytest.raises(ShapeError):
            linear(x, Tensor(np.ones((3, 2))), Tensor(np.zeros(3)))

    def test_layernorm_param_shape_errors(self):
        with pytest.raises(ShapeError):
            layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient_is_2x(self, rng):
        data = rng.standard_normal((3, 4))
        x = Tensor(data, requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * data, rtol=1e-12)

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GradUsageError):
            (x * x).backward()

    def test_grad_accumulates_across_reuse(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0 + x * 5.0
        y.sum().backward()
        assert x.grad[0] == pytest.approx(8.0)

    def test_composite_graph_matches_finite_differences(self, rng):
        """Mixed graph covering every differentiable op at once."""
        x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)) * 0.7, requires_grad=True)
        gain = Tensor(np.ones(4), requires_grad=True)
        bias = Tensor(np.zeros(4), requires_grad=True)
        table = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
        ids = np.array([[0, 2, 4], [1, 1, 3]])
        allow = np.array([True, True, False, True])

        def forward():
            h = matmul(x, w)
            h = gelu(h)
            h = h + gather_rows(table, ids)
            h = layernorm(h, gain, bias)
            probs = masked_softmax(h, allow)
            j = concat([probs, h], axis=2)
            j = j.transpose((0, 2, 1)).reshape((2, 8, 3))
            row = select(j, 1, axis=1)
            return ((row * row).mean() + j.sum() * 0.1).reshape(())

        loss = forward()
        loss.backward()
        for name, param in [("x", x), ("w", w), ("gain", gain), ("bias", bias), ("table", table)]:
            fd = fd_gradient(lambda: forward().item(), param.data)
            assert_grads_close(param.grad, fd)

    @pytest.mark.parametrize(
        "op_name",
        ["matmul", "bmm", "add_bcast", "mul", "gelu", "layernorm", "masked_softmax",
         "gather", "select", "concat", "transpose", "mean_axis"],
    )
    def test_each_op_matches_finite_differences(self, op_name, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        y = Tensor(rng.standard_normal((4, 3)), requires_grad=True)

        def forward():
            if op_name == "matmul":
                out = matmul(x, y)
            elif op_name == "bmm":
                a = x.reshape((1, 3, 4))
                b = y.reshape((1, 4, 3))
                out = matmul(concat([a, a], axis=0), concat([b, b], axis=0))
            elif op_name == "add_bcast":
                out = x + select(y, 0, axis=1)
            elif op_name == "mul":
                out = x * x * 0.5
            elif op_name == "gelu":
                out = gelu(x)
            elif op_name == "layernorm":
                out = layernorm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
            elif op_name == "masked_softmax":
                out = masked_softmax(x, np.array([True, False, True, True]))
            elif op_name == "gather":
                out = gather_rows(x, np.array([0, 2, 2, 1]))
            elif op_name == "select":
                out = select(x, 2, axis=0)
            elif op_name == "concat":
                out = concat([x, x * 2.0], axis=1)
            elif op_name == "transpose":
                out = x.transpose((1, 0))
            elif op_name == "mean_axis":
                out = x.mean(axis=1)
            # squared sum makes every output entry matter with distinct weight
            return (out * out).sum()

        loss = forward()
        loss.backward()
        fd = fd_gradient(lambda: forward().item(), x.data)
        assert_grads_close(x.grad, fd)


class TestDeterminismAndState:
    def test_bit_identical_reruns(self, rng):
        data = rng.standard_normal((6, 6))

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            h = gelu(matmul(x, x))
            out = masked_softmax(h, np.eye(6, dtype=bool) | (h.data > 0))
            loss = (out * out).sum()
            loss.backward()
            return out.data.copy(), x.grad.copy()

        a_out, a_grad = run()
        b_out, b_grad = run()
        assert np.array_equal(a_out, b_out)
        assert np.array_equal(a_grad, b_grad)

    def test_no_grad_suppresses_graph(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with tensor.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        z = x * 2.0
        assert z.requires_grad

    def test_finite_check(self):
        bad = Tensor([1.0, np.inf])
        with pytest.raises(tensor.NumericError):
            tensor.check_finite(bad)

    def test_allocation_counter_tracks_peak(self):
        tensor.track_allocations(True)
        try:
            base = tensor.allocated_bytes()
            big = Tensor(np.zeros(1024, dtype=np.float64))
            assert tensor.allocated_bytes() >= base + 8 * 1024
            assert tensor.peak_allocated_bytes() >= base + 8 * 1024
            del big
            assert tensor.allocated_bytes() < base + 8 * 1024
            tensor.reset_peak_allocated_bytes()
            assert tensor.peak_allocated_bytes() == tensor.allocated_bytes()
        finally:
            tensor.track_allocations(False)

    def test_dtype_follows_inputs(self):
        x32 = Tensor(np.ones((2, 2), dtype=np.float32))
        assert (x32 * 2.0).dtype == np.float32
        x64 = Tensor(np.ones((2, 2)))
        assert (x64 * 2.0).dtype == np.float64
