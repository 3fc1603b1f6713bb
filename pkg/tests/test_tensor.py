"""Core tensor semantics: forward values, backward rules, graph discipline."""

import numpy as np
import pytest

from pdse.gradcheck import finite_diff_check
from pdse.tensor import GraphError, NonFiniteError, ShapeError, Tensor, no_finite_checks


class TestForwardValues:
    def test_sigmoid_at_zero_is_half(self):
        assert Tensor([0.0]).sigmoid().data[0] == pytest.approx(0.5)

    def test_sigmoid_extreme_logits_stay_finite(self):
        out = Tensor([-500.0, 500.0]).sigmoid()
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == pytest.approx(0.0, abs=1e-30)
        assert out.data[1] == pytest.approx(1.0)

    def test_relu_clamps_negative(self):
        out = Tensor([-2.0, 0.0, 3.0]).relu()
        assert out.data.tolist() == [0.0, 0.0, 3.0]

    def test_matmul_matches_numpy(self, rng):
        a = rng.normal(size=(3, 4)).astype(np.float32)
        b = rng.normal(size=(4, 2)).astype(np.float32)
        out = Tensor(a) @ Tensor(b)
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-6)

    def test_dtype_preserved(self):
        assert (Tensor([1.0], dtype=np.float64) + 1.0).dtype == np.float64
        assert (Tensor([1.0]) * 2.0).dtype == np.float32


class TestShapeErrors:
    def test_add_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(2,\).*\(3,\)"):
            Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])

    def test_matmul_requires_conforming_2d(self):
        with pytest.raises(ShapeError, match="matmul"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(ShapeError, match="dtype"):
            Tensor([1.0]) + Tensor([1.0], dtype=np.float64)


class TestFiniteness:
    def test_non_finite_forward_raises(self):
        x = Tensor([800.0])
        with pytest.raises(NonFiniteError, match="exp"):
            x.exp()

    def test_checks_can_be_suspended(self):
        with no_finite_checks():
            out = Tensor([800.0]).exp()
        assert np.isinf(out.data[0])

    def test_non_finite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            Tensor([np.nan])


class TestBackward:
    def test_sum_of_squares_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_unused_parameter_gets_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([5.0], requires_grad=True)
        x.sum().backward()
        assert p.grad is None  # loss independent of p

    def test_gradient_accumulates_across_backwards(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 2.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * x).backward()

    def test_double_backward_on_consumed_record_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GraphError, match="consumed"):
            loss.backward()

    def test_diamond_graph_visits_each_op_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3.0
        loss = (y + y).sum()
        loss.backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_broadcast_add_unbroadcasts_gradient(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        ((x + b) * 2.0).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((2, 3), 2.0))
        np.testing.assert_allclose(b.grad, np.full((1, 3), 4.0))

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(3000):
            y = y + 1.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [1.0])


class TestGradcheckHarness:
    def test_sum_is_linear(self):
        report = finite_diff_check(lambda t: t.sum(), Tensor(np.arange(5.0), dtype=np.float64), tol=1e-9)
        assert report.passed

    def test_sigmoid_grad_quarter_at_zero(self):
        x = Tensor(np.zeros(4), requires_grad=True, dtype=np.float64)
        x.sigmoid().sum().backward()
        np.testing.assert_allclose(x.grad, 0.25)
        report = finite_diff_check(lambda t: t.sigmoid().sum(), Tensor(np.zeros(4), dtype=np.float64))
        assert report.passed

    def test_composite_conv_relu_pool_chain(self, rng):
        from pdse import functional as F

        w = rng.normal(size=(3, 2, 3, 3))

        def f(t):
            return F.max_pool2d(F.conv2d(t, Tensor(w, dtype=np.float64), padding=1).relu(), 2).sum()

        report = finite_diff_check(f, Tensor(rng.normal(size=(1, 2, 6, 6)), dtype=np.float64), h=1e-5, tol=1e-4)
        assert report.passed

    def test_requires_float64(self):
        with pytest.raises(ValueError, match="float64"):
            finite_diff_check(lambda t: t.sum(), Tensor([1.0]))

    def test_detects_nondeterministic_function(self):
        state = {"n": 0}

        def f(t):
            state["n"] += 1
            return (t * float(state["n"])).sum()

        with pytest.raises(RuntimeError, match="non-deterministic"):
            finite_diff_check(f, Tensor([1.0], dtype=np.float64))

    def test_catches_injected_sign_error(self):
        def broken_sigmoid_sum(t):
            out = t.sigmoid()
            # sabotage: flip the gradient while keeping the forward intact
            from pdse.tensor import Tensor as T, _accum

            def backward_fn(g):
                _accum(t, -g * out.data * (1.0 - out.data))

            return T._result(out.data, (t,), backward_fn, "broken").sum()

        report = finite_diff_check(broken_sigmoid_sum, Tensor(np.ones(3), dtype=np.float64))
        assert not report.passed
