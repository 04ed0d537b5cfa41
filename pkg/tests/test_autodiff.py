"""Tape semantics and the finite-difference harness itself."""

import numpy as np
import pytest

from lsunet import tensor as T
from lsunet.errors import ContractError, GraphError, OracleInvalidError
from lsunet.gradcheck import check_function, finite_diff_check
from lsunet.tensor import Graph, Tensor


class TestBackward:
    def test_sum_gradient_is_ones(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        g = Graph()
        with g:
            loss = x.sum()
        g.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_square_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 3)).astype(np.float32), requires_grad=True)
        g = Graph()
        with g:
            loss = (x * x).sum()
        g.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.standard_normal((2, 2)).astype(np.float32), requires_grad=True)
        g = Graph()
        with g:
            y = x * 2.0
        with pytest.raises(ContractError):
            g.backward(y)

    def test_gradients_accumulate_until_zeroed(self, rng):
        x = Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
        for expect_scale in (1, 2):
            g = Graph()
            with g:
                loss = x.sum()
            g.backward(loss)
            np.testing.assert_allclose(x.grad, expect_scale * np.ones(5), rtol=1e-6)
        x.zero_grad()
        g = Graph()
        with g:
            loss = x.sum()
        g.backward(loss)
        np.testing.assert_allclose(x.grad, np.ones(5), rtol=1e-6)

    def test_repeated_backward_is_bitwise_deterministic(self, rng):
        data = rng.standard_normal((2, 4, 6, 6)).astype(np.float32)
        w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
        grads = []
        for _ in range(2):
            x = Tensor(data, requires_grad=True)
            wt = Tensor(w, requires_grad=True)
            g = Graph()
            with g:
                loss = (T.gelu(T.conv2d(x, wt, None, 1, 1)) ** 2).sum()
            g.backward(loss)
            grads.append((x.grad.copy(), wt.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])

    def test_nested_recording_rejected(self):
        g1, g2 = Graph(), Graph()
        with g1:
            with pytest.raises(GraphError):
                with g2:
                    pass

    def test_insertion_order_is_topological(self, rng):
        x = Tensor(rng.standard_normal(4).astype(np.float32), requires_grad=True)
        g = Graph()
        with g:
            a = x * 2.0
            b = a + 1.0
            loss = (b * a).sum()
        ids = {id(n.output): i for i, n in enumerate(g.nodes)}
        for i, node in enumerate(g.nodes):
            for inp in node.inputs:
                if id(inp) in ids:
                    assert ids[id(inp)] < i

    def test_shared_input_accumulates_from_both_uses(self, rng):
        x = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        g = Graph()
        with g:
            loss = (x * x + x * 2.0).sum()  # d/dx = 2x + 2
        g.backward(loss)
        np.testing.assert_allclose(x.grad, [8.0], rtol=1e-6)

    def test_conv_weight_grad_matches_finite_differences(self, rng):
        x64 = rng.standard_normal((1, 2, 5, 5))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, dtype=np.float64)

        def f():
            return (T.conv2d(Tensor(x64), w, None, 1, 1) ** 2).sum()

        report = check_function(f, {"w": w}, step=1e-3, tol=1e-3, name="conv-w")
        assert report.passed, report.line()


class TestFiniteDiffHarness:
    def test_sum_has_zero_discrepancy(self, rng):
        x = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
        report = finite_diff_check(lambda t: t.sum(), x, name="sum")
        assert report.max_rel_err < 1e-9

    def test_gelu_composite_passes(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        report = finite_diff_check(lambda t: T.gelu(t).sum(), x, tol=1e-3, name="gelu-sum")
        assert report.passed, report.line()

    def test_corrupted_gelu_derivative_fails(self, rng, monkeypatch):
        monkeypatch.setattr(T, "GELU_GRAD_SCALE", 1.1)
        x = Tensor(rng.standard_normal((2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        report = finite_diff_check(lambda t: T.gelu(t).sum(), x, tol=1e-3, name="gelu-bad")
        assert not report.passed

    def test_nondeterministic_function_rejected(self, rng):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        state = {"n": 0.0}

        def f(t):
            state["n"] += 1.0
            return (t * state["n"]).sum()

        with pytest.raises(OracleInvalidError):
            finite_diff_check(f, x)


class TestFlopCounter:
    def test_conv_flops_match_hand_arithmetic(self):
        x = Tensor(np.zeros((1, 3, 224, 224), dtype=np.float32))
        w = Tensor(np.zeros((4, 3, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(4, dtype=np.float32))
        with T.flop_counter() as fc:
            T.conv2d(x, w, b, 1, 0)
        assert fc.total == 2 * (3 * 224 * 224 * 4) + 4 * 224 * 224

    def test_counter_off_outside_context(self):
        x = Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32))
        T.conv2d(x, w, None, 1, 0)  # must not raise without an active counter
