import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xmaf import tensor as T
from xmaf.errors import ContractError, DimensionError, NumericInputError, OracleError
from xmaf.tensor import Tensor, backward, finite_diff_check, parameter


class TestMatmul:
    def test_identity(self):
        out = T.matmul(np.eye(2), [[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_arithmetic(self):
        assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_grad_matches_central_difference(self):
        rng = np.random.default_rng(3)
        A, B = parameter(rng.standard_normal((3, 3))), Tensor(rng.standard_normal((3, 3)))
        rep = finite_diff_check(lambda: T.tsum(T.matmul(A, B)), [A], tol=1e-6)
        assert rep.max_rel_error < 1e-6

    def test_grad_formulas(self):
        rng = np.random.default_rng(0)
        A, B = parameter(rng.standard_normal((2, 3))), parameter(rng.standard_normal((3, 4)))
        G = rng.standard_normal((2, 4))
        backward(T.tsum(T.mul(T.matmul(A, B), G)))
        np.testing.assert_allclose(A.grad, G @ B.data.T)
        np.testing.assert_allclose(B.grad, A.data.T @ G)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_associativity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b, c = (Tensor(rng.standard_normal((4, 4))) for _ in range(3))
            left = T.matmul(T.matmul(a, b), c).data
            right = T.matmul(a, T.matmul(b, c)).data
            assert np.max(np.abs(left - right)) < 1e-9


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax([0.0, 0, 0, 0]).data, [0.25] * 4)

    def test_closed_form(self):
        np.testing.assert_allclose(T.softmax([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-15)

    def test_no_overflow(self):
        np.testing.assert_array_equal(T.softmax([1000.0, 1000.0]).data, [0.5, 0.5])

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NumericInputError):
            T.softmax([0.0, bad])

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)),
                  elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_rows_are_distributions_and_shift_invariant(self, x, c):
        p = T.softmax(x).data
        assert np.all(p >= 0) and np.all(p <= 1)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        assert np.max(np.abs(T.softmax(x + c).data - p)) < 1e-9


class TestElementwise:
    def test_basic_values(self):
        assert T.elementwise("tanh", 0.0).item() == 0.0
        assert T.elementwise("sigmoid", 0.0).item() == 0.5
        np.testing.assert_array_equal(T.elementwise("scale", [1.0, 2.0, 3.0], 2).data, [2, 4, 6])
        np.testing.assert_array_equal(T.elementwise("relu", [-1.0, 2.0]).data, [0, 2])
        np.testing.assert_array_equal(T.elementwise("add", [1.0], [2.0]).data, [3])

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid([-800.0, 800.0]).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            T.add(np.ones((2, 3)), np.ones((3, 2)))

    def test_broadcast_grad_sums_back(self):
        a = parameter(np.ones((4, 3)))
        b = parameter(np.ones(3))
        backward(T.tsum(T.mul(a, b)))
        np.testing.assert_array_equal(b.grad, [4, 4, 4])

    def test_unknown_op(self):
        with pytest.raises(ContractError):
            T.elementwise("cosh", 1.0)


class TestShapeOps:
    def test_concat_shape(self):
        assert T.concat([np.ones((2, 3)), np.ones((2, 5))], axis=1).shape == (2, 8)

    def test_concat_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([np.ones((2, 3)), np.ones((3, 5))], axis=1)

    def test_layer_norm_mean(self):
        out = T.layer_norm([1.0, 2.0, 3.0]).data
        assert abs(out.mean()) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(3, 10)),
                  elements=st.floats(-100, 100)))
    def test_layer_norm_moments(self, x):
        if np.any(x.std(axis=-1) < 1e-3):
            return
        out = T.layer_norm(x).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-6)

    def test_linear_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_array_equal(T.linear(x, np.eye(3), np.zeros(3)).data, x)


class TestBackward:
    def test_square(self):
        x = parameter(3.0)
        backward(T.mul(x, x))
        assert x.grad == 6.0

    def test_softmax_sum_has_zero_grad(self):
        x = parameter([0.3, -1.2, 2.0])
        backward(T.tsum(T.softmax(x)))
        assert np.max(np.abs(x.grad)) < 1e-12

    def test_fan_out_accumulates(self):
        x = parameter(1.5)
        backward(T.add(x, x))
        assert x.grad == 2.0

    def test_deep_chain_is_iterative(self):
        x = parameter(1.0)
        y = x
        for _ in range(5000):
            y = T.add(y, 0.0)
        backward(y)
        assert x.grad == 1.0

    def test_ignored_leaf_gets_zero_grad(self):
        x, unused = parameter([1.0, 2.0]), parameter([5.0])
        loss = T.tsum(T.square(x))
        loss_with_unused = T.add(loss, T.scale(T.tsum(unused), 0.0))
        backward(loss_with_unused)
        np.testing.assert_array_equal(unused.grad, [0.0])

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(T.mul(parameter([1.0, 2.0]), 2.0))

    def test_node_records_op_and_parents(self):
        a, b = parameter([1.0]), parameter([2.0])
        c = T.add(a, b)
        assert a.node is None
        assert c.node.op == "add" and c.node.parents == (a, b)

    def test_grad_shape_matches_data(self):
        a = parameter(np.ones((3, 2)))
        backward(T.tsum(T.tanh(a)))
        assert a.grad.shape == a.shape and a.size == 6

    def test_no_grad_records_nothing(self):
        a = parameter([1.0])
        with T.no_grad():
            assert T.mul(a, a).node is None


class TestFiniteDiffCheck:
    def test_square_sum(self):
        x = parameter(np.random.default_rng(0).standard_normal(6))
        rep = finite_diff_check(lambda: T.tsum(T.square(x)), [x], eps=1e-5)
        assert rep.max_rel_error < 1e-7 and rep.passed

    def test_ccc_loss_length_100(self):
        from xmaf.metrics import ccc_loss
        rng = np.random.default_rng(11)
        pred = parameter(np.tanh(rng.standard_normal((100, 2))))
        target = np.tanh(rng.standard_normal((100, 2)))
        assert finite_diff_check(lambda: ccc_loss(pred, target), [pred], tol=1e-4).passed

    def test_only_supplied_params_reported(self):
        x, frozen = parameter([1.0, 2.0]), parameter([3.0])
        rep = finite_diff_check(lambda: T.tsum(T.mul(x, frozen)), [x])
        assert len(rep.per_parameter) == 1

    def test_nondeterministic_f(self):
        rng = np.random.default_rng(0)
        x = parameter([1.0])
        with pytest.raises(OracleError):
            finite_diff_check(lambda: T.add(T.tsum(x), rng.random()), [x])

    def test_passed_iff_below_tolerance(self):
        x = parameter([1.0, 2.0])
        rep = finite_diff_check(lambda: T.tsum(T.exp(x)), [x], tol=1e-30)
        assert rep.passed == (rep.max_rel_error < 1e-30)

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            finite_diff_check(lambda: T.tsum(parameter([1.0])), [], eps=0)
