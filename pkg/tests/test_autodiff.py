import numpy as np
import pytest

from chainrec.autodiff import (
    DegenerateDistributionError,
    GraphConsumedError,
    OracleInvalidError,
    ShapeMismatchError,
    Tensor,
    add,
    backward,
    clip,
    concat,
    div,
    grad_check,
    gradcheck_suite,
    log,
    matmul,
    max_pool_over_time,
    mul,
    reshape,
    sigmoid,
    softmax,
    stack_rows,
    sub,
    take_rows,
    tanh,
    transpose,
    tsum,
)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_row_times_column(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_grad_against_identity_rhs(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        loss = tsum(matmul(a, Tensor(np.eye(2))))
        backward(loss)
        assert np.array_equal(a.grad, np.ones((2, 2)))
        # the same function also passes a finite-difference check
        rep = grad_check(lambda t: tsum(matmul(t, Tensor(np.eye(2)))),
                         Tensor([[1.0, 2.0], [3.0, 4.0]]), eps=1e-6)
        assert rep.passed

    def test_inner_extent_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatchError) as ei:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(ei.value)

    def test_rejects_non_2d(self):
        with pytest.raises(ShapeMismatchError):
            matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


class TestSoftmax:
    def test_uniform_on_equal_scores(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]))
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_log_integer_scores(self):
        out = softmax(Tensor([np.log(1), np.log(2), np.log(3)]))
        assert np.allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_mask_zeroes_and_renormalizes(self):
        out = softmax(Tensor([5.0, 9.0, 2.0]), mask=[True, False, True])
        assert out.data[1] == 0.0
        expect = np.exp([5.0, 2.0]) / np.exp([5.0, 2.0]).sum()
        assert np.allclose(out.data[[0, 2]], expect, atol=1e-12)

    def test_all_masked_raises(self):
        with pytest.raises(DegenerateDistributionError):
            softmax(Tensor([1.0, 2.0]), mask=[False, False])

    def test_sums_to_one_and_nonnegative(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = Tensor(rng.normal(size=9) * 30)
            mask = rng.random(9) < 0.7
            if not mask.any():
                mask[0] = True
            out = softmax(x, mask=list(mask)).data
            assert (out >= 0).all()
            assert abs(out.sum() - 1.0) <= 1e-12

    def test_stable_under_large_scores(self):
        out = softmax(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_rowwise_on_matrix(self):
        out = softmax(Tensor([[0.0, 0.0], [np.log(1), np.log(3)]]))
        assert np.allclose(out.data, [[0.5, 0.5], [0.25, 0.75]], atol=1e-12)


class TestElementwise:
    def test_div_values_and_broadcast(self):
        out = div(Tensor([[2.0, 9.0], [1.0, 6.0]]), Tensor([2.0, 3.0]))
        assert np.array_equal(out.data, [[1.0, 3.0], [0.5, 2.0]])
        with pytest.raises(ShapeMismatchError):
            div(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))

    def test_div_gradients(self):
        rng = np.random.default_rng(0)
        denom = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)))
        rep = grad_check(lambda t: tsum(div(t, denom)), Tensor(rng.normal(size=(2, 3))))
        assert rep.passed
        numer = Tensor(rng.normal(size=(2, 3)))
        rep = grad_check(lambda t: tsum(div(numer, t)),
                         Tensor(rng.uniform(0.5, 2.0, size=(2, 3))))
        assert rep.passed

    def test_max_pool_columnwise(self):
        out = max_pool_over_time(Tensor([[1.0, 5.0], [3.0, 2.0]]))
        assert np.array_equal(out.data, [3.0, 5.0])

    def test_max_pool_tie_goes_to_earliest_step(self):
        x = Tensor([[2.0], [2.0], [1.0]], requires_grad=True)
        backward(tsum(max_pool_over_time(x)))
        assert np.array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_concat_vectors(self):
        out = concat([Tensor([1.0, 2.0]), Tensor([3.0])])
        assert np.array_equal(out.data, [1.0, 2.0, 3.0])

    def test_concat_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))])

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_broadcast_add_gradient_sums(self):
        bias = Tensor(np.zeros(3), requires_grad=True)
        x = Tensor(np.ones((4, 3)))
        backward(tsum(add(x, bias)))
        assert np.array_equal(bias.grad, [4.0, 4.0, 4.0])

    def test_take_rows_repeated_indices_accumulate(self):
        table = Tensor(np.ones((3, 2)), requires_grad=True)
        backward(tsum(take_rows(table, [1, 1, 0])))
        assert np.array_equal(table.grad, [[1, 1], [2, 2], [0, 0]])

    def test_take_rows_out_of_range(self):
        with pytest.raises(IndexError):
            take_rows(Tensor(np.zeros((2, 2))), [0, 2])

    def test_clip_gradient_blocks_saturated_entries(self):
        x = Tensor([-2.0, 0.0, 2.0], requires_grad=True)
        backward(tsum(clip(x, -1.0, 1.0)))
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, -2.0, 0.5], requires_grad=True)
        backward(tsum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_tanh_slope_at_origin(self):
        x = Tensor([0.0], requires_grad=True)
        backward(tsum(tanh(x)))
        assert np.array_equal(x.grad, [1.0])

    def test_composite_matches_finite_differences(self):
        def f(t):
            h = tanh(matmul(t, Tensor([[0.3, -0.2], [0.1, 0.5], [0.7, -0.4], [0.0, 0.2]])))
            s = softmax(h)
            return tsum(mul(log(add(s, 1e-3)), Tensor([[1.0, -1.0], [0.5, 2.0], [0.0, 1.0]])))

        rep = grad_check(f, Tensor(np.linspace(-1, 1, 12).reshape(3, 4)), eps=1e-6, tol=1e-5)
        assert rep.passed, rep

    def test_rejects_non_scalar_loss(self):
        with pytest.raises(ShapeMismatchError):
            backward(tanh(Tensor([1.0, 2.0], requires_grad=True)))

    def test_double_backward_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        loss = tsum(tanh(x))
        backward(loss)
        with pytest.raises(GraphConsumedError):
            backward(loss)

    def test_leaf_reusable_across_graphs(self):
        x = Tensor([0.5], requires_grad=True)
        backward(tsum(tanh(x)))
        g1 = x.grad.copy()
        x.grad = None
        backward(tsum(tanh(x)))
        assert np.array_equal(x.grad, g1)

    def test_grad_accumulates_across_fanout(self):
        x = Tensor([2.0], requires_grad=True)
        backward(tsum(add(mul(x, 3.0), x)))
        assert np.array_equal(x.grad, [4.0])

    def test_forward_is_deterministic(self):
        x = Tensor(np.linspace(-2, 2, 8).reshape(2, 4))
        w = Tensor(np.linspace(-1, 1, 8).reshape(4, 2))
        a = softmax(tanh(matmul(x, w))).data
        b = softmax(tanh(matmul(x, w))).data
        assert np.array_equal(a, b)


class TestGradCheck:
    def test_sum_of_squares(self):
        rep = grad_check(lambda t: tsum(mul(t, t)), Tensor([1.0, 2.0, 3.0]), eps=1e-6)
        assert rep.passed
        assert rep.max_rel_error < 1e-6
        assert np.allclose(rep.analytic, [2.0, 4.0, 6.0])

    def test_constant_function(self):
        rep = grad_check(lambda t: mul(tsum(mul(t, 0.0)), 1.0), Tensor([1.0, 2.0]))
        assert rep.passed

    def test_wrong_gradient_fails(self):
        def bad_tanh(a):
            out = np.tanh(a.data)

            def backward_fn(g):
                a._accumulate(g * 0.1)  # deliberately wrong slope

            return Tensor._from_op(out, (a,), backward_fn)

        rep = grad_check(lambda t: tsum(bad_tanh(t)), Tensor([0.3, -0.4]))
        assert not rep.passed

    def test_nondeterministic_function_rejected(self):
        state = {"n": 0.0}

        def f(t):
            state["n"] += 1.0
            return tsum(mul(t, state["n"]))

        with pytest.raises(OracleInvalidError):
            grad_check(f, Tensor([1.0]))


def test_every_op_passes_gradient_suite():
    worst = gradcheck_suite(seed=1234, repeats=20, tol=1e-5)
    failures = {k: v for k, v in worst.items() if not v.passed}
    assert not failures, failures
    assert len(worst) >= 15  # every registered op is exercised
