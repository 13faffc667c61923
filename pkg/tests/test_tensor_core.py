import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from w2vbert.tensor import (
    BackwardError,
    GradTape,
    LrSchedule,
    NondeterministicFunctionError,
    NumericOverflowError,
    OptimizerState,
    ShapeError,
    Tensor,
    adam_step,
    apply_primitive,
    backward,
    finite_diff_check,
    lr_at,
    no_grad,
    ops,
    run_primitive_suite,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestPrimitiveValues:
    def test_matmul_identity(self, rng):
        a = rng.standard_normal((3, 3))
        out = ops.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_of_zeros_is_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)

    def test_swish_scalar_oracle(self):
        expected = 1.0 / (1.0 + math.exp(-1.0))
        assert ops.swish(Tensor(np.array([1.0]))).data[0] == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.731059, abs=1e-6)

    def test_sigmoid_extremes_stay_finite(self):
        out = ops.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0]))).data
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-300)

    def test_glu_gates_second_half(self):
        x = np.array([[2.0, -1.0, 0.0, 3.0]])
        out = ops.glu(Tensor(x)).data
        sig = 1 / (1 + np.exp(-x[:, 2:]))
        np.testing.assert_allclose(out, x[:, :2] * sig)

    def test_cosine_similarity_parallel_and_orthogonal(self):
        a = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        b = Tensor(np.array([[3.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_allclose(ops.cosine_similarity(a, b).data, [1.0, 0.0], atol=1e-12)

    def test_conv2d_same_padding_lengths(self, rng):
        for H in (4, 5, 7, 8):
            x = Tensor(rng.standard_normal((1, 1, H, 6)))
            w = Tensor(rng.standard_normal((2, 1, 3, 3)))
            out = ops.conv2d(x, w, Tensor(np.zeros(2)))
            assert out.shape == (1, 2, -(-H // 2), 3)

    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.standard_normal((1, 2, 5, 4))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 3, 2))
        for o in range(3):
            for i in range(3):
                for j in range(2):
                    ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_depthwise_conv_matches_numpy_convolve(self, rng):
        x = rng.standard_normal((1, 9, 2))
        w = rng.standard_normal((2, 5))
        out = ops.depthwise_conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data
        for c in range(2):
            ref = np.correlate(np.pad(x[0, :, c], 2), w[c], mode="valid")
            np.testing.assert_allclose(out[0, :, c], ref, atol=1e-12)

    def test_dropout_identity_outside_training(self, rng):
        x = Tensor(rng.standard_normal(10))
        assert ops.dropout(x, 0.5, rng, train=False) is x
        assert ops.dropout(x, 0.0, rng, train=True) is x

    def test_apply_primitive_by_name(self):
        out = apply_primitive("add", Tensor(np.ones(2)), Tensor(np.ones(2)))
        np.testing.assert_array_equal(out.data, [2.0, 2.0])
        with pytest.raises(KeyError, match="unknown primitive"):
            apply_primitive("fft", Tensor(np.ones(2)))


class TestPrimitiveErrors:
    def test_shape_mismatch_names_primitive_and_shapes(self):
        with pytest.raises(ShapeError, match=r"add.*\(3,\).*\(4,\)"):
            ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_matmul_inner_dimension(self):
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(TypeError, match="mixed dtypes"):
            ops.add(Tensor(np.ones(2, np.float32)), Tensor(np.ones(2)))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    @pytest.mark.parametrize("fn", [
        lambda: ops.exp(Tensor(np.array([1000.0]))),
        lambda: ops.log(Tensor(np.array([0.0]))),
        lambda: ops.log(Tensor(np.array([-1.0]))),
    ])
    def test_non_finite_output_raises(self, fn):
        with pytest.raises(NumericOverflowError):
            fn()


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        grads = backward(ops.sum(x))
        np.testing.assert_array_equal(grads[x], np.ones(4))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        backward(ops.sum(ops.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_unreachable_tensor_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(2), requires_grad=True)
        grads = backward(ops.sum(x), wrt=[x, y])
        np.testing.assert_array_equal(grads[y], np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(BackwardError, match="scalar"):
            backward(ops.scale(x, 2.0))

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = ops.sum(ops.exp(x))
        backward(loss)
        with pytest.raises(BackwardError, match="second time"):
            backward(loss)

    def test_disconnected_loss_rejected(self):
        with pytest.raises(BackwardError, match="not connected"):
            backward(ops.sum(Tensor(np.ones(2))))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = ops.exp(x)
        assert y.is_leaf and not y.requires_grad

    def test_branch_accumulation_is_exact_sum(self, rng):
        a = rng.standard_normal(5)
        x = Tensor(a.copy(), requires_grad=True)
        c = Tensor(rng.standard_normal(5))
        backward(ops.add(ops.sum(ops.exp(x)), ops.sum(ops.mul(x, c))))
        x1 = Tensor(a.copy(), requires_grad=True)
        backward(ops.sum(ops.exp(x1)))
        x2 = Tensor(a.copy(), requires_grad=True)
        backward(ops.sum(ops.mul(x2, c)))
        np.testing.assert_array_equal(x.grad, x1.grad + x2.grad)

    def test_tape_is_topological_and_visits_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        h = ops.exp(x)
        loss = ops.sum(ops.add(h, ops.mul(h, h)))
        tape = GradTape.from_loss(loss)
        ids = [id(t) for t in tape.nodes]
        assert len(ids) == len(set(ids)) == 4
        pos = {id(t): i for i, t in enumerate(tape.nodes)}
        for t in tape.nodes:
            for inp in t._node.inputs:
                if inp._node is not None:
                    assert pos[id(inp)] < pos[id(t)]

    def test_broadcast_gradient_sums_to_input_shape(self):
        b = Tensor(np.zeros((1, 4)), requires_grad=True)
        backward(ops.sum(ops.add(Tensor(np.ones((3, 4))), b)))
        np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


class TestGradcheck:
    def test_sum_is_exact(self, rng):
        # dyadic point and step: every difference is exact in binary
        assert finite_diff_check(lambda x: ops.sum(x), Tensor(np.arange(6.0) - 2.5), 2.0 ** -12) == 0.0
        assert finite_diff_check(lambda x: ops.sum(x), Tensor(rng.standard_normal(6))) < 1e-9

    def test_layer_norm_sum_of_squares(self, rng):
        g, b = Tensor(rng.standard_normal(8)), Tensor(rng.standard_normal(8))

        def f(x):
            y = ops.layer_norm(x, g, b)
            return ops.sum(ops.mul(y, y))

        assert finite_diff_check(f, Tensor(rng.standard_normal((1, 8)))) < 1e-4

    def test_every_primitive_within_tolerance(self):
        errors = run_primitive_suite(seed=3)
        assert len(errors) == 25
        bad = {k: v for k, v in errors.items() if v >= 1e-4}
        assert not bad

    def test_nondeterministic_function_detected(self):
        calls = iter(range(100))

        def f(x):
            return ops.scale(ops.sum(x), 1.0 + next(calls))

        with pytest.raises(NondeterministicFunctionError):
            finite_diff_check(f, Tensor(np.ones(3)))

    def test_wrong_gradient_is_caught(self, rng):
        # exp with the derivative of the identity
        from w2vbert.tensor.autograd import make_result

        def bad_exp(x):
            return make_result("bad_exp", np.exp(x.data), (x,), lambda g: (g,))

        assert finite_diff_check(lambda x: ops.sum(bad_exp(x)), Tensor(rng.standard_normal(4))) > 0.1


class TestInvariants:
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
    def test_softmax_rows_sum_to_one(self, a):
        s = ops.softmax(Tensor(a), axis=-1).data
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert (s >= 0).all()

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=finite))
    def test_layer_norm_standardises_rows(self, a):
        # eps = 1e-5 in the denominator shrinks the variance by var / (var + eps)
        assume(a.var(axis=1).min() >= 0.1)
        d = a.shape[1]
        y = ops.layer_norm(Tensor(a), Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        assert np.abs(y.mean(axis=1)).max() < 1e-5
        assert np.abs(y.var(axis=1) - 1).max() < 1e-4

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_log_softmax_is_log_of_softmax(self, a):
        np.testing.assert_allclose(ops.log_softmax(Tensor(a)).data, np.log(ops.softmax(Tensor(a)).data),
                                   atol=1e-10)

    def test_bitwise_determinism(self, rng):
        a = rng.standard_normal((4, 16)).astype(np.float32)

        def run():
            x = Tensor(a, requires_grad=True)
            y = ops.swish(ops.layer_norm(x, Tensor(np.ones(16, np.float32)), Tensor(np.zeros(16, np.float32))))
            backward(ops.sum(ops.mul(y, y)))
            return y.data, x.grad

        (y1, g1), (y2, g2) = run(), run()
        assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()


def reference_adam(w, grad_fn, lr, steps, b1=0.9, b2=0.98, eps=1e-9):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]))}
        st_ = OptimizerState.for_params(p)
        adam_step(p, {"w": np.zeros(2)}, st_, 0.1)
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
        assert st_.t == 1

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array([0.5]))}
        adam_step(p, {"w": np.ones(1)}, OptimizerState.for_params(p), 0.01)
        assert p["w"].data[0] == pytest.approx(0.5 - 0.01 / (1 + 1e-9), abs=1e-15)

    def test_quadratic_matches_scalar_reference(self):
        p = {"w": Tensor(np.array([1.0]))}
        st_ = OptimizerState.for_params(p)
        for _ in range(100):
            adam_step(p, {"w": 2 * p["w"].data}, st_, 0.1)
        ref = reference_adam(1.0, lambda w: 2 * w, 0.1, 100)
        assert p["w"].data[0] == pytest.approx(ref, rel=1e-12, abs=1e-15)
        assert abs(p["w"].data[0]) < 0.1
        assert st_.t == 100

    def test_nan_gradient_names_parameter(self):
        p = {"enc.w": Tensor(np.ones(2))}
        with pytest.raises(FloatingPointError, match="enc.w"):
            adam_step(p, {"enc.w": np.array([np.nan, 0.0])}, OptimizerState.for_params(p), 0.1)

    def test_shape_mismatch_rejected(self):
        p = {"w": Tensor(np.ones(2))}
        with pytest.raises(ValueError, match="shape"):
            adam_step(p, {"w": np.ones(3)}, OptimizerState.for_params(p), 0.1)

    def test_moments_mirror_parameter_shapes(self):
        p = {"a": Tensor(np.ones((2, 3))), "b": Tensor(np.ones(4))}
        st_ = OptimizerState.for_params(p)
        assert {k: v.shape for k, v in st_.m.items()} == {"a": (2, 3), "b": (4,)}
        assert st_.m.keys() == st_.v.keys()


class TestSchedule:
    @pytest.mark.parametrize("step, expected", [(100, 1e-3), (50, 5e-4), (400, 5e-4), (1, 1e-5)])
    def test_values(self, step, expected):
        assert lr_at(LrSchedule(1e-3, 100), step) == pytest.approx(expected, rel=1e-12)

    def test_step_zero_rejected(self):
        with pytest.raises(ValueError):
            lr_at(LrSchedule(1e-3, 100), 0)

    @given(st.integers(1, 10_000), st.integers(1, 500))
    def test_positive_and_bounded_by_peak(self, step, warmup):
        lr = lr_at(LrSchedule(2e-3, warmup), step)
        assert 0 < lr <= 2e-3

    @pytest.mark.parametrize("peak, warmup", [(0.0, 10), (1e-3, 0)])
    def test_invalid_schedule(self, peak, warmup):
        with pytest.raises(ValueError):
            LrSchedule(peak, warmup)
