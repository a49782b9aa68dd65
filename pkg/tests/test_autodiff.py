import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualmix.autodiff import (OptimizerState, ShapeError, Tape, TapeError, Tensor, add, bilinear_upsample,
                              conv2d, cross_entropy_loss, kl_divergence_loss, poly_lr, relu, scale,
                              sgd_step, softmax, softmax_channel, tensor_sum)
from dualmix.gradcheck import check_grads, numeric_grad, relative_error
from oracles import loop_bilinear, loop_conv


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_example_center_is_ten(self):
        x = np.array([[[1, 2, 0], [3, 4, 0], [0, 0, 0]]], dtype=np.float32)
        out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=1)
        assert out.shape == (1, 3, 3)
        assert out.data[0, 1, 1] == 10

    @pytest.mark.parametrize("stride,dilation,padding", [(1, 1, 0), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 4, 4), (3, 1, 0)])
    def test_matches_loop_oracle(self, stride, dilation, padding):
        rng = np.random.default_rng(stride * 100 + dilation * 10 + padding)
        x = rng.standard_normal((3, 9, 11))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, dilation, padding)
        np.testing.assert_allclose(out.data, loop_conv(x, w, b, stride, dilation, padding), atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((3, 2, 6, 6))
        w, b = Tensor(rng.standard_normal((5, 2, 3, 3))), Tensor(rng.standard_normal(5))
        batched = conv2d(Tensor(x), w, b, padding=1).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), w, b, padding=1).data, atol=1e-12)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_weight_gradient_float32(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 5, 5)).astype(np.float32))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True, name="w")
        b = Tensor(np.zeros(3, np.float32), requires_grad=True, name="b")
        errs = check_grads(lambda: tensor_sum(conv2d(x, w, b, padding=1)), {"w": w}, step=1e-3)
        assert errs["w"] < 1e-2

    def test_gradients_float64(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 7, 7)), requires_grad=True, name="x")
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True, name="w")
        b = Tensor(rng.standard_normal(3), requires_grad=True, name="b")
        labels = rng.integers(0, 3, (4, 4))

        def loss():
            # CE readout gives every output position a distinct upstream gradient
            return cross_entropy_loss(conv2d(x, w, b, stride=2, dilation=2, padding=2), labels)

        errs = check_grads(loss, {"x": x, "w": w, "b": b})
        assert max(errs.values()) < 1e-4


class TestRelu:
    def test_examples(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert not relu(Tensor(-np.ones(7))).data.any()

    def test_subgradient_at_zero_is_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 3.0]), requires_grad=True, name="x")
        with Tape() as tape:
            loss = tensor_sum(relu(x))
        np.testing.assert_array_equal(tape.backward(loss, {"x": x})["x"], [0, 0, 1])

    def test_gradient_mask_by_finite_differences(self):
        rng = np.random.default_rng(4)
        data = rng.standard_normal(50)
        data[np.abs(data) < 0.01] = 0.5
        x = Tensor(data, requires_grad=True, name="x")
        num = numeric_grad(lambda: tensor_sum(relu(x)), x)
        np.testing.assert_allclose(num, (data > 0).astype(float), atol=1e-8)


class TestBilinear:
    def test_factor_one_is_identity(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 4))
        np.testing.assert_array_equal(bilinear_upsample(Tensor(x), 1).data, x)

    def test_constant_stays_constant(self):
        out = bilinear_upsample(Tensor(np.full((1, 3, 5), 2.5)), 3)
        assert out.shape == (1, 9, 15)
        np.testing.assert_allclose(out.data, 2.5)

    def test_two_pixel_example(self):
        out = bilinear_upsample(Tensor(np.array([[[0.0, 1.0]]])), 2)
        np.testing.assert_allclose(out.data[0, 0], [0, 0.25, 0.75, 1])

    @pytest.mark.parametrize("factor", [2, 3, 4])
    def test_matches_loop_oracle(self, factor):
        x = np.random.default_rng(factor).standard_normal((2, 4, 5))
        np.testing.assert_allclose(bilinear_upsample(Tensor(x), factor).data, loop_bilinear(x, factor), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        p = softmax_channel(Tensor(np.zeros((5, 1, 1)))).data
        np.testing.assert_allclose(p[:, 0, 0], 0.2)

    def test_log_example(self):
        logits = np.log(np.array([1.0, 2.0, 3.0])).reshape(3, 1, 1)
        np.testing.assert_allclose(softmax_channel(Tensor(logits)).data[:, 0, 0], [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (4, 3, 2), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        p = softmax(logits)
        np.testing.assert_allclose(p.sum(axis=0), 1, atol=1e-6)
        assert np.all(p >= 0)
        np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-6)

    def test_large_logits_stay_finite(self):
        p = softmax(np.array([1000.0, -1000.0, 0.0]).reshape(3, 1, 1).astype(np.float32))
        assert np.all(np.isfinite(p))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy_loss(Tensor(np.zeros((5, 1, 1))), np.array([[2]]))
        assert loss.item() == pytest.approx(math.log(5), abs=1e-12)

    def test_all_ignored_is_zero(self):
        loss = cross_entropy_loss(Tensor(np.ones((5, 2, 2))), np.full((2, 2), 255))
        assert loss.item() == 0.0

    def test_confident_true_class(self):
        logits = np.zeros((5, 1, 1), np.float32)
        logits[1] = 20
        assert cross_entropy_loss(Tensor(logits), np.array([[1]])).item() < 1e-8

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor(np.zeros((5, 1, 2))), np.array([[1, 5]]))

    def test_ignored_pixels_do_not_count(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((5, 1, 3))
        full = cross_entropy_loss(Tensor(logits[:, :, :2]), np.array([[0, 3]])).item()
        masked = cross_entropy_loss(Tensor(logits), np.array([[0, 3, 255]])).item()
        assert masked == pytest.approx(full, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5, 2, 3), elements=st.floats(-20, 20)),
           arrays(np.float64, (1, 2, 3), elements=st.floats(-50, 50)),
           arrays(np.int64, (2, 3), elements=st.sampled_from([0, 1, 2, 3, 4, 255])))
    def test_shift_invariance(self, logits, shift, labels):
        a = cross_entropy_loss(Tensor(logits), labels).item()
        b = cross_entropy_loss(Tensor(logits + shift), labels).item()
        assert a == pytest.approx(b, abs=1e-6)


class TestKLDivergence:
    def test_zero_against_own_softmax(self):
        logits = np.random.default_rng(6).standard_normal((4, 3, 3))
        assert abs(kl_divergence_loss(softmax(logits), Tensor(logits)).item()) < 1e-12

    def test_closed_form_and_gradient(self):
        target = np.array([1.0, 0.0]).reshape(2, 1, 1)
        s = Tensor(np.zeros((2, 1, 1)), requires_grad=True, name="s")
        with Tape() as tape:
            loss = kl_divergence_loss(target, s)
        assert loss.item() == pytest.approx(math.log(2), abs=1e-12)
        np.testing.assert_allclose(tape.backward(loss, {"s": s})["s"][:, 0, 0], [-0.5, 0.5], atol=1e-12)
        num = numeric_grad(lambda: kl_divergence_loss(target, s), s)
        np.testing.assert_allclose(num[:, 0, 0], [-0.5, 0.5], atol=1e-8)

    def test_invalid_targets_rejected(self):
        with pytest.raises(ValueError):
            kl_divergence_loss(np.array([1.2, -0.2]).reshape(2, 1, 1), Tensor(np.zeros((2, 1, 1))))
        with pytest.raises(ValueError):
            kl_divergence_loss(np.array([0.5, 0.6]).reshape(2, 1, 1), Tensor(np.zeros((2, 1, 1))))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 2, 2), elements=st.floats(-10, 10)),
           arrays(np.float64, (3, 2, 2), elements=st.floats(-10, 10)))
    def test_nonnegative(self, t_logits, s_logits):
        assert kl_divergence_loss(softmax(t_logits), Tensor(s_logits)).item() >= -1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.random.default_rng(0).standard_normal((2, 3)), requires_grad=True, name="p")
        with Tape() as tape:
            loss = tensor_sum(p)
        np.testing.assert_array_equal(tape.backward(loss, {"p": p})["p"], np.ones((2, 3)))

    def test_zero_scaled_loss_gives_zero_grads(self):
        p = Tensor(np.ones((2, 2)), requires_grad=True, name="p")
        with Tape() as tape:
            loss = scale(tensor_sum(relu(p)), 0.0)
        assert not tape.backward(loss, {"p": p})["p"].any()

    def test_unreachable_parameter_gets_zeros(self):
        p = Tensor(np.ones(3), requires_grad=True, name="p")
        q = Tensor(np.ones((2, 2)), requires_grad=True, name="q")
        with Tape() as tape:
            loss = tensor_sum(p)
        grads = tape.backward(loss, {"p": p, "q": q})
        np.testing.assert_array_equal(grads["q"], np.zeros((2, 2)))

    def test_fan_out_accumulates(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True, name="p")
        with Tape() as tape:
            loss = tensor_sum(add(add(p, p), scale(p, 3.0)))
        np.testing.assert_array_equal(tape.backward(loss, {"p": p})["p"], [5, 5])

    def test_second_backward_rejected_until_reset(self):
        p = Tensor(np.ones(2), requires_grad=True, name="p")
        with Tape() as tape:
            loss = tensor_sum(p)
        tape.backward(loss, {"p": p})
        with pytest.raises(TapeError):
            tape.backward(loss, {"p": p})
        tape.reset()
        with tape:
            loss = tensor_sum(p)
        tape.backward(loss, {"p": p})

    def test_composite_conv_relu_ce(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((3, 6, 6)))
        w1 = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.5, requires_grad=True, name="w1")
        b1 = Tensor(rng.standard_normal(4) * 0.1, requires_grad=True, name="b1")
        w2 = Tensor(rng.standard_normal((5, 4, 1, 1)) * 0.5, requires_grad=True, name="w2")
        b2 = Tensor(np.zeros(5), requires_grad=True, name="b2")
        labels = rng.integers(0, 5, (6, 6))
        labels[0, :2] = 255

        def loss():
            return cross_entropy_loss(conv2d(relu(conv2d(x, w1, b1, padding=1)), w2, b2), labels)

        errs = check_grads(loss, {"w1": w1, "b1": b1, "w2": w2, "b2": b2})
        assert max(errs.values()) < 1e-4

    def test_operations_are_deterministic(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        a = conv2d(Tensor(x), Tensor(w), padding=1).data
        b = conv2d(Tensor(x.copy()), Tensor(w.copy()), padding=1).data
        assert a.tobytes() == b.tobytes()


class TestOptimizer:
    def test_poly_lr_examples(self):
        state = OptimizerState(max_iter=1000)
        assert poly_lr(0, state) == 2.5e-4
        assert poly_lr(1000, state) == 0.0
        assert poly_lr(500, state) == pytest.approx(1.3397e-4, rel=1e-4)

    def test_poly_lr_past_end_rejected(self):
        with pytest.raises(ValueError):
            poly_lr(11, OptimizerState(max_iter=10))

    def test_plain_gradient_step(self):
        p = {"p": Tensor(np.array([1.0, 2.0]))}
        state = OptimizerState(base_lr=0.1, momentum=0.0, weight_decay=0.0, power=1.0, max_iter=10**9)
        sgd_step(p, {"p": np.array([1.0, -1.0])}, state)
        np.testing.assert_allclose(p["p"].data, [0.9, 2.1], atol=1e-9)
        assert state.iteration == 1

    def test_momentum_recurrence(self):
        p = {"p": Tensor(np.array([1.0]))}
        # power 0 keeps lr fixed at 0.1 for both steps
        state = OptimizerState(base_lr=0.1, momentum=0.9, weight_decay=0.0, power=0.0, max_iter=10)
        for _ in range(2):
            sgd_step(p, {"p": np.array([1.0])}, state)
        assert p["p"].data[0] == pytest.approx(0.71, abs=1e-12)
        assert state.velocity["p"].shape == (1,)

    def test_zero_gradient_no_change(self):
        p = {"p": Tensor(np.array([3.0, -4.0]))}
        state = OptimizerState(base_lr=0.1, weight_decay=0.0, max_iter=10)
        sgd_step(p, {"p": np.zeros(2)}, state)
        np.testing.assert_array_equal(p["p"].data, [3, -4])

    def test_weight_decay_enters_velocity(self):
        p = {"p": Tensor(np.array([2.0]))}
        state = OptimizerState(base_lr=0.5, momentum=0.0, weight_decay=0.1, power=0.0, max_iter=10)
        sgd_step(p, {"p": np.array([0.0])}, state)
        assert p["p"].data[0] == pytest.approx(2.0 - 0.5 * 0.2)


class TestGradcheckHelpers:
    def test_relative_error_scale(self):
        assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0
        assert relative_error(np.zeros(3), np.zeros(3)) == 0
        assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
