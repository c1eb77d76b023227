import numpy as np
import pytest

from conftest import assert_close, gradcheck, primitive_op_cases
from spalm import autodiff as ad
from spalm.autodiff import Tensor
from spalm.optim import AdamState, adam_step

# frozen high-precision oracle values (mpmath, 50 digits)
SOFTMAX_1_2 = (0.26894142136999512, 0.73105857863000488)
SIGMOID_1 = 0.73105857863000488
ADAM_STEP1_DELTA = 0.0009999999900000001


@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_sampled(seed):
    rng = np.random.default_rng(seed)
    for name, params, loss_fn in primitive_op_cases(rng):
        gradcheck(loss_fn, params, msg=name)


def test_softmax_uniform_logits():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).data
    assert_close(out, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x = rng.standard_normal(6)
        c = rng.uniform(-100, 100)
        assert_close(ad.softmax(Tensor(x)).data, ad.softmax(Tensor(x + c)).data, rtol=0, atol=1e-12)


def test_softmax_oracle_value():
    out = ad.softmax(Tensor([1.0, 2.0])).data
    assert_close(out, SOFTMAX_1_2, rtol=0, atol=1e-15)


def test_softmax_normalizes_and_finite_for_extreme_inputs():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(-700, 700, size=8)
        out = ad.softmax(Tensor(x)).data
        assert np.isfinite(out).all()
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-6


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor([1.0, np.nan]))
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor([np.inf, 0.0]))


def test_sigmoid_cases():
    assert float(ad.sigmoid(Tensor(0.0)).data) == 0.5
    assert abs(float(ad.sigmoid(Tensor(40.0)).data) - 1.0) < 1e-12
    assert abs(float(ad.sigmoid(Tensor(1.0)).data) - SIGMOID_1) < 1e-15


def test_sigmoid_complement_identity():
    rng = np.random.default_rng(11)
    x = rng.uniform(-30, 30, size=200)
    s = ad.sigmoid(Tensor(x)).data
    s_neg = ad.sigmoid(Tensor(-x)).data
    assert np.max(np.abs(s + s_neg - 1.0)) < 1e-9
    # monotone
    xs = np.sort(x)
    assert (np.diff(ad.sigmoid(Tensor(xs)).data) > 0).all()


def test_backward_quadratic():
    w = ad.parameter([1.0, 2.0])
    loss = ad.tensor_sum(ad.mul(w, w))
    ad.backward(loss)
    assert_close(w.grad, [2.0, 4.0], rtol=0, atol=1e-15)


def test_backward_requires_scalar():
    w = ad.parameter(np.ones((2, 2)))
    with pytest.raises(ValueError):
        ad.backward(ad.mul(w, w))


def test_stop_gradient_blocks_flow():
    w = ad.parameter([3.0, -1.0])
    s = ad.stop_gradient(w)
    loss = ad.tensor_sum(ad.mul(s, s))
    ad.backward(loss)
    assert w.grad is None or np.all(w.grad == 0.0)
    assert s.grad is None


def test_stop_gradient_mixed_path():
    # only the differentiable branch contributes
    w = ad.parameter([2.0])
    loss = ad.tensor_sum(ad.mul(w, ad.stop_gradient(w)))  # w * sg(w): d/dw = sg(w)
    ad.backward(loss)
    assert_close(w.grad, [2.0], rtol=0, atol=1e-15)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((4, 5))
    w1 = ad.parameter(rng.standard_normal((5, 7)) * 0.5)
    b1 = ad.parameter(np.zeros(7))
    w2 = ad.parameter(rng.standard_normal((7, 3)) * 0.5)
    b2 = ad.parameter(np.zeros(3))
    targets = rng.integers(0, 3, size=4)

    def loss_fn():
        hidden = ad.relu(ad.add(ad.matmul(Tensor(x), w1), b1))
        logits = ad.add(ad.matmul(hidden, w2), b2)
        logp = ad.log_softmax(logits, axis=-1)
        return ad.neg(ad.tensor_mean(ad.select_last(logp, targets)))

    gradcheck(loss_fn, [w1, b1, w2, b2], msg="mlp")


def test_adam_zero_grad_keeps_params():
    params = [np.array([1.0, -2.0]), np.array([[3.0]])]
    state = AdamState.init(params)
    grads = [np.zeros_like(p) for p in params]
    new_params, new_state = adam_step(params, grads, state)
    for p, q in zip(params, new_params):
        assert np.array_equal(p, q)
    assert new_state.step == 1


def test_adam_first_step_reference_value():
    params = [np.array([0.0])]
    state = AdamState.init(params)  # defaults lr=1e-3, betas 0.9/0.999, eps 1e-8
    new_params, _ = adam_step(params, [np.array([1.0])], state)
    assert abs(float(new_params[0][0]) + ADAM_STEP1_DELTA) < 1e-18


def test_adam_deterministic():
    rng = np.random.default_rng(0)
    params = [rng.standard_normal((3, 3))]
    grads = [rng.standard_normal((3, 3))]
    state = AdamState.init(params, lr=0.01)
    out1, st1 = adam_step(params, grads, state)
    out2, st2 = adam_step(params, grads, state)
    assert np.array_equal(out1[0], out2[0])
    assert np.array_equal(st1.m[0], st2.m[0])
    assert st1.step == st2.step == 1


def test_adam_step_counter_and_shape_check():
    params = [np.zeros(2)]
    state = AdamState.init(params)
    for expected in (1, 2, 3):
        params, state = adam_step(params, [np.ones(2)], state)
        assert state.step == expected
    with pytest.raises(ValueError):
        adam_step(params, [np.ones(3)], state)


def test_grad_accumulates_across_uses():
    w = ad.parameter([1.5])
    loss = ad.tensor_sum(ad.add(ad.mul(w, w), ad.mul(w, Tensor([3.0]))))  # w^2 + 3w
    ad.backward(loss)
    assert_close(w.grad, [2 * 1.5 + 3.0], rtol=0, atol=1e-15)


def test_dropout_eval_mode_is_identity():
    x = ad.parameter(np.ones((4, 4)))
    out = ad.dropout(x, 0.5, np.random.default_rng(0), training=False)
    assert out is x


def test_dropout_inverted_scaling_preserves_mean():
    rng = np.random.default_rng(5)
    x = Tensor(np.ones((200, 200)))
    out = ad.dropout(x, 0.25, rng, training=True)
    assert abs(out.data.mean() - 1.0) < 0.02
    kept = out.data[out.data != 0]
    assert_close(kept, np.full_like(kept, 1.0 / 0.75), rtol=0, atol=1e-12)
