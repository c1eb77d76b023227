"""Shared test helpers: finite-difference gradient oracle and the primitive
op case list used by both the unit tests and the acceptance gate."""

from __future__ import annotations

import numpy as np

from spalm import autodiff as ad
from spalm.autodiff import Tensor


def assert_close(a, b, rtol=1e-3, atol=1e-6, msg=""):
    a = np.asarray(a)
    b = np.asarray(b)
    if not np.allclose(a, b, rtol=rtol, atol=atol):
        err = np.max(np.abs(a - b))
        raise AssertionError(f"{msg} max|diff|={err:.3e}\n a={a}\n b={b}")


def finite_diff_grads(loss_fn, params, h=1e-4):
    """Central-difference gradients of a scalar loss wrt each param tensor.

    Perturbs the underlying arrays in place; loss_fn must rebuild the graph
    from those arrays on every call.
    """
    grads = []
    for p in params:
        flat = p.data.ravel()
        g = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = float(loss_fn().data)
            flat[i] = keep - h
            down = float(loss_fn().data)
            flat[i] = keep
            g[i] = (up - down) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def gradcheck(loss_fn, params, rtol=1e-3, atol=1e-6, msg=""):
    for p in params:
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)
    numeric = finite_diff_grads(loss_fn, params)
    for p, num in zip(params, numeric):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        assert_close(analytic, num, rtol=rtol, atol=atol, msg=f"{msg} grad mismatch")


def _weighted(out, w):
    return ad.tensor_sum(ad.mul(out, Tensor(w)))


def primitive_op_cases(rng):
    """One random gradcheck instance per primitive op.

    Returns a list of (name, params, loss_fn). Sizes are tiny so central
    differences on every element stay cheap.
    """

    def randt(*shape):
        return ad.parameter(rng.standard_normal(shape))

    cases = []

    a, b = randt(3, 4), randt(3, 4)
    w = rng.standard_normal((3, 4))
    cases.append(("add", [a, b], lambda a=a, b=b, w=w: _weighted(ad.add(a, b), w)))

    a, b = randt(3, 4), randt(4)  # broadcast
    w = rng.standard_normal((3, 4))
    cases.append(("add_broadcast", [a, b], lambda a=a, b=b, w=w: _weighted(ad.add(a, b), w)))

    a, b = randt(3, 4), randt(3, 4)
    w = rng.standard_normal((3, 4))
    cases.append(("sub", [a, b], lambda a=a, b=b, w=w: _weighted(ad.sub(a, b), w)))

    a = randt(2, 3)
    w = rng.standard_normal((2, 3))
    cases.append(("neg", [a], lambda a=a, w=w: _weighted(ad.neg(a), w)))

    a, b = randt(3, 4), randt(3, 1)  # broadcast
    w = rng.standard_normal((3, 4))
    cases.append(("mul", [a, b], lambda a=a, b=b, w=w: _weighted(ad.mul(a, b), w)))

    a, b = randt(3, 4), randt(4, 2)
    w = rng.standard_normal((3, 2))
    cases.append(("matmul", [a, b], lambda a=a, b=b, w=w: _weighted(ad.matmul(a, b), w)))

    a, b = randt(2, 3, 4), randt(2, 4, 2)
    w = rng.standard_normal((2, 3, 2))
    cases.append(("matmul_batched", [a, b], lambda a=a, b=b, w=w: _weighted(ad.matmul(a, b), w)))

    a, b = randt(2, 2, 3, 4), randt(2, 4, 5)  # leading-dim broadcast
    w = rng.standard_normal((2, 2, 3, 5))
    cases.append(("matmul_broadcast", [a, b], lambda a=a, b=b, w=w: _weighted(ad.matmul(a, b), w)))

    a = ad.parameter(rng.uniform(0.5, 2.0, (3, 3)))
    w = rng.standard_normal((3, 3))
    cases.append(("pow_scalar", [a], lambda a=a, w=w: _weighted(ad.pow_scalar(a, 1.7), w)))

    a = randt(3, 3)
    w = rng.standard_normal((3, 3))
    cases.append(("exp", [a], lambda a=a, w=w: _weighted(ad.exp(a), w)))

    a = ad.parameter(rng.uniform(0.5, 3.0, (3, 3)))
    w = rng.standard_normal((3, 3))
    cases.append(("log", [a], lambda a=a, w=w: _weighted(ad.log(a), w)))

    a = ad.parameter(rng.standard_normal((4, 4)) + np.where(rng.random((4, 4)) < 0.5, -0.5, 0.5))
    a.data[np.abs(a.data) < 0.05] = 0.5  # keep clear of the kink
    w = rng.standard_normal((4, 4))
    cases.append(("relu", [a], lambda a=a, w=w: _weighted(ad.relu(a), w)))

    a = randt(2, 3, 4)
    w = rng.standard_normal((2, 4))
    cases.append(("sum_axis", [a], lambda a=a, w=w: _weighted(ad.tensor_sum(a, axis=1), w)))

    a = randt(2, 3, 4)
    w = rng.standard_normal((2, 3))
    cases.append(("mean_axis", [a], lambda a=a, w=w: _weighted(ad.tensor_mean(a, axis=-1), w)))

    a = randt(2, 6)
    w = rng.standard_normal((3, 4))
    cases.append(("reshape", [a], lambda a=a, w=w: _weighted(ad.reshape(a, (3, 4)), w)))

    a = randt(2, 3, 4)
    w = rng.standard_normal((4, 2, 3))
    cases.append(("transpose", [a], lambda a=a, w=w: _weighted(ad.transpose(a, (2, 0, 1)), w)))

    a, b = randt(2, 3), randt(4, 3)
    w = rng.standard_normal((6, 3))
    cases.append(("concat", [a, b], lambda a=a, b=b, w=w: _weighted(ad.concat([a, b], axis=0), w)))

    a = randt(5, 3)
    idx = rng.integers(0, 5, size=(2, 4))
    w = rng.standard_normal((2, 4, 3))
    cases.append(("gather_rows", [a], lambda a=a, idx=idx, w=w: _weighted(ad.gather_rows(a, idx), w)))

    a = randt(2, 3, 5)
    idx = rng.integers(0, 5, size=(3, 5))
    w = rng.standard_normal((2, 3, 5))
    cases.append(("gather_last", [a], lambda a=a, idx=idx, w=w: _weighted(ad.gather_last(a, idx), w)))

    a = randt(3, 6)
    idx = rng.integers(0, 6, size=(3,))
    w = rng.standard_normal((3,))
    cases.append(("select_last", [a], lambda a=a, idx=idx, w=w: _weighted(ad.select_last(a, idx), w)))

    a = randt(3, 5)
    w = rng.standard_normal((3, 5))
    cases.append(("softmax", [a], lambda a=a, w=w: _weighted(ad.softmax(a, axis=-1), w)))

    a = randt(3, 5)
    w = rng.standard_normal((3, 5))
    cases.append(("log_softmax", [a], lambda a=a, w=w: _weighted(ad.log_softmax(a, axis=-1), w)))

    a = randt(3, 4)
    w = rng.standard_normal((3, 4))
    cases.append(("sigmoid", [a], lambda a=a, w=w: _weighted(ad.sigmoid(a), w)))

    x, g, beta = randt(4, 6), randt(6), randt(6)
    w = rng.standard_normal((4, 6))
    cases.append(
        ("layer_norm", [x, g, beta], lambda x=x, g=g, b=beta, w=w: _weighted(ad.layer_norm(x, g, b), w))
    )

    x = randt(4, 6)
    w = rng.standard_normal((4, 6))
    seed = int(rng.integers(1 << 30))

    def dropout_loss(x=x, w=w, seed=seed):
        # identical mask on every call so the function stays differentiable
        return _weighted(ad.dropout(x, 0.3, np.random.default_rng(seed), True), w)

    cases.append(("dropout", [x], dropout_loss))

    return cases
