"""Gradient correctness of every autodiff op against central differences."""

import numpy as np
import pytest

from tmegraph import autodiff as ad
from tmegraph.nn import gradient_check

RNG = np.random.default_rng(20240811)


def check(build, params, tol=1e-6):
    err = gradient_check(build, params, eps=1e-6)
    assert err < tol, f"max rel grad error {err:.3e}"


def test_arithmetic_and_broadcast():
    a = ad.parameter(RNG.normal(size=(3, 4)))
    b = ad.parameter(RNG.normal(size=(1, 4)))

    def loss():
        return ((a * b + a / 2.0 - b) * (a + 1.5)).sum()

    check(loss, {"a": a, "b": b})


def test_matmul_transpose_reshape_concat():
    a = ad.parameter(RNG.normal(size=(4, 3)))
    w = ad.parameter(RNG.normal(size=(3, 5)))

    def loss():
        y = a @ w
        z = ad.concat([y, y * 2.0], axis=1)
        return (z.T.reshape(4 * 10) * z.T.reshape(4 * 10)).sum()

    check(loss, {"a": a, "w": w})


def test_reductions_and_nonlinearities():
    x = ad.parameter(RNG.normal(size=(5, 6)))

    def loss():
        y = ad.relu(x) + ad.sigmoid(x) + ad.exp(x * 0.1)
        return y.mean(axis=0).sum() + ad.sqrt(ad.exp(x)).sum() + y.sum(axis=1, keepdims=True).sum()

    check(loss, {"x": x})


def test_log_with_floor():
    x = ad.parameter(np.abs(RNG.normal(size=(4, 4))) + 0.5)

    def loss():
        return ad.log(x, floor=1e-12).sum()

    check(loss, {"x": x})


def test_softmax_logsumexp():
    x = ad.parameter(RNG.normal(size=(6, 5)))

    def loss():
        s = ad.softmax(x, axis=1)
        l = ad.logsumexp(x * 0.7, axis=1)
        return (s * s).sum() + l.sum()

    check(loss, {"x": x})


def test_softmax_rows_sum_to_one():
    x = RNG.normal(size=(7, 4))
    s = ad.softmax(ad.constant(x), axis=1).numpy()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_gather_take_keepmax():
    x = ad.parameter(RNG.normal(size=(6, 4)))
    idx = np.array([0, 2, 2, 5])
    rows = np.array([0, 1, 3])
    cols = np.array([1, 2, 0])

    def loss():
        g = ad.gather_rows(x, idx)
        t = ad.take_pairs(x, rows, cols)
        m = ad.keep_row_max(x * 1.3)
        return (g * g).sum() + (t * t).sum() + m.sum()

    check(loss, {"x": x})


def test_edge_mean_aggregate_path_graph():
    # path 1-2-3 with scalar features (1,2,3): mean+self-loop gives (1.5, 2, 2.5)
    z = ad.constant(np.array([[1.0], [2.0], [3.0]]))
    src = np.array([0, 1, 1, 2])
    dst = np.array([1, 0, 2, 1])
    out = ad.edge_mean_aggregate(z, src, dst, 3).numpy()
    np.testing.assert_allclose(out[:, 0], [1.5, 2.0, 2.5])


def test_edge_mean_aggregate_gradients():
    z = ad.parameter(RNG.normal(size=(5, 3)))
    src = np.array([0, 1, 1, 2, 4, 3])
    dst = np.array([1, 0, 2, 1, 3, 4])

    def loss():
        a = ad.edge_mean_aggregate(z, src, dst, 5)
        b = ad.edge_mean_aggregate(z, src, dst, 5, normalize=False)
        return (a * a).sum() + (b * 0.5).sum()

    check(loss, {"z": z})


def test_conv2d_matches_direct_loop():
    x = RNG.normal(size=(2, 6, 6, 3))
    w = RNG.normal(size=(3, 3, 3, 4))
    b = RNG.normal(size=(4,))
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), stride=2, pad=1).numpy()
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[n, i * 2:i * 2 + 3, j * 2:j * 2 + 3, :]
                ref[n, i, j] = np.tensordot(patch, w, axes=3) + b
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_conv2d_and_gap_gradients():
    x = ad.parameter(RNG.normal(size=(2, 5, 5, 2)))
    w = ad.parameter(RNG.normal(size=(3, 3, 2, 3)) * 0.5)
    b = ad.parameter(RNG.normal(size=(3,)))

    def loss():
        y = ad.relu(ad.conv2d(x, w, b, stride=2, pad=1))
        return (ad.global_avg_pool(y) ** 2 if False else ad.global_avg_pool(y) * ad.global_avg_pool(y)).sum()

    check(loss, {"x": x, "w": w, "b": b})


def test_backward_requires_scalar():
    x = ad.parameter(RNG.normal(size=(3, 3)))
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_grad_accumulates_over_reuse():
    x = ad.parameter(np.array([2.0]))
    y = x * x + x * 3.0
    y.backward()
    np.testing.assert_allclose(x.grad, [7.0])
