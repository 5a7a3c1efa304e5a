import numpy as np
import pytest

from grflow import autodiff as ad
from grflow.activations import TANH


def test_matmul_identity():
    a = ad.const(np.random.default_rng(0).normal(size=(3, 4)))
    out = ad.matmul(ad.const(np.eye(3)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_log_of_ones_is_zero():
    out = ad.log(ad.const(np.ones((2, 5))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 5)))


def test_log_rejects_nonpositive():
    with pytest.raises(ad.DomainError):
        ad.log(ad.const(np.array([[1.0, 0.0]])))


def test_tanh_of_zeros():
    out = TANH.apply(ad.const(np.zeros((2, 2))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 2)))


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.const(np.zeros((2, 2))), ad.const(np.zeros((3, 2))))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.const(np.zeros((2, 3))), ad.const(np.zeros((2, 3))))


def test_backward_sum_gives_ones():
    w = ad.Tensor2(np.random.default_rng(1).normal(size=(3, 2)), trainable=True)
    with ad.Tape() as tape:
        loss = ad.sum_all(w)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[w], np.ones((3, 2)))


def test_backward_quadratic_gives_w():
    w = ad.Tensor2(np.random.default_rng(2).normal(size=(4, 3)), trainable=True)
    with ad.Tape() as tape:
        loss = ad.scale(ad.sum_all(ad.mul(w, w)), 0.5)
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[w], w.data, rtol=1e-12)


def test_backward_requires_scalar_loss():
    w = ad.Tensor2(np.zeros((2, 2)), trainable=True)
    with ad.Tape() as tape:
        out = ad.scale(w, 2.0)
    with pytest.raises(ad.ShapeError):
        tape.backward(out)


def test_unreached_leaf_gets_zero_gradient():
    w = ad.Tensor2(np.ones((2, 2)), trainable=True)
    v = ad.Tensor2(np.ones((2, 2)), trainable=True)
    with ad.Tape() as tape:
        _unused = ad.scale(v, 3.0)
        loss = ad.sum_all(w)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[v], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[w], np.ones((2, 2)))


def _loss_and_grads(build, params):
    leaves = {k: ad.Tensor2(v, trainable=True) for k, v in params.items()}
    with ad.Tape() as tape:
        loss = build(leaves)
    return loss.item(), tape.backward(loss), leaves


def _finite_difference_check(build, params, h=1e-5, rtol=1e-4):
    value, grads, leaves = _loss_and_grads(build, params)
    for key, arr in params.items():
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            keep = arr[ix]
            arr[ix] = keep + h
            fp = _loss_and_grads(build, params)[0]
            arr[ix] = keep - h
            fm = _loss_and_grads(build, params)[0]
            arr[ix] = keep
            fd = (fp - fm) / (2 * h)
            an = grads[leaves[key]][ix]
            assert abs(an - fd) / (abs(fd) + 1e-8) < rtol, (key, ix, an, fd)
    return value


def test_masked_block_logdet_gradient_matches_finite_differences(rng):
    """Loss with log-diagonal terms: backward must produce second-derivative
    terms of the activation, checked against central differences."""
    d, width, n = 3, 6, 4
    mask1 = (rng.random((width, d)) < 0.7).astype(float)
    mask2 = (rng.random((d, width)) < 0.7).astype(float)
    np.fill_diagonal(mask1[:d], 1.0)
    np.fill_diagonal(mask2[:, :d], 1.0)
    x = rng.normal(size=(n, d))
    params = {
        "w1": rng.normal(size=(width, d)) * 0.4,
        "b1": np.zeros((1, width)),
        "w2": rng.normal(size=(d, width)) * 0.4,
        "b2": np.zeros((1, d)),
    }

    def build(leaves):
        w1 = ad.mul(leaves["w1"], ad.const(mask1))
        w2 = ad.mul(leaves["w2"], ad.const(mask2))
        pre = ad.add(ad.matmul(ad.const(x), ad.transpose(w1)), leaves["b1"])
        hidden = TANH.apply(pre)
        out = ad.add(ad.matmul(hidden, ad.transpose(w2)), leaves["b2"])
        y = ad.add(ad.const(x), out)
        k = ad.mul(ad.transpose(w2), w1)
        diag = ad.shift(ad.matmul(TANH.apply_d1(pre), k), 1.0)
        logdet = ad.rowsum(ad.log(diag))
        nll = ad.scale(ad.rowsum(ad.mul(y, y)), 0.5)
        return ad.scale(ad.sum_all(ad.sub(nll, logdet)), 1.0 / n)

    _finite_difference_check(build, params)


def test_primitive_gradients_against_finite_differences(rng):
    x_const = rng.normal(size=(3, 4))
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2)),
              "s": np.array([[0.7]])}

    def build(leaves):
        prod = ad.matmul(leaves["a"], leaves["b"])
        mixed = ad.concat_cols(prod, ad.slice_cols(leaves["a"], 0, 2))
        lse = ad.logsumexp_rows(mixed)
        scl = ad.smul(ad.exp(ad.scale(lse, 0.1)), leaves["s"])
        rows = ad.slice_rows(ad.add(scl, ad.const(np.ones((1, 1)))), 0, 3)
        return ad.sum_all(ad.mul(rows, rows))

    _finite_difference_check(build, params)


def test_diagonal_and_concat_rows_gradients(rng):
    params = {"a": rng.normal(size=(3, 3))}

    def build(leaves):
        d = ad.diagonal(leaves["a"])
        two = ad.concat_rows(d, ad.scale(d, 2.0))
        return ad.sum_all(ad.mul(two, two))

    _finite_difference_check(build, params)


def test_taping_is_exact_replay(rng):
    """Identical inputs reproduce bitwise identical outputs."""
    a = rng.normal(size=(5, 5))
    b = rng.normal(size=(5, 5))

    def run():
        with ad.Tape():
            out = ad.logsumexp_rows(ad.matmul(ad.const(a), TANH.apply(ad.const(b))))
        return out.data

    first, second = run(), run()
    assert np.array_equal(first, second)


def test_bias_row_broadcast_gradient(rng):
    params = {"bias": rng.normal(size=(1, 4))}
    x = rng.normal(size=(6, 4))

    def build(leaves):
        return ad.sum_all(ad.mul(ad.add(ad.const(x), leaves["bias"]),
                                 ad.add(ad.const(x), leaves["bias"])))

    _finite_difference_check(build, params)
