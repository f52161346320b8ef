"""Finite-difference verification of every autodiff primitive.

Each check perturbs every component of every input (full coverage, no
sampling) and compares the central difference against the analytic
gradient. Inputs are kept tiny so this stays fast.
"""

import numpy as np
import pytest

from matselect import autodiff as ad
from matselect.core import make_rng


def full_fd(loss_fn, param, h=1e-6):
    """Central finite differences over every component of one parameter."""
    flat = param.data.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        fd[i] = (hi - lo) / (2 * step)
    return fd.reshape(param.shape)


def assert_grads_match(loss_fn, params, tol=1e-6):
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        fd = full_fd(loss_fn, p)
        denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-10)
        assert np.linalg.norm(analytic - fd) / denom < tol, (analytic, fd)


def proj(t, rng):
    """Random linear projection to a scalar, so gradients are dense."""
    w = rng.standard_normal(t.shape)
    return (t * ad.Tensor(w)).sum()


@pytest.mark.parametrize("op_name", ["add", "mul", "sub", "div"])
def test_broadcast_arithmetic(op_name):
    rng = make_rng(1, hash(op_name) % 1000)
    a = ad.parameter(rng.standard_normal((3, 1, 4)))
    b = ad.parameter(rng.standard_normal((2, 4)) + 3.0)
    op = {"add": lambda: a + b, "mul": lambda: a * b,
          "sub": lambda: a - b, "div": lambda: a / b}[op_name]
    assert_grads_match(lambda: proj(op(), make_rng(2)), [a, b])


def test_pow_and_scalar_mix():
    rng = make_rng(3)
    a = ad.parameter(rng.random((3, 3)) + 0.5)
    assert_grads_match(lambda: proj(a ** 1.7 * 2.0 + 1.0 - a / 3.0, make_rng(4)), [a])


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)),
                                    ((2, 2, 3, 4), (2, 2, 4, 3)), ((5,) * 0 + (2, 4), (2, 4, 3))])
def test_matmul_broadcasting(shapes):
    rng = make_rng(5, shapes[0][0], shapes[1][-1])
    a = ad.parameter(rng.standard_normal(shapes[0]))
    b = ad.parameter(rng.standard_normal(shapes[1]))
    assert_grads_match(lambda: proj(a @ b, make_rng(6)), [a, b])


def test_reshape_transpose_getitem():
    rng = make_rng(7)
    a = ad.parameter(rng.standard_normal((4, 6)))

    def loss():
        x = a.reshape(2, 2, 6).transpose(2, 0, 1)
        y = x[1:5, :, 0]
        return proj(y, make_rng(8))

    assert_grads_match(loss, [a])


def test_concat():
    rng = make_rng(9)
    a = ad.parameter(rng.standard_normal((2, 3)))
    b = ad.parameter(rng.standard_normal((2, 5)))
    assert_grads_match(lambda: proj(ad.concat([a, b], axis=1), make_rng(10)), [a, b])


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_reductions(axis, keepdims):
    rng = make_rng(11, 0 if axis is None else 1)
    a = ad.parameter(rng.standard_normal((2, 3, 4)))
    assert_grads_match(lambda: proj(a.sum(axis=axis, keepdims=keepdims), make_rng(12)), [a])
    assert_grads_match(lambda: proj(a.mean(axis=axis, keepdims=keepdims), make_rng(13)), [a])


@pytest.mark.parametrize("fn", [ad.exp, ad.sigmoid, ad.tanh, ad.gelu,
                                lambda x: ad.log(x + 3.0), lambda x: ad.sqrt(x + 3.0),
                                ad.softmax])
def test_elementwise(fn):
    rng = make_rng(17)
    a = ad.parameter(rng.standard_normal((3, 5)))
    assert_grads_match(lambda: proj(fn(a), make_rng(18)), [a])


def test_clip_gradient_masks_outside():
    a = ad.parameter(np.array([-2.0, 0.3, 2.0]))
    out = ad.clip(a, 0.0, 1.0).sum()
    out.backward()
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


def test_apply_matrix_vs_fd():
    rng = make_rng(19)
    m = rng.standard_normal((5, 3))
    a = ad.parameter(rng.standard_normal((2, 3, 4)))
    assert_grads_match(lambda: proj(ad.apply_matrix(a, m, axis=1), make_rng(20)), [a])


def test_gather_cells_with_repeats():
    rng = make_rng(21)
    a = ad.parameter(rng.standard_normal((4, 5, 3)))
    rows = np.array([0, 3, 0, 2])
    cols = np.array([1, 4, 1, 0])  # (0,1) repeated: gradients must accumulate
    assert_grads_match(lambda: proj(ad.gather_cells(a, rows, cols), make_rng(22)), [a])


@pytest.mark.parametrize("kh,kw,cin,cout", [(3, 3, 2, 3), (1, 1, 4, 2), (3, 1, 2, 2), (5, 3, 1, 2)])
def test_conv2d_vs_fd(kh, kw, cin, cout):
    rng = make_rng(23, kh, kw, cin)
    x = ad.parameter(rng.standard_normal((2, 4, 5, cin)))
    w = ad.parameter(rng.standard_normal((kh, kw, cin, cout)) * 0.5)
    b = ad.parameter(rng.standard_normal(cout))
    assert_grads_match(lambda: proj(ad.conv2d(x, w, b), make_rng(24)), [x, w, b])


def test_conv2d_matches_direct_convolution():
    """Cross-check the im2col forward against a naive quadruple loop."""
    rng = make_rng(25)
    x = rng.standard_normal((1, 4, 4, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    b = rng.standard_normal(3)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
    expected = np.zeros((1, 4, 4, 3))
    for i in range(4):
        for j in range(4):
            for di in range(-1, 2):
                for dj in range(-1, 2):
                    si, sj = i + di, j + dj
                    if 0 <= si < 4 and 0 <= sj < 4:
                        expected[0, i, j] += x[0, si, sj] @ w[di + 1, dj + 1]
    expected += b
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_layer_norm_composition():
    rng = make_rng(27)
    x = ad.parameter(rng.standard_normal((3, 6)))
    gamma = ad.parameter(np.ones(6) + 0.1 * rng.standard_normal(6))
    beta = ad.parameter(0.1 * rng.standard_normal(6))
    assert_grads_match(lambda: proj(ad.layer_norm(x, gamma, beta), make_rng(28)),
                       [x, gamma, beta])


def test_softmax_rows_sum_to_one():
    rng = make_rng(29)
    s = ad.softmax(ad.Tensor(rng.standard_normal((4, 7)))).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s > 0).all()


def test_inference_graph_prunes_to_constants():
    a = ad.Tensor(np.ones((3, 3)))
    b = ad.Tensor(np.ones((3, 3)))
    out = ad.gelu(a @ b + 1.0)
    assert not out.requires_grad and out.parents == ()


def test_gradient_accumulates_across_shared_subgraphs():
    a = ad.parameter(np.array([2.0]))
    y = a * a + a * 3.0  # dy/da = 2a + 3 = 7
    y.sum().backward()
    np.testing.assert_allclose(a.grad, [7.0])


def test_gradcheck_utility_reports_small_errors():
    rng = make_rng(31)
    p = {"w": ad.parameter(rng.standard_normal((4, 4)))}

    def loss():
        return (ad.gelu(p["w"] @ p["w"]) ** 2.0).mean()

    errors = ad.gradcheck(loss, p, make_rng(32), samples_per_group=6)
    assert errors["w"] < 1e-6
