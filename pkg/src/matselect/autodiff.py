"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations the selection pipeline needs: broadcasting arithmetic,
matmul, a few smooth nonlinearities, reductions, shape surgery, stride-1
same-padded convolution, linear resampling along one axis, and cell
gathering. Graphs are built dynamically; nodes whose parents carry no
gradient collapse to constants, so inference pays no tape overhead.

Everything is float64. That is deliberate: the gradient acceptance checks
compare analytic gradients against central finite differences at 1e-4
relative error, which leaves no room for single-precision noise.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    # -- graph construction helpers -----------------------------------------

    @staticmethod
    def _make(data, parents, backward_fn):
        if any(p.requires_grad for p in parents):
            return Tensor(data, parents, backward_fn, requires_grad=True)
        return Tensor(data)

    def backward(self):
        """Accumulate gradients of this scalar into every parameter node."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            self._accumulate(-g)

        return Tensor._make(-self.data, (self,), bw)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / other.data ** 2, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))

        return Tensor._make(out_data, (self,), bw)

    def __matmul__(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data

        def bw(g):
            if self.requires_grad:
                ga = g @ np.swapaxes(other.data, -1, -2) if other.ndim >= 2 else np.outer(g, other.data)
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.swapaxes(self.data, -1, -2) @ g if self.ndim >= 2 else np.outer(self.data, g)
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._make(out_data, (self, other), bw)

    # -- shape surgery ---------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_data = self.data.reshape(shape)

        def bw(g):
            self._accumulate(g.reshape(old))

        return Tensor._make(out_data, (self,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(inverse))

        return Tensor._make(self.data.transpose(axes), (self,), bw)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bw(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            self._accumulate(gx)

        return Tensor._make(out_data, (self,), bw)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).copy())

        return Tensor._make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out_data)

    return Tensor._make(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return Tensor._make(np.log(x.data), (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bw(g):
        x._accumulate(g * 0.5 / out_data)

    return Tensor._make(out_data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    out_data = np.where(x.data >= 0,
                        1.0 / (1.0 + np.exp(-np.abs(x.data))),
                        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bw(g):
        x._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out_data ** 2))

    return Tensor._make(out_data, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, which matters for the
    finite-difference gradient checks."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    out_data = x.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data ** 2)
        x._accumulate(g * (cdf + x.data * pdf))

    return Tensor._make(out_data, (x,), bw)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) computed without overflow; derivative sigmoid(x)."""
    out_data = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)

    def bw(g):
        x._accumulate(g * np.where(x.data >= 0,
                                   1.0 / (1.0 + np.exp(-np.abs(x.data))),
                                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data)))))

    return Tensor._make(out_data, (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(x.data, lo, hi)

    def bw(g):
        x._accumulate(g * ((x.data >= lo) & (x.data <= hi)))

    return Tensor._make(out_data, (x,), bw)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, numerically stabilized."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        x._accumulate(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return Tensor._make(s, (x,), bw)


# ---------------------------------------------------------------------------
# Structured ops
# ---------------------------------------------------------------------------

def concat(tensors: list[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(a, b)
                t._accumulate(g[tuple(index)])

    return Tensor._make(out_data, tuple(tensors), bw)


def apply_matrix(x: Tensor, m: np.ndarray, axis: int) -> Tensor:
    """Linear map ``out = m @ x`` along one axis; m is a constant weight
    matrix (resampling kernel), never a parameter."""
    m = np.asarray(m, dtype=np.float64)
    out_data = np.moveaxis(np.tensordot(m, x.data, axes=([1], [axis])), 0, axis)

    def bw(g):
        x._accumulate(np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis))

    return Tensor._make(out_data, (x,), bw)


def gather_cells(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick feature vectors at (row, col) cells of an (H, W, C) map -> (k, C)."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out_data = x.data[rows, cols]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        x._accumulate(gx)

    return Tensor._make(out_data, (x,), bw)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, kh*kw*C) patches under same zero padding."""
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H, W, C, kh, kw) -> (B, H, W, kh, kw, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    b, h, w = x.shape[0], x.shape[1], x.shape[2]
    return np.ascontiguousarray(win).reshape(b, h, w, kh * kw * x.shape[3])


def _conv_forward(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    kh, kw, cin, cout = weight.shape
    cols = _im2col(x, kh, kw)
    return cols @ weight.reshape(kh * kw * cin, cout)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, same-zero-padded 2-D convolution (cross-correlation).

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout) with odd kh, kw;
    bias: (Cout,).
    """
    kh, kw, cin, cout = weight.shape
    training = x.requires_grad or weight.requires_grad or bias.requires_grad
    cols = _im2col(x.data, kh, kw)  # kept for the weight gradient
    out_data = cols @ weight.data.reshape(kh * kw * cin, cout) + bias.data
    if not training:
        return Tensor(out_data)

    def bw(g):
        if weight.requires_grad:
            gw = cols.reshape(-1, kh * kw * cin).T @ g.reshape(-1, cout)
            weight._accumulate(gw.reshape(kh, kw, cin, cout))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            # stride-1 same-padding adjoint: correlate with the spatially
            # flipped kernel, channel roles swapped (exact for odd kernels)
            w_flip = weight.data[::-1, ::-1].transpose(0, 1, 3, 2)
            x._accumulate(_conv_forward(g, w_flip))

    return Tensor(out_data, (x, weight, bias), bw, requires_grad=True)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalization over the last axis, composed from primitives."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

def gradcheck(loss_fn, params: dict[str, Tensor], rng: np.random.Generator,
              samples_per_group: int = 8, step: float = 1e-6) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must rebuild the graph from ``params`` and return a scalar
    Tensor. For each parameter group a random subset of components is
    perturbed; returns the norm-relative error per group. Finite
    differences evaluate only ``loss_fn().data``, so the oracle shares no
    code with the backward pass.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    errors = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(samples_per_group, n), replace=False)
        fd = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            flat[i] = orig + h
            hi = float(loss_fn().data)
            flat[i] = orig - h
            lo = float(loss_fn().data)
            flat[i] = orig
            fd[k] = (hi - lo) / (2.0 * h)
        ana = analytic[name].reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(fd), 1e-12)
        errors[name] = float(np.linalg.norm(ana - fd) / denom)
    return errors
