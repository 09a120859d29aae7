"""Dense 4-D tensors with reverse-mode automatic differentiation.

Arrays are numpy-backed, float32 by default (float64 graphs are supported
for gradient verification: ops follow the dtype of their inputs). A Tensor
produced by an operation keeps closures to its parents, so a single
``backward`` sweep over the recorded graph fills ``grad`` on every
reachable parameter. Graph recording is skipped entirely when no input
requires gradients, which keeps frozen-model inference cheap.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, ndtr

DEFAULT_DTYPE = np.float32

_SQRT_2PI = 2.5066282746310002


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot be evaluated."""


class Tensor:
    """A dense numeric array with optional gradient tracking.

    Parameters are created with ``requires_grad=True``; results of
    operations track gradients whenever any input does. ``grad`` is
    populated (accumulated) by ``backward`` and is ``None`` until then.
    """

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = "leaf"):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self._backward_done = False
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, op, backward_fn):
    """Build a result tensor, recording the graph only when needed."""
    tracked = [p for p in parents if p.requires_grad or p._parents]
    if tracked:
        out = Tensor(data, requires_grad=True, _parents=parents, _op=op)
        out._backward = backward_fn
    else:
        out = Tensor(data, requires_grad=False, _op=op)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad or t._parents:
        if t.grad is None:
            t.grad = g.astype(t.data.dtype, copy=True)
        else:
            t.grad += g


# -- elementwise arithmetic ----------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def bwd(out):
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(out.grad, b.data.shape))

    return _make(a.data + b.data, (a, b), "add", bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def bwd(out):
        _accum(a, _unbroadcast(out.grad, a.data.shape))
        _accum(b, _unbroadcast(-out.grad, b.data.shape))

    return _make(a.data - b.data, (a, b), "sub", bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def bwd(out):
        _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), "mul", bwd)


def div(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)

    def bwd(out):
        _accum(a, _unbroadcast(out.grad / b.data, a.data.shape))
        _accum(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), "div", bwd)


def square(a: Tensor) -> Tensor:
    def bwd(out):
        _accum(a, out.grad * (2.0 * a.data))

    return _make(a.data * a.data, (a,), "square", bwd)


def sqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)

    def bwd(out):
        _accum(a, out.grad * (0.5 / root))

    return _make(root, (a,), "sqrt", bwd)


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)

    def bwd(out):
        _accum(a, out.grad * e)

    return _make(e, (a,), "exp", bwd)


def log(a: Tensor) -> Tensor:
    def bwd(out):
        _accum(a, out.grad / a.data)

    return _make(np.log(a.data), (a,), "log", bwd)


def tabs(a: Tensor) -> Tensor:
    def bwd(out):
        _accum(a, out.grad * np.sign(a.data))

    return _make(np.abs(a.data), (a,), "abs", bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(out):
        _accum(a, out.grad * (a.data > 0))

    return _make(np.maximum(a.data, 0), (a,), "relu", bwd)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)

    def bwd(out):
        _accum(a, out.grad * (s * (1.0 - s)))

    return _make(s, (a,), "sigmoid", bwd)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), numerically stable."""

    def bwd(out):
        _accum(a, out.grad * expit(a.data))

    return _make(np.logaddexp(np.array(0, dtype=a.dtype), a.data), (a,), "softplus", bwd)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a constant; gradient flows only above the floor."""
    mask = a.data > floor

    def bwd(out):
        _accum(a, out.grad * mask)

    return _make(np.maximum(a.data, floor), (a,), "maximum", bwd)


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])

    def bwd(out):
        _accum(a, out.grad.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), "reshape", bwd)


def tsum(a: Tensor) -> Tensor:
    def bwd(out):
        _accum(a, np.broadcast_to(out.grad, a.data.shape))

    return _make(a.data.sum(), (a,), "sum", bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(out):
        _accum(a, np.broadcast_to(out.grad / n, a.data.shape))

    return _make(a.data.mean(), (a,), "mean", bwd)


# -- convolution -----------------------------------------------------------

# Transient im2col buffers above this size are processed in row blocks
# (inference only; training shapes stay small enough to keep whole).
_COL_BYTES_LIMIT = 192 * 1024 * 1024


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Gather k x k patches of a padded NCHW array into (N, C*k*k, oh*ow)."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, k, k, oh, ow), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im_add(buf: np.ndarray, cols: np.ndarray, k: int, stride: int, oh: int, ow: int):
    """Scatter-add (N, C*k*k, oh*ow) patch gradients back into a padded buffer."""
    n, c, _, _ = buf.shape
    cols = cols.reshape(n, c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an (O, C, k, k) kernel.

    Output spatial extents are floor((H + 2*pad - k)/stride) + 1.
    """
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels supported, got {kernel.data.shape}")
    if ck != c:
        raise ValueError(
            f"conv2d: kernel expects {ck} input channels but input has {c} "
            f"(input {x.data.shape}, kernel {kernel.data.shape})"
        )
    if bias.data.shape != (o,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {o} output channels")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ValueError(f"conv2d: input {x.data.shape} too small for kernel {kernel.data.shape} with pad {pad}")
    k = kh
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1

    dtype = np.result_type(x.data, kernel.data)
    w2 = kernel.data.reshape(o, c * k * k).astype(dtype, copy=False)
    xp = _pad_hw(x.data.astype(dtype, copy=False), pad)

    track = any(t.requires_grad or t._parents for t in (x, kernel, bias))
    if not track and n * c * k * k * oh * ow * dtype.itemsize > _COL_BYTES_LIMIT:
        out_data = _conv2d_blocked(xp, w2, bias.data, k, stride, oh, ow, o, dtype)
        return _make(out_data, (x, kernel, bias), "conv2d", None)

    cols = _im2col(xp, k, stride, oh, ow)
    out_data = (w2 @ cols).reshape(n, o, oh, ow) + bias.data.reshape(1, o, 1, 1)

    def bwd(out):
        g = out.grad.reshape(n, o, oh * ow)
        if bias.requires_grad or bias._parents:
            _accum(bias, g.sum(axis=(0, 2)))
        if kernel.requires_grad or kernel._parents:
            dk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, dk.reshape(kernel.data.shape))
        if x.requires_grad or x._parents:
            dcols = np.matmul(w2.T, g)
            buf = np.zeros_like(xp)
            _col2im_add(buf, dcols, k, stride, oh, ow)
            dx = buf[:, :, pad : pad + h, pad : pad + w] if pad else buf
            _accum(x, dx)

    return _make(out_data, (x, kernel, bias), "conv2d", bwd)


def _conv2d_blocked(xp, w2, bias, k, stride, oh, ow, o, dtype):
    """Forward-only convolution in output-row blocks to bound memory."""
    n, c = xp.shape[0], xp.shape[1]
    rows_per_block = max(1, _COL_BYTES_LIMIT // max(1, n * c * k * k * ow * dtype.itemsize))
    out = np.empty((n, o, oh, ow), dtype=dtype)
    for r0 in range(0, oh, rows_per_block):
        r1 = min(oh, r0 + rows_per_block)
        sub = xp[:, :, r0 * stride : (r1 - 1) * stride + k, :]
        cols = _im2col(sub, k, stride, r1 - r0, ow)
        out[:, :, r0:r1, :] = (w2 @ cols).reshape(n, o, r1 - r0, ow)
    out += bias.reshape(1, o, 1, 1)
    return out


def conv_transpose2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: int = 1,
    pad: int = 0,
    output_pad: int = 0,
) -> Tensor:
    """Exact adjoint of ``conv2d``: NCHW input, (C_in, C_out, k, k) kernel.

    Output spatial extents are (H - 1)*stride - 2*pad + k + output_pad; the
    result equals conv2d's input-gradient for the matching forward shape, so
    <conv2d(a; K), b> == <a, conv_transpose2d(b; K)> holds identically.
    """
    n, ci, h, w = x.data.shape
    kc, co, kh, kw = kernel.data.shape
    if kh != kw:
        raise ValueError(f"conv_transpose2d: only square kernels supported, got {kernel.data.shape}")
    if kc != ci:
        raise ValueError(
            f"conv_transpose2d: kernel expects {kc} input channels but input has {ci} "
            f"(input {x.data.shape}, kernel {kernel.data.shape})"
        )
    if bias.data.shape != (co,):
        raise ValueError(
            f"conv_transpose2d: bias shape {bias.data.shape} does not match {co} output channels"
        )
    if not 0 <= output_pad < max(stride, 1):
        raise ValueError(f"conv_transpose2d: output_pad {output_pad} must be in [0, stride)")
    k = kh
    oh = (h - 1) * stride - 2 * pad + k + output_pad
    ow = (w - 1) * stride - 2 * pad + k + output_pad
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv_transpose2d: non-positive output extent for input {x.data.shape}")

    dtype = np.result_type(x.data, kernel.data)
    w2 = kernel.data.reshape(ci, co * k * k).astype(dtype, copy=False)
    x2 = x.data.reshape(n, ci, h * w).astype(dtype, copy=False)

    dcols = np.matmul(w2.T, x2)
    buf = np.zeros((n, co, oh + 2 * pad, ow + 2 * pad), dtype=dtype)
    _col2im_add(buf, dcols, k, stride, h, w)
    out_data = buf[:, :, pad : pad + oh, pad : pad + ow] if pad else buf
    out_data = out_data + bias.data.reshape(1, co, 1, 1)

    def bwd(out):
        gp = _pad_hw(out.grad.astype(dtype, copy=False), pad)
        gcols = _im2col(gp, k, stride, h, w)
        if bias.requires_grad or bias._parents:
            _accum(bias, out.grad.sum(axis=(0, 2, 3)))
        if kernel.requires_grad or kernel._parents:
            dk = np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accum(kernel, dk.reshape(kernel.data.shape))
        if x.requires_grad or x._parents:
            dx = np.matmul(w2, gcols).reshape(n, ci, h, w)
            _accum(x, dx)

    return _make(out_data, (x, kernel, bias), "conv_transpose2d", bwd)


# -- probability primitives -------------------------------------------------

def gaussian_bin_likelihood(y: Tensor, sigma: Tensor) -> Tensor:
    """Probability mass of the unit bin around each y under N(0, sigma^2).

    Computes Phi((y + 0.5)/sigma) - Phi((y - 0.5)/sigma) in float64
    internally (via the reflected form, stable far into the tails) and is
    differentiable with respect to both y and sigma.
    """
    yd = y.data.astype(np.float64, copy=False)
    sd = sigma.data.astype(np.float64, copy=False)
    v = np.abs(yd)
    upper = (0.5 - v) / sd
    lower = (-0.5 - v) / sd
    p = ndtr(upper) - ndtr(lower)

    def bwd(out):
        g = out.grad.astype(np.float64, copy=False)
        phi_u = np.exp(-0.5 * upper * upper) / _SQRT_2PI
        phi_l = np.exp(-0.5 * lower * lower) / _SQRT_2PI
        if y.requires_grad or y._parents:
            dv = (phi_l - phi_u) / sd
            _accum(y, _unbroadcast(g * dv * np.sign(yd), y.data.shape).astype(y.data.dtype))
        if sigma.requires_grad or sigma._parents:
            ds = (phi_l * lower - phi_u * upper) / sd
            _accum(sigma, _unbroadcast(g * ds, sigma.data.shape).astype(sigma.data.dtype))

    dtype = np.result_type(y.data, sigma.data)
    return _make(p.astype(dtype), (y, sigma), "gaussian_bin_likelihood", bwd)


# -- backward sweep -----------------------------------------------------------

def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad or p._parents:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Run one reverse sweep from a scalar loss, accumulating into ``grad``.

    A second sweep over the same graph is an error; rebuild the graph (or
    re-run the forward pass) between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss._parents:
        raise ValueError("backward on a detached tensor: loss was not produced by recorded operations")
    if loss._backward_done:
        raise RuntimeError("backward already ran on this graph; rebuild the graph before calling again")
    loss._backward_done = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def zero_grads(params):
    for p in params:
        p.grad = None


def grad_check(f, params, eps: float = 1e-3, max_samples: int = 24, seed: int = 0) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` rebuilds and returns the scalar loss from ``params`` on every
    call. Returns the max over sampled elements of
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    zero_grads(params)
    loss = f()
    _check_finite_graph(loss)
    backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = np.zeros_like(flat) if p.grad is None else p.grad.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_samples else np.sort(rng.choice(n, size=max_samples, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError("non-finite loss during finite-difference probing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst


def _check_finite_graph(loss: Tensor):
    for node in _topo_order(loss):
        if not np.all(np.isfinite(node.data)):
            raise GradCheckError(f"non-finite values in output of '{node._op}'")
