"""Minimal reverse-mode autodiff over numpy arrays.

Only what the network and its loss need is here: the five layer primitives
(conv2d, maxpool2d, batchnorm, dense, relu/dropout) plus a handful of
elementwise and reduction ops. Each op computes its forward result eagerly
and, when any input requires a gradient, records a closure that maps the
output gradient to input gradients. :class:`ComputeGraph` orders those
records topologically and replays them in reverse.
"""

import contextlib
import threading

import numpy as np

from .errors import ConfigError, DimensionError

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread (used for batched inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional array with an optional gradient.

    ``data`` is owned by the tensor and must not be modified after an op has
    consumed it; the backward closures hold references to it.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{label})"

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and reductions ----------------------------------------------


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, dtype=a.dtype if not isinstance(b, Tensor) else None)
    else:
        a = as_tensor(a, dtype=b.dtype)
    return a, b


def add(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def power(a, exponent):
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(a.data**exponent, (a,), backward, "pow")


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return _result(out_data, (a,), backward, "exp")


def log(a):
    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


def tsum(a, axis=None):
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a, axis=None):
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / count)


def reshape(a, shape):
    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


# layer primitives ----------------------------------------------------------


def _same_padding(extent, k, stride):
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, bias, stride=1, padding="same"):
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``kernel`` [O,C,kh,kw].

    ``padding`` is ``"valid"`` or ``"same"`` (TensorFlow convention: extra
    padding goes to the bottom/right when the total is odd).
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}",
            axes=("input.ndim", "kernel.ndim"),
        )
    n, c, h, w = x.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise DimensionError(
            f"conv2d channel mismatch: input has C={c}, kernel has C={ck}",
            axes=("input.C", "kernel.C"),
        )
    if bias.shape != (o,):
        raise DimensionError(
            f"conv2d bias must have shape ({o},), got {bias.shape}", axes=("bias.O", "kernel.O")
        )
    stride = int(stride)
    if stride < 1:
        raise ConfigError("conv2d stride must be a positive integer")
    if padding == "same":
        ho, top, bottom = _same_padding(h, kh, stride)
        wo, left, right = _same_padding(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise DimensionError(
                f"kernel {kh}x{kw} larger than input {h}x{w}", axes=("input.H", "input.W")
            )
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        top = bottom = left = right = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}; expected 'valid' or 'same'")

    xp = x.data
    if top or bottom or left or right:
        xp = np.pad(xp, ((0, 0), (0, 0), (top, bottom), (left, right)))
    # columns laid out [N, C, kh, kw, Ho, Wo] so the product lands in NCHW order
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + hi : stride, j : j + wi : stride]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    kmat = kernel.data.reshape(o, -1)
    out = np.matmul(kmat, cols).reshape(n, o, ho, wo) + bias.data.reshape(1, o, 1, 1)
    padded_shape = xp.shape

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        dk = None
        if kernel.requires_grad:
            dk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        db = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(kmat.T, g3).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(padded_shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + hi : stride, j : j + wi : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, top : top + h, left : left + w]
        return dx, dk, db

    return _result(out, (x, kernel, bias), backward, "conv2d")


def maxpool2d(x, return_indices=False):
    """2x2 max pooling with stride 2.

    Odd spatial extents are rejected rather than padded. The index record holds,
    per output cell, the row-major position (0..3) of the winning element in its
    window; ties go to the first position.
    """
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects [N,C,H,W], got {x.shape}", axes=("input.ndim",))
    n, c, h, w = x.shape
    odd = [name for name, ext in (("input.H", h), ("input.W", w)) if ext % 2]
    if odd:
        raise DimensionError(f"maxpool2d needs even spatial extents, got {h}x{w}", axes=odd)
    quads = [x.data[:, :, di::2, dj::2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    # first-occurrence masks in row-major window order
    masks, taken = [], np.zeros(out.shape, dtype=bool)
    for q in quads[:3]:
        m = (q == out) & ~taken
        masks.append(m)
        taken |= m
    masks.append(~taken)

    def backward(g):
        dx = np.zeros(x.shape, dtype=g.dtype)
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, :, di::2, dj::2] = g * m
        return (dx,)

    result = _result(out, (x,), backward, "maxpool2d")
    if return_indices:
        idx = sum(k * m for k, m in enumerate(masks)).astype(np.int64)
        return result, idx
    return result


def batchnorm(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    """Batch normalization over every axis except axis 1.

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode as ``(1 - momentum) * old + momentum * batch`` (biased batch
    variance).
    """
    if eps <= 0:
        raise ConfigError("batchnorm eps must be positive")
    ch = x.shape[1]
    for label, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (ch,):
            raise DimensionError(
                f"batchnorm {label} must have shape ({ch},), got {t.shape}", axes=(f"{label}.C", "input.C")
            )
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, ch) + (1,) * (x.ndim - 2)
    count = x.size // ch
    if count < 1:
        raise DimensionError("batchnorm needs at least one value per channel", axes=("input.N",))

    if training:
        mu = x.data.mean(axis=axes)
        var = ((x.data - mu.reshape(bshape)) ** 2).mean(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype).reshape(bshape)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            dx = inv / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` for ``x`` [N,F], ``weight`` [F,G]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"dense: cannot multiply {x.shape} by {weight.shape}", axes=("input.F", "weight.F")
        )
    if bias.shape != (weight.shape[1],):
        raise DimensionError(
            f"dense bias must have shape ({weight.shape[1]},), got {bias.shape}", axes=("bias.G", "weight.G")
        )

    def backward(g):
        dx = g @ weight.data.T if x.requires_grad else None
        dw = x.data.T @ g if weight.requires_grad else None
        return dx, dw, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), backward, "dense")


def dropout(x, rate, training, rng=None):
    """Inverted dropout. Evaluation mode returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)

    def backward(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), backward, "dropout")


# backward pass -------------------------------------------------------------


class ComputeGraph:
    """Topologically ordered record of the ops that produced ``output``.

    ``nodes`` lists inputs before the ops that consume them, so the backward
    pass walks it in reverse.
    """

    def __init__(self, output):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def leaves(self):
        return [t for t in self.nodes if not t._parents and t.requires_grad]

    def backward(self, params=None):
        """Populate ``.grad`` on every node and return the gradient map.

        With ``params`` (a name -> Tensor mapping) the result is keyed by name
        and parameters the output does not depend on get zero gradients.
        Without it, the result maps each grad-requiring leaf to its gradient.
        """
        loss = self.output
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}", axes=("loss",))
        for node in self.nodes:
            node.grad = None
        grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        if params is None:
            return {t: t.grad for t in self.leaves()}
        result = {}
        for name, t in params.items():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            result[name] = t.grad
        return result


def backward(loss, params=None):
    """Reverse-mode pass from a scalar ``loss``; see :meth:`ComputeGraph.backward`."""
    return ComputeGraph(loss).backward(params)


def grad_check(fn, inputs, h=1e-5, floor=1e-4):
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` maps the ``inputs`` tensors to a scalar tensor and must be
    deterministic. Every coordinate of every input is perturbed by ``+-h``.
    The relative error is ``|a - n| / max(|a|, |n|, floor)``, so gradients
    smaller than ``floor`` are judged on absolute error.
    """
    for t in inputs:
        t.requires_grad = True
    analytic = backward(fn(*inputs), {str(i): t for i, t in enumerate(inputs)})
    worst = 0.0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError("grad_check needs contiguous input arrays")
        a_flat = np.asarray(analytic[str(i)]).reshape(-1)
        with no_grad():
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                f_plus = float(fn(*inputs).data)
                flat[j] = orig - h
                f_minus = float(fn(*inputs).data)
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = float(a_flat[j])
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
