"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation in
this module returns a new tensor that remembers its inputs and a closure
mapping the output gradient to input gradients.  :func:`backward` walks the
recorded graph in reverse topological order.

Conventions
-----------
* Spatial tensors are ``B x H x W x C`` and sequence tensors ``B x L x C``,
  row-major throughout.
* ``gelu`` uses the exact erf form unless ``approximate="tanh"`` is passed.
* Every operation checks its output for NaN/Inf and raises
  :class:`~sftnet.errors.NonFiniteError` naming the operation.  The check can
  be switched off with :func:`set_finite_check` for benchmarking.
"""

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import DimensionError, NonFiniteError, ParameterError

_GRAD_ENABLED = True
_CHECK_FINITE = True


def set_finite_check(enabled):
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled():
    return _GRAD_ENABLED


class BranchTape:
    """Branch choices of piecewise ops (relu, abs, clamp), in call order.

    While recording, each piecewise op stores the branch it took.  While
    replaying, the ops reuse the stored branches, so the forward pass
    evaluates the smooth piece that contains the recorded point even after
    inputs move across a kink.  ``crossed`` tells whether the current replay
    pass disagreed with the record anywhere.
    """

    def __init__(self):
        self.branches = []
        self.pos = 0
        self.replaying = False
        self.crossed = False

    def rewind(self):
        self.pos = 0
        self.replaying = True
        self.crossed = False

    def branch(self, choice):
        if not self.replaying:
            self.branches.append(choice)
            return choice
        if self.pos >= len(self.branches):
            raise RuntimeError("branch tape exhausted: forward pass differs from the recorded one")
        recorded = self.branches[self.pos]
        self.pos += 1
        if recorded.shape != choice.shape:
            raise RuntimeError("branch tape shape mismatch: forward pass differs from the recorded one")
        if not self.crossed and not np.array_equal(recorded, choice):
            self.crossed = True
        return recorded


_TAPE = None


@contextlib.contextmanager
def branch_tape(tape):
    """Route the branch decisions of piecewise ops through ``tape``."""
    global _TAPE
    previous = _TAPE
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = previous


def _branch(choice):
    return choice if _TAPE is None else _TAPE.branch(choice)


class Tensor:
    """An n-dimensional array that can take part in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        return backward(self)

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data, parents, backward_fn, op):
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss):
    """Back-propagate from a scalar ``loss`` into every leaf that requires grad.

    Leaf gradients are accumulated into ``leaf.grad``.  Returns a dict from
    leaf tensor to its gradient array.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                leaves[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


def _topological_order(root):
    # iterative DFS; GRAY marks nodes on the current path so a cycle is detectable
    white, gray, black = 0, 1, 2
    color = {}
    order = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            color[key] = black
            order.append(node)
            continue
        state = color.get(key, white)
        if state == black:
            continue
        if state == gray:
            raise RuntimeError("cyclic computation record detected during backward")
        color[key] = gray
        stack.append((node, True))
        for parent in reversed(node._parents):
            pstate = color.get(id(parent), white)
            if pstate == gray:
                raise RuntimeError("cyclic computation record detected during backward")
            if pstate == white and parent.requires_grad:
                stack.append((parent, False))
    return order


# elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _record(a.data / b.data, (a, b), bw, "div")


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def power(x, exponent):
    exponent = float(exponent)
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _record(out, (x,), bw, "pow")


def exp(x):
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _record(out, (x,), bw, "exp")


def log(x):
    def bw(g):
        return (g / x.data,)

    return _record(np.log(x.data), (x,), bw, "log")


def absolute(x):
    sign = _branch(np.sign(x.data))

    def bw(g):
        return (g * sign,)

    return _record(x.data * sign, (x,), bw, "abs")


def clamp(x, lo, hi):
    """Clip values to ``[lo, hi]``; gradient passes only where unclipped."""
    region = _branch(np.where(x.data < lo, -1, np.where(x.data > hi, 1, 0)).astype(np.int8))
    inside = region == 0
    out = np.where(region < 0, lo, np.where(region > 0, hi, x.data)).astype(x.dtype, copy=False)

    def bw(g):
        return (g * inside,)

    return _record(out, (x,), bw, "clamp")


def relu(x):
    mask = _branch(x.data > 0)

    def bw(g):
        return (g * mask,)

    return _record(x.data * mask, (x,), bw, "relu")


def sigmoid(x):
    out = special.expit(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), bw, "sigmoid")


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_C = math.sqrt(2.0 / math.pi)


def gelu(x, approximate="none"):
    """Gaussian error linear unit, exact (erf) or tanh-approximated."""
    xd = x.data
    if approximate == "none":
        cdf = 0.5 * (1.0 + special.erf(xd / _SQRT_2))
        out = xd * cdf

        def bw(g):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
            return (g * (cdf + xd * pdf),)

    elif approximate == "tanh":
        inner = _TANH_C * (xd + 0.044715 * xd ** 3)
        t = np.tanh(inner)
        out = 0.5 * xd * (1.0 + t)

        def bw(g):
            dinner = _TANH_C * (1.0 + 3 * 0.044715 * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    else:
        raise ParameterError(f"unknown gelu approximation {approximate!r}")
    return _record(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


# reductions and shape ops ------------------------------------------------

def tensor_sum(x, axis=None, keepdims=False):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tensor_sum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc

    def bw(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bw, "reshape")


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _record(x.data.transpose(axes), (x,), bw, "permute")


def getitem(x, index):
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in parts)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            # basic indexing never selects an element twice
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record(np.array(x.data[index]), (x,), bw, "getitem")


def take(table, index):
    """Gather rows of ``table`` along axis 0 with an integer index array."""
    index = np.asarray(index)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        return (gt,)

    return _record(table.data[index], (table,), bw, "take")


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(
                f"cannot concatenate shapes {ref.shape} and {t.shape} on axis {axis}"
            )
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def roll(x, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)

    def bw(g):
        return (np.roll(g, tuple(-s for s in shifts), axis=axes),)

    return _record(np.roll(x.data, shifts, axis=axes), (x,), bw, "roll")


# linear algebra ----------------------------------------------------------

def matmul(a, b):
    """Batched matrix product ``a[..., M, K] @ b[..., K, N]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def softmax_lastdim(x):
    if x.ndim == 0 or x.shape[-1] == 0 or x.size == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (x,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last extent {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), bw, "layer_norm")


def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.9, eps=1e-5, update_running=True):
    """Batch normalization over every axis except the last (channel) axis.

    ``running_mean`` and ``running_var`` are numpy arrays updated in place in
    training mode as ``r <- momentum * r + (1 - momentum) * batch_stat``; the
    variance update uses the unbiased batch variance.
    """
    if eps <= 0:
        raise ParameterError(f"batch_norm eps must be positive, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm affine shapes do not match channel extent {c}")
    axes = tuple(range(x.ndim - 1))
    n = x.size // c
    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        if update_running:
            unbiased = var * (n / max(n - 1, 1))
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * unbiased
    else:
        mu = running_mean
        var = running_var
        centered = x.data - mu
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = (xhat * gamma.data + beta.data).astype(x.dtype, copy=False)

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                gx = rstd * (
                    dxhat - dxhat.mean(axis=axes) - xhat * (dxhat * xhat).mean(axis=axes)
                )
            else:
                gx = dxhat * rstd
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gamma, beta), bw, "batch_norm")


def conv2d(x, weight, bias=None, stride=1, padding="same"):
    """2-D cross-correlation on ``B x H x W x Cin`` input.

    ``weight`` has shape ``(kh, kw, Cin, Cout)``.  ``padding`` is ``"same"``
    (zero padding of ``(k - 1) // 2``, odd kernels only) or ``"valid"``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"same padding needs odd kernel extents, got {kh}x{kw}")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ParameterError(f"unknown padding {padding!r}")
    bsz, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # windows: B x Ho x Wo x Cin x kh x kw
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(windows, weight.data, axes=([3, 4, 5], [2, 0, 1]))
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {bias.shape} does not match Cout={cout}")
        out = out + bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += (
                        g @ weight.data[i, j].T
                    )
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
        if weight.requires_grad:
            gw = np.tensordot(windows, g, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _record(out, parents, bw, "conv2d")
