"""Window attention (W-MSA / SW-MSA) and the two-layer Swin block."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, gelu, layer_norm, linear, roll, softmax_lastdim, take

# Large finite logit offset for masked pairs: exp() underflows to exactly 0
# while keeping every intermediate finite.
MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowSpec:
    window: int
    shift: int = 0
    heads: int = 1

    def __post_init__(self):
        if self.window < 1:
            raise ParameterError(f"window must be >= 1, got {self.window}")
        if not 0 <= self.shift < self.window:
            raise ParameterError(f"shift must satisfy 0 <= shift < window, got {self.shift}")
        if self.heads < 1:
            raise ParameterError(f"heads must be >= 1, got {self.heads}")


@dataclass
class SwinLayerParams:
    """Weights of one pre-norm attention + MLP layer."""

    norm1_gamma: Tensor
    norm1_beta: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    rel_bias: Optional[Tensor] = None

    @classmethod
    def from_store(cls, store, prefix):
        names = [f for f in cls.__dataclass_fields__ if f != "rel_bias"]
        kwargs = {f: store[f"{prefix}.{f}"] for f in names}
        key = f"{prefix}.rel_bias"
        kwargs["rel_bias"] = store[key] if key in store else None
        return cls(**kwargs)


def layer_param_shapes(channels, window, heads, mlp_ratio=4.0, rel_bias=True):
    """``(suffix, shape, init)`` for every tensor of a :class:`SwinLayerParams`."""
    c = channels
    hidden = int(round(mlp_ratio * c))
    shapes = [
        ("norm1_gamma", (c,), "ones"),
        ("norm1_beta", (c,), "zeros"),
        ("qkv_w", (c, 3 * c), "dense"),
        ("qkv_b", (3 * c,), "zeros"),
        ("proj_w", (c, c), "dense"),
        ("proj_b", (c,), "zeros"),
        ("norm2_gamma", (c,), "ones"),
        ("norm2_beta", (c,), "zeros"),
        ("fc1_w", (c, hidden), "dense"),
        ("fc1_b", (hidden,), "zeros"),
        ("fc2_w", (hidden, c), "dense"),
        ("fc2_b", (c,), "zeros"),
    ]
    if rel_bias:
        shapes.append(("rel_bias", ((2 * window - 1) ** 2, heads), "zeros"))
    return shapes


def effective_window(grid_h, grid_w, window):
    """Window side and shift actually used on a ``grid_h x grid_w`` grid.

    A grid no larger than the window is attended as a single window and never
    shifted.
    """
    side = min(grid_h, grid_w)
    if side <= window:
        return side, 0
    return window, window // 2


def window_partition(x, grid_h, grid_w, window):
    """``B x L x C`` -> ``(B * nW) x window^2 x C``, windows in row-major order."""
    if x.ndim != 3 or x.shape[1] != grid_h * grid_w:
        raise DimensionError(f"sequence {x.shape} does not match a {grid_h}x{grid_w} grid")
    if grid_h % window or grid_w % window:
        raise DimensionError(f"{grid_h}x{grid_w} grid not divisible by window {window}")
    b, _, c = x.shape
    nh, nw = grid_h // window, grid_w // window
    x = x.reshape(b, nh, window, nw, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * nh * nw, window * window, c)


def window_reverse(windows, grid_h, grid_w, window):
    """Inverse of :func:`window_partition`."""
    if grid_h % window or grid_w % window:
        raise DimensionError(f"{grid_h}x{grid_w} grid not divisible by window {window}")
    nh, nw = grid_h // window, grid_w // window
    c = windows.shape[-1]
    b = windows.shape[0] // (nh * nw)
    x = windows.reshape(b, nh, nw, window, window, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid_h * grid_w, c)


def relative_position_index(window):
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def shifted_window_mask(grid_h, grid_w, window, shift):
    """Additive ``nW x N x N`` mask for attention on a cyclically shifted grid.

    Pairs that share a window only because of the cyclic wrap-around get
    :data:`MASK_VALUE`; all other entries are 0.
    """
    labels = np.zeros((grid_h, grid_w), dtype=np.int64)
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            labels[hs, ws] = cnt
            cnt += 1
    nh, nw = grid_h // window, grid_w // window
    lw = labels.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, -1)
    return np.where(lw[:, :, None] != lw[:, None, :], MASK_VALUE, 0.0)


def window_attention(x, grid_h, grid_w, params, spec):
    """Multi-head self-attention inside (optionally shifted) windows.

    ``params`` needs ``qkv_w``, ``qkv_b``, ``proj_w``, ``proj_b`` and optionally
    ``rel_bias`` of shape ``((2w-1)^2, heads)``.
    """
    b, length, c = x.shape
    heads, window, shift = spec.heads, spec.window, spec.shift
    if c % heads:
        raise ParameterError(f"{heads} heads do not divide {c} channels")
    if length != grid_h * grid_w:
        raise DimensionError(f"sequence length {length} does not match {grid_h}x{grid_w} grid")
    d = c // heads
    n = window * window

    if shift:
        xs = roll(x.reshape(b, grid_h, grid_w, c), (-shift, -shift), (1, 2))
        xs = xs.reshape(b, length, c)
    else:
        xs = x
    win = window_partition(xs, grid_h, grid_w, window)
    bn = win.shape[0]
    qkv = linear(win, params.qkv_w, params.qkv_b)
    qkv = qkv.reshape(bn, n, 3, heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = (q @ k.permute(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    if params.rel_bias is not None:
        idx = relative_position_index(window).reshape(-1)
        bias = take(params.rel_bias, idx).reshape(n, n, heads).permute(2, 0, 1)
        attn = attn + bias
    if shift:
        n_win = bn // b
        mask = shifted_window_mask(grid_h, grid_w, window, shift).astype(x.dtype)
        attn = attn.reshape(b, n_win, heads, n, n) + Tensor(mask[None, :, None])
        attn = attn.reshape(bn, heads, n, n)
    attn = softmax_lastdim(attn)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(bn, n, c)
    out = linear(out, params.proj_w, params.proj_b)
    out = window_reverse(out, grid_h, grid_w, window)
    if shift:
        out = roll(out.reshape(b, grid_h, grid_w, c), (shift, shift), (1, 2))
        out = out.reshape(b, length, c)
    return out


def swin_layer(x, grid_h, grid_w, params, spec, approximate="none"):
    """``x + attn(norm(x))`` followed by ``x + mlp(norm(x))``."""
    h = layer_norm(x, params.norm1_gamma, params.norm1_beta)
    x = x + window_attention(h, grid_h, grid_w, params, spec)
    h = layer_norm(x, params.norm2_gamma, params.norm2_beta)
    h = linear(gelu(linear(h, params.fc1_w, params.fc1_b), approximate), params.fc2_w, params.fc2_b)
    return x + h


def swin_block(x, grid_h, grid_w, layers, window, heads, approximate="none"):
    """W-MSA layer followed by SW-MSA layer (shift ``window // 2``)."""
    w_layer, sw_layer = layers
    ws, shift = effective_window(grid_h, grid_w, window)
    x = swin_layer(x, grid_h, grid_w, w_layer, WindowSpec(ws, 0, heads), approximate)
    return swin_layer(x, grid_h, grid_w, sw_layer, WindowSpec(ws, shift, heads), approximate)
