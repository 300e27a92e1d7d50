"""Spatial feature expansion and aggregation (SFEA) for skip connections.

The block turns a skip sequence ``B x D x C`` into a spatial map at 4x the
token-grid resolution with ``C/4`` channels (``E_PE``), refines it with two
``conv3x3 -> ReLU -> BN`` blocks that each add ``E_PE`` back, then flattens
4x4 blocks into tokens and projects ``4C -> C``.
"""

from dataclasses import dataclass

from .errors import DimensionError, ParameterError
from .patches import PatchGrid, patch_extract, patch_unextract
from .tensor import Tensor, batch_norm, concat, conv2d, linear, relu

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class SfeaParams:
    level: int
    grid_h: int
    grid_w: int
    channels: int
    expand_w: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    bn1_gamma: Tensor
    bn1_beta: Tensor
    bn1_mean: Tensor
    bn1_var: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    bn2_gamma: Tensor
    bn2_beta: Tensor
    bn2_mean: Tensor
    bn2_var: Tensor
    embed_w: Tensor
    embed_b: Tensor
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    _TENSORS = (
        "expand_w", "conv1_w", "conv1_b", "bn1_gamma", "bn1_beta", "bn1_mean", "bn1_var",
        "conv2_w", "conv2_b", "bn2_gamma", "bn2_beta", "bn2_mean", "bn2_var",
        "embed_w", "embed_b",
    )

    @classmethod
    def from_store(cls, store, prefix, level, grid_h, grid_w, channels):
        tensors = {name: store[f"{prefix}.{name}"] for name in cls._TENSORS}
        return cls(level=level, grid_h=grid_h, grid_w=grid_w, channels=channels, **tensors)


def sfea_param_shapes(channels):
    """``(suffix, shape, init, trainable)`` for one SFEA level with skip width ``channels``."""
    if channels % 4:
        raise DimensionError(f"SFEA needs channels divisible by 4, got {channels}")
    c, q = channels, channels // 4
    return [
        ("expand_w", (c, 16 * q), "dense", True),
        ("conv1_w", (3, 3, q, q), "conv", True),
        ("conv1_b", (q,), "zeros", True),
        ("bn1_gamma", (q,), "ones", True),
        ("bn1_beta", (q,), "zeros", True),
        ("bn1_mean", (q,), "zeros", False),
        ("bn1_var", (q,), "ones", False),
        ("conv2_w", (3, 3, q, q), "conv", True),
        ("conv2_b", (q,), "zeros", True),
        ("bn2_gamma", (q,), "ones", True),
        ("bn2_beta", (q,), "zeros", True),
        ("bn2_mean", (q,), "zeros", False),
        ("bn2_var", (q,), "ones", False),
        ("embed_w", (16 * q, c), "dense", True),
        ("embed_b", (c,), "zeros", True),
    ]


def _conv_block(x, w, b, gamma, beta, mean, var, training, params, update_running):
    y = relu(conv2d(x, w, b, padding="same"))
    return batch_norm(y, gamma, beta, mean.data, var.data, training,
                      params.momentum, params.eps, update_running)


def sfea_forward(skip, level, params, mode="train", update_running=True, trace=None):
    """Run one SFEA level on a skip sequence; returns ``B x D x C``.

    ``mode`` is ``"train"`` (batch statistics, running stats updated unless
    ``update_running`` is false) or ``"eval"`` (running statistics only).
    When ``trace`` is a dict, the intermediate shapes are recorded in it.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    if level != params.level:
        raise DimensionError(f"SFEA level {level} given parameters for level {params.level}")
    expected = (params.grid_h * params.grid_w, params.channels)
    if skip.ndim != 3 or tuple(skip.shape[1:]) != expected:
        raise DimensionError(
            f"SFEA level {level} expects B x {expected[0]} x {expected[1]}, got {skip.shape}"
        )
    training = mode == "train"
    grid = PatchGrid(params.grid_h, params.grid_w)

    e_pe = patch_unextract(linear(skip, params.expand_w), grid, 4)
    e_c1 = _conv_block(e_pe, params.conv1_w, params.conv1_b, params.bn1_gamma, params.bn1_beta,
                       params.bn1_mean, params.bn1_var, training, params, update_running) + e_pe
    e_c2 = _conv_block(e_c1, params.conv2_w, params.conv2_b, params.bn2_gamma, params.bn2_beta,
                       params.bn2_mean, params.bn2_var, training, params, update_running) + e_pe
    e_t = patch_extract(e_c2, 4)
    e_k = linear(e_t, params.embed_w, params.embed_b)
    if trace is not None:
        trace["E_PE"] = e_pe.shape
        trace["E_C1"] = e_c1.shape
        trace["E_C2"] = e_c2.shape
        trace["E_T"] = e_t.shape
        trace["E_K"] = e_k.shape
    return e_k


def concat_with_decoder(sfea_out, dec_out):
    """Channel concatenation, SFEA channels first."""
    if sfea_out.ndim != 3 or sfea_out.shape != dec_out.shape:
        raise DimensionError(
            f"cannot pair SFEA output {sfea_out.shape} with decoder output {dec_out.shape}"
        )
    return concat([sfea_out, dec_out], axis=-1)
