"""Swin-SFTNet assembly: configuration, parameter layout, forward pass, audit
and checkpoints.

Layout (token grid side ``g = H/4``)::

    patch embed            g^2 x C
    encoder stage s=1..3   swin block, then patch merge to (g/2^s)^2 x 2^s C
    bottleneck             swin block at (g/8)^2 x 8C
    decoder stage s=3..1   patch expand; concat [SFEA_s(encoder_s), expand]
                           -> linear 2C_s -> C_s; swin block
    final expand           4x4 unfold to H x W x final_depth
    head                   head_kernel x head_kernel conv (default 3) to out_channels, sigmoid

The embedding-similarity pairs are (encoder stage output, decoder expand
output) at each of the three levels.
"""

import struct
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .optim import AdamState, ParamStore
from .patches import PatchGrid, final_patch_expand, patch_embed, patch_expand, patch_merge
from .serialize import decode_tensor, encode_tensor
from .sfea import SfeaParams, concat_with_decoder, sfea_forward, sfea_param_shapes
from .swin import SwinLayerParams, effective_window, layer_param_shapes, swin_block
from .tensor import Tensor, conv2d, linear, sigmoid

DENSE_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    H: int = 256
    W: int = 256
    C: int = 128
    window: int = 8
    heads: Tuple[int, ...] = (4, 8, 16, 32)
    mlp_ratio: float = 4.0
    sfea_channels: Optional[Tuple[int, int, int]] = None
    out_channels: int = 1
    use_rel_pos_bias: bool = True
    final_depth: Optional[int] = None
    gelu_tanh: bool = False
    head_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(int(h) for h in self.heads))
        if self.sfea_channels is None:
            object.__setattr__(self, "sfea_channels", (self.C, 2 * self.C, 4 * self.C))
        else:
            object.__setattr__(self, "sfea_channels", tuple(int(c) for c in self.sfea_channels))
        if self.final_depth is None:
            object.__setattr__(self, "final_depth", max(self.C // 4, 1))

    @property
    def grid(self):
        return self.H // 4, self.W // 4

    def stage_grid(self, s):
        """Token grid of encoder stage ``s`` (0-based; 3 is the bottleneck)."""
        gh, gw = self.grid
        return gh >> s, gw >> s

    def stage_channels(self, s):
        return self.C << s

    def stage_window(self, s):
        return effective_window(*self.stage_grid(s), self.window)

    def validate(self):
        problems = []
        if self.H <= 0 or self.W <= 0 or self.H % 32 or self.W % 32:
            problems.append(f"H={self.H}, W={self.W} must be positive multiples of 32")
        if self.C < 4 or self.C % 4:
            problems.append(f"C={self.C} must be a positive multiple of 4")
        if len(self.heads) != 4:
            problems.append(f"heads needs 4 entries (3 stages + bottleneck), got {len(self.heads)}")
        if self.window < 1:
            problems.append(f"window={self.window} must be >= 1")
        if self.mlp_ratio <= 0:
            problems.append(f"mlp_ratio={self.mlp_ratio} must be positive")
        if self.out_channels != 1:
            problems.append(f"out_channels={self.out_channels}; only binary segmentation (1) is supported")
        if self.final_depth < 1:
            problems.append(f"final_depth={self.final_depth} must be >= 1")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            problems.append(f"head_kernel={self.head_kernel} must be a positive odd size")
        if self.sfea_channels != (self.C, 2 * self.C, 4 * self.C):
            problems.append(f"sfea_channels={self.sfea_channels} must equal (C, 2C, 4C)")
        if not problems:
            for s in range(4):
                gh, gw = self.stage_grid(s)
                ws, _ = self.stage_window(s)
                if gh % ws or gw % ws:
                    problems.append(f"stage {s} grid {gh}x{gw} not divisible by window {ws}")
                if s < len(self.heads) and self.stage_channels(s) % self.heads[s]:
                    problems.append(
                        f"stage {s}: {self.heads[s]} heads do not divide {self.stage_channels(s)} channels"
                    )
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self


FULL_SCALE = ModelConfig()
TOY_GRADCHECK = ModelConfig(H=32, W=32, C=8, window=4)
TOY_OVERFIT = ModelConfig(H=64, W=64, C=32, window=4)


@dataclass
class ForwardTrace:
    probs: Tensor
    logits: Tensor
    encoder_embeddings: List[Tensor]
    decoder_embeddings: List[Tensor]
    shapes: dict = field(default_factory=dict)


# parameter layout ---------------------------------------------------------

def param_specs(config):
    """Ordered ``(name, shape, init, trainable)`` for every tensor of the model."""
    config.validate()
    specs = []

    def swin(prefix, s):
        ws, _ = config.stage_window(s)
        for layer in ("l0", "l1"):
            for suffix, shape, init in layer_param_shapes(
                config.stage_channels(s), ws, config.heads[s], config.mlp_ratio, config.use_rel_pos_bias
            ):
                specs.append((f"{prefix}.{layer}.{suffix}", shape, init, True))

    c = config.C
    specs.append(("embed.w", (48, c), "dense", True))
    specs.append(("embed.b", (c,), "zeros", True))
    for s in range(3):
        swin(f"enc{s + 1}", s)
        cs = config.stage_channels(s)
        specs.append((f"merge{s + 1}.w", (4 * cs, 2 * cs), "dense", True))
    swin("bottleneck", 3)
    for level in (3, 2, 1):
        s = level - 1
        cs = config.stage_channels(s)
        specs.append((f"expand{level}.w", (2 * cs, 4 * cs), "dense", True))
        for suffix, shape, init, trainable in sfea_param_shapes(cs):
            specs.append((f"sfea{level}.{suffix}", shape, init, trainable))
        specs.append((f"reduce{level}.w", (2 * cs, cs), "dense", True))
        specs.append((f"reduce{level}.b", (cs,), "zeros", True))
        swin(f"dec{level}", s)
    specs.append(("final_expand.w", (c, 16 * config.final_depth), "dense", True))
    k = config.head_kernel
    specs.append(("head.w", (k, k, config.final_depth, config.out_channels), "conv", True))
    specs.append(("head.b", (config.out_channels,), "zeros", True))
    return specs


def count_parameters(config):
    return sum(int(np.prod(shape)) for _, shape, _, trainable in param_specs(config) if trainable)


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build(config, seed=0, dtype=np.float32):
    """Allocate and initialize all parameters deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for name, shape, init, trainable in param_specs(config):
        if init == "dense":
            data = _truncated_normal(rng, shape, DENSE_STD)
        elif init == "conv":
            fan_in = shape[0] * shape[1] * shape[2]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        store.add(name, data, trainable=trainable)
    return store


# forward -----------------------------------------------------------------

def _swin(store, prefix, x, config, s):
    gh, gw = config.stage_grid(s)
    layers = (SwinLayerParams.from_store(store, f"{prefix}.l0"),
              SwinLayerParams.from_store(store, f"{prefix}.l1"))
    approx = "tanh" if config.gelu_tanh else "none"
    return swin_block(x, gh, gw, layers, config.window, config.heads[s], approx)


def forward(store, x, config, mode="train", update_running=True, bn_momentum=None):
    """Run the network on ``x`` (``B x H x W x 3``, values in [0, 1]).

    ``bn_momentum`` overrides the batch-norm running-statistics momentum.
    """
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=store.dtype))
    if x.ndim != 4 or tuple(x.shape[1:]) != (config.H, config.W, 3):
        raise DimensionError(
            f"input {x.shape} does not match configured resolution B x {config.H} x {config.W} x 3"
        )
    shapes = {}
    h = patch_embed(x, store["embed.w"], store["embed.b"], patch=4)
    shapes["embed"] = h.shape[1:]

    encoder = []
    for s in range(3):
        h = _swin(store, f"enc{s + 1}", h, config, s)
        shapes[f"enc{s + 1}"] = h.shape[1:]
        encoder.append(h)
        h = patch_merge(h, PatchGrid(*config.stage_grid(s)), store[f"merge{s + 1}.w"])
        shapes[f"merge{s + 1}"] = h.shape[1:]
    h = _swin(store, "bottleneck", h, config, 3)
    shapes["bottleneck"] = h.shape[1:]

    decoder = [None, None, None]
    for level in (3, 2, 1):
        s = level - 1
        h = patch_expand(h, PatchGrid(*config.stage_grid(s + 1)), store[f"expand{level}.w"])
        shapes[f"expand{level}"] = h.shape[1:]
        decoder[s] = h
        gh, gw = config.stage_grid(s)
        params = SfeaParams.from_store(store, f"sfea{level}", level, gh, gw, config.stage_channels(s))
        if bn_momentum is not None:
            params = replace(params, momentum=bn_momentum)
        sfea_shapes = {}
        skip = sfea_forward(encoder[s], level, params, mode, update_running, trace=sfea_shapes)
        for key, shape in sfea_shapes.items():
            shapes[f"sfea{level}.{key}"] = shape[1:]
        h = concat_with_decoder(skip, h)
        shapes[f"concat{level}"] = h.shape[1:]
        h = linear(h, store[f"reduce{level}.w"], store[f"reduce{level}.b"])
        h = _swin(store, f"dec{level}", h, config, s)
        shapes[f"dec{level}"] = h.shape[1:]

    img = final_patch_expand(h, PatchGrid(*config.grid), store["final_expand.w"],
                             out_hw=(config.H, config.W))
    shapes["final_expand"] = img.shape[1:]
    logits = conv2d(img, store["head.w"], store["head.b"], padding="same")
    shapes["output"] = logits.shape[1:]
    return ForwardTrace(sigmoid(logits), logits, encoder, decoder, shapes)


# audit -------------------------------------------------------------------

def audit_shapes(config):
    """Shapes (without batch) that :func:`forward` produces, computed symbolically."""
    config.validate()
    shapes = {}

    def seq(s):
        gh, gw = config.stage_grid(s)
        return (gh * gw, config.stage_channels(s))

    shapes["embed"] = seq(0)
    for s in range(3):
        shapes[f"enc{s + 1}"] = seq(s)
        shapes[f"merge{s + 1}"] = seq(s + 1)
    shapes["bottleneck"] = seq(3)
    for level in (3, 2, 1):
        s = level - 1
        d, cs = seq(s)
        gh, gw = config.stage_grid(s)
        shapes[f"expand{level}"] = (d, cs)
        shapes[f"sfea{level}.E_PE"] = (4 * gh, 4 * gw, cs // 4)
        shapes[f"sfea{level}.E_C1"] = (4 * gh, 4 * gw, cs // 4)
        shapes[f"sfea{level}.E_C2"] = (4 * gh, 4 * gw, cs // 4)
        shapes[f"sfea{level}.E_T"] = (d, 4 * cs)
        shapes[f"sfea{level}.E_K"] = (d, cs)
        shapes[f"concat{level}"] = (d, 2 * cs)
        shapes[f"dec{level}"] = (d, cs)
    shapes["final_expand"] = (config.H, config.W, config.final_depth)
    shapes["output"] = (config.H, config.W, config.out_channels)
    return shapes


def _dims(shape):
    return "x".join(str(n) for n in shape)


def render_audit(config):
    """Human-readable dimension table; no activations are allocated."""
    shapes = audit_shapes(config)
    lines = [f"config H={config.H} W={config.W} C={config.C} window={config.window} "
             f"heads={','.join(map(str, config.heads))}"]
    lines.append("ladder " + " -> ".join(
        _dims(shapes[k]) for k in ("enc1", "enc2", "enc3", "bottleneck")))
    lines.append("encoder")
    lines.append(f"  embed       {_dims(shapes['embed'])}")
    for s in range(3):
        ws, shift = config.stage_window(s)
        lines.append(f"  stage{s + 1}      {_dims(shapes[f'enc{s + 1}'])}"
                     f"  window={ws} shift={shift} heads={config.heads[s]}")
        lines.append(f"  merge{s + 1}      {_dims(shapes[f'merge{s + 1}'])}")
    ws, shift = config.stage_window(3)
    lines.append(f"  bottleneck  {_dims(shapes['bottleneck'])}  window={ws} shift={shift} "
                 f"heads={config.heads[3]}")
    lines.append("sfea")
    for level in (1, 2, 3):
        chain = " -> ".join(_dims(shapes[f"sfea{level}.{k}"]) for k in ("E_PE", "E_C2", "E_T", "E_K"))
        lines.append(f"  level{level}      {_dims(shapes[f'enc{level}'])} -> {chain}")
    lines.append("decoder")
    for level in (3, 2, 1):
        lines.append(f"  stage{level}      {_dims(shapes[f'expand{level}'])} + sfea -> "
                     f"{_dims(shapes[f'concat{level}'])} -> {_dims(shapes[f'dec{level}'])}")
    lines.append(f"  final       {_dims(shapes['final_expand'])}")
    lines.append(f"  output      {_dims(shapes['output'])}")
    lines.append(f"parameters {count_parameters(config)}")
    return "\n".join(lines) + "\n"


# checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SFTC"
CKPT_VERSION = 1


def _encode_config(config):
    out = struct.pack("<IIII", config.H, config.W, config.C, config.window)
    out += struct.pack("<B", len(config.heads)) + struct.pack(f"<{len(config.heads)}I", *config.heads)
    out += struct.pack("<d", config.mlp_ratio)
    out += struct.pack("<III", *config.sfea_channels)
    out += struct.pack("<IBIBI", config.out_channels, int(config.use_rel_pos_bias),
                       config.final_depth, int(config.gelu_tanh), config.head_kernel)
    return out


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        values = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return values

    def tensor(self):
        array, self.pos = decode_tensor(self.buf, self.pos)
        return array

    def name(self):
        (n,) = self.unpack("<H", "name length")
        if self.pos + n > len(self.buf):
            raise FormatError("truncated checkpoint while reading a name", self.pos)
        raw = self.buf[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not valid UTF-8", self.pos - n) from exc


def _decode_config(reader):
    h, w, c, window = reader.unpack("<IIII", "config")
    (nheads,) = reader.unpack("<B", "config heads")
    heads = reader.unpack(f"<{nheads}I", "config heads")
    (mlp_ratio,) = reader.unpack("<d", "config mlp_ratio")
    sfea = reader.unpack("<III", "config sfea_channels")
    out_ch, rel, final_depth, gelu_tanh, head_kernel = reader.unpack("<IBIBI", "config tail")
    return ModelConfig(H=h, W=w, C=c, window=window, heads=heads, mlp_ratio=mlp_ratio,
                       sfea_channels=sfea, out_channels=out_ch, use_rel_pos_bias=bool(rel),
                       final_depth=final_depth, gelu_tanh=bool(gelu_tanh), head_kernel=head_kernel)


def _name_bytes(name):
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def encode_checkpoint(config, store, state, seed):
    out = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), _encode_config(config)]
    entries = list(store.items())
    out.append(struct.pack("<I", len(entries)))
    for name, t in entries:
        out.append(_name_bytes(name))
        out.append(encode_tensor(t.data))
    if state is None:
        state = AdamState()
    out.append(struct.pack("<Qdddd", state.t, state.alpha, state.beta1, state.beta2, state.eps))
    out.append(struct.pack("<I", len(state.m)))
    for name in state.m:
        out.append(_name_bytes(name))
        out.append(encode_tensor(state.m[name]))
        out.append(encode_tensor(state.v[name]))
    out.append(struct.pack("<Q", int(seed)))
    return b"".join(out)


def save_checkpoint(path, config, store, state=None, seed=0):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(config, store, state, seed))


def config_difference(expected, actual):
    """Name of the first field where two configs differ, or ``None``."""
    for f in fields(ModelConfig):
        a, b = getattr(expected, f.name), getattr(actual, f.name)
        if a != b:
            return f"{f.name}: expected {a}, checkpoint has {b}"
    return None


def decode_checkpoint(buf, expected_config=None):
    reader = _Reader(buf)
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    reader.pos = 4
    (version,) = reader.unpack("<H", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    config = _decode_config(reader)
    if expected_config is not None:
        diff = config_difference(expected_config, config)
        if diff is not None:
            raise ConfigError(f"checkpoint config mismatch: {diff}")
    try:
        specs = param_specs(config)
    except ConfigError as exc:
        raise FormatError(f"checkpoint holds an invalid config ({exc})", 6) from exc
    expected_names = [s[0] for s in specs if s[3]] + [s[0] for s in specs if not s[3]]
    trainable = {s[0]: s[3] for s in specs}
    shapes = {s[0]: tuple(s[1]) for s in specs}

    start = reader.pos
    (count,) = reader.unpack("<I", "tensor count")
    if count != len(expected_names):
        raise FormatError(f"checkpoint has {count} tensors, config needs {len(expected_names)}", start)
    store = None
    for expected_name in expected_names:
        at = reader.pos
        name = reader.name()
        if name != expected_name:
            raise FormatError(f"tensor name mismatch: found {name!r}, expected {expected_name!r}", at)
        array = reader.tensor()
        if array.shape != shapes[name]:
            raise FormatError(f"tensor {name!r} has shape {array.shape}, config needs {shapes[name]}", at)
        if store is None:
            store = ParamStore(array.dtype)
        store.add(name, array, trainable=trainable[name])

    t, alpha, beta1, beta2, eps = reader.unpack("<Qdddd", "optimizer header")
    state = AdamState(alpha=alpha, beta1=beta1, beta2=beta2, eps=eps, t=t)
    (n_state,) = reader.unpack("<I", "optimizer entry count")
    for _ in range(n_state):
        at = reader.pos
        name = reader.name()
        if name not in store.params:
            raise FormatError(f"optimizer state for unknown parameter {name!r}", at)
        state.m[name] = reader.tensor()
        state.v[name] = reader.tensor()
    (seed,) = reader.unpack("<Q", "seed")
    if reader.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint", reader.pos)
    return config, store, state, seed


def load_checkpoint(path, expected_config=None):
    """Returns ``(config, store, adam_state, seed)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_checkpoint(buf, expected_config)
