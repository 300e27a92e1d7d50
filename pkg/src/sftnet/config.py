"""Run configuration and the flat ``key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment.  A ``preset = <name>`` line
first loads one of the bundled presets (``full``, ``toy``, ``gradcheck``)
and later keys override it.  Tuples are written comma-separated.

Synthetic-data spec files use the same syntax with the ``SynthSpec`` field
names plus ``test_threshold_px`` (masses smaller than this go to the test
split; 0 keeps everything in train).
"""

import dataclasses
import os
import typing
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .data import SynthSpec
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig

PRESET_DIR = os.path.join(os.path.dirname(__file__), "presets")
PRESETS = ("full", "toy", "gradcheck")
SYNTH_PRESETS = ("synth_toy",)


@dataclass(frozen=True)
class RunConfig:
    # model
    H: int = 256
    W: int = 256
    C: int = 128
    window: int = 8
    heads: Tuple[int, ...] = (4, 8, 16, 32)
    mlp_ratio: float = 4.0
    out_channels: int = 1
    use_rel_pos_bias: bool = True
    final_depth: int = 0
    gelu_tanh: bool = False
    head_kernel: int = 3
    # objective
    lambda_bce: float = 0.4
    lambda_dice: float = 0.6
    lambda_emb: float = 0.01
    emb_loss_enabled: bool = True
    # optimizer
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    # schedule
    batch_size: int = 8
    epochs: int = 100
    max_steps: int = 0
    seed: int = 0
    dtype: str = "float32"
    refresh_bn: bool = True
    # files
    data_dir: str = "data"
    ckpt: str = "checkpoint.sftc"
    log: str = "loss_log.csv"
    resume: str = ""

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_steps < 0:
            raise ConfigError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.alpha > 0 and self.adam_eps > 0):
            raise ConfigError("Adam hyperparameters out of range")
        self.model_config().validate()
        self.loss_weights()
        return self

    def model_config(self):
        return ModelConfig(H=self.H, W=self.W, C=self.C, window=self.window, heads=self.heads,
                           mlp_ratio=self.mlp_ratio, out_channels=self.out_channels,
                           use_rel_pos_bias=self.use_rel_pos_bias,
                           final_depth=self.final_depth or None, gelu_tanh=self.gelu_tanh,
                           head_kernel=self.head_kernel)

    def loss_weights(self):
        try:
            return LossWeights(self.lambda_bce, self.lambda_dice,
                               self.lambda_emb if self.emb_loss_enabled else 0.0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def parse_kv(text, source="<config>"):
    """``key = value`` lines to an ordered dict of raw strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(kind, value, key):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            return value
        origin = typing.get_origin(kind)
        if origin in (tuple, Tuple):
            args = typing.get_args(kind)
            item = args[0]
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if args[-1] is not Ellipsis and len(parts) != len(args):
                raise ValueError(value)
            return tuple(_coerce(item, p, key) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    raise ConfigError(f"unsupported field type for {key!r}")


def from_mapping(cls, mapping, base=None, source="<config>"):
    """Build dataclass ``cls`` from raw strings, starting from ``base`` if given."""
    types = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in mapping.items():
        if key not in known:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    base = base if base is not None else cls()
    return dataclasses.replace(base, **values)


def load_preset(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return load_run_config(os.path.join(PRESET_DIR, f"{name}.cfg"))


def load_run_config(path_or_preset):
    """Load a run config file, or a bundled preset by name."""
    if not os.path.exists(path_or_preset) and path_or_preset in PRESETS:
        return load_preset(path_or_preset)
    mapping = parse_kv(_read_text(path_or_preset), path_or_preset)
    base = None
    if "preset" in mapping:
        base = load_preset(mapping.pop("preset"))
    return from_mapping(RunConfig, mapping, base, path_or_preset).validate()


def dump_run_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _read_text(path):
    with open(path) as fh:
        return fh.read()


def load_synth_spec(path_or_preset):
    """Returns ``(SynthSpec, test_threshold_px)`` from a spec file or bundled name."""
    path = path_or_preset
    if not os.path.exists(path) and path in SYNTH_PRESETS:
        path = os.path.join(PRESET_DIR, f"{path}.cfg")
    mapping = parse_kv(_read_text(path), path)
    threshold = _coerce(int, mapping.pop("test_threshold_px", "0"), "test_threshold_px")
    if threshold < 0:
        raise ConfigError(f"test_threshold_px must be >= 0, got {threshold}")
    return from_mapping(SynthSpec, mapping, None, path).validate(), threshold
