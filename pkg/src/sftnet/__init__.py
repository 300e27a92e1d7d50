"""Swin-SFTNet micro-mass segmentation on a small numpy autograd engine.

Submodules: ``tensor`` (autograd), ``optim`` (parameters, Adam), ``serialize``
(SFT1 tensors), ``patches``, ``swin``, ``sfea``, ``model``, ``losses``,
``data``, ``config``, ``train`` and ``cli``.
"""

from .errors import (ConfigError, DimensionError, FormatError, NonFiniteError, ParameterError,
                     SftnetError, ValidationError)
from .model import ModelConfig, build, forward

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "FormatError", "NonFiniteError", "ParameterError",
           "SftnetError", "ValidationError", "ModelConfig", "build", "forward", "__version__"]
