"""Sequence <-> spatial patch transforms.

Within a flattened patch, values are ordered row-major as
``(row, col, channel)``; the same order is used for the 2x2 neighbourhood of
patch merging and for the blocks produced by patch expanding.
"""

from dataclasses import dataclass

from .errors import DimensionError
from .tensor import linear


@dataclass(frozen=True)
class PatchGrid:
    h_patches: int
    w_patches: int
    patch_size: int = 1
    channels: int = 0

    def __post_init__(self):
        if self.h_patches < 1 or self.w_patches < 1:
            raise DimensionError(f"grid sides must be positive, got {self.h_patches}x{self.w_patches}")
        if self.patch_size < 1:
            raise DimensionError(f"patch_size must be >= 1, got {self.patch_size}")

    @property
    def length(self):
        return self.h_patches * self.w_patches

    def check(self, x):
        if x.ndim != 3 or x.shape[1] != self.length:
            raise DimensionError(
                f"sequence {x.shape} does not match a {self.h_patches}x{self.w_patches} grid"
            )


def space_to_tokens(x, patch):
    """``B x H x W x C`` -> ``B x (H/p)(W/p) x (p*p*C)``; pure rearrangement."""
    if x.ndim != 4:
        raise DimensionError(f"expected B x H x W x C, got {x.shape}")
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise DimensionError(f"spatial extents {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = x.reshape(b, hp, patch, wp, patch, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp * wp, patch * patch * c)


def tokens_to_space(x, grid, patch):
    """Inverse of :func:`space_to_tokens` for a token grid ``grid``."""
    grid.check(x)
    b, _, d = x.shape
    if d % (patch * patch):
        raise DimensionError(f"token width {d} not divisible by {patch}x{patch}")
    c = d // (patch * patch)
    h, w = grid.h_patches, grid.w_patches
    x = x.reshape(b, h, w, patch, patch, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * patch, w * patch, c)


def patch_embed(img, weight, bias=None, patch=4):
    """Split ``img`` into non-overlapping patches and project each to ``C``."""
    if img.ndim != 4:
        raise DimensionError(f"patch_embed expects B x H x W x C, got {img.shape}")
    return linear(space_to_tokens(img, patch), weight, bias)


def patch_merge(x, grid, weight, bias=None):
    """Concatenate each 2x2 token neighbourhood (4C) and project to 2C."""
    grid.check(x)
    if grid.h_patches % 2 or grid.w_patches % 2:
        raise DimensionError(f"patch_merge needs even grid sides, got {grid.h_patches}x{grid.w_patches}")
    b, _, c = x.shape
    spatial = x.reshape(b, grid.h_patches, grid.w_patches, c)
    return linear(space_to_tokens(spatial, 2), weight, bias)


def patch_expand(x, grid, weight, bias=None):
    """Project C -> 2C and unfold each token into a 2x2 block of depth C/2."""
    grid.check(x)
    c = x.shape[-1]
    if c % 2:
        raise DimensionError(f"patch_expand needs an even channel count, got {c}")
    y = linear(x, weight, bias)
    if y.shape[-1] != 2 * c:
        raise DimensionError(f"patch_expand weight must map {c} -> {2 * c}, got {weight.shape}")
    spatial = tokens_to_space(y, grid, 2)
    b = x.shape[0]
    return spatial.reshape(b, 4 * grid.length, c // 2)


def final_patch_expand(x, grid, weight, bias=None, out_hw=None):
    """Project C' -> 16*C_out and unfold each token into a 4x4 block.

    Returns a spatial ``B x 4h x 4w x C_out`` tensor.  ``out_hw``, when given,
    is checked against the restored resolution.
    """
    grid.check(x)
    if out_hw is not None and grid.length * 16 != out_hw[0] * out_hw[1]:
        raise DimensionError(
            f"{grid.length} tokens x 16 does not cover a {out_hw[0]}x{out_hw[1]} image"
        )
    y = linear(x, weight, bias)
    if y.shape[-1] % 16:
        raise DimensionError(f"final expand projection width {y.shape[-1]} not a multiple of 16")
    return tokens_to_space(y, grid, 4)


def patch_extract(x, patch=4):
    """Flatten every ``patch x patch x Cs`` block into one token (no weights)."""
    return space_to_tokens(x, patch)


def patch_unextract(x, grid, patch=4):
    """Inverse rearrangement of :func:`patch_extract`."""
    return tokens_to_space(x, grid, patch)
