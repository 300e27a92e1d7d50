"""Synthetic micro-mass data, image preprocessing and dataset files.

Images are float arrays in [0, 1] shaped ``H x W x 1``; masks are ``{0, 1}``
arrays of the same shape.  All operations here are plain numpy; nothing in
this module is differentiated.
"""

import csv
import os
import re
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DimensionError, FormatError, ParameterError, ValidationError
from .tensor import Tensor


@dataclass
class SegmentationSample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    mass_area_px: int

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise DimensionError(f"image {self.image.shape} and mask {self.mask.shape} differ")
        if int(self.mask.sum()) != self.mass_area_px:
            raise ValidationError(
                f"sample {self.id}: mass_area_px={self.mass_area_px} but mask sums to {int(self.mask.sum())}"
            )


@dataclass(frozen=True)
class SynthSpec:
    count: int = 16
    H: int = 64
    W: int = 64
    mass_area_range: Tuple[int, int] = (20, 80)
    blobs_per_image: Tuple[int, int] = (1, 1)
    noise_amplitude: float = 0.3
    smoothing_radius: float = 2.0
    distractor_count: Tuple[int, int] = (2, 2)
    seed: int = 0

    def validate(self):
        lo, hi = self.mass_area_range
        if lo < 1 or hi < lo or hi > self.H * self.W // 4:
            raise ConfigError(
                f"impossible mass_area_range {self.mass_area_range} for a {self.H}x{self.W} image"
            )
        for name in ("blobs_per_image", "distractor_count"):
            a, b = getattr(self, name)
            if a < 0 or b < a:
                raise ConfigError(f"invalid {name} range {(a, b)}")
        if self.count < 0 or self.H < 1 or self.W < 1:
            raise ConfigError("count, H and W must be positive")
        if self.noise_amplitude < 0 or self.smoothing_radius < 0:
            raise ConfigError("noise_amplitude and smoothing_radius must be >= 0")
        return self


def sample_rng(seed, index):
    """Per-sample generator: the seed sequence of ``(seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _ellipse(h, w, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / a
    v = (-dx * s + dy * c) / b
    return u * u + v * v <= 1.0


def _segment(h, w, y0, x0, y1, x1):
    n = int(max(abs(y1 - y0), abs(x1 - x0))) + 1
    ys = np.clip(np.rint(np.linspace(y0, y1, n)).astype(int), 0, h - 1)
    xs = np.clip(np.rint(np.linspace(x0, x1, n)).astype(int), 0, w - 1)
    out = np.zeros((h, w), dtype=bool)
    out[ys, xs] = True
    return out


def _synth_one(spec, index, max_tries=500):
    rng = sample_rng(spec.seed, index)
    h, w = spec.H, spec.W
    lo, hi = spec.mass_area_range

    if spec.noise_amplitude > 0:
        noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), spec.smoothing_radius)
        span = noise.max() - noise.min()
        noise = (noise - noise.min()) / span if span > 0 else np.zeros_like(noise)
        image = spec.noise_amplitude * noise
    else:
        image = np.zeros((h, w))

    mask = np.zeros((h, w), dtype=bool)
    n_masses = int(rng.integers(spec.blobs_per_image[0], spec.blobs_per_image[1] + 1))
    for _ in range(n_masses):
        for _ in range(max_tries):
            area = rng.uniform(lo, hi)
            aspect = rng.uniform(1.0, 2.0)
            a = np.sqrt(area * aspect / np.pi)
            b = np.sqrt(area / (aspect * np.pi))
            margin = int(np.ceil(a)) + 1
            if 2 * margin >= min(h, w):
                continue
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            blob = _ellipse(h, w, cy, cx, a, b, rng.uniform(0, np.pi))
            got = int(blob.sum())
            if lo <= got <= hi and not (ndimage.binary_dilation(blob, iterations=2) & mask).any():
                mask |= blob
                image[blob] = np.maximum(image[blob], rng.uniform(0.75, 0.95))
                break
        else:
            raise ConfigError(f"could not place a mass with area in {spec.mass_area_range}")

    keep_out = ndimage.binary_dilation(mask, iterations=3)
    n_distract = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    for _ in range(n_distract):
        length = rng.uniform(0.2, 0.4) * min(h, w)
        theta = rng.uniform(0, np.pi)
        y0, x0 = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        y1 = np.clip(y0 + length * np.sin(theta), 0, h - 1)
        x1 = np.clip(x0 + length * np.cos(theta), 0, w - 1)
        streak = _segment(h, w, y0, x0, y1, x1) & ~keep_out
        image[streak] = np.maximum(image[streak], rng.uniform(0.75, 0.95))

    image = np.clip(image, 0.0, 1.0)[..., None]
    mask = mask.astype(np.float64)[..., None]
    return SegmentationSample(f"synth{index:05d}", image, mask, int(mask.sum()))


def generate_synthetic(spec):
    """Deterministic synthetic dataset: elliptical masses plus streak distractors.

    Masses are filled ellipses (each with a rasterized area inside
    ``mass_area_range``) painted bright on a smoothed-noise background; the
    distractors are bright straight streaks that never enter the mask.
    """
    spec.validate()
    return [_synth_one(spec, i) for i in range(spec.count)]


# preprocessing -----------------------------------------------------------

def _array(img):
    return img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)


def _source_index(n_out, n_in):
    return (np.arange(n_out) + 0.5) * (n_in / n_out)


def resize(img, out_h, out_w, mode="bilinear"):
    """Resize the two leading axes with half-pixel centres (``align_corners=False``)."""
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"target size must be positive, got {out_h}x{out_w}")
    arr = _array(img)
    in_h, in_w = arr.shape[:2]
    if mode == "nearest":
        ys = np.minimum(np.floor(_source_index(out_h, in_h)).astype(int), in_h - 1)
        xs = np.minimum(np.floor(_source_index(out_w, in_w)).astype(int), in_w - 1)
        return arr[ys][:, xs]
    if mode != "bilinear":
        raise ParameterError(f"unknown resize mode {mode!r}")

    def axis(n_out, n_in):
        src = np.clip(_source_index(n_out, n_in) - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(out_h, in_h)
    x0, x1, fx = axis(out_w, in_w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(out, arr.min(), arr.max()) if arr.size else out


def quantize(img):
    return np.clip(np.rint(_array(img) * 255.0), 0, 255).astype(np.int64)


def tile_mapping(tile_bins, clip_limit, nbins=256):
    """Clipped-histogram equalization mapping for one tile of 8-bit bins.

    The clip height is ``clip_limit * n / nbins``; the clipped excess is spread
    evenly over all bins.  A tile holding a single grey level maps every bin
    to itself.
    """
    n = tile_bins.size
    hist = np.bincount(tile_bins.ravel(), minlength=nbins).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        return np.arange(nbins) / (nbins - 1)
    limit = clip_limit * n / nbins
    excess = np.maximum(hist - limit, 0.0).sum()
    clipped = np.minimum(hist, limit) + excess / nbins
    return np.cumsum(clipped) / n


def _tile_grid(tiles):
    if isinstance(tiles, int):
        return tiles, tiles
    ty, tx = tiles
    return int(ty), int(tx)


def _blend_axis(n, tile, count):
    f = (np.arange(n) + 0.5) / tile - 0.5
    fl = np.floor(f)
    k0 = np.clip(fl, 0, count - 1).astype(int)
    k1 = np.clip(fl + 1, 0, count - 1).astype(int)
    return k0, k1, f - fl


def clahe(img, tiles=8, clip_limit=2.0):
    """Contrast-limited adaptive histogram equalization on an ``H x W (x 1)`` image.

    The image is quantized to 256 levels, split into ``tiles`` (an int or a
    ``(rows, cols)`` pair), and each tile gets a clipped-histogram mapping
    (see :func:`tile_mapping`).  Each pixel blends the mappings of the four
    nearest tile centres bilinearly.  Sides that the tile grid does not
    divide are reflect-padded, then cropped back.
    """
    if clip_limit <= 0:
        raise ParameterError(f"clip_limit must be positive, got {clip_limit}")
    arr = _array(img)
    squeeze = arr.ndim == 3
    if squeeze:
        if arr.shape[2] != 1:
            raise DimensionError(f"clahe expects a single channel, got {arr.shape}")
        arr = arr[..., 0]
    ty, tx = _tile_grid(tiles)
    if ty < 1 or tx < 1:
        raise ParameterError(f"tile grid must be positive, got {tiles}")
    h, w = arr.shape
    ph, pw = (-h) % ty, (-w) % tx
    bins = quantize(np.pad(arr, ((0, ph), (0, pw)), mode="reflect") if (ph or pw) else arr)
    th, tw = bins.shape[0] // ty, bins.shape[1] // tx

    maps = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            maps[i, j] = tile_mapping(bins[i * th:(i + 1) * th, j * tw:(j + 1) * tw], clip_limit)

    bins = bins[:h, :w]
    y0, y1, wy = _blend_axis(h, th, ty)
    x0, x1, wx = _blend_axis(w, tw, tx)
    wy, wx = wy[:, None], wx[None, :]
    rows0, rows1 = y0[:, None], y1[:, None]
    cols0, cols1 = x0[None, :], x1[None, :]
    out = ((1 - wy) * ((1 - wx) * maps[rows0, cols0, bins] + wx * maps[rows0, cols1, bins])
           + wy * ((1 - wx) * maps[rows1, cols0, bins] + wx * maps[rows1, cols1, bins]))
    out = np.clip(out, 0.0, 1.0)
    return out[..., None] if squeeze else out


def remove_artifacts(img, threshold=0.1):
    """Keep only the largest 8-connected bright region of ``img``.

    Pixels above ``threshold`` are labelled; everything outside the largest
    component (ties go to the first in raster order) is set to zero.
    """
    arr = _array(img)
    plane = arr[..., 0] if arr.ndim == 3 else arr
    labels, count = ndimage.label(plane > threshold, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return np.zeros_like(arr)
    sizes = np.bincount(labels.ravel())[1:]
    keep = labels == (int(np.argmax(sizes)) + 1)
    if arr.ndim == 3:
        keep = keep[..., None]
    return np.where(keep, arr, 0.0)


def gray_to_3ch(img):
    arr = _array(img)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3 or arr.shape[2] != 1:
        raise DimensionError(f"gray_to_3ch expects H x W x 1, got {arr.shape}")
    return np.repeat(arr, 3, axis=2)


def preprocess(img, out_hw=None, enhance=True, artifact_threshold=None, clip_limit=2.0, tiles=8):
    """Image-side preprocessing chain: resize, artifact removal, CLAHE, 3 channels."""
    arr = _array(img)
    if out_hw is not None and arr.shape[:2] != tuple(out_hw):
        arr = resize(arr, out_hw[0], out_hw[1], "bilinear")
    if artifact_threshold is not None:
        arr = remove_artifacts(arr, artifact_threshold)
    if enhance:
        arr = clahe(arr, tiles, clip_limit)
    return gray_to_3ch(arr)


# PGM I/O -----------------------------------------------------------------

_WS = b" \t\n\r\x0b\x0c"


def _pgm_tokens(buf, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                end = buf.find(b"\n", pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tok = buf[start:pos]
        if not tok.isdigit():
            raise FormatError(f"expected an integer in PGM header, got {tok!r}", start)
        tokens.append(int(tok))
    return tokens, pos


def decode_pgm(buf):
    """Parse a binary (P5) 8-bit PGM; returns a ``uint8`` array ``H x W``."""
    if buf[:2] != b"P5":
        raise FormatError("bad PGM magic (expected P5)", 0)
    (width, height, maxval), pos = _pgm_tokens(buf, 3, 2)
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM size {width}x{height}", pos)
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    if pos >= len(buf) or buf[pos] not in _WS:
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    n = width * height
    if len(buf) - pos < n:
        raise FormatError(f"truncated PGM raster: need {n} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(height, width)
    if maxval != 255:
        data = np.rint(data.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return data.copy()


def encode_pgm(pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _plane(img):
    arr = _array(img)
    if arr.ndim == 3:
        if arr.shape[2] != 1:
            raise DimensionError(f"PGM holds one channel, got {arr.shape}")
        arr = arr[..., 0]
    return arr


def save_pgm(path, img):
    """Write an image in [0, 1] as 8-bit P5 (values rounded to the nearest level)."""
    with open(path, "wb") as fh:
        fh.write(encode_pgm(quantize(_plane(img))))


def load_pgm(path):
    """Read a P5 file as a float ``H x W x 1`` image in [0, 1]."""
    with open(path, "rb") as fh:
        return (decode_pgm(fh.read()).astype(np.float64) / 255.0)[..., None]


def save_mask(path, mask):
    m = _plane(mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValidationError("mask must be binary (0/1)")
    with open(path, "wb") as fh:
        fh.write(encode_pgm(m.astype(np.uint8) * 255))


def load_mask(path):
    """Read a ``{0, 255}`` PGM mask as a ``{0, 1}`` ``H x W x 1`` array."""
    with open(path, "rb") as fh:
        raw = decode_pgm(fh.read())
    if not np.all((raw == 0) | (raw == 255)):
        raise FormatError(f"{path}: mask PGM must contain only 0 and 255")
    return (raw // 255).astype(np.float64)[..., None]


# splitting and dataset layout --------------------------------------------

def split_by_mass_size(samples, test_threshold_px):
    """Samples whose mass area is below the threshold form the test set."""
    train = [s for s in samples if s.mass_area_px >= test_threshold_px]
    test = [s for s in samples if s.mass_area_px < test_threshold_px]
    return train, test


MANIFEST = "manifest.csv"
_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


def write_dataset(root, samples, test_threshold_px=0):
    """Write ``images/<id>.pgm``, ``masks/<id>.pgm`` and ``manifest.csv``."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    _, test = split_by_mass_size(samples, test_threshold_px)
    test_ids = {s.id for s in test}
    with open(os.path.join(root, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mass_area_px", "split"])
        for s in samples:
            if not _ID_RE.match(s.id):
                raise ValidationError(f"sample id {s.id!r} is not file-name safe")
            save_pgm(os.path.join(root, "images", f"{s.id}.pgm"), s.image)
            save_mask(os.path.join(root, "masks", f"{s.id}.pgm"), s.mask)
            writer.writerow([s.id, s.mass_area_px, "test" if s.id in test_ids else "train"])


def read_manifest(root):
    path = os.path.join(root, MANIFEST)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        if set(r) != {"id", "mass_area_px", "split"}:
            raise FormatError(f"{path}: manifest needs columns id, mass_area_px, split")
    return rows


def read_dataset(root, split=None):
    """Load samples listed in the manifest, optionally only one split."""
    samples = []
    for row in read_manifest(root):
        if split is not None and row["split"] != split:
            continue
        image = load_pgm(os.path.join(root, "images", f"{row['id']}.pgm"))
        mask = load_mask(os.path.join(root, "masks", f"{row['id']}.pgm"))
        samples.append(SegmentationSample(row["id"], image, mask, int(row["mass_area_px"])))
    return samples
