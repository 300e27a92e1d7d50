"""Binary tensor format ``SFT1``.

Layout: magic ``b"SFT1"``, u8 dtype code (0 = float32, 1 = float64), u8 rank,
``rank`` little-endian u32 extents, then the values as little-endian raw
bytes in row-major order.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"SFT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def encode_tensor(array):
    array = np.asarray(array)
    code = _CODES.get(array.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {array.dtype} for SFT1")
    if array.ndim > 255:
        raise FormatError(f"rank {array.ndim} too large for SFT1")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    body = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    return header + body


def decode_tensor(buf, offset=0):
    """Decode one tensor from ``buf`` starting at ``offset``.

    Returns ``(array, next_offset)``.
    """
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError("bad SFT1 magic", offset)
    pos = offset + 4
    if len(buf) < pos + 2:
        raise FormatError("truncated SFT1 header", pos)
    code, rank = struct.unpack_from("<BB", buf, pos)
    if code not in _DTYPES:
        raise FormatError(f"unknown SFT1 dtype code {code}", pos)
    pos += 2
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated SFT1 extents", pos)
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated SFT1 payload: need {nbytes} bytes", pos)
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    array = array.reshape(shape).astype(dtype.newbyteorder("="), copy=True)
    return array, pos + nbytes


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after SFT1 tensor", end)
    return array
