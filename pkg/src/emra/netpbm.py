"""Binary PPM (P6) and PGM (P5) with maxval 255.

Writers emit ``P6\\n<w> <h>\\n255\\n`` followed by raw bytes and never write
comments. Readers accept ``#`` comments anywhere in the header.
"""
import numpy as np

from .errors import BadMagicError, DataError, FormatError, MaxvalError, ShapeError, ShortFileError

_WS = b" \t\n\r\v\f"


def encode(pixels):
    """Bytes of a P6 (H, W, 3) or P5 (H, W) uint8 image."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255 or not np.all(arr == np.round(arr))):
            raise DataError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ShapeError(f"expected (H, W) or (H, W, 3) pixels, got {arr.shape}")
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def _token(data, pos):
    """Next header token starting at ``pos``, skipping whitespace and comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in _WS and c:
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WS and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ShortFileError("file ends inside the header", start)
    return data[start:pos], start, pos


def _int(tok, offset, what):
    if not tok.isdigit():
        raise FormatError(f"bad {what} {tok[:16]!r}", offset)
    return int(tok)


def decode(data):
    """Parse P6/P5 bytes into (H, W, 3) or (H, W) uint8."""
    data = bytes(data)
    if data[:2] not in (b"P6", b"P5") or (len(data) > 2 and data[2:3] not in _WS and data[2:3] != b"#"):
        raise BadMagicError(f"unsupported magic {data[:2]!r}; need binary P6 or P5", 0)
    channels = 3 if data[:2] == b"P6" else 1
    pos = 2
    tok, off, pos = _token(data, pos)
    width = _int(tok, off, "width")
    tok, off, pos = _token(data, pos)
    height = _int(tok, off, "height")
    tok, off, pos = _token(data, pos)
    maxval = _int(tok, off, "maxval")
    if maxval != 255:
        raise MaxvalError(f"maxval must be 255, got {maxval}", off)
    if pos >= len(data) or data[pos:pos + 1] not in _WS:
        raise ShortFileError("missing whitespace after maxval", pos)
    pos += 1
    need = width * height * channels
    if len(data) - pos < need:
        raise ShortFileError(f"pixel data needs {need} bytes, found {len(data) - pos}", len(data))
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def save_image(path, pixels):
    data = encode(pixels)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_image(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
