"""Binary 8-bit PGM (P5) reading and writing."""

import os

import numpy as np

from .errors import ParseError


def to_gray(values):
    """Map values in [0, 1] to uint8 via round(255 * v)."""
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(img):
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-d, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = to_gray(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path, img):
    data = encode_pgm(img)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _tokens(data):
    """Yield (token, end offset) for the header, skipping comments."""
    pos = 0
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PGM header")
        yield data[start:pos], pos


def decode_pgm(data):
    toks = _tokens(data)
    magic, _ = next(toks)
    if magic != b"P5":
        raise ParseError(f"not a binary PGM (magic {magic!r})")
    try:
        width = int(next(toks)[0])
        height = int(next(toks)[0])
        maxval_tok, end = next(toks)
        maxval = int(maxval_tok)
    except ValueError:
        raise ParseError("malformed PGM header") from None
    if maxval != 255:
        raise ParseError(f"only 8-bit PGM is supported (maxval {maxval})")
    pixels = data[end + 1:end + 1 + width * height]
    if len(pixels) != width * height:
        raise ParseError("PGM pixel data is truncated")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
