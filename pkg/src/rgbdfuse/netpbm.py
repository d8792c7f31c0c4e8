"""Binary netpbm readers/writers: P6 color and P5 grayscale (8- or 16-bit).

16-bit PGM samples are big-endian per the format; depth maps use maxval 65535.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_header(fh, magic: bytes, path):
    if fh.read(2) != magic:
        raise DataError(f"{path}: expected {magic.decode()} netpbm file")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = fh.read(1)
        if not token:
            raise DataError(f"{path}: truncated netpbm header")
        if not token.isdigit():
            raise DataError(f"{path}: bad netpbm header token {token!r}")
        fields.append(int(token))
    width, height, maxval = fields
    if width < 1 or height < 1 or maxval not in (255, 65535):
        raise DataError(f"{path}: unsupported netpbm geometry {width}x{height} maxval {maxval}")
    return width, height, maxval


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as uint8 [H x W x 3]."""
    with open(path, "rb") as fh:
        width, height, maxval = _read_header(fh, b"P6", path)
        if maxval != 255:
            raise DataError(f"{path}: only 8-bit P6 supported")
        raw = fh.read(width * height * 3)
    if len(raw) != width * height * 3:
        raise DataError(f"{path}: truncated P6 pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"P6 writer needs uint8 [H x W x 3], got {image.dtype} {image.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 image: uint8 [H x W] for maxval 255, uint16 for 65535."""
    with open(path, "rb") as fh:
        width, height, maxval = _read_header(fh, b"P5", path)
        if maxval == 255:
            raw = fh.read(width * height)
            expected, dtype = width * height, np.uint8
        else:
            raw = fh.read(width * height * 2)
            expected, dtype = width * height * 2, ">u2"
    if len(raw) != expected:
        raise DataError(f"{path}: truncated P5 pixel data")
    img = np.frombuffer(raw, dtype=dtype).reshape(height, width)
    return img.astype(np.uint16) if maxval == 65535 else img.copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype not in (np.uint8, np.uint16):
        raise DataError(f"P5 writer needs uint8 or uint16 [H x W], got {image.dtype} {image.shape}")
    maxval = 255 if image.dtype == np.uint8 else 65535
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n{maxval}\n".encode())
        if image.dtype == np.uint8:
            fh.write(image.tobytes())
        else:
            fh.write(image.astype(">u2").tobytes())
