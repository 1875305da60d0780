"""Binary PGM (P5) / PPM (P6) image I/O, 8-bit.

Images are float arrays in [0, 1]: (h, w) for grayscale, (h, w, 3) for color.
"""

from __future__ import annotations

import numpy as np


def _read_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise ValueError("unexpected end of PNM header")
        if ch in b" \t\r\n":
            if token:
                return token
            continue
        if ch == b"#":
            while ch not in b"\r\n":
                ch = fh.read(1)
                if not ch:
                    raise ValueError("unexpected end of PNM comment")
            continue
        token += ch


def read_pnm(path) -> np.ndarray:
    """Read a binary PGM/PPM file into a float array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
        width = int(_read_token(fh))
        height = int(_read_token(fh))
        maxval = int(_read_token(fh))
        if not (0 < maxval < 256):
            raise ValueError(f"{path}: only 8-bit PNM supported, maxval={maxval}")
        channels = 3 if magic == b"P6" else 1
        data = fh.read(width * height * channels)
        if len(data) != width * height * channels:
            raise ValueError(f"{path}: truncated PNM payload")
    pixels = np.frombuffer(data, dtype=np.uint8).astype(np.float64) / maxval
    if channels == 3:
        return pixels.reshape(height, width, 3)
    return pixels.reshape(height, width)


def write_pnm(path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as binary PGM (2D) or PPM (3D)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"image must be (h, w) or (h, w, 3), got {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma (Rec. 601) of a color image; grayscale passes through."""
    if image.ndim == 2:
        return image
    return image[..., 0] * 0.299 + image[..., 1] * 0.587 + image[..., 2] * 0.114
