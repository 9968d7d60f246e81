"""Reading and writing the small set of image formats the toolkit uses.

PGM/PPM are written by hand (they are the debug-dump formats and must be
byte-stable); PNG and other formats go through Pillow. Color inputs are
reduced to grayscale with the usual luma weights (0.299, 0.587, 0.114),
which is what Pillow's "L" conversion applies.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def write_pgm8(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    img = img.astype(np.uint8, copy=False)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_pgm16(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint16)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(img.astype(">u2").tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _read_pnm_header(fh):
    fields = []
    while len(fields) < 4:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PNM header")
        if line.startswith(b"#"):
            continue
        fields.extend(line.split())
    return fields[:4]


def read_pgm(path) -> np.ndarray:
    """Binary P5 PGM; returns uint8 or uint16 depending on maxval."""
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_pnm_header(fh)
        if magic != b"P5":
            raise ValueError(f"unsupported PNM magic {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
        if maxval > 255:
            data = np.frombuffer(fh.read(w * h * 2), dtype=">u2")
            return data.reshape(h, w).astype(np.uint16)
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
        return data.reshape(h, w).copy()


def load_gray(path) -> np.ndarray:
    """Load any supported image as an 8-bit grayscale array."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        img = read_pgm(path)
        if img.dtype == np.uint16:
            img = (img / 257.0).round().astype(np.uint8)
        return img
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    Image.fromarray(img).save(path)
