"""Test-photograph preprocessing: histogram equalization then Canny.

Both steps are pure functions on 8-bit grayscale arrays and are safe to
run concurrently on distinct images.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage


def equalize(img: np.ndarray) -> np.ndarray:
    """Global histogram equalization with a monotone intensity mapping.

    Maps intensity v to floor(255 * cdf(v) / npixels), so a uniform
    histogram is (up to rounding) a fixed point and a constant image stays
    constant.
    """
    img = np.asarray(img, dtype=np.uint8)
    hist = np.bincount(img.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    lut = np.floor(cdf * 255.0 / cdf[-1]).astype(np.uint8)
    return lut[img]


def otsu_threshold(values: np.ndarray) -> float:
    """Otsu's threshold over a positive-valued array (256-bin histogram)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    vmax = values.max()
    if vmax <= 0:
        return 0.0
    hist, edges = np.histogram(values, bins=256, range=(0.0, vmax))
    centers = 0.5 * (edges[:-1] + edges[1:])
    weight = hist.astype(np.float64)
    total = weight.sum()
    w0 = np.cumsum(weight)
    w1 = total - w0
    m = np.cumsum(weight * centers)
    mean0 = np.where(w0 > 0, m / np.maximum(w0, 1e-12), 0.0)
    mean1 = np.where(w1 > 0, (m[-1] - m) / np.maximum(w1, 1e-12), 0.0)
    between = w0 * w1 * (mean0 - mean1) ** 2
    return float(centers[int(np.argmax(between))])


def _nms(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Thin the gradient ridge to one pixel across the gradient direction.

    Survivors must be strictly greater than the neighbor behind them and
    at least equal to the one ahead, so a two-pixel plateau keeps exactly
    one pixel.
    """
    angle = np.mod(np.arctan2(gy, gx), np.pi)  # direction mod 180 deg
    # bins: 0 = E/W, 1 = NE/SW diagonal, 2 = N/S, 3 = NW/SE diagonal
    bins = np.floor((angle + np.pi / 8) / (np.pi / 4)).astype(int) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    h, w = mag.shape
    for b, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        bwd = padded[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        keep |= (bins == b) & (mag > bwd) & (mag >= fwd)
    return keep & (mag > 0)


def canny(img: np.ndarray, sigma: float = 1.4, low: float | None = None,
          high: float | None = None) -> np.ndarray:
    """Binary edge map: Gaussian blur, Sobel, NMS, hysteresis.

    ``high`` defaults to Otsu's threshold on the gradient magnitude and
    ``low`` to 0.4 * high. Pixels within ceil(3 * sigma) of the image
    border are never edges (the blur support is undefined there).
    """
    img = np.asarray(img, dtype=np.float64)
    blurred = ndimage.gaussian_filter(img, sigma, mode="nearest")
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    thin = _nms(mag, gx, gy)

    if high is None:
        high = otsu_threshold(mag)
    if low is None:
        low = 0.4 * high
    if not 0 <= low <= high:
        raise ValueError("thresholds must satisfy 0 <= low <= high")

    strong = thin & (mag >= high) & (mag > 0)
    weak = thin & (mag >= low) & (mag > 0)
    edges = ndimage.binary_propagation(strong, mask=weak, structure=np.ones((3, 3), bool))

    border = int(np.ceil(3 * sigma))
    if border > 0:
        edges[:border, :] = False
        edges[-border:, :] = False
        edges[:, :border] = False
        edges[:, -border:] = False
    return edges
