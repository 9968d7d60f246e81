"""Edge-domain template extraction and matching.

The primary metric scores a binary template T with mask M against a
binary window I at every offset as

    S = w_plus * S_plus + w_minus * S_minus

where S_plus counts masked-in pixels that are edges in both template and
window, S_minus counts masked-in pixels that are non-edges in both, and
each weight is the reciprocal of the corresponding masked-in template
count (or 0 when that count is 0). Scores therefore live in [0, 2], or
[0, 1] when one count is zero. Both a direct-summation evaluator and an
FFT evaluator are provided; they agree to 1e-9 and the former is the
oracle for the latter.

NCC and SSD baselines operate on the unmasked patches, as a plain
template matcher would.

Everything here is pure; templates can be matched concurrently.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import ndimage

from .geometry import BehindCameraError, CameraModel, RigidTransform, UncertaintyBox
from .rasterizer import GeometryBuffer, backproject


class TooFewEdgePixelsError(ValueError):
    """Not enough usable template centers in the baseline edge map."""


class FullyClippedWindowError(ValueError):
    """A search window that does not intersect the image."""


@dataclass(frozen=True, eq=False)
class Template:
    """Binary edge patch with its scoring mask and 3D anchor.

    ``center`` is the (x, y) pixel the patch was cut around in the
    baseline image; ``anchor3d`` is the station-frame point rendered
    there. Patch sides must be powers of two.
    """

    patch: np.ndarray
    mask: np.ndarray
    center: tuple
    anchor3d: np.ndarray

    def __post_init__(self):
        patch = np.asarray(self.patch, dtype=bool)
        mask = np.asarray(self.mask, dtype=bool)
        if patch.shape != mask.shape:
            raise ValueError("patch and mask shapes differ")
        for s in patch.shape:
            if s < 1 or (s & (s - 1)) != 0:
                raise ValueError(f"template side {s} is not a power of 2")
        object.__setattr__(self, "patch", patch)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "anchor3d", np.asarray(self.anchor3d, dtype=np.float64).reshape(3))
        object.__setattr__(self, "_edge_kernel", (mask & patch).astype(np.float64))
        object.__setattr__(self, "_nonedge_kernel", (mask & ~patch).astype(np.float64))

    @property
    def shape(self):
        return self.patch.shape

    @property
    def c_plus(self) -> int:
        return int(self._edge_kernel.sum())

    @property
    def c_minus(self) -> int:
        return int(self._nonedge_kernel.sum())


@dataclass(frozen=True)
class SearchWindow:
    """Half-open pixel rectangle [x0, x1) x [y0, y1) in the test image."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError("empty search window")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    def crop(self, image: np.ndarray) -> np.ndarray:
        return image[self.y0:self.y1, self.x0:self.x1]


def _check_window_fits(template_shape, window_shape):
    th, tw = template_shape
    wh, ww = window_shape
    if wh < th or ww < tw:
        raise ValueError(f"window {window_shape} smaller than template {template_shape}")


def _weights(c_plus: int, c_minus: int):
    w_plus = 1.0 / c_plus if c_plus > 0 else 0.0
    w_minus = 1.0 / c_minus if c_minus > 0 else 0.0
    return w_plus, w_minus


def whs_terms_naive(t: Template, window: np.ndarray):
    """Unnormalized agreement counts by direct summation over offsets."""
    window = np.asarray(window, dtype=bool)
    _check_window_fits(t.shape, window.shape)
    win = window.astype(np.float64)
    sw = sliding_window_view(win, t.shape)
    s_plus = np.einsum("ijuv,uv->ij", sw, t._edge_kernel)
    s_minus = np.einsum("ijuv,uv->ij", 1.0 - sw, t._nonedge_kernel)
    return s_plus, s_minus


def whs_scores_naive(t: Template, window: np.ndarray) -> np.ndarray:
    s_plus, s_minus = whs_terms_naive(t, window)
    w_plus, w_minus = _weights(t.c_plus, t.c_minus)
    return w_plus * s_plus + w_minus * s_minus


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _fft_correlate_valid(window: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation via padded real FFTs.

    Transforms are sized to the next power of two >= window + kernel - 1
    per dimension (a convolution with the reversed kernel).
    """
    wh, ww = window.shape
    kh, kw = kernel.shape
    sh, sw_ = _next_pow2(wh + kh - 1), _next_pow2(ww + kw - 1)
    fw = sp_fft.rfft2(window, s=(sh, sw_))
    fk = sp_fft.rfft2(kernel[::-1, ::-1], s=(sh, sw_))
    full = sp_fft.irfft2(fw * fk, s=(sh, sw_))
    return full[kh - 1:wh, kw - 1:ww]


def _correlate_many(window: np.ndarray, kernels) -> list:
    """Valid correlation of one window against several equal-size kernels.

    The window spectra are computed once and shared. Large windows use an
    overlap-save decomposition into power-of-two tiles so each kernel only
    pays tile-sized transforms; small windows share one full-size
    spectrum. Results match _fft_correlate_valid to FFT roundoff.
    """
    kernels = list(kernels)
    if not kernels:
        return []
    wh, ww = window.shape
    kh, kw = kernels[0].shape
    out_h, out_w = wh - kh + 1, ww - kw + 1

    sh, sw_ = _next_pow2(wh + kh - 1), _next_pow2(ww + kw - 1)
    tile = max(128, _next_pow2(4 * max(kh, kw)))
    if sh * sw_ <= 4 * tile * tile:
        fw = sp_fft.rfft2(window, s=(sh, sw_))
        return [sp_fft.irfft2(fw * sp_fft.rfft2(k[::-1, ::-1], s=(sh, sw_)),
                              s=(sh, sw_))[kh - 1:wh, kw - 1:ww]
                for k in kernels]

    step_h, step_w = tile - kh + 1, tile - kw + 1
    origins = [(oy, ox) for oy in range(0, out_h, step_h)
               for ox in range(0, out_w, step_w)]
    specs = [sp_fft.rfft2(window[oy:oy + tile, ox:ox + tile], s=(tile, tile))
             for oy, ox in origins]
    outs = []
    for k in kernels:
        fk = sp_fft.rfft2(k[::-1, ::-1], s=(tile, tile))
        out = np.empty((out_h, out_w))
        for (oy, ox), fw in zip(origins, specs):
            block = sp_fft.irfft2(fw * fk, s=(tile, tile))
            ch = min(step_h, out_h - oy)
            cw = min(step_w, out_w - ox)
            out[oy:oy + ch, ox:ox + cw] = block[kh - 1:kh - 1 + ch, kw - 1:kw - 1 + cw]
        outs.append(out)
    return outs


def whs_scores_fft(t: Template, window: np.ndarray) -> np.ndarray:
    """FFT evaluation of the masked weighted Hamming score.

    The edge kernel is correlated against the window and the non-edge
    kernel against its complement; matches whs_scores_naive to 1e-9.
    """
    window = np.asarray(window, dtype=bool)
    _check_window_fits(t.shape, window.shape)
    win = window.astype(np.float64)
    w_plus, w_minus = _weights(t.c_plus, t.c_minus)
    s_plus = _fft_correlate_valid(win, t._edge_kernel)
    s_minus = _fft_correlate_valid(1.0 - win, t._nonedge_kernel)
    return w_plus * s_plus + w_minus * s_minus


def ncc_scores(t: Template, window: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation of the unmasked binary patch.

    Zero-variance windows (and a zero-variance patch) score 0.
    """
    window = np.asarray(window, dtype=bool)
    _check_window_fits(t.shape, window.shape)
    win = window.astype(np.float64)
    patch = t.patch.astype(np.float64)
    n = patch.size
    ones = np.ones_like(patch)

    pm = patch - patch.mean()
    ss_patch = float((pm * pm).sum())
    num = _fft_correlate_valid(win, pm)
    win_sum = _fft_correlate_valid(win, ones)
    win_sq = _fft_correlate_valid(win * win, ones)
    var_win = np.maximum(win_sq - win_sum * win_sum / n, 0.0)

    denom_sq = var_win * ss_patch
    out = np.zeros_like(num)
    ok = denom_sq > 1e-9
    out[ok] = num[ok] / np.sqrt(denom_sq[ok])
    return out


def ssd_scores(t: Template, window: np.ndarray) -> np.ndarray:
    """Sum of squared differences of the unmasked patch (lower is better)."""
    window = np.asarray(window, dtype=bool)
    _check_window_fits(t.shape, window.shape)
    win = window.astype(np.float64)
    patch = t.patch.astype(np.float64)
    ones = np.ones_like(patch)
    corr = _fft_correlate_valid(win, patch)
    win_sq = _fft_correlate_valid(win * win, ones)
    return np.maximum((patch * patch).sum() - 2.0 * corr + win_sq, 0.0)


SCORE_FUNCTIONS = {"whs": whs_scores_fft, "ncc": ncc_scores, "ssd": ssd_scores}
MINIMIZING_METRICS = {"ssd"}


def score_templates(templates, window: np.ndarray, metric: str,
                    with_edge_term: bool = False) -> list:
    """Score several same-size templates against one shared window.

    Equivalent to calling the per-template scorer for each template, but
    window spectra (and, for the baselines, local window statistics) are
    computed once. Agrees with the per-template functions to 1e-9.

    With ``with_edge_term`` (whs only) each entry is ``(scores, s_plus)``
    where s_plus is the unnormalized edge-agreement count; its peak
    profile is symmetric about the true alignment, unlike the full score
    whose mask covers only the rendered side of silhouettes.
    """
    if metric not in SCORE_FUNCTIONS:
        raise ValueError(f"unknown metric {metric!r}")
    templates = list(templates)
    if not templates:
        return []
    shape = templates[0].shape
    for t in templates:
        if t.shape != shape:
            raise ValueError("templates in one batch must share a size")
    window = np.asarray(window, dtype=bool)
    _check_window_fits(shape, window.shape)
    win = window.astype(np.float64)

    if metric == "whs":
        kernels = []
        for t in templates:
            kernels.append(t._edge_kernel)
            kernels.append(t._nonedge_kernel)
        corr = _correlate_many(win, kernels)
        out = []
        for i, t in enumerate(templates):
            w_plus, w_minus = _weights(t.c_plus, t.c_minus)
            # sum of masked non-edges minus hits on test edges = hits on non-edges
            s_minus = t.c_minus - corr[2 * i + 1]
            scores = w_plus * corr[2 * i] + w_minus * s_minus
            out.append((scores, corr[2 * i]) if with_edge_term else scores)
        return out
    if with_edge_term:
        raise ValueError("with_edge_term applies to the whs metric only")

    if metric == "ncc":
        n = templates[0].patch.size
        ones = np.ones(shape)
        pms = [t.patch.astype(np.float64) - t.patch.mean() for t in templates]
        corr = _correlate_many(win, pms + [ones])
        win_sum = corr[-1]
        win_sq = win_sum  # binary window: win * win == win exactly
        var_win = np.maximum(win_sq - win_sum * win_sum / n, 0.0)
        out = []
        for pm, num in zip(pms, corr[:-1]):
            denom_sq = var_win * float((pm * pm).sum())
            sc = np.zeros_like(num)
            ok = denom_sq > 1e-9
            sc[ok] = num[ok] / np.sqrt(denom_sq[ok])
            out.append(sc)
        return out

    patches = [t.patch.astype(np.float64) for t in templates]
    corr = _correlate_many(win, patches + [np.ones(shape)])
    win_sq = corr[-1]  # binary window
    return [np.maximum((p * p).sum() - 2.0 * c + win_sq, 0.0)
            for p, c in zip(patches, corr[:-1])]


def extract_templates(baseline: np.ndarray, render_mask: np.ndarray, buf: GeometryBuffer,
                      camera: CameraModel, pose: RigidTransform, size: int = 32,
                      max_count: int = 200, min_spacing: int = 8) -> list:
    """Cut templates around high-edge-density baseline pixels.

    Centers are edge pixels, picked greedily in descending local edge
    density with at least ``min_spacing`` px between accepted centers;
    patches that would overlap the image border are skipped. Each
    template's mask is the render mask restricted to the patch, and its
    anchor is the backprojected center.
    """
    if size < 1 or (size & (size - 1)) != 0:
        raise ValueError("template size must be a power of 2")
    if max_count < 1:
        raise ValueError("max_count must be >= 1")
    baseline = np.asarray(baseline, dtype=bool)
    h, w = baseline.shape
    half = size // 2

    ys, xs = np.nonzero(baseline)
    fits = ((xs >= half) & (xs - half + size <= w)
            & (ys >= half) & (ys - half + size <= h))
    xs, ys = xs[fits], ys[fits]
    if len(xs) < min(4, max_count):
        raise TooFewEdgePixelsError(
            f"only {len(xs)} usable template centers (need {min(4, max_count)})")

    density = ndimage.uniform_filter(baseline.astype(np.float64), size=size, mode="constant")
    order = np.lexsort((xs, ys, -density[ys, xs]))

    # forbidden disk painted around each accepted center
    r = int(np.ceil(min_spacing))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (dy * dy + dx * dx) < min_spacing * min_spacing
    disk_dy, disk_dx = dy[disk], dx[disk]
    taken = np.zeros((h, w), dtype=bool)

    templates = []
    for idx in order:
        if len(templates) >= max_count:
            break
        x, y = int(xs[idx]), int(ys[idx])
        if taken[y, x]:
            continue
        py, px = y - half, x - half
        patch = baseline[py:py + size, px:px + size]
        mask = render_mask[py:py + size, px:px + size]
        anchor = backproject(buf, (x, y), camera, pose)
        templates.append(Template(patch, mask, (x, y), anchor))
        oy, ox = disk_dy + y, disk_dx + x
        inb = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        taken[oy[inb], ox[inb]] = True
    return templates


def search_window(anchor3d, seed_pose: RigidTransform, box: UncertaintyBox,
                  camera: CameraModel, pad_px: int = 0) -> SearchWindow:
    """Pixel rectangle that can contain the anchor under any in-box pose.

    Projects the anchor through the 64 extreme box perturbations composed
    onto the seed pose, takes the bounding rectangle, pads it by the
    template half-size and clips to the image.
    """
    anchor = np.asarray(anchor3d, dtype=np.float64).reshape(3)
    p_seed = seed_pose.apply(anchor)
    if p_seed[2] <= 0:
        raise BehindCameraError("anchor not visible under the seed pose")

    pix = []
    for delta in box.corner_transforms():
        p = delta.apply(p_seed)  # perturbation acts in the camera frame
        if p[2] > 1e-9:
            pix.append(camera.project(p))
    pix = np.asarray(pix)
    x0 = int(np.floor(pix[:, 0].min())) - pad_px
    x1 = int(np.ceil(pix[:, 0].max())) + pad_px + 1
    y0 = int(np.floor(pix[:, 1].min())) - pad_px
    y1 = int(np.ceil(pix[:, 1].max())) + pad_px + 1
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(camera.width, x1), min(camera.height, y1)
    if x0 >= x1 or y0 >= y1:
        raise FullyClippedWindowError("search window falls outside the image")
    return SearchWindow(x0, y0, x1, y1)


def best_match(scores: np.ndarray, window: SearchWindow, template_shape,
               minimize: bool = False):
    """Best-scoring template-center pixel in full test-image coordinates.

    Ties break to the first offset in row-major order.
    """
    if scores.size == 0:
        raise ValueError("empty score matrix")
    flat = int(np.argmin(scores) if minimize else np.argmax(scores))
    i, j = np.unravel_index(flat, scores.shape)
    th, tw = template_shape
    center = (window.x0 + int(j) + tw // 2, window.y0 + int(i) + th // 2)
    return center, float(scores[i, j])


def _parabolic_offset(s_prev: float, s_mid: float, s_next: float) -> float:
    denom = s_prev - 2.0 * s_mid + s_next
    if abs(denom) < 1e-12:
        return 0.0
    return float(np.clip(0.5 * (s_prev - s_next) / denom, -0.5, 0.5))


def peak_index(scores: np.ndarray, minimize: bool = False):
    flat = int(np.argmin(scores) if minimize else np.argmax(scores))
    i, j = np.unravel_index(flat, scores.shape)
    return int(i), int(j)


def refine_match_subpixel(surface: np.ndarray, center, minimize: bool = False,
                          at=None):
    """Shift an integer match by the parabolic vertex of a score profile.

    Separable 1D fits through the peak and its axis neighbors; the shift
    is clamped to half a pixel and skipped on the score-matrix border. The
    vertex formula holds for minima as well, so SSD needs no special case.
    ``at`` overrides where the peak is taken (e.g. when interpolating one
    score surface at another's argmax).
    """
    i, j = peak_index(surface, minimize) if at is None else at
    x, y = float(center[0]), float(center[1])
    if 0 < j < surface.shape[1] - 1:
        x += _parabolic_offset(surface[i, j - 1], surface[i, j], surface[i, j + 1])
    if 0 < i < surface.shape[0] - 1:
        y += _parabolic_offset(surface[i - 1, j], surface[i, j], surface[i + 1, j])
    return (x, y)


def dump_score_matrix(out_dir, name: str, scores: np.ndarray, window: SearchWindow,
                      metric: str):
    """Debug dump: raw float32 grid plus a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = out_dir / f"{name}.f32"
    scores.astype(np.float32).tofile(raw)
    sidecar = out_dir / f"{name}.json"
    sidecar.write_text(json.dumps({
        "rows": int(scores.shape[0]),
        "cols": int(scores.shape[1]),
        "window_origin": [window.x0, window.y0],
        "metric": metric,
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return [raw, sidecar]
