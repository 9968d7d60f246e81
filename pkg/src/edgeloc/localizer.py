"""Iterative render-match-solve localization driver.

Each iteration renders the salient-edge baseline at the current pose
hypothesis, matches templates against the (fixed) test edge map inside
uncertainty-derived search windows, solves for the pose correction with
RANSAC, and shrinks the uncertainty schedule. The loop exits Converged
when per-iteration corrections stay inside the convergence thresholds for
two consecutive iterations, and EarlyFailure as soon as the cumulative
correction leaves the initial uncertainty box (plus margin), so a pose
outside the box is never reported as Converged.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import (BehindCameraError, CameraModel, RigidTransform, TriangleMesh,
                       UncertaintyBox)
from .image_pipeline import canny, equalize
from .matcher import (FullyClippedWindowError, MINIMIZING_METRICS, SCORE_FUNCTIONS,
                      TooFewEdgePixelsError, best_match, extract_templates, peak_index,
                      refine_match_subpixel, score_templates, search_window)
from .pose_solver import Correspondence, NoConsensusError, ransac_pnp
from .rasterizer import rasterize, salient_edges

STATUS_CONVERGED = "Converged"
STATUS_MAX_ITERATIONS = "MaxIterations"
STATUS_EARLY_FAILURE = "EarlyFailure"
STATUS_NO_CONSENSUS = "NoConsensus"

EARLY_FAILURE_MARGIN = 0.2  # same knob as the solver's out-of-box margin


def _default_box():
    return UncertaintyBox.symmetric(30.0, 5.0)


@dataclass(frozen=True)
class LocalizerConfig:
    """Schedules and thresholds of the localization loop."""

    n_max: int = 10
    convergence_translation_mm: float = 0.5
    convergence_rotation_deg: float = 0.5
    initial_box: UncertaintyBox = field(default_factory=_default_box)
    box_halvings: int = 2
    reproj_thresh_px: float = 8.0
    reproj_halvings: int = 2
    template_size: int = 32
    template_count: int = 200
    template_spacing: int = 8
    metric: str = "whs"
    normal_thresh_deg: float = 30.0
    depth_thresh_mm: float = 5.0
    canny_sigma: float = 1.4
    canny_low: Optional[float] = None
    canny_high: Optional[float] = None
    # parabolic peak interpolation of matches; off by default so a
    # self-consistent edge map reproduces its seed pose exactly
    match_subpixel: bool = False
    ransac_max_iters: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.convergence_translation_mm <= 0 or self.convergence_rotation_deg <= 0:
            raise ValueError("convergence thresholds must be positive")
        if self.reproj_thresh_px <= 0:
            raise ValueError("reprojection threshold must be positive")
        if self.metric not in SCORE_FUNCTIONS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def box_at(self, k: int) -> UncertaintyBox:
        """Uncertainty box for iteration k: halved per step, then clamped."""
        return self.initial_box.scaled(0.5 ** min(k, self.box_halvings))

    def reproj_thresh_at(self, k: int) -> float:
        return self.reproj_thresh_px * 0.5 ** min(k, self.reproj_halvings)


@dataclass(frozen=True)
class IterationDiagnostics:
    pose: RigidTransform
    correction_translation_mm: float
    correction_rotation_deg: float
    template_count: int
    inlier_count: int
    mean_reproj_error_px: Optional[float]


@dataclass(frozen=True)
class LocalizerResult:
    pose: RigidTransform
    status: str
    iterations: tuple

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


def _run_iteration(test_edges, pose, box, reproj_thresh, mesh, camera, cfg, rng_seed):
    """One render-match-solve step. Returns (new_pose, diagnostics)."""
    buf = rasterize(mesh, pose, camera)
    baseline, mask = salient_edges(buf, cfg.normal_thresh_deg, cfg.depth_thresh_mm)
    templates = extract_templates(baseline, mask, buf, camera, pose,
                                  size=cfg.template_size, max_count=cfg.template_count,
                                  min_spacing=cfg.template_spacing)
    minimize = cfg.metric in MINIMIZING_METRICS
    half = cfg.template_size // 2

    # group templates sharing a (clipped) search window so the window
    # spectra are transformed once per group
    groups: dict = {}
    for ti, t in enumerate(templates):
        try:
            win = search_window(t.anchor3d, pose, box, camera, pad_px=half)
        except (BehindCameraError, FullyClippedWindowError):
            continue
        if win.height < t.shape[0] or win.width < t.shape[1]:
            continue
        groups.setdefault(win, []).append((ti, t))

    whs = cfg.metric == "whs"
    corrs = []
    for win, members in groups.items():
        scores_list = score_templates([t for _, t in members], win.crop(test_edges),
                                      cfg.metric, with_edge_term=whs)
        for (ti, t), entry in zip(members, scores_list):
            scores, vertex_surface = entry if whs else (entry, entry)
            center, _ = best_match(scores, win, t.shape, minimize=minimize)
            if cfg.match_subpixel:
                # interpolate on the edge-agreement surface at the full
                # score's peak; it is symmetric about the true alignment
                center = refine_match_subpixel(vertex_surface, center, minimize=minimize,
                                               at=peak_index(scores, minimize))
            corrs.append(Correspondence(t.anchor3d, center, ti))
    corrs.sort(key=lambda c: c.source_template)
    if len(corrs) < 4:
        raise NoConsensusError(f"only {len(corrs)} templates produced matches")

    result = ransac_pnp(corrs, camera, pose, reproj_thresh, box,
                        max_iters=cfg.ransac_max_iters, rng_seed=rng_seed)
    delta = result.pose.compose(pose.invert())
    diag = IterationDiagnostics(
        pose=result.pose,
        correction_translation_mm=float(np.linalg.norm(delta.translation)),
        correction_rotation_deg=delta.rotation_angle_deg(),
        template_count=len(templates),
        inlier_count=int(len(result.inliers)),
        mean_reproj_error_px=result.mean_reproj_error_px,
    )
    return result.pose, diag


def localize_edges(test_edges: np.ndarray, seed: RigidTransform, mesh: TriangleMesh,
                   camera: CameraModel, cfg: LocalizerConfig) -> LocalizerResult:
    """Localization loop on a precomputed binary test edge map."""
    test_edges = np.asarray(test_edges, dtype=bool)
    if test_edges.shape != (camera.height, camera.width):
        raise ValueError("test edge map does not match the camera dimensions")

    pose = seed
    diags = []
    for k in range(cfg.n_max):
        try:
            pose_new, diag = _run_iteration(
                test_edges, pose, cfg.box_at(k), cfg.reproj_thresh_at(k),
                mesh, camera, cfg, rng_seed=[cfg.rng_seed, k])
        except (NoConsensusError, TooFewEdgePixelsError):
            return LocalizerResult(pose, STATUS_NO_CONSENSUS, tuple(diags))
        diags.append(diag)
        pose = pose_new

        cumulative = pose.compose(seed.invert())
        if not cfg.initial_box.contains(cumulative, margin=EARLY_FAILURE_MARGIN):
            return LocalizerResult(pose, STATUS_EARLY_FAILURE, tuple(diags))

        if k >= 1:
            last_two = diags[-2:]
            if all(d.correction_translation_mm <= cfg.convergence_translation_mm
                   and d.correction_rotation_deg <= cfg.convergence_rotation_deg
                   for d in last_two):
                return LocalizerResult(pose, STATUS_CONVERGED, tuple(diags))
    return LocalizerResult(pose, STATUS_MAX_ITERATIONS, tuple(diags))


def test_edge_map(test_image: np.ndarray, cfg: LocalizerConfig) -> np.ndarray:
    """Equalize then Canny; computed once per localization run."""
    return canny(equalize(test_image), sigma=cfg.canny_sigma,
                 low=cfg.canny_low, high=cfg.canny_high)


def localize(test_image: np.ndarray, seed: RigidTransform, mesh: TriangleMesh,
             camera: CameraModel, cfg: LocalizerConfig) -> LocalizerResult:
    """Full pipeline from a grayscale test photograph."""
    return localize_edges(test_edge_map(test_image, cfg), seed, mesh, camera, cfg)


def multi_seed_localize_edges(test_edges: np.ndarray, seed: RigidTransform,
                              mesh: TriangleMesh, camera: CameraModel,
                              cfg: LocalizerConfig, increment_deg: float = 20.0,
                              axis=(0.0, 0.0, 1.0)) -> LocalizerResult:
    """Sweep in-plane seed rotations, keep the most consistent one.

    Runs the first iteration only at seeds rotated by k * increment about
    the given camera-frame axis, picks the seed with the most
    first-iteration inliers (the original wins ties), then runs the full
    loop from it.
    """
    test_edges = np.asarray(test_edges, dtype=bool)
    n_seeds = max(1, int(round(360.0 / increment_deg)))
    best_seed = seed
    best_inliers = -1
    for k in range(n_seeds):
        probe_seed = (RigidTransform.from_axis_angle_deg(axis, k * increment_deg)
                      .compose(seed) if k else seed)
        try:
            _, diag = _run_iteration(
                test_edges, probe_seed, cfg.box_at(0), cfg.reproj_thresh_at(0),
                mesh, camera, cfg, rng_seed=[cfg.rng_seed, 0])
            inliers = diag.inlier_count
        except (NoConsensusError, TooFewEdgePixelsError, BehindCameraError):
            inliers = 0
        if inliers > best_inliers:
            best_inliers = inliers
            best_seed = probe_seed
    return localize_edges(test_edges, best_seed, mesh, camera, cfg)


def multi_seed_localize(test_image: np.ndarray, seed: RigidTransform, mesh: TriangleMesh,
                        camera: CameraModel, cfg: LocalizerConfig,
                        increment_deg: float = 20.0,
                        axis=(0.0, 0.0, 1.0)) -> LocalizerResult:
    return multi_seed_localize_edges(test_edge_map(test_image, cfg), seed, mesh,
                                     camera, cfg, increment_deg, axis)


def with_metric(cfg: LocalizerConfig, metric: str) -> LocalizerConfig:
    return replace(cfg, metric=metric)
