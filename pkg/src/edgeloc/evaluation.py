"""Localization error metrics and the synthetic scenario harness.

A trial is *completed* when the localizer reports convergence and
*successful* when, additionally, all three decomposed error components
are inside the accuracy requirements. A completed run outside the
requirements is a false positive, the failure mode the harness exists to
count.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import (CameraModel, RigidTransform, TriangleMesh, UncertaintyBox,
                       pose_error, sample_pose_perturbation)
from .localizer import (STATUS_CONVERGED, LocalizerConfig, localize, localize_edges)
from .rasterizer import rasterize, salient_edges, shade_flat
from . import imageio


def end_effector_error(est: RigidTransform, truth: RigidTransform,
                       cam_to_ee: RigidTransform) -> RigidTransform:
    """Camera pose error conjugated onto the end-effector mount.

    With an identity mount transform this is just the camera-frame pose
    error; a lever arm turns rotation error into translation error.
    """
    err_cam = pose_error(est, truth)
    return cam_to_ee.invert().compose(err_cam).compose(cam_to_ee)


@dataclass(frozen=True)
class ErrorDecomposition:
    """Translation split along/off the camera depth axis, plus axis tilt."""

    normal_mm: float
    tangential_mm: float
    tilt_deg: float


def decompose(err: RigidTransform, camera_axis=(0.0, 0.0, 1.0)) -> ErrorDecomposition:
    axis = np.asarray(camera_axis, dtype=np.float64)
    norm = np.linalg.norm(axis)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError("camera_axis must be unit-norm")
    t = err.translation
    along = float(t @ axis)
    tangential = float(np.linalg.norm(t - along * axis))
    rotated = err.rotation_matrix() @ axis
    tilt = float(np.rad2deg(np.arccos(np.clip(rotated @ axis, -1.0, 1.0))))
    return ErrorDecomposition(abs(along), tangential, tilt)


@dataclass(frozen=True)
class Requirements:
    max_translation_mm: float = 0.4
    max_rotation_deg: float = 0.25

    def __post_init__(self):
        if self.max_translation_mm <= 0 or self.max_rotation_deg <= 0:
            raise ValueError("requirements must be positive")

    def satisfied(self, dec: ErrorDecomposition) -> bool:
        return (dec.normal_mm <= self.max_translation_mm
                and dec.tangential_mm <= self.max_translation_mm
                and dec.tilt_deg <= self.max_rotation_deg)


@dataclass(frozen=True)
class NoiseModel:
    """Proxy for the render-to-reality gap, applied to clean edge maps."""

    spurious_fraction: float = 0.0
    dropout_fraction: float = 0.0
    jitter_probability: float = 0.0

    def __post_init__(self):
        for f in (self.spurious_fraction, self.dropout_fraction, self.jitter_probability):
            if not 0.0 <= f <= 1.0:
                raise ValueError("noise fractions must be in [0, 1]")


def apply_edge_noise(edges: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Dropout of true edges, 1-px jitter, then independent spurious edges."""
    out = np.asarray(edges, dtype=bool).copy()
    if noise.dropout_fraction > 0:
        drop = rng.random(out.shape) < noise.dropout_fraction
        out &= ~drop
    if noise.jitter_probability > 0:
        ys, xs = np.nonzero(out)
        move = rng.random(len(ys)) < noise.jitter_probability
        if move.any():
            steps = rng.integers(0, 8, size=int(move.sum()))
            moves = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1),
                              (0, 1), (1, -1), (1, 0), (1, 1)])
            dy, dx = moves[steps, 0], moves[steps, 1]
            ny = np.clip(ys[move] + dy, 0, out.shape[0] - 1)
            nx = np.clip(xs[move] + dx, 0, out.shape[1] - 1)
            out[ys[move], xs[move]] = False
            out[ny, nx] = True
    if noise.spurious_fraction > 0:
        spur = rng.random(out.shape) < noise.spurious_fraction
        out |= spur & ~np.asarray(edges, dtype=bool)
    return out


@dataclass(frozen=True)
class ScenarioSpec:
    """One synthetic campaign: a posed mesh observed under seed uncertainty."""

    mesh: TriangleMesh
    camera: CameraModel
    truth_pose: RigidTransform
    perturbation_box: UncertaintyBox
    noise: NoiseModel = field(default_factory=NoiseModel)
    requirements: Requirements = field(default_factory=Requirements)
    rng_seed: int = 0
    trials: int = 20
    mode: str = "edges"  # "edges" feeds edge maps directly; "intensity" runs the full pipeline

    def __post_init__(self):
        if self.trials < 0:
            raise ValueError("trials must be >= 0")
        if self.mode not in ("edges", "intensity"):
            raise ValueError(f"unknown scenario mode {self.mode!r}")


@dataclass(frozen=True)
class TrialRecord:
    index: int
    status: str
    iterations: int
    normal_mm: float
    tangential_mm: float
    tilt_deg: float
    completed: bool
    success: bool
    false_positive: bool


@dataclass(frozen=True)
class CampaignReport:
    records: tuple
    completion_rate: Optional[float]
    success_rate: Optional[float]
    false_positive_count: int

    def to_json_dict(self) -> dict:
        return {
            "trials": len(self.records),
            "completion_rate": self.completion_rate,
            "success_rate": self.success_rate,
            "false_positive_count": self.false_positive_count,
            "records": [{
                "index": r.index,
                "status": r.status,
                "iterations": r.iterations,
                "normal_mm": r.normal_mm,
                "tangential_mm": r.tangential_mm,
                "tilt_deg": r.tilt_deg,
                "completed": r.completed,
                "success": r.success,
                "false_positive": r.false_positive,
            } for r in self.records],
        }


def _trial_rng_seed(campaign_seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([campaign_seed, trial]).generate_state(1)[0])


def run_scenarios(spec: ScenarioSpec, cfg: LocalizerConfig,
                  overlay_dir=None) -> CampaignReport:
    """Run the campaign and tally completion, success and false positives.

    Per trial: render the ground-truth salient edges, corrupt them with
    the noise model (edges mode) or flat-shade and run the full image
    pipeline (intensity mode), sample an in-box seed, localize, decompose
    the camera-frame pose error. Trials use derived rng streams, so the
    campaign is reproducible bit for bit from its seed.
    """
    records = []
    clean_edges = None
    test_image = None
    if spec.trials > 0:
        buf = rasterize(spec.mesh, spec.truth_pose, spec.camera)
        if spec.mode == "edges":
            clean_edges, _ = salient_edges(buf, cfg.normal_thresh_deg, cfg.depth_thresh_mm)
        else:
            test_image = shade_flat(buf)

    for trial in range(spec.trials):
        rng = np.random.default_rng([spec.rng_seed, trial])
        perturb = sample_pose_perturbation(spec.perturbation_box, rng)
        seed_pose = perturb.compose(spec.truth_pose)
        trial_cfg = replace(cfg, rng_seed=_trial_rng_seed(spec.rng_seed, trial))

        if spec.mode == "edges":
            noisy = apply_edge_noise(clean_edges, spec.noise, rng)
            result = localize_edges(noisy, seed_pose, spec.mesh, spec.camera, trial_cfg)
        else:
            result = localize(test_image, seed_pose, spec.mesh, spec.camera, trial_cfg)

        dec = decompose(pose_error(result.pose, spec.truth_pose))
        completed = result.status == STATUS_CONVERGED
        success = completed and spec.requirements.satisfied(dec)
        records.append(TrialRecord(
            index=trial, status=result.status, iterations=result.n_iterations,
            normal_mm=dec.normal_mm, tangential_mm=dec.tangential_mm,
            tilt_deg=dec.tilt_deg, completed=completed, success=success,
            false_positive=completed and not success))

        if overlay_dir is not None:
            base = noisy if spec.mode == "edges" else test_image
            _write_trial_overlay(base, result.pose, spec, cfg,
                                 Path(overlay_dir) / f"trial_{trial:03d}.png")

    n = len(records)
    report = CampaignReport(
        records=tuple(records),
        completion_rate=(sum(r.completed for r in records) / n) if n else None,
        success_rate=(sum(r.success for r in records) / n) if n else None,
        false_positive_count=sum(r.false_positive for r in records),
    )
    return report


def _write_trial_overlay(base, final_pose, spec, cfg, path):
    buf = rasterize(spec.mesh, final_pose, spec.camera)
    edges, _ = salient_edges(buf, cfg.normal_thresh_deg, cfg.depth_thresh_mm)
    gray = (np.asarray(base, dtype=bool).astype(np.uint8) * 200
            if base.dtype == bool else np.asarray(base, dtype=np.uint8))
    path.parent.mkdir(parents=True, exist_ok=True)
    imageio.save_png(path, overlay_edges(gray, edges))


def overlay_edges(gray: np.ndarray, edges: np.ndarray,
                  color=(255, 64, 64)) -> np.ndarray:
    """Draw an edge map in color over a grayscale image."""
    rgb = np.repeat(np.asarray(gray, dtype=np.uint8)[:, :, None], 3, axis=2)
    rgb[np.asarray(edges, dtype=bool)] = np.asarray(color, dtype=np.uint8)
    return rgb


def write_report(report: CampaignReport, out_dir) -> list:
    """JSON with per-trial records plus a CSV summary table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    csv_path = out_dir / "summary.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "status", "iterations", "normal_mm",
                         "tangential_mm", "tilt_deg", "completed", "success",
                         "false_positive"])
        for r in report.records:
            writer.writerow([r.index, r.status, r.iterations, repr(r.normal_mm),
                             repr(r.tangential_mm), repr(r.tilt_deg),
                             int(r.completed), int(r.success), int(r.false_positive)])
    return [json_path, csv_path]
