"""Camera pose from 2D-3D correspondences: damped least squares in a RANSAC loop.

Reprojection error is minimized directly in distorted pixel space, the
same space template matching happens in. Hypotheses are produced by
refining from the seed pose on minimal sets rather than by an algebraic
solver: the seed is always available within a known uncertainty box, which
keeps local refinement well posed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraModel, RigidTransform, UncertaintyBox

OUT_OF_BOX_MARGIN = 0.2


class DegenerateGeometryError(ValueError):
    """Normal equations are rank deficient (e.g. collinear points)."""


class NoConsensusError(RuntimeError):
    """RANSAC found no hypothesis with enough inliers."""


@dataclass(frozen=True)
class Correspondence:
    """A station-frame point (mm) matched to a test-image pixel."""

    point3d: np.ndarray
    pixel: np.ndarray
    source_template: int = -1

    def __post_init__(self):
        object.__setattr__(self, "point3d", np.asarray(self.point3d, np.float64).reshape(3))
        object.__setattr__(self, "pixel", np.asarray(self.pixel, np.float64).reshape(2))


@dataclass(frozen=True)
class PnpResult:
    pose: RigidTransform
    inliers: np.ndarray
    mean_reproj_error_px: float


def _stack(corrs):
    pts = np.array([c.point3d for c in corrs])
    pix = np.array([c.pixel for c in corrs])
    return pts, pix


def _residuals(pose, camera, pts, pix):
    """Stacked (2N,) pixel residuals, or None if any point is behind the camera."""
    p_cam = pose.apply(pts)
    if np.any(p_cam[:, 2] <= 1e-9):
        return None, None
    proj, _ = camera.project_many(p_cam)
    return (proj - pix).ravel(), p_cam


def _jacobian(camera, p_cam):
    """(2N, 6) derivative wrt a camera-frame twist (tx, ty, tz, wx, wy, wz)."""
    n = len(p_cam)
    jac = np.empty((2 * n, 6))
    for i, p in enumerate(p_cam):
        jp = camera.pixel_jacobian(p)  # 2x3
        x, y, z = p
        skew = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
        jac[2 * i:2 * i + 2, :3] = jp
        jac[2 * i:2 * i + 2, 3:] = jp @ (-skew)
    return jac


def pnp_refine(corrs, camera: CameraModel, init: RigidTransform,
               max_iters: int = 100, step_tol: float = 1e-10) -> RigidTransform:
    """Minimize total squared reprojection error starting from ``init``.

    Levenberg-Marquardt with a left-multiplicative camera-frame update;
    only cost-decreasing steps are accepted. Returns when the accepted
    step norm drops below ``step_tol`` or after ``max_iters`` iterations.
    """
    if len(corrs) < 4:
        raise ValueError(f"need at least 4 correspondences, got {len(corrs)}")
    pts, pix = _stack(corrs)
    pose = init
    r, p_cam = _residuals(pose, camera, pts, pix)
    if r is None:
        raise ValueError("initial pose puts points behind the camera")
    cost = float(r @ r)
    lam = 1e-3

    for _ in range(max_iters):
        jac = _jacobian(camera, p_cam)
        g = jac.T @ r
        h = jac.T @ jac
        scale = np.diag(h).copy()
        if np.any(scale < 1e-18):
            raise DegenerateGeometryError("rank-deficient normal equations")

        accepted = False
        for _ in range(16):
            try:
                delta = np.linalg.solve(h + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError as exc:
                raise DegenerateGeometryError("singular normal equations") from exc
            cand = RigidTransform.from_rotvec(delta[3:], delta[:3]).compose(pose)
            r_new, p_new = _residuals(cand, camera, pts, pix)
            if r_new is not None:
                cost_new = float(r_new @ r_new)
                if cost_new < cost:
                    pose, r, p_cam, cost = cand, r_new, p_new, cost_new
                    lam = max(lam * 0.3, 1e-12)
                    accepted = True
                    break
            lam *= 10.0
            if lam > 1e12:
                break
        if not accepted:
            break
        if np.linalg.norm(delta) < step_tol:
            break
    return pose


def reprojection_errors(corrs, camera: CameraModel, pose: RigidTransform) -> np.ndarray:
    """Per-correspondence pixel error; inf for points behind the camera."""
    pts, pix = _stack(corrs)
    p_cam = pose.apply(pts)
    proj, valid = camera.project_many(p_cam)
    err = np.linalg.norm(proj - pix, axis=1)
    err[~valid] = np.inf
    return err


def _pose_delta_in_box(pose, seed_pose, box, margin):
    delta = pose.compose(seed_pose.invert())
    return box.contains(delta, margin=margin)


def ransac_pnp(corrs, camera: CameraModel, seed_pose: RigidTransform,
               reproj_thresh_px: float, box: UncertaintyBox,
               max_iters: int = 500, rng_seed=0,
               confidence: float = 0.999) -> PnpResult:
    """Robust pose fit: minimal-set hypotheses gated by reprojection error.

    Each hypothesis is refined from the seed pose on 4 sampled
    correspondences and rejected when its deviation from the seed leaves
    the uncertainty box (with a 20% margin). The best hypothesis (most
    inliers; earliest iteration on ties) is refined on all its inliers.
    Deterministic for a fixed ``rng_seed``.
    """
    n = len(corrs)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    rng = np.random.default_rng(rng_seed)

    best_count = 0
    best_pose = None
    best_inliers = None
    iters_needed = max_iters

    for it in range(max_iters):
        if it >= iters_needed:
            break
        sample = rng.choice(n, size=4, replace=False)
        try:
            hyp = pnp_refine([corrs[i] for i in sample], camera, seed_pose)
        except (DegenerateGeometryError, ValueError):
            continue
        if not _pose_delta_in_box(hyp, seed_pose, box, OUT_OF_BOX_MARGIN):
            continue
        err = reprojection_errors(corrs, camera, hyp)
        inliers = np.nonzero(err <= reproj_thresh_px)[0]
        if len(inliers) > best_count:
            best_count = len(inliers)
            best_pose = hyp
            best_inliers = inliers
            ratio = best_count / n
            if ratio >= 1.0:
                iters_needed = 0
            else:
                p_fail = 1.0 - ratio ** 4
                iters_needed = int(np.ceil(np.log(1.0 - confidence) / np.log(p_fail)))

    min_consensus = max(6, int(np.ceil(0.25 * n)))
    if best_pose is None or best_count < min_consensus:
        raise NoConsensusError(
            f"best consensus {best_count} of {n} below required {min_consensus}")

    # refine on all inliers; keep the hypothesis if refinement does not
    # strictly help (guarantees the mean inlier error never goes up)
    pose = best_pose
    hyp_mean = float(reprojection_errors(corrs, camera, best_pose)[best_inliers].mean())
    try:
        refined = pnp_refine([corrs[i] for i in best_inliers], camera, best_pose)
        refined_mean = float(reprojection_errors(corrs, camera, refined)[best_inliers].mean())
        if (refined_mean <= hyp_mean
                and _pose_delta_in_box(refined, seed_pose, box, OUT_OF_BOX_MARGIN)):
            pose = refined
    except DegenerateGeometryError:
        pass

    err = reprojection_errors(corrs, camera, pose)
    final_inliers = np.nonzero(err <= reproj_thresh_px)[0]
    if len(final_inliers) < min_consensus:
        raise NoConsensusError("refined pose lost its consensus")
    return PnpResult(pose, final_inliers, float(err[final_inliers].mean()))


def dump_correspondences(corrs, path) -> Path:
    """CSV debug dump with columns x,y,X,Y,Z,template_index."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "X", "Y", "Z", "template_index"])
        for c in corrs:
            writer.writerow([repr(float(c.pixel[0])), repr(float(c.pixel[1])),
                             repr(float(c.point3d[0])), repr(float(c.point3d[1])),
                             repr(float(c.point3d[2])), c.source_template])
    return path
