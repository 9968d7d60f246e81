"""Monocular model-based 6-DoF object localization toolkit.

Renders salient-edge maps of a textureless mesh from pose hypotheses,
matches them against a test image's edge map with a masked edge-domain
similarity metric, and refines the pose with PnP-RANSAC until the
corrections settle.
"""
from .geometry import (BehindCameraError, CameraModel, RigidTransform, TriangleMesh,
                       UncertaintyBox, load_camera, load_obj, load_pose, pose_error,
                       sample_pose_perturbation, save_camera, save_obj, save_pose)
from .rasterizer import (EmptyMeshError, GeometryBuffer, UnrenderedPixelError,
                         backproject, rasterize, salient_edges, shade_flat)
from .image_pipeline import canny, equalize
from .matcher import (FullyClippedWindowError, SearchWindow, Template,
                      TooFewEdgePixelsError, best_match, extract_templates, ncc_scores,
                      search_window, ssd_scores, whs_scores_fft, whs_scores_naive)
from .pose_solver import (Correspondence, DegenerateGeometryError, NoConsensusError,
                          PnpResult, pnp_refine, ransac_pnp)
from .localizer import (LocalizerConfig, LocalizerResult, STATUS_CONVERGED,
                        STATUS_EARLY_FAILURE, STATUS_MAX_ITERATIONS,
                        STATUS_NO_CONSENSUS, localize, localize_edges,
                        multi_seed_localize, multi_seed_localize_edges)
from .evaluation import (CampaignReport, ErrorDecomposition, NoiseModel, Requirements,
                         ScenarioSpec, decompose, end_effector_error, run_scenarios,
                         write_report)

__version__ = "0.1.0"
