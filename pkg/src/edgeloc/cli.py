"""Command-line entry points: localize, render-edges, synth, eval.

Every run writes its artifacts plus an index.json listing them into the
output directory; identical inputs produce byte-identical artifacts.
Exit codes: 0 success/converged, 1 usage or I/O error, 2 localization did
not converge, 3 evaluation success rate below the configured floor.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import imageio
from .evaluation import (NoiseModel, Requirements, ScenarioSpec, overlay_edges,
                         run_scenarios, write_report)
from .geometry import (CameraModel, RigidTransform, UncertaintyBox, load_camera,
                       load_obj, load_pose, sample_pose_perturbation, save_camera,
                       save_obj, save_pose)
from .localizer import (STATUS_CONVERGED, LocalizerConfig, localize, localize_edges,
                        test_edge_map)
from .primitives import box as box_mesh
from .primitives import reference_bracket, tube
from .rasterizer import (EmptyMeshError, dump_edge_map, dump_geometry_buffer,
                         rasterize, salient_edges, shade_flat)


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _box_from_dict(d: dict) -> UncertaintyBox:
    return UncertaintyBox(np.asarray(d["translation_half_mm"], dtype=np.float64),
                          np.asarray(d["rotation_half_deg"], dtype=np.float64))


def _box_to_dict(box: UncertaintyBox) -> dict:
    return {"translation_half_mm": [float(v) for v in box.translation_half_mm],
            "rotation_half_deg": [float(v) for v in box.rotation_half_deg]}


def config_from_dict(doc: dict) -> LocalizerConfig:
    """LocalizerConfig from a JSON document mirroring its field names."""
    doc = dict(doc)
    if "initial_box" in doc:
        doc["initial_box"] = _box_from_dict(doc["initial_box"])
    valid = {f.name for f in dataclasses.fields(LocalizerConfig)}
    unknown = set(doc) - valid
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return LocalizerConfig(**doc)


def _load_config(path, rng_seed=None, metric=None) -> LocalizerConfig:
    doc = json.loads(Path(path).read_text(encoding="utf-8")) if path else {}
    cfg = config_from_dict(doc)
    if rng_seed is not None:
        cfg = dataclasses.replace(cfg, rng_seed=rng_seed)
    if metric is not None:
        cfg = dataclasses.replace(cfg, metric=metric)
    return cfg


def _pose_to_dict(pose: RigidTransform) -> dict:
    return {"quaternion_wxyz": [float(v) for v in pose.quaternion],
            "translation_mm": [float(v) for v in pose.translation]}


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_index(out_dir: Path, artifacts):
    names = sorted(Path(a).name for a in artifacts)
    _write_json(out_dir / "index.json", {"artifacts": names})


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input path does not exist: {p}")


def cmd_localize(args) -> int:
    _require_files(args.image, args.mesh, args.camera, args.seed_pose, args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mesh = load_obj(args.mesh)
    camera = load_camera(args.camera)
    seed = load_pose(args.seed_pose)
    cfg = _load_config(args.config, rng_seed=args.rng_seed, metric=args.metric)
    image = imageio.load_gray(args.image)

    if args.edge_input:
        edges = image > 127
        result = localize_edges(edges, seed, mesh, camera, cfg)
        base_gray = edges.astype(np.uint8) * 200
    else:
        edges = test_edge_map(image, cfg)
        result = localize_edges(edges, seed, mesh, camera, cfg)
        base_gray = image

    artifacts = []
    result_doc = {
        "inputs": {"image": str(args.image), "mesh": str(args.mesh),
                   "camera": str(args.camera), "seed_pose": str(args.seed_pose),
                   "config": str(args.config) if args.config else None,
                   "rng_seed": cfg.rng_seed, "metric": cfg.metric},
        "status": result.status,
        "pose": _pose_to_dict(result.pose),
        "iterations": [{
            "pose": _pose_to_dict(d.pose),
            "correction_translation_mm": d.correction_translation_mm,
            "correction_rotation_deg": d.correction_rotation_deg,
            "template_count": d.template_count,
            "inlier_count": d.inlier_count,
            "mean_reproj_error_px": d.mean_reproj_error_px,
        } for d in result.iterations],
    }
    result_path = out_dir / "result.json"
    _write_json(result_path, result_doc)
    artifacts.append(result_path)

    if args.overlay:
        buf = rasterize(mesh, result.pose, camera)
        final_edges, _ = salient_edges(buf, cfg.normal_thresh_deg, cfg.depth_thresh_mm)
        overlay_path = out_dir / "overlay.png"
        imageio.save_png(overlay_path, overlay_edges(base_gray, final_edges))
        artifacts.append(overlay_path)

    _write_index(out_dir, artifacts + [out_dir / "index.json"])
    return 0 if result.status == STATUS_CONVERGED else 2


def cmd_render_edges(args) -> int:
    _require_files(args.mesh, args.camera, args.seed_pose, args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    mesh = load_obj(args.mesh)
    camera = load_camera(args.camera)
    pose = load_pose(args.seed_pose)
    cfg = _load_config(args.config)

    buf = rasterize(mesh, pose, camera)
    edges, mask = salient_edges(buf, cfg.normal_thresh_deg, cfg.depth_thresh_mm)

    artifacts = dump_geometry_buffer(buf, out_dir, prefix="render")
    artifacts.append(dump_edge_map(edges, out_dir / "render_edges.pgm"))
    artifacts.append(dump_edge_map(mask, out_dir / "render_mask.pgm"))
    _write_index(out_dir, artifacts + [out_dir / "index.json"])
    return 0


_SCENES = {
    "bracket": reference_bracket,
    "cube": lambda: box_mesh((80.0, 80.0, 80.0)),
    "tube": lambda: tube(30.0, 160.0, facets=16, caps=False),
}


def _default_camera() -> CameraModel:
    return CameraModel(fx=740.0, fy=740.0, cx=255.5, cy=255.5, width=512, height=512,
                       k1=-0.04, k2=0.002, p1=2e-4, p2=-1.5e-4)


def _default_truth_pose() -> RigidTransform:
    return RigidTransform.from_axis_angle_deg((0, 1, 0), 14.0, (0.0, 0.0, 420.0)) \
        .compose(RigidTransform.from_axis_angle_deg((1, 0, 0), -18.0))


def cmd_synth(args) -> int:
    """Generate a self-contained synthetic scenario bundle."""
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.rng_seed)

    mesh = _SCENES[args.scene]()
    camera = _default_camera()
    truth = _default_truth_pose()
    box = UncertaintyBox.symmetric(30.0, 5.0)

    if args.seed_perturb == "none":
        seed = truth
    elif args.seed_perturb == "inbox":
        seed = sample_pose_perturbation(box, rng).compose(truth)
    else:  # "far": twice the box on the worst axis
        seed = RigidTransform(np.array([1.0, 0, 0, 0]), (60.0, 15.0, 0.0)).compose(truth)

    buf = rasterize(mesh, truth, camera)
    edges, _ = salient_edges(buf)

    artifacts = []
    mesh_path = out_dir / "mesh.obj"
    save_obj(mesh, mesh_path)
    camera_path = out_dir / "camera.json"
    save_camera(camera, camera_path)
    truth_path = out_dir / "truth_pose.json"
    save_pose(truth, truth_path)
    seed_path = out_dir / "seed_pose.json"
    save_pose(seed, seed_path)
    edges_path = out_dir / "test_edges.pgm"
    dump_edge_map(edges, edges_path)
    image_path = out_dir / "test_image.pgm"
    imageio.write_pgm8(image_path, shade_flat(buf))
    artifacts += [mesh_path, camera_path, truth_path, seed_path, edges_path, image_path]

    scenario_path = out_dir / "scenario.json"
    _write_json(scenario_path, {
        "mesh": "mesh.obj",
        "camera": "camera.json",
        "truth_pose": "truth_pose.json",
        "perturbation_box": _box_to_dict(box),
        "noise": {"spurious_fraction": args.noise_spurious,
                  "dropout_fraction": args.noise_dropout,
                  "jitter_probability": 0.0},
        "requirements": {"max_translation_mm": 0.4, "max_rotation_deg": 0.25},
        "rng_seed": args.rng_seed,
        "trials": args.trials,
        "mode": "edges",
        "config": {"template_count": 96, "template_spacing": 14, "reproj_halvings": 3},
        "success_floor": 0.0,
    })
    artifacts.append(scenario_path)
    _write_index(out_dir, artifacts + [out_dir / "index.json"])
    return 0


def cmd_eval(args) -> int:
    _require_files(args.spec)
    spec_path = Path(args.spec)
    doc = json.loads(spec_path.read_text(encoding="utf-8"))
    base = spec_path.parent

    mesh = load_obj(base / doc["mesh"])
    camera = load_camera(base / doc["camera"])
    truth = load_pose(base / doc["truth_pose"])
    noise_doc = doc.get("noise", {})
    req_doc = doc.get("requirements", {})
    spec = ScenarioSpec(
        mesh=mesh, camera=camera, truth_pose=truth,
        perturbation_box=_box_from_dict(doc["perturbation_box"]),
        noise=NoiseModel(**noise_doc),
        requirements=Requirements(**req_doc) if req_doc else Requirements(),
        rng_seed=int(doc.get("rng_seed", 0)),
        trials=int(doc.get("trials", 20)),
        mode=doc.get("mode", "edges"),
    )
    cfg = config_from_dict(doc.get("config", {}))
    if args.rng_seed is not None:
        spec = dataclasses.replace(spec, rng_seed=args.rng_seed)
    if args.metric is not None:
        cfg = dataclasses.replace(cfg, metric=args.metric)
    floor = args.success_floor if args.success_floor is not None \
        else float(doc.get("success_floor", 0.0))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = run_scenarios(spec, cfg, overlay_dir=out_dir if args.overlay else None)
    artifacts = write_report(report, out_dir)
    _write_index(out_dir, artifacts + [out_dir / "index.json"])

    if report.success_rate is None:
        return 0
    return 0 if report.success_rate >= floor else 3


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="edgeloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_loc = sub.add_parser("localize", help="localize one test image")
    p_loc.add_argument("--image", required=True)
    p_loc.add_argument("--mesh", required=True)
    p_loc.add_argument("--camera", required=True)
    p_loc.add_argument("--seed-pose", required=True)
    p_loc.add_argument("--config", default=None)
    p_loc.add_argument("--out", required=True)
    p_loc.add_argument("--rng-seed", type=int, default=None)
    p_loc.add_argument("--metric", choices=["whs", "ncc", "ssd"], default=None)
    p_loc.add_argument("--overlay", action="store_true")
    p_loc.add_argument("--edge-input", action="store_true",
                       help="treat the image as a binary edge map (skips Canny)")
    p_loc.set_defaults(func=cmd_localize)

    p_ren = sub.add_parser("render-edges", help="render debug buffers and edge maps")
    p_ren.add_argument("--mesh", required=True)
    p_ren.add_argument("--camera", required=True)
    p_ren.add_argument("--seed-pose", required=True)
    p_ren.add_argument("--config", default=None)
    p_ren.add_argument("--out", required=True)
    p_ren.set_defaults(func=cmd_render_edges)

    p_syn = sub.add_parser("synth", help="generate a synthetic scenario bundle")
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--rng-seed", type=int, default=0)
    p_syn.add_argument("--scene", choices=sorted(_SCENES), default="bracket")
    p_syn.add_argument("--seed-perturb", choices=["none", "inbox", "far"], default="none")
    p_syn.add_argument("--noise-spurious", type=float, default=0.0)
    p_syn.add_argument("--noise-dropout", type=float, default=0.0)
    p_syn.add_argument("--trials", type=int, default=20)
    p_syn.set_defaults(func=cmd_synth)

    p_ev = sub.add_parser("eval", help="run an evaluation campaign")
    p_ev.add_argument("--spec", required=True)
    p_ev.add_argument("--out", required=True)
    p_ev.add_argument("--rng-seed", type=int, default=None)
    p_ev.add_argument("--metric", choices=["whs", "ncc", "ssd"], default=None)
    p_ev.add_argument("--success-floor", type=float, default=None)
    p_ev.add_argument("--overlay", action="store_true")
    p_ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, EmptyMeshError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
