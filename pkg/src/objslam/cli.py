"""Command-line entry points: run the pipeline, evaluate trajectories,
export meshes, generate synthetic sequences, and inspect graph dumps."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import PipelineConfig, load_config, save_config
from .geometry import Intrinsics
from .io_formats import (ate_details, export_tum_sequence, read_trajectory,
                         read_tum_rgbd, write_trajectory)
from .mesh import extract_mesh, save_mesh
from .pipeline import run
from .posegraph import load_graph, save_graph
from .reloc import OracleFeatures
from .segmentation import (EmptyMaskSource, FileMaskSource,
                           GroundTruthMaskSource, MaskCorruption,
                           write_mask_files)
from .synthworld import (SynthFrameSource, default_intrinsics, load_scene,
                         load_trajectory_spec, loop_sequence, save_scene,
                         save_trajectory_spec, scene_landmarks)
from .tsdf import save_volume

# TUM FR2-style defaults for real sequences
TUM_INTRINSICS = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5,
                            width=640, height=480)


class _TumFrameSource:
    def __init__(self, directory, intrinsics):
        self.seq = read_tum_rgbd(directory)
        self.intrinsics = intrinsics

    def __len__(self):
        return len(self.seq)

    def frames(self):
        return self.seq.frames()


def _fail(message, code=2):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _load_synth_source(data_dir, config, n_frames=None):
    scene = load_scene(os.path.join(data_dir, "scene.txt"))
    traj = load_trajectory_spec(os.path.join(data_dir, "trajectory.txt"))
    meta_path = os.path.join(data_dir, "sequence.json")
    with open(meta_path) as f:
        meta = json.load(f)
    K = Intrinsics(**meta["intrinsics"])
    n = n_frames or meta["n_frames"]
    return scene, SynthFrameSource(scene, traj, K, n_frames=n, seed=config.seed)


def cmd_synth_generate(args):
    scene, traj = loop_sequence(args.preset, seed=args.seed,
                                sigma_t=args.sigma_t,
                                sigma_r=np.deg2rad(args.sigma_r_deg))
    K = default_intrinsics(args.width, args.height)
    os.makedirs(args.out, exist_ok=True)
    save_scene(scene, os.path.join(args.out, "scene.txt"))
    save_trajectory_spec(traj, os.path.join(args.out, "trajectory.txt"))
    n = args.frames
    with open(os.path.join(args.out, "sequence.json"), "w") as f:
        json.dump({"preset": args.preset, "n_frames": n, "seed": args.seed,
                   "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx,
                                  "cy": K.cy, "width": K.width,
                                  "height": K.height}}, f, indent=1)
    source = SynthFrameSource(scene, traj, K, n_frames=n, seed=args.seed)
    if args.export_frames:
        export_tum_sequence(args.out, source.frames(), source.timestamps,
                            source.gt_poses)
    else:
        from .io_formats import TrajectoryRecord, write_trajectory as wt

        wt(source.ground_truth(), os.path.join(args.out, "groundtruth.txt"))
    if args.export_masks:
        masks = GroundTruthMaskSource(scene, source.gt_poses, K, seed=args.seed)
        mask_dir = os.path.join(args.out, "masks")
        for k in range(0, n, masks.cadence):
            dets = masks.detections_for(k)
            if dets:
                write_mask_files(mask_dir, k, dets)
    print(f"wrote synthetic sequence '{args.preset}' ({n} frames) to {args.out}")
    return 0


def _build_config(args):
    if args.config and os.path.exists(args.config):
        config = load_config(args.config)
    else:
        config = PipelineConfig()
    if args.seed is not None:
        config.seed = args.seed
    return config


def cmd_run(args):
    config = _build_config(args)
    features = None
    gt_path = None

    if os.path.exists(os.path.join(args.data, "scene.txt")):
        scene, source = _load_synth_source(args.data, config, args.frames)
        K = source.intrinsics
        config = config.scaled_for_image(K.width, K.height)
        config.odometry_sigma_t = source.trajectory.sigma_t
        config.odometry_sigma_r = source.trajectory.sigma_r
        gt_path = os.path.join(args.data, "groundtruth.txt")
        if args.masks == "gt":
            masks = GroundTruthMaskSource(
                scene, source.gt_poses, K, cadence=config.detection_cadence,
                corruption=MaskCorruption(dropout=args.mask_dropout),
                seed=config.seed)
        elif args.masks == "none":
            masks = EmptyMaskSource()
        else:
            masks = FileMaskSource(args.masks, cadence=config.detection_cadence)
        if config.feature_kind == "oracle":
            world, ids, _ = scene_landmarks(scene)
            features = OracleFeatures(world, ids,
                                      dict(enumerate(source.gt_poses)))
    else:
        if not os.path.exists(os.path.join(args.data, "rgb.txt")):
            _fail(f"{args.data}: neither a synthetic sequence nor a TUM directory")
        source = _TumFrameSource(args.data, TUM_INTRINSICS)
        if args.masks == "none":
            masks = EmptyMaskSource()
        elif args.masks == "gt":
            _fail("ground-truth masks need a synthetic sequence")
        else:
            masks = FileMaskSource(args.masks, cadence=config.detection_cadence)
        gt = os.path.join(args.data, "groundtruth.txt")
        gt_path = gt if os.path.exists(gt) else None

    result = run(config, source, masks, features=features)

    os.makedirs(args.out, exist_ok=True)
    write_trajectory(result.trajectory, os.path.join(args.out, "trajectory.txt"))
    save_graph(result.graph, os.path.join(args.out, "graph.txt"))
    save_config(config, os.path.join(args.out, "config.txt"))
    with open(os.path.join(args.out, "stats.jsonl"), "w") as f:
        for stat in result.stats:
            f.write(json.dumps(stat, default=_json_default) + "\n")
    vol_dir = os.path.join(args.out, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    mesh_dir = os.path.join(args.out, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    for oid, vol in result.volumes.items():
        save_volume(vol, os.path.join(vol_dir, f"object_{oid:04d}"))
        mesh = extract_mesh(vol)
        if not mesh.empty:
            save_mesh(mesh, os.path.join(mesh_dir, f"object_{oid:04d}.mesh"))
    print(f"status: {result.status}")
    print(f"frames: {len(result.trajectory)}  objects: {len(result.volumes)}  "
          f"graph: {len(result.graph.nodes)} nodes / {len(result.graph.edges)} edges")
    if gt_path and os.path.exists(gt_path):
        truth = read_trajectory(gt_path)
        details = ate_details(result.trajectory, truth)
        print(f"ATE RMSE: {details.rmse:.6f} m over {details.pairs} pairs")
    return 0 if result.status == "ok" else 1


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")


def cmd_eval_ate(args):
    est = read_trajectory(args.estimate)
    truth = read_trajectory(args.truth)
    try:
        details = ate_details(est, truth)
    except ValueError as exc:
        _fail(str(exc))
    print(f"{details.rmse:.6f}")
    if args.verbose:
        print(f"pairs: {details.pairs}")
        print(f"rotation RMSE: {details.rotation_rmse_deg:.4f} deg")
    return 0


def cmd_export_meshes(args):
    from .tsdf import load_volume

    os.makedirs(args.out, exist_ok=True)
    count = 0
    for name in sorted(os.listdir(args.volumes)):
        if not name.endswith(".json"):
            continue
        prefix = os.path.join(args.volumes, name[:-5])
        vol = load_volume(prefix)
        mesh = extract_mesh(vol)
        if mesh.empty:
            continue
        save_mesh(mesh, os.path.join(args.out, name[:-5] + ".mesh"))
        count += 1
    print(f"exported {count} meshes to {args.out}")
    return 0


def cmd_dump_graph(args):
    try:
        graph = load_graph(args.graph)
    except Exception as exc:
        _fail(f"cannot parse {args.graph}: {exc}")
    cams = len(graph.camera_keys())
    objs = len(graph.object_keys())
    print(f"nodes: {len(graph.nodes)} ({cams} camera, {objs} object)")
    print(f"edges: {len(graph.edges)}")
    if args.out:
        save_graph(graph, args.out)
        print(f"rewrote graph to {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="objslam",
                                description="object-level volumetric SLAM")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("synth-generate", help="write a synthetic sequence")
    g.add_argument("--preset", default="loop-small")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=300)
    g.add_argument("--width", type=int, default=160)
    g.add_argument("--height", type=int, default=120)
    g.add_argument("--sigma-t", type=float, default=0.0,
                   help="odometry drift, metres/frame")
    g.add_argument("--sigma-r-deg", type=float, default=0.0,
                   help="odometry drift, degrees/frame")
    g.add_argument("--export-frames", action="store_true",
                   help="also write rgb/ and depth/ images (TUM layout)")
    g.add_argument("--export-masks", action="store_true",
                   help="also write ground-truth mask files")
    g.set_defaults(func=cmd_synth_generate)

    r = sub.add_parser("run", help="run the pipeline on a sequence")
    r.add_argument("--data", required=True,
                   help="synthetic sequence dir or TUM RGB-D dir")
    r.add_argument("--out", required=True)
    r.add_argument("--masks", default="gt",
                   help="'gt', 'none', or a mask-file directory")
    r.add_argument("--mask-dropout", type=float, default=0.0)
    r.add_argument("--config", default=None, help="config file to load")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--frames", type=int, default=None)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval-ate", help="absolute trajectory error")
    e.add_argument("estimate")
    e.add_argument("truth")
    e.add_argument("--verbose", action="store_true")
    e.set_defaults(func=cmd_eval_ate)

    m = sub.add_parser("export-meshes", help="meshes from saved volume dumps")
    m.add_argument("--volumes", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_export_meshes)

    d = sub.add_parser("dump-graph", help="parse and summarise a graph dump")
    d.add_argument("graph")
    d.add_argument("--out", default=None)
    d.set_defaults(func=cmd_dump_graph)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
