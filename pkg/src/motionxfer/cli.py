"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
Set ``MOTIONXFER_LOG`` (DEBUG, INFO, WARNING, ...) to control log output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .adjoint import gradient_check
from .config import ConfigError, RunConfig, format_config, load_config
from .correspondence import concat_features, match_parts, mean_part_features, remove_outliers
from .fileio import (
    FormatError,
    PointCloud,
    export_frames,
    parse_bone_sequence,
    parse_point_cloud,
    read_features,
    write_bone_sequence,
    write_matrix,
    write_point_cloud,
)
from .kinematics import SkinningModel, part_labels
from .mpm import MaterialParams, NumericalDivergenceError, ParticleState, SimConfig, SimGrid, simulate
from .synth import SCENE_KINDS, cube_particles, synth_scene
from .transfer import (
    TransferSettings,
    build_scene,
    part_centroids,
    run_transfer,
)

log = logging.getLogger("motionxfer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", type=Path, help="key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="fixed-order accumulation (always on; accepted for scripts)")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--resolution", type=int)
    p.add_argument("--substeps", type=int)
    p.add_argument("--young", type=float)
    p.add_argument("--poisson", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tv-weight", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="motionxfer", description="Video-guided motion transfer onto static point sets "
                 "through a differentiable MPM simulator.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="forward-simulate a point cloud and export frames")
    _common(p)
    p.add_argument("--input", type=Path, help="point cloud (overrides the config's target)")
    p.add_argument("--frames", type=int, default=10, help="frames after the rest frame")
    p.add_argument("--frame-dt", type=float, default=1.0 / 24)
    p.add_argument("--gravity", type=float, nargs=3)

    p = sub.add_parser("match", help="label target points with reference parts")
    _common(p)

    p = sub.add_parser("transfer", help="run the full transfer pipeline")
    _common(p)
    p.add_argument("--phases", type=int)
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("gradcheck", help="compare adjoint and finite-difference gradients")
    _common(p)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--cube", type=int, default=6, help="particles per axis of the probe cube")
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("synth", help="write a synthetic scene and a matching config")
    _common(p)
    p.add_argument("kind", choices=SCENE_KINDS)

    p = sub.add_parser("ablate", help="manual-velocity baselines against the optimized run")
    _common(p)
    p.add_argument("--alpha", type=float, action="append",
                   help="baseline velocity scale; repeat for several (default 0.5 1 2 4)")
    p.add_argument("--phases", type=int)
    p.add_argument("--no-plots", action="store_true")
    return ap


# -- helpers -----------------------------------------------------------------

def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg.update(seed=args.seed, deterministic=args.deterministic, out_dir=args.out_dir,
               resolution=args.resolution, substeps=args.substeps, young=args.young,
               poisson=args.poisson, iters=args.iters, lr=args.lr, tv_weight=args.tv_weight)
    return cfg


def _material(cfg: RunConfig) -> MaterialParams:
    return MaterialParams(cfg.young, cfg.poisson)


def _settings(cfg: RunConfig) -> TransferSettings:
    return TransferSettings(iters=cfg.iters, lr=cfg.lr, tv_weight=cfg.tv_weight,
                            share_velocity=cfg.share_velocity,
                            control_resolution=cfg.control_resolution,
                            plane_resolution=cfg.plane_resolution, plane_channels=cfg.plane_channels,
                            hidden=cfg.hidden, seed=cfg.seed,
                            scale_global_translation=cfg.scale_global_translation,
                            rms_decay=cfg.rms_decay)


def _particles(path, cfg: RunConfig) -> ParticleState:
    cloud = parse_point_cloud(path)
    if len(cloud) == 0:
        raise FormatError(f"{path}: target point cloud is empty")
    x = cloud.positions.astype(float)
    if cloud.mass is not None:
        return ParticleState(x, np.zeros_like(x), cloud.mass.astype(float), cloud.volume.astype(float))
    return ParticleState.at_rest(x, cfg.density, cfg.particle_volume)


def _scene(cfg: RunConfig):
    cfg.require("target", "target_diff", "target_geo", "reference_vertices",
                "reference_diff", "reference_geo", "bones")
    particles = _particles(cfg.target, cfg)
    tf = read_features(cfg.target_vertices or cfg.target, cfg.target_diff, cfg.target_geo)
    rf = read_features(cfg.reference_vertices, cfg.reference_diff, cfg.reference_geo)
    seq = parse_bone_sequence(cfg.bones)
    scene = build_scene(particles, tf, rf, seq, _settings(cfg), resolution=cfg.resolution,
                        substeps=cfg.substeps, material=_material(cfg), gravity=cfg.gravity,
                        boundary=cfg.boundary_map(), outlier_k=cfg.outlier_k,
                        coverage=cfg.coverage, deterministic=cfg.deterministic,
                        reach_factor=cfg.reach_factor)
    return scene


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _phases(cfg: RunConfig, args, n_frames: int) -> int:
    n = getattr(args, "phases", None)
    n = cfg.phases if n is None else n
    return n_frames - 1 if n < 0 else n


# -- commands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    src = args.input or cfg.target
    particles = _particles(src, cfg) if src else cube_particles(8, 0.025, center=(0.0, 0.3, 0.0))
    gravity = args.gravity if args.gravity is not None else cfg.gravity
    grid = SimGrid.enclosing(particles.x, cfg.resolution, dilation=1.0)
    sim = SimConfig(grid, dt=args.frame_dt / cfg.substeps, substeps=cfg.substeps, gravity=gravity,
                    material=_material(cfg), boundary=cfg.boundary_map(),
                    deterministic=cfg.deterministic)
    frames = [particles]
    for _ in range(args.frames):
        frames.append(simulate(frames[-1], sim, cfg.substeps))
    paths = export_frames(frames, Path(cfg.out_dir) / "frames", args.frame_dt, cfg.out_format)
    print(f"wrote {len(paths)} frames to {Path(cfg.out_dir) / 'frames'}")
    return EXIT_OK


def cmd_match(args) -> int:
    cfg = _load(args)
    cfg.require("target_diff", "target_geo", "reference_vertices", "reference_diff",
                "reference_geo", "bones")
    seq = parse_bone_sequence(cfg.bones)
    tf = read_features(cfg.target_vertices or cfg.target, cfg.target_diff, cfg.target_geo)
    rf = read_features(cfg.reference_vertices, cfg.reference_diff, cfg.reference_geo)
    B = seq.n_bones
    ref_labels = part_labels(rf.vertices, SkinningModel(seq.canonical_bones))
    means = mean_part_features(concat_features(rf), ref_labels, B)
    raw = match_parts(concat_features(tf), means)
    assignment = remove_outliers(tf.vertices, raw, cfg.outlier_k, B)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_point_cloud(out / "target_labels.bin", PointCloud(tf.vertices, labels=assignment.labels))
    counts = np.bincount(assignment.labels, minlength=B + 1)
    _write_csv(out / "parts.csv", ["part", "points", "centroid_x", "centroid_y", "centroid_z"],
               [[b, int(counts[b]), *assignment.part_centroids[b - 1]] for b in range(1, B + 1)])
    print(f"labelled {len(raw)} points: " + ", ".join(f"part {b}={counts[b]}" for b in range(1, B + 1))
          + f", unassigned={counts[0]}")
    return EXIT_OK


def _trajectories(scene, result):
    B = scene.n_parts
    ach = np.array([part_centroids(s, scene.labels, B) for s in result.simulated])
    ref = np.zeros_like(ach)
    for t, ph in enumerate(result.phases):
        ref[t + 1] = ref[t] + ph.target
    return ach - ach[0], ref


def cmd_transfer(args) -> int:
    cfg = _load(args)
    scene = _scene(cfg)
    n = _phases(cfg, args, scene.reference.n_frames)
    result = run_transfer(scene, phases=n)
    out = Path(cfg.out_dir)
    export_frames(result.frames, out / "frames", scene.reference.frame_dt, cfg.out_format)
    _write_csv(out / "phases.csv", ["phase", "iterations", "best_iter", "best_loss", "terminal_error"],
               [[p.t, len(p.losses), p.best_iter, p.best_loss, p.terminal_error] for p in result.phases])
    _write_csv(out / "losses.csv", ["phase", "iter", "loss"],
               [[p.t, k, l] for p in result.phases for k, l in enumerate(p.losses)])
    ach, ref = _trajectories(scene, result)
    _write_csv(out / "centroids.csv", ["frame", "part", "dx", "dy", "dz", "ref_dx", "ref_dy", "ref_dz"],
               [[k, b + 1, *ach[k, b], *ref[k, b]] for k in range(len(ach)) for b in range(ach.shape[1])])
    (out / "run_config.txt").write_text(format_config(cfg))
    if not args.no_plots and result.phases:
        plotting.plot_losses({p.t: p.losses for p in result.phases}, out / "losses.png")
        plotting.plot_trajectories(ach, ref, out / "centroids.png")
    print(f"transferred {len(result.phases)} phases; s_t/s_o = {scene.scale:.4f}; frames in {out / 'frames'}")
    for p in result.phases:
        print(f"  phase {p.t}: best loss {p.best_loss:.6g} at iter {p.best_iter}, "
              f"terminal error {p.terminal_error:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    rng = np.random.default_rng(cfg.seed)
    if cfg.target:
        particles = _particles(cfg.target, cfg)
    else:
        particles = cube_particles(args.cube, 0.02, center=(0.0, 0.5, 0.0))
    particles.v = rng.normal(0.0, 0.3, (particles.n, 3))
    grid = SimGrid.enclosing(particles.x, min(cfg.resolution, 32), dilation=1.0)
    substeps = min(cfg.substeps, 20)
    sim = SimConfig(grid, dt=1e-3, substeps=substeps, gravity=cfg.gravity, material=_material(cfg),
                    boundary={}, deterministic=cfg.deterministic)
    rep = gradient_check(particles, sim, args.probes, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "gradcheck.csv", ["particle", "component", "adjoint", "fd", "rel_error"],
               [[q["particle"], q["component"], q["adjoint"], q["fd"], q["rel_error"]] for q in rep["probes"]])
    if rep["n_probes"] == 0:
        print("no probes requested")
        return EXIT_OK
    print(f"{rep['n_probes']} probes on {particles.n} particles x {substeps} substeps: "
          f"max rel error {rep['max_rel_error']:.3e}, mean {rep['mean_rel_error']:.3e}")
    if rep["max_rel_error"] > args.tol:
        print(f"gradient check above tolerance {args.tol:g}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load(args)
    sc = synth_scene(args.kind, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = sc.particles
    write_point_cloud(out / "target.bin", PointCloud(p.x, p.m, p.V0))
    write_matrix(out / "target_diff.bin", sc.target_features.diff_features)
    write_matrix(out / "target_geo.bin", sc.target_features.geo_features)
    write_point_cloud(out / "reference.bin", PointCloud(sc.ref_features.vertices))
    write_matrix(out / "reference_diff.bin", sc.ref_features.diff_features)
    write_matrix(out / "reference_geo.bin", sc.ref_features.geo_features)
    write_bone_sequence(out / "bones.json", sc.sequence)
    run = RunConfig(target=out / "target.bin", target_diff=out / "target_diff.bin",
                    target_geo=out / "target_geo.bin", reference_vertices=out / "reference.bin",
                    reference_diff=out / "reference_diff.bin", reference_geo=out / "reference_geo.bin",
                    bones=out / "bones.json", out_dir=out / "run", seed=cfg.seed,
                    resolution=cfg.resolution, substeps=cfg.substeps, young=cfg.young,
                    poisson=cfg.poisson, iters=cfg.iters, lr=cfg.lr, tv_weight=cfg.tv_weight)
    (out / "config.txt").write_text(format_config(run, base_dir=out))
    print(f"{args.kind}: {p.n} target particles, {sc.sequence.n_bones} bones, "
          f"{sc.sequence.n_frames} frames -> {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load(args)
    alphas = tuple(args.alpha) if args.alpha else cfg.alphas
    # baselines travel up to max(alpha) times the reference path
    cfg.reach_factor = max(cfg.reach_factor, max(alphas) + 0.5)
    scene = _scene(cfg)
    n = _phases(cfg, args, scene.reference.n_frames)
    rows, errors = [], []
    for a in alphas:
        res = run_transfer(scene, phases=n, ablation_alpha=a)
        err = sum(p.terminal_error for p in res.phases)
        errors.append(err)
        rows.append([f"alpha={a:g}", a, err])
    opt = run_transfer(scene, phases=n)
    opt_err = sum(p.terminal_error for p in opt.phases)
    rows.append(["optimized", "", opt_err])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ablation.csv", ["run", "alpha", "terminal_error"], rows)
    if not args.no_plots:
        plotting.plot_alpha_sweep(alphas, errors, opt_err, out / "ablation.png")
    for r in rows:
        print(f"  {r[0]:>12s}  terminal error {r[2]:.6g}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "match": cmd_match, "transfer": cmd_transfer,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth, "ablate": cmd_ablate}


def main(argv=None) -> int:
    level = os.environ.get("MOTIONXFER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("no command given")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except NumericalDivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, FormatError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
