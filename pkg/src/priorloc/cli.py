"""Command line entry point: ``priorloc <command> ...``.

Exit codes::

    0  success
    1  unexpected internal error
    2  usage error (bad arguments)
    3  invalid configuration or scene file
    4  a referenced input file does not exist
    5  malformed or unusable input data
    6  pose initialization failed (fitness gate or no convergence)
    7  evaluation failed (no accepted correspondences or no timestamp match)

On failure a single JSON object is written to stderr, e.g.
``{"error": "init_failed", "exit_code": 6, "message": "...", "fitness": 0.04}``.
Regular output is tab-delimited ``key<TAB>value`` lines on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_BAD_INPUT = 5
EXIT_INIT_FAILED = 6
EXIT_EVAL_FAILED = 7

COMMAND_SECTIONS = {
    "simulate": (),
    "craft": ("sample", "mls"),
    "ground": ("ground",),
    "traverse": ("traverse",),
    "init-pose": ("localize", "icp"),
    "localize": ("localize", "icp", "refine"),
    "eval": ("eval",),
}

log = logging.getLogger("priorloc")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **extra):
        super().__init__(message)
        self.code = code
        self.kind = kind
        self.extra = extra


def _emit(key, value):
    if isinstance(value, float):
        value = f"{value:.9g}"
    print(f"{key}\t{value}")


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise CliError(EXIT_MISSING_FILE, "missing_file", f"{p}: no such file or directory",
                           path=str(p))


def _parse_guess(text):
    from .cloudio import RigidTransform
    if text is None:
        return RigidTransform.identity()
    vals = [float(v) for v in text.replace(",", " ").split()]
    if len(vals) == 4:
        return RigidTransform.from_rotvec([0.0, 0.0, math.radians(vals[3])], vals[:3])
    if len(vals) == 7:
        return RigidTransform.from_quaternion(vals[3:], vals[:3])
    raise CliError(EXIT_USAGE, "bad_guess",
                   "--guess takes 'x y z yaw_deg' or 'x y z qx qy qz qw'")


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg):
    from .dataset import save_sequence
    from .simulation import generate_sequence, load_simulation_spec
    _require(args.scene)
    scene, lidar, traj = load_simulation_spec(args.scene, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if traj is not None:
        seq = generate_sequence(scene, traj, lidar)
        save_sequence(out, seq.scans, seq.ground_truth, seq.scene_reference_cloud, seq.reference_labels)
        n_scans = len(seq.scans)
        n_ref = len(seq.scene_reference_cloud)
    else:
        ref, labels = scene.reference_cloud()
        save_sequence(out, [], None, ref, labels)
        n_scans, n_ref = 0, len(ref)
    meta = {"command": "simulate", "scene": Path(args.scene).name, "seed": lidar.seed,
            "scans": n_scans, "reference_points": n_ref}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _emit("seed", lidar.seed)
    _emit("scans", n_scans)
    _emit("reference_points", n_ref)
    _emit("out", out)


def cmd_craft(args, cfg):
    from .cloudio import load_cloud, save_cloud
    from .mapcraft import craft_map
    _require(args.input)
    cloud = load_cloud(args.input)
    out = craft_map(cloud, cfg.sample, cfg.mls)
    save_cloud(out, args.output)
    _emit("input_points", len(cloud))
    _emit("output_points", len(out))
    _emit("output", args.output)


def cmd_ground(args, cfg):
    from .cloudio import load_cloud, save_cloud
    from .ground import csf_extract
    _require(args.input)
    cloud = load_cloud(args.input)
    ground, nonground = csf_extract(cloud, cfg.ground)
    save_cloud(ground, args.ground_out)
    save_cloud(nonground, args.nonground_out)
    _emit("ground_points", len(ground))
    _emit("nonground_points", len(nonground))


def cmd_traverse(args, cfg):
    import numpy as np
    from .cloudio import load_cloud
    from .traversability import compute_layers, costmap_image, dump_layers, export_costmap, FREE, OCCUPIED
    _require(args.input)
    cloud = load_cloud(args.input)
    if len(cloud) == 0:
        raise CliError(EXIT_BAD_INPUT, "empty_input", f"{args.input}: ground cloud is empty")
    grid = compute_layers(cloud, cfg.traverse)
    Path(args.out_prefix).parent.mkdir(parents=True, exist_ok=True)
    export_costmap(grid, args.out_prefix, cfg.traverse)
    dump_layers(grid, args.out_prefix)
    if not args.no_figures:
        from .plotting import plot_grid_layers
        plot_grid_layers(grid, f"{args.out_prefix}_layers.png")
    img = costmap_image(grid, cfg.traverse)
    _emit("width", grid.width)
    _emit("height", grid.height)
    _emit("free_cells", int(np.sum(img == FREE)))
    _emit("occupied_cells", int(np.sum(img == OCCUPIED)))
    _emit("unknown_cells", int(img.size - np.sum(img == FREE) - np.sum(img == OCCUPIED)))
    _emit("costmap", f"{args.out_prefix}.pgm")


def _load_map_and_scans(args, cfg, limit=None):
    from .cloudio import load_cloud
    from .dataset import load_sequence
    _require(args.sequence, args.map)
    scans, truth = load_sequence(args.sequence, limit)
    if not scans:
        raise CliError(EXIT_BAD_INPUT, "empty_sequence", f"{args.sequence}: sequence has no scans")
    cloud = load_cloud(args.map)
    if len(cloud) == 0:
        raise CliError(EXIT_BAD_INPUT, "empty_map", f"{args.map}: map cloud is empty")
    return cloud, scans, truth


def _init_failed(exc):
    _emit("fitness", exc.fitness)
    return CliError(EXIT_INIT_FAILED, "init_failed", str(exc), fitness=exc.fitness)


def cmd_init_pose(args, cfg):
    from .evaluation import write_tum
    from .localization import InitializationError, initialize_pose
    from .spatial import IncrementalIndex
    guess = _parse_guess(args.guess)
    lcfg = cfg.localizer_config()
    cloud, scans, _ = _load_map_and_scans(args, cfg, lcfg.init_scan_count)
    index = IncrementalIndex(cloud.points, lcfg.leaf_size, lcfg.rebuild_ratio)
    try:
        result = initialize_pose(scans, index, guess, lcfg)
    except InitializationError as exc:
        raise _init_failed(exc) from None
    T = result.transform
    stamp = scans[min(lcfg.init_scan_count, len(scans)) - 1].timestamp
    if args.output:
        write_tum(args.output, [(stamp, T)])
    _emit("fitness", result.fitness)
    _emit("iterations", result.iterations_used)
    _emit("translation", " ".join(f"{v:.6f}" for v in T.translation))
    _emit("quaternion_xyzw", " ".join(f"{v:.6f}" for v in T.quaternion()))


def cmd_localize(args, cfg):
    from .cloudio import save_cloud
    from .evaluation import write_tum
    from .localization import InitializationError, run_sequence
    guess = _parse_guess(args.guess)
    cloud, scans, _ = _load_map_and_scans(args, cfg)
    try:
        run = run_sequence(cloud, scans, guess, cfg.localizer_config())
    except InitializationError as exc:
        raise _init_failed(exc) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", run.trajectory)
    save_cloud(run.registered_cloud, out / "registered.ply")
    save_cloud(run.map_cloud, out / "map.ply")
    with open(out / "scan_status.txt", "w", encoding="ascii") as f:
        for (t, _), bad, n in zip(run.trajectory, run.degraded, run.inserted):
            f.write(f"{t:.9f} {'degraded' if bad else 'ok'} {n}\n")
    _emit("init_fitness", run.init_result.fitness)
    _emit("scans", len(run.trajectory))
    _emit("degraded_scans", int(sum(run.degraded)))
    _emit("inserted_points", int(sum(run.inserted)))
    _emit("map_points", len(run.map_cloud))
    _emit("out", out)


def cmd_eval(args, cfg):
    from .cloudio import load_cloud
    from .evaluation import (AlignmentError, EmptyReportError, evaluate_run, format_report,
                             nearest_distances, read_tum, write_report)
    _require(args.map, args.registered, args.trajectory, args.truth)
    prior = load_cloud(args.map)
    reg = load_cloud(args.registered)
    if len(prior) == 0 or len(reg) == 0:
        raise CliError(EXIT_BAD_INPUT, "empty_input", "map and registered cloud must be non-empty")
    traj = read_tum(args.trajectory) if args.trajectory else []
    truth = read_tum(args.truth) if args.truth else None
    try:
        report = evaluate_run(prior, reg, traj, truth, cfg.eval.outlier_threshold)
    except (EmptyReportError, AlignmentError) as exc:
        raise CliError(EXIT_EVAL_FAILED, "eval_failed", str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "report.json", out / "report.txt")
    if not args.no_figures:
        from .plotting import plot_distance_histogram, plot_trajectory
        plot_distance_histogram(nearest_distances(reg, prior), cfg.eval.outlier_threshold,
                                out / "c2c_histogram.png", report.cloud)
        if traj:
            plot_trajectory(traj, truth, out / "trajectory.png")
    sys.stdout.write(format_report(report))
    _emit("report", out / "report.json")


COMMANDS = {
    "simulate": cmd_simulate,
    "craft": cmd_craft,
    "ground": cmd_ground,
    "traverse": cmd_traverse,
    "init-pose": cmd_init_pose,
    "localize": cmd_localize,
    "eval": cmd_eval,
}


# ---------------------------------------------------------------- parser


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="pipeline YAML config")
    parser.add_argument("--seed", type=int, metavar="N", default=default,
                        help="RNG seed (overrides the config and scene files)")
    parser.add_argument("--threads", type=int, metavar="N", default=default,
                        help="worker thread cap (default: all cores)")
    parser.add_argument("--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False, help="log progress")


def _config_flags(parser, sections):
    from .config import SECTION_HELP, section_keys
    for section in sections:
        group = parser.add_argument_group(f"{section} options", SECTION_HELP[section])
        for key, default in section_keys(section):
            group.add_argument(f"--{section}.{key}", dest=f"cfg:{section}.{key}", metavar="V",
                               default=argparse.SUPPRESS, help=f"default: {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="priorloc", description="Prior-map localization, map crafting and traversability tools.",
        epilog="Config keys can be set in --config YAML or per flag; flags win.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("simulate", "simulate a Lidar sequence and reference cloud from a scene file")
    p.add_argument("scene", help="scene YAML")
    p.add_argument("--out", required=True, help="output directory")

    p = add("craft", "de-noise a cloud: uniform sampling followed by MLS smoothing")
    p.add_argument("input", help="input PLY/PCD")
    p.add_argument("--output", required=True, help="output PLY/PCD")

    p = add("ground", "split a cloud into ground and overground with the cloth filter")
    p.add_argument("input", help="input PLY/PCD")
    p.add_argument("--ground-out", required=True)
    p.add_argument("--nonground-out", required=True)

    p = add("traverse", "elevation grid, terrain layers and costmap from ground points")
    p.add_argument("input", help="ground PLY/PCD")
    p.add_argument("--out-prefix", required=True, help="prefix for .pgm/.yaml/_<layer>.csv")
    p.add_argument("--no-figures", action="store_true")

    p = add("init-pose", "initialize the pose on the prior map from the first static scans")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("map", help="prior map PLY/PCD")
    p.add_argument("--guess", help="'x y z yaw_deg' or 'x y z qx qy qz qw' (default identity)")
    p.add_argument("--output", help="write the pose as a one-line TUM file")

    p = add("localize", "initialize, then localize every scan (optionally extending the map)")
    p.add_argument("sequence", help="sequence directory")
    p.add_argument("map", help="prior map PLY/PCD")
    p.add_argument("--guess", help="'x y z yaw_deg' or 'x y z qx qy qz qw' (default identity)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", "cloud-to-cloud error against the prior map and trajectory error")
    p.add_argument("--map", required=True, help="prior map PLY/PCD")
    p.add_argument("--registered", required=True, help="registered scans PLY/PCD")
    p.add_argument("--trajectory", help="estimated trajectory (TUM)")
    p.add_argument("--truth", help="ground-truth trajectory (TUM)")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--no-figures", action="store_true")

    for name, sections in COMMAND_SECTIONS.items():
        _config_flags(sub.choices[name], sections)
    return parser


def _threads_from_argv(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise CliError(EXIT_USAGE, "bad_threads", "--threads must be >= 1")
    import numba
    if n > numba.config.NUMBA_NUM_THREADS:
        raise CliError(EXIT_USAGE, "bad_threads",
                       f"--threads {n} exceeds the thread pool ({numba.config.NUMBA_NUM_THREADS})")
    numba.set_num_threads(n)


def _fail(code, kind, message, **extra):
    payload = {"error": kind, "exit_code": code, "message": message}
    payload.update(extra)
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # the numba pool is sized on first import, so this must happen before it
    t = _threads_from_argv(argv)
    if t is not None and t.isdigit() and int(t) > 0 and "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = t

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    from .cloudio import CloudParseError
    from .config import ConfigError, PipelineConfig, apply_overrides, load_config, parse_override_value
    from .simulation import SceneConfigError

    try:
        _set_threads(getattr(args, "threads", None))
        config_path = getattr(args, "config", None)
        if config_path is not None:
            _require(config_path)
            cfg = load_config(config_path)
        else:
            cfg = PipelineConfig()
        overrides = {k[4:]: parse_override_value(v) for k, v in vars(args).items() if k.startswith("cfg:")}
        if getattr(args, "seed", None) is not None:
            overrides["seed"] = args.seed
        cfg = apply_overrides(cfg, overrides)
        COMMANDS[args.command](args, cfg)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc), **exc.extra)
    except (ConfigError, SceneConfigError) as exc:
        return _fail(EXIT_CONFIG, "invalid_config", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, "missing_file", str(exc))
    except CloudParseError as exc:
        return _fail(EXIT_BAD_INPUT, "parse_error", str(exc))
    except ValueError as exc:
        return _fail(EXIT_BAD_INPUT, "bad_input", str(exc))
    except OSError as exc:
        return _fail(EXIT_INTERNAL, "io_error", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
