"""Command-line harness: scene generation, optimization, evaluation, gradient checks.

Exit codes: 0 success, 2 config error, 3 IO/format error, 4 gradient-check
failure, 5 divergence in at least one seed.

Every run directory gets a manifest.json recording the resolved config,
seed list, tool version, and timestamp.  All other outputs are pure
functions of config + seeds + version; the manifest's timestamp is the
only byte that varies between identical runs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .errors import (
    ConfigInvalid,
    Diverged,
    FileFormatError,
    TrajCoupleError,
)
from .fixtures import gradcheck_sweep, random_coupling_fixture
from .metrics import (
    MetricReport,
    TrajectoryPair,
    ate,
    depth_metrics,
    pointmap_metrics,
    rel_pose_accuracy,
    rpe,
    tapvid3d_metrics,
)
from .optimize import ABLATIONS, OptimConfig, ablation_config, optimize
from .pointmap import read_pointmap
from .pose import read_poses
from .synthetic import SceneConfig, generate, initial_store, load_scene, save_scene
from .tracks import read_tracks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_GRADCHECK = 4
EXIT_DIVERGED = 5

OUTPUT_ROOT_ENV = "TRAJCOUPLE_OUT"

ALL_METRICS = ("ate", "rpe", "relpose", "tracks3d", "pointmap", "depth")


def _default_out(sub):
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), sub)


def _write_manifest(out_dir, command, config_doc, config_path, seeds):
    manifest = {
        "tool_version": __version__,
        "command": command,
        "config": config_doc,
        "config_path": config_path,
        "seeds": list(seeds),
        "out_dir": os.path.abspath(out_dir),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise ConfigInvalid("seeds", f"not a comma-separated integer list: {text!r}")
    if not seeds:
        raise ConfigInvalid("seeds", "empty seed list")
    return seeds


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


# ------------------------------------------------------------------ gen ---

def _gen_one(args):
    config_dict, seed, out_dir = args
    cfg = SceneConfig.from_dict({**config_dict, "seed": seed})
    scene = generate(cfg)
    scene_dir = os.path.join(out_dir, f"seed_{seed:04d}")
    save_scene(scene, scene_dir)
    return scene_dir


def cmd_gen(args):
    if args.config:
        config = SceneConfig.from_json_file(args.config)
    else:
        config = SceneConfig()
    config.validate()
    seeds = _parse_seeds(args.seeds)
    out_dir = args.out or _default_out("scenes")
    os.makedirs(out_dir, exist_ok=True)

    work = [(config.to_dict(), seed, out_dir) for seed in seeds]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_gen_one, work))
    else:
        for item in work:
            _gen_one(item)
    _write_manifest(out_dir, "gen", config.to_dict(), args.config, seeds)
    print(f"wrote {len(seeds)} scene(s) under {out_dir}")
    return EXIT_OK


# ------------------------------------------------------------- optimize ---

def _optimize_one(args):
    scene_dir, cfg_dict, ablation = args
    scene = load_scene(scene_dir)
    cfg = ablation_config(ablation, OptimConfig.from_dict(cfg_dict))
    store = initial_store(scene)
    try:
        report = optimize(store, scene, cfg)
    except Diverged as exc:
        return {"scene": os.path.basename(scene_dir), "diverged": str(exc)}
    doc = report.to_dict()
    doc["scene"] = os.path.basename(scene_dir)
    return doc


def _scene_dirs(root):
    if not os.path.isdir(root):
        raise FileFormatError(root, "scene directory does not exist")
    dirs = sorted(
        os.path.join(root, d)
        for d in os.listdir(root)
        if d.startswith("seed_") and os.path.isdir(os.path.join(root, d))
    )
    if not dirs:
        raise FileFormatError(root, "no seed_* scene directories found")
    return dirs


def cmd_optimize(args):
    if args.ablation not in ABLATIONS:
        raise ConfigInvalid(
            "ablation", f"unknown ablation {args.ablation!r}; have {sorted(ABLATIONS)}"
        )
    base = (
        OptimConfig.from_json_file(args.config) if args.config else OptimConfig()
    ).validate()
    scene_dirs = _scene_dirs(args.scenes)
    out_dir = args.out or _default_out(f"optimize_{args.ablation}")
    os.makedirs(out_dir, exist_ok=True)

    work = [(d, base.to_dict(), args.ablation) for d in scene_dirs]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_optimize_one, work))
    else:
        results = [_optimize_one(item) for item in work]

    any_diverged = False
    summary_rows = []
    for res in results:
        name = res["scene"]
        with open(os.path.join(out_dir, f"report_{name}.json"), "w") as fh:
            json.dump(res, fh, indent=2, sort_keys=True)
        if "diverged" in res:
            any_diverged = True
            summary_rows.append([name, args.ablation, "diverged", "", "", "", ""])
            continue
        _write_csv(
            os.path.join(out_dir, f"epochs_{name}.csv"),
            ["epoch", "total", "cons", "cam", "selfsup", "step_scale", "accepted"],
            [
                [e["epoch"], e["total"], e["cons"], e["cam"], e["selfsup"],
                 e["step_scale"], int(e["accepted"])]
                for e in res["epochs"]
            ],
        )
        ini, fin = res["initial_metrics"], res["final_metrics"]
        summary_rows.append(
            [
                name, args.ablation, res["termination"],
                ini.get("pose_tangent_rms", ""), fin.get("pose_tangent_rms", ""),
                ini.get("ate", ""), fin.get("ate", ""),
            ]
        )
    _write_csv(
        os.path.join(out_dir, "summary.csv"),
        ["scene", "ablation", "termination", "pose_err_init", "pose_err_final",
         "ate_init", "ate_final"],
        summary_rows,
    )
    _write_manifest(
        out_dir, "optimize",
        {"optim": base.to_dict(), "ablation": args.ablation, "scenes": args.scenes},
        args.config,
        [int(os.path.basename(d).split("_")[1]) for d in scene_dirs],
    )
    print(f"wrote {len(results)} report(s) under {out_dir}")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


# ----------------------------------------------------------------- eval ---

def _require(path):
    if not os.path.exists(path):
        print(f"missing input file: {path}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    return path


def _load_pose_file(dir_path):
    # prefer relative poses so pred/est directories (which carry only those)
    # and gt directories load matching conventions; all pose metrics are
    # invariant to the global transform distinguishing the two
    for name in ("rel_poses.txt", "poses.txt"):
        p = os.path.join(dir_path, name)
        if os.path.exists(p):
            return read_poses(p)
    print(
        f"missing input file: {os.path.join(dir_path, 'rel_poses.txt')} "
        "(or poses.txt)",
        file=sys.stderr,
    )
    raise SystemExit(EXIT_IO)


def _load_grid_dir(dir_path):
    pm_dir = _require(os.path.join(dir_path, "pointmaps"))
    frames = sorted(f for f in os.listdir(pm_dir) if f.endswith(".pm"))
    if not frames:
        print(f"missing input file: {pm_dir}/*.pm", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    return [read_pointmap(os.path.join(pm_dir, f)) for f in frames]


def cmd_eval(args):
    selected = (
        list(ALL_METRICS) if args.metrics == "all" else args.metrics.split(",")
    )
    unknown = set(selected) - set(ALL_METRICS)
    if unknown:
        raise ConfigInvalid("metrics", f"unknown metric(s) {sorted(unknown)}")
    out_dir = args.out or _default_out("eval")
    os.makedirs(out_dir, exist_ok=True)

    # input paths go in the manifest, not the report, so identical runs in
    # different directories stay byte-identical
    report = MetricReport(metadata={
        "ate_alignment": "similarity",
        "rpe_step": args.rpe_step,
        "accuracy_convention": "percent",
        "depth_convention": "fraction",
    })

    if {"ate", "rpe", "relpose"} & set(selected):
        est = _load_pose_file(args.pred)
        gt = _load_pose_file(args.gt)
        pair = TrajectoryPair(est, gt)
        if "ate" in selected:
            report.add("ate", ate(pair))
        if "rpe" in selected:
            res = rpe(pair, step=args.rpe_step)
            report.add("rpe_trans", res.trans)
            report.add("rpe_rot_deg", res.rot_deg)
        if "relpose" in selected:
            acc = rel_pose_accuracy(pair)
            report.add("rra_30", acc.rra)
            report.add("rta_30", acc.rta)
            report.add("auc_30", acc.auc)
            report.metadata["relpose_skipped_pairs"] = acc.n_skipped

    if "tracks3d" in selected:
        est_pts, est_vis, _ = read_tracks(_require(os.path.join(args.pred, "tracks.txt")))
        gt_pts, gt_vis, _ = read_tracks(_require(os.path.join(args.gt, "tracks.txt")))
        res = tapvid3d_metrics(est_pts, est_vis, gt_pts, gt_vis)
        report.add("aj_3d", res.aj)
        report.add("apd_3d", res.apd)
        report.add("oa", res.oa)

    if {"pointmap", "depth"} & set(selected):
        pred_grids = _load_grid_dir(args.pred)
        gt_grids = _load_grid_dir(args.gt)
        if len(pred_grids) != len(gt_grids):
            print(
                f"frame count mismatch: {len(pred_grids)} vs {len(gt_grids)}",
                file=sys.stderr,
            )
            raise SystemExit(EXIT_IO)
        if "pointmap" in selected:
            per_frame = [
                pointmap_metrics(
                    p.points.reshape(-1, 3), g.points.reshape(-1, 3),
                    use_icp=args.icp,
                )
                for p, g in zip(pred_grids, gt_grids)
            ]
            for field_name in (
                "acc_mean", "acc_median", "comp_mean", "comp_median",
                "nc_mean", "nc_median",
            ):
                report.add(
                    f"pointmap_{field_name}",
                    float(np.mean([getattr(r, field_name) for r in per_frame])),
                )
        if "depth" in selected:
            # depth is the z channel of the camera-frame pointmaps
            preds = [p.points[..., 2] for p in pred_grids]
            gts = [g.points[..., 2] for g in gt_grids]
            for mode in ("scale", "scale_and_shift"):
                res = depth_metrics(preds, gts, mode=mode, per="sequence")
                tag = "scale" if mode == "scale" else "scaleshift"
                report.add(f"depth_absrel_{tag}", res.abs_rel)
                report.add(f"depth_delta125_{tag}", res.delta_125)
            res = depth_metrics(preds, gts, mode="scale", per="image")
            report.add("depth_absrel_perimage", res.abs_rel)
            report.add("depth_delta125_perimage", res.delta_125)

    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv())
    _write_manifest(
        out_dir, "eval",
        {"metrics": selected, "pred": os.path.abspath(args.pred),
         "gt": os.path.abspath(args.gt)},
        None, [],
    )
    print(report.to_json())
    return EXIT_OK


# ------------------------------------------------------------ gradcheck ---

def cmd_gradcheck(args):
    rows = []
    failed = False
    for k in range(args.fixtures):
        for selfsup in (False, True):
            problem, store = random_coupling_fixture(1000 * k + args.seed, selfsup=selfsup)
            for row in gradcheck_sweep(
                problem, store, h=args.h, tol=args.tol, seed=k, corrupt=args.corrupt
            ):
                rows.append(
                    [k, "selfsup" if selfsup else "supervised", row["term"],
                     row["block"], row["max_rel_err"], "pass" if row["passed"] else "FAIL"]
                )
                failed |= not row["passed"]

    widths = [8, 11, 14, 7, 13, 5]
    header = ["fixture", "mode", "term", "block", "max_rel_err", "status"]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for row in rows:
        cells = [str(row[0]), row[1], row[2], row[3], f"{row[4]:.3e}", row[5]]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    n_failed = sum(r[5] == "FAIL" for r in rows)
    print(f"{len(rows) - n_failed}/{len(rows)} checks passed (h={args.h}, tol={args.tol})")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_csv(
            os.path.join(args.out, "gradcheck.csv"),
            ["fixture", "mode", "term", "block", "max_rel_err", "status"],
            rows,
        )
    return EXIT_GRADCHECK if failed else EXIT_OK


# ----------------------------------------------------------------- main ---

def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajcouple",
        description="Coupled track/pointmap/pose optimization experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scenes")
    p.add_argument("--config", help="scene config JSON (defaults apply if omitted)")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/scenes)")
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("optimize", help="run the joint optimizer over scenes")
    p.add_argument("--scenes", required=True, help="directory of seed_* scenes")
    p.add_argument("--config", help="optimizer config JSON")
    p.add_argument(
        "--ablation", default="cons_cam", help=f"one of {sorted(ABLATIONS)}"
    )
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction directory")
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--metrics", default="all", help=f"comma list of {ALL_METRICS}")
    p.add_argument("--out", help="output directory")
    p.add_argument("--rpe-step", type=int, default=1)
    p.add_argument("--icp", action="store_true", help="refine pointmap alignment with ICP")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--fixtures", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional output directory for the CSV table")
    p.add_argument(
        "--corrupt", action="store_true",
        help="test hook: corrupt one analytic gradient entry per row (must fail)",
    )
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags, which matches the config-error code
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileFormatError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    except TrajCoupleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
