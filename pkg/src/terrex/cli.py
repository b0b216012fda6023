"""``terrex`` command line: gen-data, synth, train, predict, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from terrex import __version__
from terrex.cloud import (
    BLUE,
    GREEN,
    TEAL,
    PointCloud,
    read_kitti_labels,
    read_kitti_velodyne,
    read_kitti_voxels,
    read_native_cloud,
    voxel_centroids,
    write_native_cloud,
    write_ply,
)
from terrex.config import load_config, override
from terrex.dataset import (
    TrainingSample,
    build_sample,
    build_sample_from_gt,
    list_sample_dirs,
    read_masks,
    read_sample,
    write_sample,
)
from terrex.errors import NumericError, SampleRejected, TerrexError
from terrex.gradcheck import THRESHOLD, gradcheck
from terrex.model import TINY, TrainState, forward, load_checkpoint, save_checkpoint, train
from terrex.objective import SceneMetrics, assemble_report, evaluate_scene
from terrex.synth import KINDS, default_params, synth_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _run_config(args):
    cfg = load_config(getattr(args, "config", None))
    flags = {}
    for attr, target in (("d_y", "dataset__d_y"), ("mask_source", "dataset__mask_source"),
                         ("steps", "train__steps"), ("lr", "train__lr"),
                         ("delta", "loss__delta"), ("alpha", "loss__alpha"),
                         ("beta", "loss__beta"), ("spread_weight", "loss__spread_weight"),
                         ("rho", "eval__rho"), ("membership", "eval__membership"),
                         ("seed", "seed")):
        if hasattr(args, attr):
            flags[target] = getattr(args, attr)
    return override(cfg, **flags)


# -------------------------------------------------------------------- gen-data


def discover_inputs(root: str) -> list:
    """Scan ids with their file paths, from a KITTI-style tree or native pairs."""
    found = []
    for scan in sorted(glob.glob(os.path.join(root, "velodyne", "*.bin"))):
        sid = os.path.splitext(os.path.basename(scan))[0]
        found.append((sid, "kitti", {
            "scan": scan,
            "labels": os.path.join(root, "labels", sid + ".label"),
            "voxels": os.path.join(root, "voxels", sid + ".bin"),
            "voxel_labels": os.path.join(root, "voxels", sid + ".label"),
            "masks": os.path.join(root, "masks", sid + ".json"),
        }))
    for scan in sorted(glob.glob(os.path.join(root, "*.scan.tepc"))):
        sid = os.path.basename(scan)[: -len(".scan.tepc")]
        found.append((sid, "native", {
            "scan": scan,
            "gt": os.path.join(root, sid + ".gt.tepc"),
            "masks": os.path.join(root, sid + ".masks.json"),
        }))
    return found


def load_input_sample(sid, kind, paths, cfg, seed) -> TrainingSample:
    masks = read_masks(paths["masks"]) if os.path.isfile(paths["masks"]) else None
    if kind == "kitti":
        scan = read_kitti_labels(paths["labels"], read_kitti_velodyne(paths["scan"]))
        grid = read_kitti_voxels(paths["voxels"], paths["voxel_labels"], cfg.geometry)
        return build_sample(scan, grid, cfg, masks, seed=seed, source_id=sid)
    scan = read_native_cloud(paths["scan"])
    gt = read_native_cloud(paths["gt"])
    if gt.is_labeled:
        gt = gt.select(np.isin(gt.labels, cfg.road_labels))
    return build_sample_from_gt(scan, gt, cfg, masks, seed=seed, source_id=sid)


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    inputs = discover_inputs(args.input)
    accepted = rejected = failed = 0
    for sid, kind, paths in inputs:
        try:
            sample = load_input_sample(sid, kind, paths, rc.dataset, rc.seed)
        except SampleRejected as exc:
            rejected += 1
            print(f"rejected {sid}: {exc}")
            continue
        except (TerrexError, OSError) as exc:
            failed += 1
            warn(f"{sid}: {exc}")
            continue
        write_sample(sample, os.path.join(args.output, sid))
        accepted += 1
    print(f"accepted {accepted}, rejected {rejected}, failed {failed}")
    return EXIT_OK if accepted else EXIT_DATA


# ----------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    if args.kind not in KINDS:
        raise UsageError(f"unknown kind {args.kind!r}; choose from {', '.join(KINDS)}")
    rc = _run_config(args)
    params = default_params(args.kind)
    for i in range(args.count):
        sid = f"{args.kind}-{i:03d}"
        seed = rc.seed + i
        scan, grid = synth_scene(args.kind, params, seed)
        os.makedirs(args.out, exist_ok=True)
        if args.raw:
            write_native_cloud(scan, os.path.join(args.out, sid + ".scan.tepc"))
            write_native_cloud(voxel_centroids(grid, rc.dataset.road_labels),
                               os.path.join(args.out, sid + ".gt.tepc"))
            continue
        try:
            sample = build_sample(scan, grid, rc.dataset, seed=seed, source_id=sid)
        except SampleRejected as exc:
            warn(f"{sid}: {exc}")
            continue
        write_sample(sample, os.path.join(args.out, sid))
        print(f"{sid}: |X| = {len(sample.input_cloud)}, |Y| = {len(sample.target_cloud)}")
    return EXIT_OK


# ----------------------------------------------------------------------- train


def cmd_train(args) -> int:
    rc = _run_config(args)
    dirs = list_sample_dirs(args.data)
    if not dirs:
        raise UsageError(f"no sample directories under {args.data}")
    samples = [read_sample(d) for d in dirs]
    state = None
    model_cfg = rc.model
    if args.resume:
        state = load_checkpoint(args.resume, rc.model if args.config else None)
        model_cfg = state.config
    else:
        state = TrainState.fresh(model_cfg, rc.seed)
    trace_path = args.trace or args.out + ".trace.csv"
    start = state.step
    try:
        state, trace = train(samples, model_cfg, rc.loss, rc.train.steps, rc.train.lr,
                             rc.seed, state=state, log_every=rc.train.log_every)
    except NumericError as exc:
        if exc.state is not None:
            save_checkpoint(exc.state, args.out)
            warn(f"last good checkpoint (step {exc.state.step}) written to {args.out}")
        raise
    save_checkpoint(state, args.out)
    with open(trace_path, "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(trace):
            fh.write(f"{start + i},{v!r}\n")
    if trace:
        print(f"initial loss {trace[0]:.6f}, final loss {trace[-1]:.6f}")
    print(f"checkpoint {args.out} at step {state.step}")
    return EXIT_OK


# --------------------------------------------------------------------- predict


def _load_input(path):
    if os.path.isdir(path):
        s = read_sample(path)
        return s.input_cloud, s
    return read_native_cloud(path), None


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    X, sample = _load_input(args.input)
    seed = state.seed if args.seed is None else args.seed
    P = PointCloud(forward(X, state.params, state.config, seed=seed))
    os.makedirs(args.out, exist_ok=True)
    ext = PointCloud(X.points).concat(P)
    write_native_cloud(P, os.path.join(args.out, "pred.tepc"))
    write_native_cloud(ext, os.path.join(args.out, "extended.tepc"))
    write_ply(os.path.join(args.out, "pred.ply"), [(P, GREEN)])
    n = write_ply(os.path.join(args.out, "extended.ply"), [(X, BLUE), (P, GREEN)])
    if sample is not None:
        write_ply(os.path.join(args.out, "scene.ply"),
                  [(X, BLUE), (sample.target_cloud, TEAL), (P, GREEN)])
    print(f"{len(P)} predicted points; extended cloud has {n} points")
    return EXIT_OK


# ------------------------------------------------------------------------ eval


def _pred_file(path: str) -> str:
    return os.path.join(path, "pred.tepc") if os.path.isdir(path) else path


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.sample):
        raise UsageError("--pred and --sample need the same number of entries")
    rc = _run_config(args)
    ev = rc.eval
    rows, views = [], {}
    for pred_path, sample_path in zip(args.pred, args.sample):
        sid = os.path.basename(os.path.normpath(sample_path))
        try:
            sample = read_sample(sample_path)
            sid = sample.source_id or sid
            P = read_native_cloud(_pred_file(pred_path))
            row = evaluate_scene(sid, P, sample.target_cloud, sample.masks,
                                 ev.edges, ev.rho, ev.membership)
            views[sid] = (sample, P)
        except (TerrexError, OSError) as exc:
            warn(f"{sid}: {exc}")
            row = SceneMetrics(sid, error=str(exc))
        rows.append(row)
    report = assemble_report(rows, ev.edges)
    os.makedirs(args.out, exist_ok=True)
    for name, text in (("report.json", report.to_json()), ("report.csv", report.to_csv()),
                       ("report.txt", report.to_text())):
        with open(os.path.join(args.out, name), "w", newline="\n") as fh:
            fh.write(text)
    if not args.no_figures:
        from terrex import plotting

        figdir = os.path.join(args.out, "figures")
        os.makedirs(figdir, exist_ok=True)
        plotting.histogram_figure(report, os.path.join(figdir, "histogram.png"))
        for sid, (sample, P) in sorted(views.items()):
            plotting.bev_figure(os.path.join(figdir, f"{sid}_bev.png"),
                                sample.input_cloud.points, P.points,
                                sample.target_cloud.points, sample.masks, title=sid)
    print(report.to_text(), end="")
    return EXIT_DATA if report.failed else EXIT_OK


# ------------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config).model if args.config else TINY
    report = gradcheck(cfg, draws=args.draws, seed=args.seed, corrupt=args.corrupt)
    print("\n".join(report.lines()))
    if not report.passed:
        print(f"gradient check failed: worst tensor {report.worst_tensor} "
              f"(relative error {report.max_error:.3e} >= {THRESHOLD:g})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="terrex", description="Terrain extension: predict occluded road points.")
    p.add_argument("--version", action="version", version=f"terrex {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="INI run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="run seed (overrides config)")

    g = sub.add_parser("gen-data", help="build training samples from scans and ground truth")
    g.add_argument("input", help="KITTI-style tree or directory of native scan/gt pairs")
    g.add_argument("output", help="directory receiving one sample directory per scan")
    common(g)
    g.add_argument("--d-y", dest="d_y", type=float, help="buffer distance in meters")
    g.add_argument("--mask-source", choices=("auto", "precomputed", "fallback"))
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("synth", help="write synthetic road-scene samples")
    s.add_argument("--kind", required=True, help=f"one of {', '.join(KINDS)}")
    s.add_argument("--count", type=int, default=1, help="number of scenes")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--raw", action="store_true",
                   help="write native scan/gt pairs (gen-data input) instead of samples")
    common(s)
    s.add_argument("--d-y", dest="d_y", type=float, help="buffer distance in meters")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit the model to sample directories")
    t.add_argument("data", help="sample directory or directory of samples")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--trace", help="loss trace CSV (default: <out>.trace.csv)")
    t.add_argument("--resume", help="checkpoint to continue from")
    common(t)
    t.add_argument("--steps", type=int, help="optimizer steps")
    t.add_argument("--lr", type=float, help="Adam learning rate")
    t.add_argument("--delta", type=float, help="mask penalty multiplier")
    t.add_argument("--alpha", type=float, help="weight of the prediction-to-target term")
    t.add_argument("--beta", type=float, help="weight of the target-to-prediction term")
    t.add_argument("--spread-weight", dest="spread_weight", type=float,
                   help="weight of the prediction spread penalty")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict missing terrain for one input cloud")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help="TEPC cloud or sample directory")
    pr.add_argument("--out", required=True, help="output directory")
    pr.add_argument("--seed", type=int, help="sampling seed (default: checkpoint seed)")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="score predictions against sample targets")
    e.add_argument("--pred", nargs="+", required=True,
                   help="prediction TEPC files or predict output directories")
    e.add_argument("--sample", nargs="+", required=True, help="matching sample directories")
    e.add_argument("--out", required=True, help="report directory")
    common(e, seed=False)
    e.add_argument("--rho", type=float, help="proximity tolerance for accuracy (m)")
    e.add_argument("--membership", choices=("proximity", "mask", "either"),
                   help="ground-truth region test for accuracy")
    e.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="compare gradients with finite differences")
    common(gc, seed=False)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--draws", type=int, default=20)
    gc.add_argument("--corrupt", metavar="TENSOR",
                    help="test hook: perturb this tensor's analytic gradient")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"terrex: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TerrexError as exc:
        print(f"terrex: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"terrex: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
