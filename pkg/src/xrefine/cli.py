"""Command-line interface: ``xrefine <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command accepts ``--config FILE`` (key-value manifest whose keys are
flag names with dashes or underscores); explicit flags override it.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as M
from . import refine as R
from . import training as T
from .data import ImageFormatError, SceneConfig, derive_seed, generate_pair, load_grayscale, read_matches, \
    sample_training_matches, write_matches, write_pgm
from .manifest import ManifestError, dumps_manifest, read_manifest, write_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {s}")
    return v


def _image_size(s):
    v = int(s)
    if v < 64:
        raise argparse.ArgumentTypeError(f"image size must be at least 64, got {s}")
    return v


def _add_common(p):
    p.add_argument("--config", type=Path, help="key-value config file; flags override its values")
    p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="BLAS thread limit (default: library default, all cores)")


def _add_scene(p):
    p.add_argument("--width", type=_image_size, default=SceneConfig.width, help="image width in pixels")
    p.add_argument("--height", type=_image_size, default=SceneConfig.height, help="image height in pixels")


def _add_model(p):
    p.add_argument("--variant", choices=("small", "large"), default="small", help="network size")
    p.add_argument("--mode", choices=M.REFINE_MODES, default=M.BOTH,
                   help="refine both keypoints or only the second one")
    p.add_argument("--heads", type=_positive_int, default=4, help="attention heads")
    p.add_argument("--temperature", type=float, default=1.0, help="soft-argmax temperature")


def build_parser():
    parser = _Parser(prog="xrefine", description="Sub-pixel refinement of keypoint matches.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write a synthetic dataset (PGM images, match lists, manifest)")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--pairs", type=_nonneg_int, default=8, help="number of image pairs")
    p.add_argument("--matches", type=_nonneg_int, default=512, help="matches per pair")
    p.add_argument("--noise", type=float, default=1.5, help="keypoint noise std in pixels")
    p.add_argument("--kind", choices=("room", "homography"), default="room", help="scene kind")

    p = sub.add_parser("train", help="train a refinement model on synthetic pairs")
    _add_common(p)
    _add_scene(p)
    _add_model(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=_nonneg_int, default=T.TrainConfig.epochs)
    p.add_argument("--pairs", type=_positive_int, default=T.TrainConfig.train_pairs, help="training pairs")
    p.add_argument("--val-pairs", type=_positive_int, default=T.TrainConfig.val_pairs)
    p.add_argument("--matches", type=_positive_int, default=T.TrainConfig.matches_per_pair,
                   help="matches sampled per pair and epoch")
    p.add_argument("--batch-size", type=_positive_int, default=T.TrainConfig.batch_size, help="pairs per step")
    p.add_argument("--lr", type=float, default=T.TrainConfig.lr)
    p.add_argument("--noise", type=float, default=T.TrainConfig.noise_std)
    p.add_argument("--clamp", type=float, default=T.TrainConfig.loss_clamp_px2, help="loss clamp in px^2")
    p.add_argument("--val-metric", choices=(T.KEYPOINT_ERROR, T.AUC5), default=T.TrainConfig.val_metric)
    p.add_argument("--seeds", type=int, nargs="+", default=None,
                   help="train once per seed and keep the best validation result")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint directory")

    p = sub.add_parser("refine", help="refine a match list")
    _add_common(p)
    p.add_argument("--image-a", type=Path, required=True, help="first image (PGM/PPM)")
    p.add_argument("--image-b", type=Path, required=True, help="second image (PGM/PPM)")
    p.add_argument("--matches", type=Path, required=True, help="match list 'x1 y1 x2 y2'")
    p.add_argument("--weights", type=Path, required=True, help="model weight file")
    p.add_argument("--out", type=Path, required=True,
                   help="refined match list (5th column: flag); a .manifest sidecar records the run")

    p = sub.add_parser("eval-pose", help="relative pose AUC before/after refinement")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--weights", type=Path, default=None, help="model weights (omit for unrefined only)")
    p.add_argument("--pairs", type=_positive_int, default=50)
    p.add_argument("--matches", type=_positive_int, default=512)
    p.add_argument("--noise", type=float, default=1.5)
    p.add_argument("--repetitions", type=_positive_int, default=10)
    p.add_argument("--iterations", type=_positive_int, default=1000, help="RANSAC iterations")
    p.add_argument("--threshold", type=float, default=1.0, help="RANSAC inlier threshold in pixels")
    p.add_argument("--out", type=Path, default=None, help="report directory (default: print only)")

    p = sub.add_parser("eval-noise", help="pose AUC of ground-truth matches under increasing noise")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--stds", type=float, nargs="+", default=list(R.NOISE_STDS))
    p.add_argument("--pairs", type=_positive_int, default=50)
    p.add_argument("--matches", type=_positive_int, default=512)
    p.add_argument("--repetitions", type=_positive_int, default=1)
    p.add_argument("--iterations", type=_positive_int, default=1000, help="RANSAC iterations")
    p.add_argument("--threshold", type=float, default=1.0, help="RANSAC inlier threshold in pixels")
    p.add_argument("--out", type=Path, default=None, help="report directory (default: print only)")

    p = sub.add_parser("eval-tri", help="triangulation accuracy of raw and track-refined observations")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--weights", type=Path, default=None, help="second_only model weights")
    p.add_argument("--scenes", type=_positive_int, default=4)
    p.add_argument("--views", type=_positive_int, default=5)
    p.add_argument("--points", type=_positive_int, default=200)
    p.add_argument("--noise", type=float, default=1.5)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(R.TRI_THRESHOLDS),
                   help="distance thresholds in scene units")
    p.add_argument("--out", type=Path, default=None, help="report directory (default: print only)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    _add_common(p)
    p.add_argument("--seeds", type=_positive_int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def apply_config_file(sub, path, argv_tail):
    """Parse ``argv_tail`` with defaults taken from the manifest at ``path``."""
    try:
        data = read_manifest(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except ManifestError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in data.items():
        if isinstance(value, dict):
            raise UsageError(f"{path}: sections are not allowed in command configs")
        dest = key.replace("-", "_")
        if dest not in actions:
            raise UsageError(f"{path}: unknown key {key!r}")
        act = actions[dest]
        conv = act.type or (lambda s: s)
        try:
            if isinstance(act, argparse._StoreTrueAction):
                from .manifest import as_bool

                defaults[dest] = as_bool(value)
            elif act.nargs in ("+", "*"):
                defaults[dest] = [conv(v) for v in value.split()]
            else:
                defaults[dest] = conv(value)
        except (ValueError, argparse.ArgumentTypeError, ManifestError) as exc:
            raise UsageError(f"{path}: bad value for {key!r}: {exc}") from exc
        if act.choices is not None and defaults[dest] not in act.choices:
            raise UsageError(f"{path}: {key} must be one of {sorted(act.choices)}")
    sub.set_defaults(**defaults)
    for act in sub._actions:
        if act.dest in defaults:
            act.required = False
    return sub.parse_args(argv_tail)


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        sub = _subparser(parser, args.command)
        idx = argv.index(args.command)
        args = apply_config_file(sub, args.config, argv[idx + 1:])
        args.command = argv[idx]
    return args


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _scene(args, kind="room"):
    return SceneConfig(kind=kind, width=args.width, height=args.height)


def _model_config(args):
    kw = dict(refine_mode=args.mode, heads=args.heads, softargmax_temperature=args.temperature)
    return M.ModelConfig.large(**kw) if args.variant == "large" else M.ModelConfig.small(**kw)


def cmd_synth(args):
    scene = _scene(args, args.kind)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": args.seed, "pairs": args.pairs, "matches": args.matches, "noise_std": args.noise,
        "kind": scene.kind, "width": scene.width, "height": scene.height, "focal": scene.focal,
    }
    for i in range(args.pairs):
        pair = generate_pair(derive_seed(args.seed, i), scene)
        ms = sample_training_matches(pair, args.matches, args.noise, derive_seed(args.seed, i, 1)) \
            if args.matches else None
        stem = f"pair_{i:04d}"
        write_pgm(out / f"{stem}_a.pgm", pair.image_a)
        write_pgm(out / f"{stem}_b.pgm", pair.image_b)
        header = f"seed {args.seed} pair {i}"
        kps = np.zeros((0, 4)) if ms is None else np.hstack([ms.keypoints_a, ms.keypoints_b])
        gts = np.zeros((0, 4)) if ms is None else np.hstack([ms.true_a, ms.true_b])
        write_matches(out / f"{stem}.matches", kps, header=header)
        write_matches(out / f"{stem}.gt.matches", gts, header=header + " ground truth")
        section = {"image_a": f"{stem}_a.pgm", "image_b": f"{stem}_b.pgm", "matches": f"{stem}.matches",
                   "gt_matches": f"{stem}.gt.matches", "pair_seed": pair.seed}
        if pair.pose is not None:
            section.update(
                intrinsics_a=pair.intrinsics_a.as_array(), intrinsics_b=pair.intrinsics_b.as_array(),
                rotation=pair.pose.rotation, translation=pair.pose.translation,
            )
        if pair.homography is not None:
            section["homography"] = pair.homography
        manifest[stem] = section
    write_manifest(out / "dataset.manifest", manifest)
    print(f"wrote {args.pairs} pairs to {out} (seed {args.seed})")
    return EXIT_OK


def _train_config(args, seed):
    return T.TrainConfig(
        epochs=args.epochs, train_pairs=args.pairs, val_pairs=args.val_pairs, matches_per_pair=args.matches,
        batch_size=args.batch_size, lr=args.lr, noise_std=args.noise, seed=seed, loss_clamp_px2=args.clamp,
        val_metric=args.val_metric,
    )


LOG_NAME = "train.log"
BEST_NAME = "best.xrfw"
LAST_NAME = "last.xrfw"
METRICS_NAME = "metrics.manifest"


def save_state(out, state, config, model_config):
    out.mkdir(parents=True, exist_ok=True)
    best = state.best
    extra = {"epoch": best.epoch, "metric": best.metric, "metric_name": best.metric_name, "seed": config.seed}
    M.write_weight_file(out / BEST_NAME, model_config, best.weights.params, extra)
    tensors = dict(state.weights.params)
    for k in state.weights.params:
        tensors[f"adam.m.{k}"] = state.adam.m[k]
        tensors[f"adam.v.{k}"] = state.adam.v[k]
    extra = {"epoch": state.epoch, "adam_step": state.adam.step, "seed": config.seed}
    extra.update({f"train.{k}": v for k, v in config.to_dict().items()})
    M.write_weight_file(out / LAST_NAME, model_config, tensors, extra)
    metrics = {
        "seed": config.seed, "best_epoch": best.epoch, "metric_name": best.metric_name, "metric": best.metric,
        "rng_digest": best.rng_digest, "epochs_run": state.epoch,
    }
    if best.report is not None:
        metrics["validation"] = best.report.as_dict()
    metrics["train"] = config.to_dict()
    metrics["model"] = model_config.to_dict()
    write_manifest(out / METRICS_NAME, metrics)
    lines = ["# epoch\tloss\tval_metric"]
    lines += [f"{e}\t{loss!r}\t{m!r}" for e, loss, m in state.history]
    (out / LOG_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_state(out, config, model_config):
    from .tensor_ops import AdamState

    header, tensors = M.read_weight_file(out / LAST_NAME)
    stored = {k[len("train."):]: v for k, v in header.items() if k.startswith("train.")}
    stored_cfg = T.TrainConfig.from_dict(stored)
    if replace(stored_cfg, epochs=config.epochs) != config:
        raise ValueError(f"{out}: checkpoint was trained with a different configuration")
    weights = M.load_weights(out / LAST_NAME, expected=model_config)
    names = list(weights.params)
    adam = AdamState({k: tensors[f"adam.m.{k}"].copy() for k in names},
                     {k: tensors[f"adam.v.{k}"].copy() for k in names}, int(header["adam_step"]))
    bh, _ = M.read_weight_file(out / BEST_NAME)
    best_w = M.load_weights(out / BEST_NAME, expected=model_config)
    metrics = read_manifest(out / METRICS_NAME)
    report = None
    if "validation" in metrics:
        v = {k: float(x) for k, x in metrics["validation"].items()}
        report = T.ValidationReport(v["keypoint_error"], v["keypoint_error_unrefined"], v["epipolar_px2"],
                                    v.get("auc5"))
    best = T.Checkpoint(best_w, int(bh["epoch"]), float(bh["metric"]), bh["metric_name"],
                        metrics["rng_digest"], report)
    history = []
    for line in (out / LOG_NAME).read_text(encoding="utf-8").splitlines():
        if line.startswith("#") or not line.strip():
            continue
        e, loss, m = line.split("\t")
        history.append((int(e), float(loss), float(m)))
    return T.TrainState(weights, adam, int(header["epoch"]), best, history)


def _train_one(args, seed, out):
    config = _train_config(args, seed)
    model_config = _model_config(args)
    scene = _scene(args)
    state = None
    if args.resume and (out / LAST_NAME).exists():
        state = load_state(out, config, model_config)
        print(f"resuming {out} at epoch {state.epoch}")
    elif args.resume:
        raise FileNotFoundError(f"{out / LAST_NAME}: nothing to resume")
    pairs = T.make_training_pairs(config, scene)
    val = T.make_validation_set(config, scene)
    if state is None:
        state = T.initial_state(config, model_config, val)
        print(f"seed {seed} epoch 0\tval {state.best.metric:.6f}")

    def log(epoch, loss, metric):
        save_state(out, state, config, model_config)
        print(f"seed {seed} epoch {epoch}\tloss {loss:.6f}\tval {metric:.6f}", flush=True)

    try:
        state = T.train(config, model_config, scene, state, pairs, val, log=log)
    except T.TrainingDivergedError as exc:
        if exc.checkpoint is not None:
            state.best = exc.checkpoint
            save_state(out, state, config, model_config)
        raise
    save_state(out, state, config, model_config)
    return state


def cmd_train(args):
    seeds = args.seeds or [args.seed]
    if len(seeds) == 1:
        state = _train_one(args, seeds[0], args.out)
        print(f"best epoch {state.best.epoch} {state.best.metric_name} {state.best.metric:.6f}")
        return EXIT_OK
    results = []
    for s in seeds:
        st = _train_one(args, s, args.out / f"seed_{s}")
        results.append((s, st.best))
    lower = args.val_metric == T.KEYPOINT_ERROR
    s, best = sorted(results, key=lambda r: r[1].metric if lower else -r[1].metric)[0]
    shutil.copyfile(args.out / f"seed_{s}" / BEST_NAME, args.out / BEST_NAME)
    summary = {"selected_seed": s, "metric_name": best.metric_name, "metric": best.metric}
    summary.update({f"seed_{r[0]}": r[1].metric for r in results})
    write_manifest(args.out / METRICS_NAME, summary)
    print(f"selected seed {s}: {best.metric_name} {best.metric:.6f}")
    return EXIT_OK


def _write_refined(src, dst, refined, flags):
    """Copy ``src`` line by line, replacing each match line with its refined values and flag.

    Comment and blank lines stay in place, so the output has exactly as many
    lines as the input and can be fed back in.
    """
    lines = src.read_text(encoding="utf-8").splitlines()
    out = []
    i = 0
    for line in lines:
        s = line.strip()
        if not s or s.startswith("#"):
            out.append(line)
            continue
        out.append(" ".join(repr(float(v)) for v in refined[i]) + f" {int(flags[i])}")
        i += 1
    dst.write_text("".join(l + "\n" for l in out), encoding="utf-8")


def cmd_refine(args):
    weights = M.load_weights(args.weights)
    img_a = load_grayscale(args.image_a)
    img_b = load_grayscale(args.image_b)
    matches = read_matches(args.matches)
    refined, flags = R.refine_matches(img_a, img_b, matches, weights)
    n_border = int((flags == R.FLAG_BORDER).sum())
    _write_refined(args.matches, args.out, refined, flags)
    sidecar = Path(str(args.out) + ".manifest")
    write_manifest(sidecar, {
        "seed": args.seed, "matches": len(matches), "refined": len(matches) - n_border, "border": n_border,
        "columns": "x1 y1 x2 y2 flag", "flag_refined": R.FLAG_REFINED, "flag_border": R.FLAG_BORDER,
        "weights": args.weights.name, "model": weights.config.to_dict(),
    })
    print(f"refined {len(matches) - n_border} of {len(matches)} matches ({n_border} at the border), seed {args.seed}")
    return EXIT_OK


def _emit(report, out, seed):
    report.meta.setdefault("seed", seed)
    sys.stdout.write(report.to_tsv())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{report.name}.tsv").write_text(report.to_tsv(), encoding="utf-8")
        (out / f"{report.name}.manifest").write_text(report.to_manifest(), encoding="utf-8")


def cmd_eval_pose(args):
    weights = M.load_weights(args.weights) if args.weights else None
    bench = R.make_pose_benchmark(args.pairs, args.matches, args.noise, seed=args.seed, scene=_scene(args))
    report = R.eval_pose(bench, weights, args.repetitions, seed=args.seed, iterations=args.iterations,
                         threshold_px=args.threshold)
    _emit(report, args.out, args.seed)
    return EXIT_OK


def cmd_eval_noise(args):
    pairs, corr = R.make_sweep_benchmark(args.pairs, args.matches, seed=args.seed, scene=_scene(args))
    report = R.eval_noise_sweep(pairs, corr, args.stds, seed=args.seed, repetitions=args.repetitions,
                                iterations=args.iterations, threshold_px=args.threshold)
    _emit(report, args.out, args.seed)
    return EXIT_OK


def cmd_eval_tri(args):
    weights = M.load_weights(args.weights) if args.weights else None
    report = R.eval_triangulation(args.scenes, args.views, args.points, args.noise, weights, seed=args.seed,
                                  thresholds=tuple(args.thresholds), scene=_scene(args))
    _emit(report, args.out, args.seed)
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import run_suite

    results, seconds = run_suite(args.seeds, base_seed=args.seed)
    failed = False
    for name, err in results.items():
        ok = err <= args.tolerance
        failed |= not ok
        print(f"{name}\t{err:.3e}\t{'pass' if ok else 'FAIL'}")
    print(f"seeds {args.seeds}, seed {args.seed}, {seconds:.1f} s", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval-pose": cmd_eval_pose,
    "eval-noise": cmd_eval_noise,
    "eval-tri": cmd_eval_tri,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"xrefine: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except (FloatingPointError, T.TrainingDivergedError) as exc:
        print(f"xrefine: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, ImageFormatError, ManifestError, M.WeightFileError) as exc:
        print(f"xrefine: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
