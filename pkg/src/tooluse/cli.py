"""Command-line entry point: ``tooluse <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import pipeline
from .config import PRESETS, load_config, resolve
from .numerics import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="JSON configuration document")
    p.add_argument("--preset", choices=PRESETS, help="default values (desk or paper)")
    p.add_argument("--seed", type=int, help="root seed for every random stream")
    p.add_argument("--out", metavar="DIR", default="work", help="work directory (default: work)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tooluse", description="Tool-use learning pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    common = [_common()]
    sub.add_parser("gen-data", parents=common, help="simulate the 36 training tasks")
    sub.add_parser("train-cae", parents=common, help="train the image autoencoder")
    sub.add_parser("extract-features", parents=common, help="encode every frame")
    sub.add_parser("train-mtrnn", parents=common, help="train the recurrent network")
    r = sub.add_parser("recognize", parents=common, help="run experiment A or B")
    r.add_argument("--experiment", required=True, type=str.upper, choices=("A", "B"))
    r.add_argument("--variant", type=str.upper, choices=("X", "Y", "BOTH"), default="BOTH",
                   help="unknown box variant (default: both)")
    g = sub.add_parser("generate", parents=common, help="closed-loop regeneration of a task")
    g.add_argument("--task", required=True, help="task id or index")
    a = sub.add_parser("analyze", parents=common, help="Cs(0) analysis reports")
    a.add_argument("report", choices=("pca", "regeneration"))
    return parser


def _configure_logging() -> None:
    level = os.environ.get("TOOLUSE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise UsageError(f"TOOLUSE_LOG={level!r} is not a log level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _resolve_config(args):
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    stored = pipeline.paths(args.out)["config"]
    try:
        if args.config:
            return load_config(args.config, preset=args.preset, seed=args.seed)
        if os.path.exists(stored) and args.command != "gen-data":
            return load_config(stored, preset=args.preset, seed=args.seed)
        return resolve(None, preset=args.preset, seed=args.seed)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid configuration JSON: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _fmt_verdict(res) -> str:
    v = res.verdict
    return (f"experiment {res.experiment} variant {res.variant}: tool={v.tool} "
            f"object={v.object_height} action={v.action} effect={v.effect} "
            f"nearest={v.nearest_task} distance={v.distance:.4f} "
            f"matched_expectation={str(v.matched_expectation).lower()}")


def run(args) -> int:
    cfg = _resolve_config(args)
    root, threads = args.out, args.threads
    pipeline.write_config(root, cfg)
    cmd = args.command
    if cmd == "gen-data":
        m = pipeline.gen_data(cfg, root, threads)
        w, h, c = m["image_dims"]
        print(f"wrote {len(m['tasks'])} sequences ({w}x{h}x{c}) to {pipeline.paths(root)['dataset']}")
    elif cmd == "train-cae":
        _, mse = pipeline.train_cae_stage(cfg, root, threads)
        print(f"CAE trained: reconstruction mse {mse:.6f}")
    elif cmd == "extract-features":
        fs = pipeline.extract_features_stage(cfg, root)
        n, t, d = fs.features.shape
        print(f"features {n}x{t}x{d} written to {pipeline.paths(root)['features']}")
    elif cmd == "train-mtrnn":
        _, curve = pipeline.train_mtrnn_stage(cfg, root, threads)
        print(f"MTRNN trained: E {curve[0]:.4f} -> {curve[-1]:.4f} "
              f"over {len(curve)} iterations")
    elif cmd == "recognize":
        variants = ["X", "Y"] if args.variant == "BOTH" else [args.variant]
        for res in pipeline.recognize_stage(cfg, root, args.experiment, variants):
            print(_fmt_verdict(res))
    elif cmd == "generate":
        manifest = pipeline.load_manifest(root)
        try:
            idx = pipeline.find_task(manifest, args.task)
        except KeyError:
            raise UsageError(f"unknown task {args.task!r}") from None
        r = pipeline.generate_stage(cfg, root, idx)
        print(f"{r['task_id']}: joint rmse {r['joint_rmse']:.4f} at shift {r['shift']} "
              f"-> {r['dir']}")
    elif cmd == "analyze" and args.report == "pca":
        doc = pipeline.pca_stage(cfg, root)
        print(f"PCA: {doc['components']} components, variances "
              + " ".join(f"{v:.4g}" for v in doc["variances"]))
        for key, rep in doc["pull_tasks"].items():
            print(f"pull tasks by {key}: {rep['correct']}/{rep['total']} nearest-centroid")
    elif cmd == "analyze":
        rows = pipeline.regeneration_stage(cfg, root)
        worst = max(rows, key=lambda r: r["joint_rmse"])
        print(f"regeneration: worst joint rmse {worst['joint_rmse']:.4f} ({worst['task_id']})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _configure_logging()
        return run(args)
    except UsageError as exc:
        print(f"tooluse: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"tooluse: diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"tooluse: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
