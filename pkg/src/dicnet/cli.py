"""Command line entry point: ``dicnet <command> --config run.json [...]``.

Exit codes: 0 success, 1 contract violation, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ImageSample
from .distill import ChannelStats
from .model import RoleError, load_checkpoint
from .pipeline import Pipeline, RunConfig, size_table


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(args) -> RunConfig:
    raw = RunConfig().to_dict()
    if args.config:
        raw.update(json.loads(Path(args.config).read_text()))
    for item in args.set or []:
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        _set_path(raw, key, parsed)
    if args.output_dir:
        raw["output_dir"] = args.output_dir
    return RunConfig(**raw)


def _pipeline(args) -> Pipeline:
    pipe = Pipeline(load_config(args))
    if getattr(args, "teacher", None):
        pipe._teacher = load_checkpoint(args.teacher)
    if getattr(args, "student", None):
        pipe._student = load_checkpoint(args.student)
    if getattr(args, "stats", None):
        pipe._stats = ChannelStats.load(args.stats)
    return pipe


def cmd_config(args):
    cfg = load_config(args)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def cmd_synth_data(args):
    pipe = _pipeline(args)
    pipe.synth_data(args.out_root)
    print(f"wrote dataset to {args.out_root}")


def cmd_train_teacher(args):
    pipe = _pipeline(args)
    t = pipe.teacher
    print(f"teacher checkpoint: {pipe.out / 'checkpoints' / 'teacher.npz'} (epoch {t.epoch})")


def cmd_distill(args):
    pipe = _pipeline(args)
    s = pipe.student
    print(f"student checkpoint: {pipe.out / 'checkpoints' / 'student.npz'} (epoch {s.epoch})")


def cmd_estimate_stats(args):
    pipe = _pipeline(args)
    st = pipe.stats
    print(f"channel stats over {st.pixel_count} cells: {pipe.out / 'stats' / 'channel_stats.json'}")


def cmd_score(args):
    pipe = _pipeline(args)
    samples = []
    for p in args.images:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)
        samples.append(ImageSample(img, np.zeros(img.shape[:2], np.uint8), Path(p).stem, "test"))
    for path in pipe.score(samples):
        print(path)


def cmd_evaluate(args):
    pipe = _pipeline(args)
    rep = pipe.evaluate(args.split, args.method)
    print(rep.table(args.method))
    print(f"report: {pipe.out / 'reports' / f'metrics_{args.method}_{args.split}.json'}")


def cmd_diagnose(args):
    pipe = _pipeline(args)
    k_list = [int(k) for k in args.k.split(",")] if args.k else None
    out = pipe.diagnose(args.figure, channel=args.channel, k_list=k_list)
    if args.figure == 5:
        for r in out["rows"]:
            print(f"k={r['k']:>4}  AUROC {r['mean_auroc']:.4f} ± {r['std_auroc']:.4f}")
    print(f"report: {pipe.out / 'reports' / f'figure{args.figure}.json'}")


def cmd_size_study(args):
    pipe = _pipeline(args)
    rows = pipe.size_study(args.student_families.split(","))
    print(size_table(rows))


def cmd_run(args):
    """Every stage in order on the configured dataset."""
    pipe = _pipeline(args)
    pipe.teacher, pipe.student, pipe.stats  # noqa: B018
    for method in ("dicnet", "msp"):
        print(pipe.evaluate("test", method).table(method))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dicnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON document")
    common.add_argument("--output-dir", help="override output_dir")
    common.add_argument("--set", action="append", metavar="KEY=JSON",
                        help="override a config field, e.g. --set student_train.epochs=10")
    ckpts = argparse.ArgumentParser(add_help=False)
    ckpts.add_argument("--teacher", help="teacher checkpoint (default: <output_dir>/checkpoints/teacher)")
    ckpts.add_argument("--student", help="student checkpoint")
    ckpts.add_argument("--stats", help="ChannelStats JSON")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    p.set_defaults(func=cmd_config)
    p = sub.add_parser("synth-data", parents=[common], help="write the synthetic dataset to disk")
    p.add_argument("out_root")
    p.set_defaults(func=cmd_synth_data)
    p = sub.add_parser("train-teacher", parents=[common])
    p.set_defaults(func=cmd_train_teacher)
    p = sub.add_parser("distill", parents=[common, ckpts])
    p.set_defaults(func=cmd_distill)
    p = sub.add_parser("estimate-stats", parents=[common, ckpts])
    p.set_defaults(func=cmd_estimate_stats)
    p = sub.add_parser("score", parents=[common, ckpts])
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_score)
    p = sub.add_parser("evaluate", parents=[common, ckpts])
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["dicnet", "msp"], default="dicnet")
    p.set_defaults(func=cmd_evaluate)
    p = sub.add_parser("diagnose", parents=[common, ckpts])
    p.add_argument("--figure", type=int, choices=[3, 4, 5], required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--k", help="comma-separated channel counts for figure 5")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("size-study", parents=[common, ckpts])
    p.add_argument("--student-families", default="tiny,small,medium")
    p.set_defaults(func=cmd_size_study)
    p = sub.add_parser("run", parents=[common], help="train, distill, estimate stats and evaluate")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RoleError, IndexError) as e:  # ConfigError, DatasetError, UndefinedMetricError
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
