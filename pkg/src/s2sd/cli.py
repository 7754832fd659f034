"""Command line entry point: ``s2sd <subcommand> [--config FILE] [--<key> VALUE ...]``.

Every RunConfig key is also a flag (underscores become dashes); flag values
override the config file. Values are read as JSON when they parse, so
``--target-dims [16,32]`` and ``--feature-distill true`` work, and a bare comma
list such as ``--target-dims 16,32`` is accepted too.

Exit codes: 0 success, 1 failed verification, 2 bad configuration,
3 numerical abort, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

from .config import ConfigError, RunConfig, from_dict, parse_config, to_dict
from .data import FeatureFileError, generate_synthetic, load_features, save_features
from .heads import CheckpointError
from .train import NumericalAbort, evaluate, train, train_two_stage

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
GRAD_TOL = 1e-4


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        try:
            return [int(p) for p in raw.split(",") if p.strip()]
        except ValueError:
            pass
    return raw


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    group = p.add_argument_group("RunConfig overrides")
    for f in fields(RunConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f"cfg_{f.name}",
                           metavar="VALUE", type=_parse_value)


def _config(args) -> RunConfig:
    raw = to_dict(parse_config(args.config)) if args.config else {}
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}")
        if value is not None:
            raw[f.name] = value
    return from_dict(raw)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, test_set = generate_synthetic(cfg.synthetic_spec())
    save_features(train_set, out / "train.feat")
    save_features(test_set, out / "test.feat")
    _print({"train": str(out / "train.feat"), "test": str(out / "test.feat"),
            "train_samples": len(train_set), "test_samples": len(test_set)})
    return EXIT_OK


def _report_summary(report) -> dict:
    return {"final": report.final.as_row(), "checkpoint": report.checkpoint_path,
            "mean_step_time_s": report.mean_step_time,
            "overhead_ratio": report.overhead_ratio}


def cmd_train(args) -> int:
    cfg = _config(args)
    baseline = None
    if args.with_baseline and cfg.mode == "s2sd":
        baseline = train(cfg.replace(mode="baseline", output_dir=None))
    _print(_report_summary(train(cfg, baseline=baseline)))
    return EXIT_OK


def cmd_train_two_stage(args) -> int:
    student = _config(args)
    teacher_dim = args.teacher_dim or max(student.target_dims)
    teacher = student.replace(mode="two_stage_teacher", base_dim=teacher_dim)
    if student.output_dir:
        teacher = teacher.replace(output_dir=str(Path(student.output_dir) / "teacher"))
        student = student.replace(output_dir=str(Path(student.output_dir) / "student"))
    t_rep, s_rep = train_two_stage(teacher, student)
    _print({"teacher": _report_summary(t_rep), "student": _report_summary(s_rep)})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    features = load_features(args.features)
    try:
        rec = evaluate(args.checkpoint, features, args.split, args.seed)
    except CheckpointError:
        raise
    except (KeyError, ValueError) as err:
        raise ConfigError("checkpoint", str(err)) from None
    _print(rec.as_row())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import run_stop_suite, run_suite

    t0 = time.perf_counter()
    grads = run_suite()
    t1 = time.perf_counter()
    stops = run_stop_suite()
    t2 = time.perf_counter()
    worst = {}
    for r in grads:
        worst[r.name] = max(worst.get(r.name, 0.0), r.rel_error)
    for name, err in worst.items():
        print(f"{'ok' if err < GRAD_TOL else 'FAIL':4} {name:28} max rel. error {err:.2e}")
    leaked = [r for r in stops if r.max_abs_teacher_grad != 0.0]
    print(f"{'ok' if not leaked else 'FAIL':4} stop-gradient: {len(stops) - len(leaked)}/"
          f"{len(stops)} distillation terms give exactly zero teacher gradient")
    print(f"finite differences {t1 - t0:.1f}s, stop-gradient {t2 - t1:.1f}s")
    return EXIT_OK if all(e < GRAD_TOL for e in worst.values()) and not leaked else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s2sd", description="Self-distillation for metric heads.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log evaluation steps")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic train/test FeatureFile pair")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--with-baseline", action="store_true",
                   help="also train the baseline and report the step-time ratio")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-two-stage", help="teacher with pure DML, then a frozen-teacher student")
    p.add_argument("--teacher-dim", type=int, help="teacher base_dim (default: largest target dim)")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_two_stage)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint's base head")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="FeatureFile to embed")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0, help="k-means seed")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("grad-check", help="gradient and stop-gradient verification suites")
    p.set_defaults(fn=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FeatureFileError, CheckpointError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
