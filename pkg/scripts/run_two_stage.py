"""Two-stage distillation versus DSD on the default synthetic data.

Per seed: a baseline teacher at the target dimension, a frozen-teacher student
at the base dimension, and a DSD run with that same target dimension. Extra
``key=value`` arguments override RunConfig fields for all runs.

    python scripts/run_two_stage.py --seeds 5 --iterations 2000
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from s2sd.config import RunConfig, from_dict, to_dict
from s2sd.train import load_data, train, train_two_stage

from run_zero_shot import parse_overrides


def run(base: RunConfig, seeds, teacher_dim: int, log=print) -> dict:
    data = load_data(base)
    rows = []
    for seed in seeds:
        cfg = base.replace(seed=seed, eval_every=base.iterations)
        teacher, student = train_two_stage(
            cfg.replace(mode="two_stage_teacher", base_dim=teacher_dim), cfg, data)
        dsd = train(cfg.replace(mode="s2sd", topology="dual", target_dims=[teacher_dim]), data)
        row = {"seed": seed,
               "teacher_recall@1": teacher.final.recall_at[1],
               "two_stage_recall@1": student.final.recall_at[1],
               "dsd_recall@1": dsd.final.recall_at[1]}
        rows.append(row)
        log(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in row.items()))
    means = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    return {"mean": means,
            "two_stage_minus_dsd_points": 100 * (means["two_stage_recall@1"]
                                                 - means["dsd_recall@1"]),
            "runs": rows}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--teacher-dim", type=int, default=64)
    ap.add_argument("--json", help="write the summary here")
    ap.add_argument("overrides", nargs="*", help="RunConfig key=value pairs")
    args = ap.parse_args(argv)
    fields = to_dict(RunConfig())
    fields.update(parse_overrides(args.overrides))
    fields["iterations"] = args.iterations
    summary = run(from_dict(fields), range(args.seeds), args.teacher_dim)
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=1))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(summary, f, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
