"""``mintkit`` command line.

Exit codes: 0 success, 1 usage error, 2 stage failure, 3 invariant violation.
Set ``MINTKIT_VERBOSE`` (0, 1, 2) to control progress output on stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..compress.accounting import CONVENTIONS
from ..evalmetrics import EvalReport, compare, render_table
from ..model.config import ConfigError
from ..tensor.autograd import ContractError
from . import config as config_mod
from .records import find, write_records, write_text
from .stages import (
    STAGES,
    InvariantViolation,
    StageError,
    UsageError,
    account_records,
    open_experiment,
    render_report,
    run_pipeline,
    say,
    write_data_dir,
)

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_INVARIANT = 0, 1, 2, 3

SINGLE_STAGE = {
    "train-teacher": "teacher",
    "analyze": "analyze",
    "prune": "prune",
    "distill": "distill",
    "eval": "eval",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mintkit", description="Interpretability-guided pruning and distillation workbench.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
        sp.add_argument("--seed", type=int, help="run seed (overrides the config)")
        sp.add_argument("--out", required=out_required, help="experiment or output directory")
        sp.add_argument("--convention", choices=CONVENTIONS, help="FLOPs convention for reported costs")
        sp.add_argument("--set", action="append", default=[], metavar="BLOCK.KEY=VALUE",
                        help="override one config entry, e.g. --set kd.steps=50 (repeatable)")

    common(sub.add_parser("gen-data", help="generate the dataset and split manifests"))
    for name in SINGLE_STAGE:
        common(sub.add_parser(name, help=f"run the {SINGLE_STAGE[name]} stage in an experiment directory"))
    sp = sub.add_parser("pipeline", help="run every missing stage in order (resumable)")
    common(sp)
    sp.add_argument("--stage", choices=STAGES, help="stop after this stage")
    sp = sub.add_parser("compare", help="rank evaluation reports from one or more record files")
    sp.add_argument("reports", nargs="+", help="eval.jsonl files or experiment directories")
    sp.add_argument("--phase", default="post", choices=("pre", "post"))
    sp.add_argument("--out", help="write the table here instead of stdout")
    sp = sub.add_parser("report", help="render tables and CSV from an experiment directory")
    sp.add_argument("--out", required=True, help="experiment directory")
    sp = sub.add_parser("account", help="parameter and FLOPs accounting for the Donut-base configuration")
    sp.add_argument("--convention", choices=CONVENTIONS)
    sp.add_argument("--out", help="write account.jsonl and account.txt here")
    return p


def _compare(args) -> int:
    reports = []
    for item in args.reports:
        path = Path(item)
        if path.is_dir():
            path = path / "eval" / "eval.jsonl"
        if not path.exists():
            raise UsageError(f"no report file at {path}")
        reports += [EvalReport.from_dict(r) for r in find(path, "eval_report") if r.get("phase", "post") == args.phase]
    text = render_table(compare(reports))
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _dispatch(args) -> int:
    if args.command == "account":
        recs, text = account_records("", args.convention)
        if args.out:
            write_records(Path(args.out) / "account.jsonl", recs)
            write_text(Path(args.out) / "account.txt", text)
        sys.stdout.write(text)
        return EXIT_OK
    if args.command == "compare":
        return _compare(args)
    if args.command == "report":
        text, csv_text, _ = render_report(Path(args.out))
        sys.stdout.write(text)
        sys.stdout.write("\n" + csv_text)
        return EXIT_OK
    cfg = config_mod.load(args.config, args.seed, args.convention, args.set)
    if args.command == "gen-data":
        counts = write_data_dir(cfg, Path(args.out))
        say(f"[gen-data] wrote {counts} to {args.out}")
        return EXIT_OK
    exp = open_experiment(args.out, cfg)
    if args.command == "pipeline":
        ran = run_pipeline(exp, stop_after=args.stage)
        say(f"[pipeline] executed: {', '.join(ran) or 'nothing (all stages present)'}")
        return EXIT_OK
    run_pipeline(exp, only=SINGLE_STAGE[args.command])
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except InvariantViolation as exc:
        print(f"mintkit: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except StageError as exc:
        print(f"mintkit: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"mintkit: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"mintkit: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
