"""Command-line entry point: ``loomfuse {generate,verify,report,dump} SPEC``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .codegen import atomic_write, dot_dataflow, dot_inest, dot_reuse, emit
from .errors import LoomfuseError
from .oracle import differential_check
from .pipeline import Program, compile_spec, format_report, report_pipeline

log = logging.getLogger("loomfuse")

STAGES = ("dataflow", "inest", "fused", "reuse")


def dot_for(p: Program, stage: str) -> str:
    if stage == "dataflow":
        return dot_dataflow(p.dag)
    if stage == "inest":
        return dot_inest(p.inest, p.gg, "inest")
    if stage == "fused":
        return dot_inest(p.fusion.dag, p.gg, "fused")
    return dot_reuse(p.plan)


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loomfuse", description="Fuse kernel loop nests described by a rule file.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("spec", type=Path, help="rule file (.lf)")
        p.add_argument("--vector-length", type=_positive, default=None)
        p.add_argument("--log-level", default="warning",
                       choices=("debug", "info", "warning", "error"))

    g = sub.add_parser("generate", help="emit C or C++ source")
    common(g)
    g.add_argument("--backend", choices=("c99", "cxx"), default=None)
    g.add_argument("-o", "--output", type=Path, default=Path("."))
    g.add_argument("--dump", action="append", choices=STAGES, default=[])
    g.add_argument("--report", choices=("storage",), default=None)

    v = sub.add_parser("verify", help="compare the fused schedule with a naive run")
    common(v)
    v.add_argument("--trials", type=_positive, default=3)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mode", choices=("hash", "expr"), default="hash")
    v.add_argument("--json", action="store_true")

    r = sub.add_parser("report", help="print fusion and storage analysis")
    common(r)
    r.add_argument("--report", choices=("storage",), default="storage")
    r.add_argument("--explain-splits", action="store_true")
    r.add_argument("--json", action="store_true")

    d = sub.add_parser("dump", help="print a pipeline stage as DOT")
    common(d)
    d.add_argument("--dump", action="append", choices=STAGES, default=[])
    return ap


def run(args) -> int:
    program = compile_spec(args.spec, check=args.log_level == "debug",
                           vector_length=args.vector_length)
    log.info("%s: %d nest(s), %d split(s)", program.rs.name, program.nests, len(program.fusion.splits))
    if args.command == "generate":
        backend = args.backend or program.rs.backend
        for path in emit(program.ir, args.output, backend):
            print(path)
        for stage in args.dump:
            path = args.output / f"{program.ir.name}.{stage}.dot"
            atomic_write(path, dot_for(program, stage))
            print(path)
        if args.report:
            print(format_report(report_pipeline(program)))
        return 0
    if args.command == "verify":
        rep = differential_check(program, args.trials, args.seed, args.mode)
        if args.json:
            print(json.dumps({"ok": rep.ok, "mode": rep.mode, "trials": rep.trials, "seed": rep.seed,
                              "tolerance": rep.tolerance,
                              "mismatches": [m.__dict__ for m in rep.mismatches]}, indent=2))
        else:
            print(rep.summary())
        return 0 if rep.ok else 2
    if args.command == "report":
        rep = report_pipeline(program)
        if args.json:
            print(json.dumps(rep, indent=2))
        else:
            print(format_report(rep))
            if args.explain_splits:
                for cut in program.fusion.splits + program.concave:
                    print(f"  {cut.reason}: upstream {sorted(cut.upstream)}, "
                          f"downstream {sorted(cut.downstream)}")
        return 0
    for stage in args.dump or ["dataflow"]:
        sys.stdout.write(dot_for(program, stage))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(name)s: %(message)s")
    try:
        return run(args)
    except LoomfuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for d in exc.diagnostics:
            print(f"  {d}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
