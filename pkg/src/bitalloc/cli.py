"""Command-line interface.

Subcommands:
  plan      full pipeline: estimate sensitivities, allocate bit-widths, report
  table     estimation only; writes the per-layer/per-bit loss-increase CSV
  solve     allocation only, from a previously saved table CSV
  converge  sensitivity tables at increasing sample counts
  validate  oracle comparison: proxy vs exact loss change, rank correlations

Exit codes: 0 success, 2 manifest problems, 3 infeasible bit target,
4 numeric failure, 1 anything else. Thread count comes from the
BITALLOC_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .errors import BudgetError, InfeasibleError, ManifestError, NumericError, ShapeError
from .manifest import build_network, load_calibration, load_manifest, select_samples
from .oracle import ranking_fidelity
from .perturbation import PerturbationTable, ProxyKind
from .pipeline import (
    ASSIGNMENT_FILE,
    CONVERGENCE_FILE,
    MANIFEST_ECHO_FILE,
    TABLE_FILE,
    TIMING_FILE,
    RunReport,
    compute_table,
    emit_reports,
    run_pipeline,
    solve_table,
)

EXIT_MANIFEST = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERIC = 4


def _int_csv(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("manifest", help="path to the manifest JSON file")
    parser.add_argument("--bits", type=_int_csv, help="override candidate bit-widths, e.g. 2,4,8")
    parser.add_argument("--b-target", type=float, dest="b_target", help="override target average bit-width")
    parser.add_argument("--sample-count", type=int, dest="sample_count", help="override calibration subset size")
    parser.add_argument("--seed", type=int, help="override sampling seed")
    parser.add_argument("--proxy", choices=[k.value for k in ProxyKind], help="override sensitivity proxy")
    parser.add_argument("--output-dir", dest="output_dir", help="override report directory")
    parser.add_argument(
        "--no-deterministic",
        action="store_true",
        help="allow non-deterministic parallel reduction (faster, not reproducible)",
    )


def _overrides(args) -> dict:
    overrides = {
        "bits": args.bits,
        "b_target": args.b_target,
        "sample_count": args.sample_count,
        "seed": args.seed,
        "proxy": args.proxy,
        "output_dir": args.output_dir,
    }
    if args.no_deterministic:
        overrides["deterministic"] = False
    return overrides


def _report_stub(manifest, table, assignment=None, convergence=None, timings=None) -> RunReport:
    return RunReport(
        manifest_echo=manifest.resolved_dict(),
        assignment=assignment,
        table=table,
        convergence=convergence,
        timings=timings or {},
        version=__version__,
    )


def _print_assignment(assignment) -> None:
    width = max(len(n) for n in assignment.bits)
    for name, bit in assignment.bits.items():
        print(
            f"  {name:<{width}}  {bit:2d} bit  "
            f"params {assignment.layer_params[name]:>7d}  "
            f"delta_loss {assignment.per_layer_delta[name]:.6g}"
        )
    print(
        f"  avg bits {assignment.avg_bits:.4f}  "
        f"used {assignment.total_weight}/{assignment.capacity} bits  "
        f"w-ratio {assignment.w_ratio:.2f}x  "
        f"total delta_loss {assignment.total_delta_loss:.6g}"
    )


def cmd_plan(args) -> int:
    manifest = load_manifest(args.manifest, _overrides(args))
    report = run_pipeline(manifest)
    print(f"bit-width assignment (proxy: {manifest.proxy.value}):")
    _print_assignment(report.assignment)
    print(f"reports written to {manifest.output_dir}")
    return 0


def cmd_table(args) -> int:
    manifest = load_manifest(args.manifest, _overrides(args))
    timings: dict[str, float] = {}
    table = compute_table(manifest, timings)
    report = _report_stub(manifest, table, timings=timings)
    emit_reports(report, manifest.output_dir)
    print(f"perturbation table written to {manifest.output_dir / TABLE_FILE}")
    return 0


def cmd_solve(args) -> int:
    manifest = load_manifest(args.manifest, _overrides(args))
    table_path = Path(args.table) if args.table else manifest.output_dir / TABLE_FILE
    if not table_path.is_file():
        raise ManifestError(f"saved table not found: {table_path}")
    table = PerturbationTable.from_csv(table_path)
    timings: dict[str, float] = {}
    assignment = solve_table(manifest, table, timings)
    report = _report_stub(manifest, table, assignment=assignment, timings=timings)
    emit_reports(report, manifest.output_dir)
    print(f"bit-width assignment (from {table_path}):")
    _print_assignment(assignment)
    return 0


def cmd_converge(args) -> int:
    manifest = load_manifest(args.manifest, _overrides(args))
    checkpoints = args.checkpoints
    if checkpoints is None:
        n = manifest.sample_count
        checkpoints = sorted({max(1, n >> k) for k in range(5)})
    report = run_pipeline(manifest, checkpoints=checkpoints)
    print(f"convergence profile at {checkpoints} written to "
          f"{manifest.output_dir / CONVERGENCE_FILE}")
    _print_assignment(report.assignment)
    return 0


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest, _overrides(args))
    net = build_network(manifest)
    samples = select_samples(manifest, load_calibration(manifest))
    report = ranking_fidelity(net, samples, manifest.bits)
    manifest.output_dir.mkdir(parents=True, exist_ok=True)
    out = manifest.output_dir / "validate.csv"
    report.to_csv(out)
    print(f"proxy-vs-exact diagnostic written to {out}")
    if report.skipped_reason:
        print(f"rank correlations skipped: {report.skipped_reason}")
        return 0
    for proxy, rho in report.pooled.items():
        print(f"  {proxy}: pooled Spearman {rho:+.4f}; per bit "
              + ", ".join(f"{b}:{r:+.3f}" for b, r in report.per_bit[proxy].items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitalloc",
        description="Mixed-precision bit-width allocation under a model-size budget.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="full pipeline: table + allocation + reports")
    _add_common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("table", help="sensitivity table only")
    _add_common(p)
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("solve", help="allocation from a saved table")
    _add_common(p)
    p.add_argument("--table", help="table CSV (default: <output_dir>/perturbation.csv)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("converge", help="tables at increasing sample counts")
    _add_common(p)
    p.add_argument(
        "--checkpoints",
        type=_int_csv,
        help="ascending sample counts, e.g. 64,256,1024 (default: powers of two up to sample_count)",
    )
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("validate", help="compare proxies against exact loss changes")
    _add_common(p)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ManifestError as exc:
        print(f"manifest error: {exc}", file=sys.stderr)
        return EXIT_MANIFEST
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericError, ShapeError, BudgetError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
