"""End-to-end orchestration: quantize, estimate, filter, allocate, report.

Report files are deterministic byte-for-byte given the same manifest in
deterministic mode, with one deliberate exception: wall-clock timings go to
their own file (timing.json) because they can never be reproducible.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .manifest import Manifest, build_network, load_calibration, select_samples
from .mckp import BitAssignment, build_instance, dominance_filter, greedy_assign
from .perturbation import (
    PerturbationTable,
    convergence_profile,
    delta_w_table,
    perturbation_table,
)

THREADS_ENV = "BITALLOC_THREADS"

ASSIGNMENT_FILE = "assignment.json"
TABLE_FILE = "perturbation.csv"
CONVERGENCE_FILE = "convergence.csv"
MANIFEST_ECHO_FILE = "manifest_resolved.json"
TIMING_FILE = "timing.json"


def thread_count() -> int:
    """Worker threads for sample streaming, from the environment (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, threads)


@dataclass(frozen=True)
class RunReport:
    """Everything a pipeline run produced, plus provenance."""

    manifest_echo: dict
    assignment: BitAssignment | None
    table: PerturbationTable
    convergence: dict[int, PerturbationTable] | None
    timings: dict[str, float]
    version: str


def compute_table(manifest: Manifest, timings: dict[str, float]) -> PerturbationTable:
    """Steps 1-2: quantization perturbations, then the streamed estimates."""
    net = build_network(manifest)
    samples = select_samples(manifest, load_calibration(manifest))

    t0 = time.perf_counter()
    deltas = delta_w_table(net, manifest.bits)
    timings["delta_w"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    table = perturbation_table(
        net,
        samples,
        manifest.bits,
        manifest.proxy,
        deltas=deltas,
        threads=thread_count(),
        deterministic=manifest.deterministic,
        seed=manifest.seed,
    )
    timings["table"] = time.perf_counter() - t0
    return table


def solve_table(
    manifest: Manifest, table: PerturbationTable, timings: dict[str, float]
) -> BitAssignment:
    """Steps 3.1-3.2: dominance filtering, then the greedy allocation."""
    net = build_network(manifest)
    sizes = net.layer_sizes()

    t0 = time.perf_counter()
    instance = build_instance(table, sizes, manifest.b_target)
    filtered = dominance_filter(instance)
    timings["filter"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    assignment = greedy_assign(filtered)
    timings["greedy"] = time.perf_counter() - t0
    return assignment


def run_pipeline(
    manifest: Manifest, *, emit: bool = True, checkpoints=None
) -> RunReport:
    """Full run: estimate the table, solve the knapsack, write reports."""
    timings: dict[str, float] = {}
    table = compute_table(manifest, timings)

    convergence = None
    if checkpoints:
        net = build_network(manifest)
        samples = select_samples(manifest, load_calibration(manifest))
        t0 = time.perf_counter()
        convergence = convergence_profile(
            net,
            samples,
            manifest.bits,
            checkpoints,
            manifest.proxy,
            seed=manifest.seed,
            threads=thread_count(),
            deterministic=manifest.deterministic,
        )
        timings["convergence"] = time.perf_counter() - t0

    assignment = solve_table(manifest, table, timings)
    report = RunReport(
        manifest_echo=manifest.resolved_dict(),
        assignment=assignment,
        table=table,
        convergence=convergence,
        timings=timings,
        version=__version__,
    )
    if emit:
        emit_reports(report, manifest.output_dir)
    return report


def emit_reports(report: RunReport, out_dir) -> list[Path]:
    """Write the report files; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if report.assignment is not None:
        a = report.assignment
        layer_records = [
            {
                "name": name,
                "bit": bit,
                "params": a.layer_params[name],
                "delta_loss": a.per_layer_delta[name],
            }
            for name, bit in a.bits.items()
        ]
        payload = {
            "tool_version": report.version,
            "layers": layer_records,
            "totals": {
                "avg_bits": a.avg_bits,
                "capacity_bits": a.capacity,
                "used_bits": a.total_weight,
                "w_ratio": a.w_ratio,
                "total_delta_loss": a.total_delta_loss,
            },
        }
        path = out / ASSIGNMENT_FILE
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        written.append(path)

    path = out / TABLE_FILE
    report.table.to_csv(path)
    written.append(path)

    if report.convergence is not None:
        path = out / CONVERGENCE_FILE
        with open(path, "w", newline="") as fh:
            fh.write("sample_count,layer,bit,delta_loss\n")
            for count in sorted(report.convergence):
                for layer, bit, value in report.convergence[count].entries():
                    fh.write(f"{count},{layer},{bit},{value:.17g}\n")
        written.append(path)

    path = out / MANIFEST_ECHO_FILE
    with open(path, "w") as fh:
        json.dump(report.manifest_echo, fh, indent=2)
        fh.write("\n")
    written.append(path)

    path = out / TIMING_FILE
    with open(path, "w") as fh:
        json.dump(
            {"tool_version": report.version, "seconds": report.timings}, fh, indent=2
        )
        fh.write("\n")
    written.append(path)
    return written
