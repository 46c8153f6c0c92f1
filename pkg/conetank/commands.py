"""CLI command implementations."""

from pathlib import Path
import sys
from typing import Optional, TextIO

import pandas as pd

from .config import RunConfig, default_config, dump_config
from .controllers import get_controller
from .simulation import SimJob, SimTrace, run_batch

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_ABORTED = 3


class Colors:
    RED = "\033[0;31m"
    GREEN = "\033[0;32m"
    YELLOW = "\033[1;33m"
    BLUE = "\033[0;34m"
    CYAN = "\033[0;36m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    NC = "\033[0m"  # No Color


def print_color(text: str, color: str = ""):
    """Print colored text."""
    print(f"{color}{text}{Colors.NC}")


def controller_names(selection: str) -> list[str]:
    """Expand the --controller choice."""
    return ["lmpc", "nmpc"] if selection == "both" else [selection]


def build_jobs(config: RunConfig, names: list[str]) -> list[SimJob]:
    """One fresh controller per run."""
    jobs = []
    for name in names:
        settings = config.controller(name)
        controller = get_controller(
            name,
            config.tank,
            settings.ocp,
            operating_level=config.operating_level,
            estimator_gain=settings.estimator_gain,
        )
        jobs.append(SimJob(config.scenario, controller, config.tank, config.seed))
    return jobs


def summary_frame(traces: list[SimTrace]) -> pd.DataFrame:
    """One row of comparison metrics per controller."""
    rows = []
    for trace in traces:
        metrics = trace.metrics
        row = {
            "controller": trace.controller,
            "status": "aborted" if trace.abort_reason else "ok",
            "ise": metrics.ise,
            "iae": metrics.iae,
            "max_undershoot": metrics.max_undershoot,
            "max_overshoot": metrics.max_overshoot,
            "input_violations": metrics.constraint_violations,
            "sqp_iters_total": int(sum(rec.sqp_iters for rec in trace.records)),
            "solve_time_mean_s": float(trace.to_frame()["solve_time_s"].mean()),
        }
        for event in metrics.events:
            row[f"settling_{event.time:g}s"] = event.settling_time
        rows.append(row)
    return pd.DataFrame(rows)


def print_summary(summary: pd.DataFrame) -> None:
    print_color("\nComparison:\n", Colors.CYAN)
    print(f"{'CONTROLLER':<12} {'ISE':>12} {'IAE':>12} {'UNDERSHOOT':>12} {'OVERSHOOT':>12} {'VIOL':>6}  STATUS")
    print("-" * 80)
    for row in summary.itertuples(index=False):
        color = Colors.GREEN if row.status == "ok" else Colors.RED
        print_color(
            f"{row.controller:<12} {row.ise:>12.6g} {row.iae:>12.6g} {row.max_undershoot:>12.6g} "
            f"{row.max_overshoot:>12.6g} {row.input_violations:>6d}  {row.status}",
            color,
        )


def cmd_run(config: RunConfig, selection: str, output_dir: Optional[Path] = None) -> int:
    """Simulate the selected controllers and write traces plus a summary."""
    names = controller_names(selection)
    output_dir = Path(output_dir if output_dir is not None else config.output_dir)
    print_color(f"Simulating {', '.join(names)} for {config.scenario.duration:g} s...", Colors.CYAN)

    traces = run_batch(build_jobs(config, names), max_workers=len(names))

    output_dir.mkdir(parents=True, exist_ok=True)
    for trace in traces:
        path = trace.write_csv(output_dir / f"trace_{trace.controller}.csv")
        print_color(f"  wrote {path}", Colors.DIM)
    summary = summary_frame(traces)
    summary.to_csv(output_dir / "summary.csv", index=False, float_format="%.9g")
    print_summary(summary)

    aborted = [trace for trace in traces if trace.abort_reason]
    for trace in aborted:
        print_color(f"{trace.controller}: simulation aborted: {trace.abort_reason}", Colors.RED)
    if aborted:
        return EXIT_ABORTED
    violations = sum(trace.metrics.constraint_violations for trace in traces)
    if violations:
        print_color(f"Input constraint violations: {violations}", Colors.YELLOW)
    print_color("Done.", Colors.GREEN)
    return EXIT_OK


def cmd_dump_default_config(stream: Optional[TextIO] = None) -> int:
    """Write the default configuration as YAML."""
    (stream or sys.stdout).write(dump_config(default_config()))
    return EXIT_OK
