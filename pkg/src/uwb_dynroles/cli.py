"""Command-line front end: ``run``, ``compare`` and ``sweep``.

Exit codes: 0 success, 2 bad input (unreadable scenario, bad flags, refused
comparison or sweep), 3 the simulation collapsed (partial outputs written).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import Role
from .sim.engine import RunResult, SimulationCollapse, run_scenario
from .sim.metrics import (
    SEGMENTS,
    box_stats,
    records_from_csv,
    records_to_csv,
    roles_to_csv,
    summarize,
    summary_to_json,
)
from .sim.scenario import Scenario, ScenarioError, apply_overrides, get_path, load

log = logging.getLogger("uwb_dynroles")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_COLLAPSE = 3
STAT_FIELDS = ("count", "median", "q1", "q3", "mean", "whisker_low", "whisker_high")


class CliError(Exception):
    """Refused request; reported on stderr with exit code 2."""


def _setup_logging() -> None:
    level = os.environ.get("UWB_DYNROLES_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def atomic_write(path: Path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------


def _summary_k(scenario: Scenario) -> int:
    return scenario.allocation.k


def build_report(scenario: Scenario, result: RunResult, wall: float, *, collapsed: str | None = None) -> dict:
    summary = None
    if result.records:
        summary = summary_to_json(summarize(
            result.records, k=_summary_k(scenario), focus=scenario.focus_nodes,
            switch_window=scenario.switch_window, dim=scenario.dim,
        ))
    return {
        "software_version": __version__,
        "seed": scenario.seed,
        "mode": scenario.mode,
        "wall_clock_seconds": wall,
        "status": "collapsed" if collapsed else "ok",
        "error": collapsed,
        "counters": result.counters(),
        "update_rate_hz": {
            "cycle_frequency": scenario.cycle_frequency,
            "active": {str(n): result.update_rate(n, Role.ACTIVE) for n in sorted(result.active_updates)},
            "listener": {str(n): result.update_rate(n, Role.LISTENER) for n in sorted(result.listener_updates)},
        },
        "summary": summary,
        "scenario": scenario.to_dict(),
    }


def write_run(out: Path, scenario: Scenario, result: RunResult, wall: float, *,
              events: bool, dump_costs: bool, collapsed: str | None = None) -> None:
    atomic_write(out / "metrics.csv", records_to_csv(result.records))
    atomic_write(out / "roles.csv", roles_to_csv(result.assignments))
    report = build_report(scenario, result, wall, collapsed=collapsed)
    atomic_write(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if events:
        atomic_write(out / "events.ndjson", result.events.to_ndjson())
    if dump_costs:
        lines = [json.dumps({"epoch": i, **r.to_dict()}) for i, r in enumerate(result.cost_reports)]
        atomic_write(out / "costs.ndjson", "\n".join(lines) + ("\n" if lines else ""))


def _load_scenario(path: str, overrides: list[str]) -> Scenario:
    scenario = load(path)
    return apply_overrides(scenario, overrides) if overrides else scenario


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = _load_scenario(args.scenario, args.set or [])
    except ScenarioError as exc:
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        result = run_scenario(scenario, keep_costs=args.dump_costs)
    except SimulationCollapse as exc:
        write_run(out, scenario, exc.result, time.perf_counter() - t0,
                  events=args.events, dump_costs=args.dump_costs, collapsed=str(exc))
        print(f"error: simulation collapsed: {exc}", file=sys.stderr)
        return EXIT_COLLAPSE
    write_run(out, scenario, result, time.perf_counter() - t0, events=args.events, dump_costs=args.dump_costs)
    log.info("wrote %s (%d records)", out, len(result.records))
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _read_run(d: Path):
    metrics, report = d / "metrics.csv", d / "report.json"
    if not d.is_dir():
        raise CliError(f"{d}: not a directory")
    if not metrics.is_file():
        raise CliError(f"{d}: missing metrics.csv")
    if not report.is_file():
        raise CliError(f"{d}: missing report.json")
    try:
        rep = json.loads(report.read_text())
        scenario = Scenario.from_dict(rep["scenario"])
        records = records_from_csv(metrics.read_text())
    except (ValueError, KeyError) as exc:
        raise CliError(f"{d}: unreadable run output: {exc}") from None
    return scenario, records


def compare_runs(dirs: list[Path], segment: str) -> tuple[list[str], dict[str, dict]]:
    """Box statistics per run for ``segment``; columns are labelled ``dir:mode``."""
    if len(dirs) < 2:
        raise CliError("compare needs at least two run directories")
    runs = [(d, *_read_run(d)) for d in dirs]
    geometry = runs[0][1].geometry()
    for d, sc, _ in runs[1:]:
        if sc.geometry() != geometry:
            raise CliError(f"{d}: scenario geometry differs from {runs[0][0]}")
    # Switch windows are taken from the ideal role trace of the smallest
    # active set among the runs, so an all-active run gets the same windows.
    k = min(sc.allocation.k for _, sc, _ in runs)
    ref = runs[0][1]
    labels, columns = [], {}
    for d, sc, recs in runs:
        label = f"{d.name}:{sc.mode}"
        while label in columns:
            label += "'"
        s = summarize(recs, k=k, focus=sc.focus_nodes, switch_window=ref.switch_window,
                      dim=sc.dim, segments=(segment,))
        labels.append(label)
        columns[label] = next(iter(s.values()))[segment]
    return labels, columns


def compare_table(labels: list[str], columns: dict[str, dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "statistic", *labels])
    for metric in ("raw_error", "tracking_error"):
        for stat in STAT_FIELDS:
            row = [metric, stat]
            for label in labels:
                col = columns[label]
                v = None if col is None else getattr(col[metric], stat)
                row.append("" if v is None else (str(v) if stat == "count" else f"{v:.6f}"))
            w.writerow(row)
    return buf.getvalue()


def _pretty(table: str) -> str:
    rows = list(csv.reader(io.StringIO(table)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(wd) for c, wd in zip(r, widths)).rstrip() for r in rows)


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        labels, columns = compare_runs([Path(d) for d in args.dirs], args.segment)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    table = compare_table(labels, columns)
    atomic_write(Path(args.out) / "compare.csv", table)
    print(f"segment: {args.segment}")
    print(_pretty(table))
    absent = [l for l in labels if columns[l] is None]
    if absent:
        print(f"absent segment for: {', '.join(absent)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


SWEEP_COLUMNS = (
    "param", "value", "runs", "collapsed", "raw_median", "raw_q1", "raw_q3",
    "tracking_median", "active_raw_median", "listener_raw_median",
)


def _sweep_cell(payload: tuple[dict, str, float, int]) -> tuple[float, int, list[tuple[str, float, float]] | None]:
    data, param, value, seed = payload
    scenario = Scenario.from_dict(data).replace(**{param: value, "seed": seed})
    try:
        result = run_scenario(scenario)
    except SimulationCollapse:
        return value, seed, None
    focus = set(scenario.focus_nodes)
    return value, seed, [(r.role.value, r.raw_error, r.tracking_error) for r in result.records if r.node in focus]


def parse_sweep_values(scenario: Scenario, param: str, raw: str) -> list:
    try:
        current = get_path(scenario.to_dict(), param)
    except (KeyError, IndexError, ValueError):
        raise CliError(f"unknown scenario parameter {param!r}") from None
    if isinstance(current, bool) or not isinstance(current, (int, float)):
        raise CliError(f"parameter {param!r} is not numeric")
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise CliError("empty values list")
    try:
        values = [int(v) if isinstance(current, int) else float(v) for v in items]
    except ValueError:
        raise CliError(f"non-numeric value in {raw!r}") from None
    for v in values:
        scenario.replace(**{param: v})  # validate every cell up front
    return values


def run_sweep(scenario: Scenario, param: str, values: list, seeds: int, jobs: int) -> str:
    data = scenario.to_dict()
    cells = [(data, param, v, s) for v in values for s in range(seeds)]
    with ProcessPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(_sweep_cell, cells))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for v in values:
        rows = [r for r in results if r[0] == v]
        samples = [x for _, _, recs in rows if recs is not None for x in recs]
        collapsed = sum(recs is None for _, _, recs in rows)

        def med(xs):
            return f"{float(np.median(xs)):.6f}" if xs else ""

        raw = [x[1] for x in samples]
        st = box_stats(raw)
        w.writerow([
            param, v, len(rows), collapsed, med(raw),
            "" if st is None else f"{st.q1:.6f}", "" if st is None else f"{st.q3:.6f}",
            med([x[2] for x in samples]),
            med([x[1] for x in samples if x[0] == Role.ACTIVE.value]),
            med([x[1] for x in samples if x[0] == Role.LISTENER.value]),
        ])
    return buf.getvalue()


def cmd_sweep(args: argparse.Namespace) -> int:
    try:
        scenario = load(args.scenario)
        if args.seeds < 1:
            raise CliError("--seeds must be at least 1")
        values = parse_sweep_values(scenario, args.param, args.values)
    except (ScenarioError, CliError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    jobs = args.jobs or os.cpu_count() or 1
    table = run_sweep(scenario, args.param, values, args.seeds, jobs)
    atomic_write(Path(args.out) / "sweep.csv", table)
    print(_pretty(table))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uwb-dynroles", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", required=True, metavar="PATH")
    r.add_argument("--out", required=True, metavar="DIR")
    r.add_argument("--set", action="append", metavar="K=V", help="override a dotted scenario field")
    r.add_argument("--events", action="store_true", help="also write events.ndjson")
    r.add_argument("--dump-costs", action="store_true", help="write every subset cost to costs.ndjson")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare completed runs")
    c.add_argument("dirs", nargs="+", metavar="DIR")
    c.add_argument("--segment", choices=SEGMENTS, default="all")
    c.add_argument("--out", default=".", metavar="DIR", help="where compare.csv goes")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="sweep one numeric parameter over seeds")
    s.add_argument("--scenario", required=True, metavar="PATH")
    s.add_argument("--param", required=True)
    s.add_argument("--values", required=True, metavar="CSVLIST")
    s.add_argument("--seeds", type=int, default=1)
    s.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    s.add_argument("--out", default=".", metavar="DIR", help="where sweep.csv goes")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
