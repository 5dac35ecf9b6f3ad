"""Command line: generate instances, solve, check results, run benchmarks.

Exit codes: 0 feasible result (or passing check), 1 failing check,
2 infeasible instance, 3 no solution within the limits, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .driver import AtsConfig, SolveResult, solve_ats
from .flowqp import QpConfig
from .instgen import GRID_ALPHAS, GRID_ZONES, GenSpec, generate
from .model import InstanceError, Tolerances, audit
from .oracle import EnumerationCapExceeded, OracleLimits, heuristic_cut_reference, solve_exact
from .serialize import (FormatError, dumps, instance_digest, instance_to_dict, load_instance,
                        outcome_from_result, result_to_dict)
from .tabu import TabuConfig

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INFEASIBLE = 2
EXIT_NO_SOLUTION = 3
EXIT_USAGE = 64

METHODS = ("ats", "exact", "heuristic-cut")
ROW_COLUMNS = ("set", "case", "method", "surplus", "seconds", "feasible", "audit_pass")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# configuration


def _dataclass_from(cls, data: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {where} settings: {exc}") from None


def load_config(path: Optional[str]) -> dict:
    """Read a JSON config with optional sections "ats", "tabu", "qp", "oracle"."""
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(data) - {"ats", "tabu", "qp", "oracle"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return data


def build_configs(cfg: dict, seed: Optional[int], budget: Optional[float]) -> tuple[AtsConfig, OracleLimits]:
    qp = _dataclass_from(QpConfig, cfg.get("qp", {}), "qp")
    tabu = _dataclass_from(TabuConfig, cfg.get("tabu", {}), "tabu")
    ats_data = dict(cfg.get("ats", {}))
    for key in ("tabu", "qp"):
        if key in ats_data:
            raise UsageError(f"put {key} settings in their own section")
    ats = _dataclass_from(AtsConfig, ats_data, "ats")
    ats = replace(ats, tabu=tabu, qp=qp)
    if seed is not None:
        ats = replace(ats, seed=seed)
    if budget is not None:
        if not budget > 0:
            raise UsageError("--budget-seconds must be positive")
        ats = replace(ats, budget_seconds=budget)
    oracle = _dataclass_from(OracleLimits, dict(cfg.get("oracle", {})), "oracle")
    oracle = replace(oracle, qp=qp)
    return ats, oracle


def run_method(method: str, instance, ats: AtsConfig, oracle: OracleLimits) -> SolveResult:
    t0 = time.monotonic()
    if method == "ats":
        res = solve_ats(instance, ats)
    elif method == "exact":
        res = solve_exact(instance, oracle)
    elif method == "heuristic-cut":
        res = heuristic_cut_reference(instance, oracle)
    else:
        raise UsageError(f"unknown method {method!r}")
    res.seed = ats.seed
    res.seconds = time.monotonic() - t0
    return res


def exit_code_for(res: SolveResult) -> int:
    if res.feasible:
        return EXIT_OK
    if res.outcome is None and res.termination != "infeasible":
        return EXIT_NO_SOLUTION
    return EXIT_INFEASIBLE


# ----------------------------------------------------------------------
# commands


def _write_text(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    path = Path(out)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def grid_seed(seed: int, zones: int, alpha: float, case: int) -> int:
    """Per-case seed of the 3x3 grid, stable across releases."""
    return (seed * 1_000_003 + zones * 10_007 + int(alpha) * 101 + case) % 2**63


def cmd_gen(args) -> int:
    def spec(zones, alpha, seed):
        return GenSpec(zone_count=zones, alpha=alpha, seed=seed, scale=args.scale,
                       n_periods=args.periods, bids_per_zone=args.bids_per_zone,
                       max_starts=args.max_starts, segments_per_period=args.segments)

    try:
        if args.grid:
            if args.out is None:
                raise UsageError("--grid needs --out DIR")
            root = Path(args.out)
            for zones in GRID_ZONES:
                for alpha in GRID_ALPHAS:
                    cell = root / f"z{zones}_a{alpha}"
                    cell.mkdir(parents=True, exist_ok=True)
                    for case in range(args.cases):
                        inst = generate(spec(zones, alpha, grid_seed(args.seed, zones, alpha, case)))
                        (cell / f"case_{case:03d}.json").write_text(dumps(instance_to_dict(inst)))
            return EXIT_OK
        inst = generate(spec(args.zones, args.alpha, args.seed))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write_text(dumps(instance_to_dict(inst)), args.out)
    return EXIT_OK


def _load(path):
    try:
        return load_instance(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    except (FormatError, InstanceError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_solve(args) -> int:
    inst = _load(args.instance)
    ats, oracle = build_configs(load_config(args.config), args.seed, args.budget_seconds)
    try:
        res = run_method(args.method, inst, ats, oracle)
    except EnumerationCapExceeded as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_NO_SOLUTION
    _write_text(dumps(result_to_dict(res, inst, args.record_times)), args.out)
    if res.audit is not None and not res.audit.passed:
        print(f"audit failed families: {res.audit.failed}", file=sys.stderr)
    return exit_code_for(res)


def check_files(instance_path, result_path) -> tuple[bool, str]:
    """Audit a result file against its instance; never raises."""
    try:
        inst = load_instance(instance_path)
    except Exception as exc:  # noqa: BLE001 - the report must always be produced
        return False, f"instance unreadable: {exc}"
    try:
        with open(result_path, encoding="utf-8") as fh:
            data = json.load(fh)
    except Exception as exc:  # noqa: BLE001
        return False, f"result unreadable: {exc}"
    try:
        if not isinstance(data, dict):
            return False, "result malformed: top level must be an object"
        lines = []
        ok = True
        if data.get("instance_sha256") != instance_digest(inst):
            ok = False
            lines.append("instance_sha256 does not match the instance")
        if data.get("feasible") is False and "prices_eur_mwh" not in data:
            return False, "\n".join(lines + ["result reports no feasible solution"])
        acc, outcome = outcome_from_result(data, inst)
        # hand-edited files may hold huge numbers; overflow just means failure
        with np.errstate(all="ignore"):
            report = audit(inst, outcome, acc, Tolerances())
        lines.append(str(report))
        ok = ok and report.passed
        lines.append("PASS" if ok else "FAIL")
        return ok, "\n".join(lines)
    except Exception as exc:  # noqa: BLE001
        return False, f"result malformed: {exc}\nFAIL"


def cmd_check(args) -> int:
    ok, text = check_files(args.instance, args.result)
    print(text)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ----------------------------------------------------------------------
# bench


def _cases(root: Path) -> list[tuple[str, Path]]:
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    out = []
    for d in subdirs:
        out.extend((d.name, f) for f in sorted(d.glob("*.json")))
    out.extend((root.name, f) for f in sorted(root.glob("*.json")))
    return out


def _bench_one(job):
    set_name, path, method, ats, oracle = job
    inst = load_instance(path)
    try:
        res = run_method(method, inst, ats, oracle)
    except EnumerationCapExceeded:
        return dict(set=set_name, case=path.stem, method=method, surplus=None, seconds=None,
                    feasible=False, audit_pass=False, zones=len(inst.zones), alpha=_alpha_of(inst, set_name))
    return dict(set=set_name, case=path.stem, method=method, surplus=res.surplus if res.feasible else None,
                seconds=res.seconds, feasible=res.feasible,
                audit_pass=bool(res.audit is not None and res.audit.passed),
                zones=len(inst.zones), alpha=_alpha_of(inst, set_name))


def _alpha_of(inst, set_name) -> str:
    gen = inst.meta.get("generator") if isinstance(inst.meta, dict) else None
    if isinstance(gen, dict) and "alpha" in gen:
        return _fmt_num(float(gen["alpha"]))
    m = re.search(r"_a([0-9.]+)", set_name)
    return m.group(1) if m else ""


def _fmt_num(v) -> str:
    return f"{v:g}" if float(v).is_integer() else f"{v:.6f}"


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}"


def bench_rows(case_list, methods, ats, oracle, jobs: int = 1) -> list[dict]:
    work = [(s, p, m, ats, oracle) for s, p in case_list for m in methods]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_bench_one, work))
    return [_bench_one(w) for w in work]


def write_rows_csv(rows, timing: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_COLUMNS)
    for r in rows:
        secs = f"{r['seconds']:.3f}" if timing and r["seconds"] is not None else ""
        w.writerow([r["set"], r["case"], r["method"], _fmt(r["surplus"]), secs,
                    int(r["feasible"]), int(r["audit_pass"])])
    return buf.getvalue()


def aggregate(rows, methods) -> list[dict]:
    """One row per (zones, alpha): mean surplus difference of ATS against
    the reference method and mean time of every method."""
    ref = next((m for m in ("heuristic-cut", "exact") if m in methods), None)
    cells: dict[tuple, dict] = {}
    for r in rows:
        cells.setdefault((r["zones"], r["alpha"]), {}).setdefault(r["case"] + "@" + r["set"], {})[r["method"]] = r
    out = []
    for (zones, alpha) in sorted(cells, key=lambda k: (k[0], float(k[1]) if k[1] else 0.0)):
        cases = cells[zones, alpha]
        row = {"zones": zones, "alpha": alpha, "cases": len(cases)}
        diffs = []
        for c in cases.values():
            if "ats" in c and ref in c and c["ats"]["surplus"] is not None and c[ref]["surplus"] is not None:
                diffs.append(c["ats"]["surplus"] - c[ref]["surplus"])
        row["mean_surplus_difference"] = sum(diffs) / len(diffs) if diffs else None
        for m in methods:
            secs = [c[m]["seconds"] for c in cases.values() if m in c and c[m]["seconds"] is not None]
            row[f"mean_seconds_{m}"] = sum(secs) / len(secs) if secs else None
        out.append(row)
    return out


def write_aggregate_csv(agg, methods, timing: bool) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["zones", "alpha", "cases", "mean_surplus_difference"] + [f"mean_seconds_{m}" for m in methods]
    w.writerow(header)
    for r in agg:
        secs = [f"{r[f'mean_seconds_{m}']:.3f}" if timing and r[f"mean_seconds_{m}"] is not None else ""
                for m in methods]
        w.writerow([r["zones"], r["alpha"], r["cases"], _fmt(r["mean_surplus_difference"])] + secs)
    return buf.getvalue()


def cmd_bench(args) -> int:
    root = Path(args.dir)
    if not root.is_dir():
        raise UsageError(f"--dir {root} is not a directory")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    ats, oracle = build_configs(load_config(args.config), args.seed, args.budget_seconds)
    case_list = _cases(root)
    try:
        rows = bench_rows(case_list, methods, ats, oracle, args.jobs)
    except (FormatError, InstanceError) as exc:
        raise UsageError(str(exc)) from None
    timing = args.timing == "wall"
    _write_text(write_rows_csv(rows, timing), args.out)
    agg_path = args.aggregate
    if agg_path is None and args.out not in (None, "-"):
        p = Path(args.out)
        agg_path = str(p.with_name(p.stem + "_aggregate" + p.suffix))
    if agg_path is not None:
        _write_text(write_aggregate_csv(aggregate(rows, methods), methods, timing), agg_path)
    return EXIT_OK


# ----------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zonal-clear", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate instances")
    g.add_argument("--zones", type=int, default=2)
    g.add_argument("--alpha", type=float, default=100.0, help="line capacity scale in MW")
    g.add_argument("--scale", type=float, default=0.01, help="fraction of full-size bid counts")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--periods", type=int, default=24)
    g.add_argument("--bids-per-zone", type=int, default=None)
    g.add_argument("--max-starts", type=int, default=6)
    g.add_argument("--segments", type=int, default=None, help="segments per zone-period")
    g.add_argument("--grid", action="store_true", help="emit the 3x3 zones-by-alpha grid")
    g.add_argument("--cases", type=int, default=50, help="cases per grid cell")
    g.add_argument("--out", default=None, help="file (or directory with --grid); stdout if omitted")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve one instance")
    s.add_argument("instance")
    s.add_argument("--method", choices=METHODS, default="ats")
    s.add_argument("--config", default=None, help="JSON config file")
    s.add_argument("--budget-seconds", type=float, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--record-times", action="store_true", help="store wall times in the result")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("check", help="audit a result file")
    c.add_argument("instance")
    c.add_argument("result")
    c.set_defaults(func=cmd_check)

    b = sub.add_parser("bench", help="run methods over a directory of instances")
    b.add_argument("--dir", required=True)
    b.add_argument("--methods", default="ats,heuristic-cut")
    b.add_argument("--out", default=None, help="per-case CSV; stdout if omitted")
    b.add_argument("--aggregate", default=None, help="aggregate CSV (default: <out>_aggregate.csv)")
    b.add_argument("--timing", choices=("wall", "none"), default="wall")
    b.add_argument("--config", default=None)
    b.add_argument("--seed", type=int, default=None)
    b.add_argument("--budget-seconds", type=float, default=None)
    b.add_argument("--jobs", type=int, default=int(os.environ.get("ZONAL_CLEAR_THREADS", "1") or 1))
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"zonal-clear: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
