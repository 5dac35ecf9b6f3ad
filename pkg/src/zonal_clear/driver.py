"""Adaptive tabu search (ATS) outer loop.

Alternates two half-problems: with line flows fixed, every zone runs its own
tabu search over non-convex bid acceptance; with acceptance fixed, the
price-flow QP returns optimal flows and prices. The QP's flows are fed back
to the zones until total surplus stops improving, after which a final
repair accepts any bid left paradoxically rejected at the final prices.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .curves import CurveBank, build_curves
from .flowqp import FlowPolytope, QpConfig, QpSolution, solve_price_flow
from .model import AuditReport, ClearingOutcome, Instance, audit
from .serialize import instance_digest
from .tabu import TabuConfig, ZoneProblem, repair_compatibility, search_zone, zone_rng

CONVERGED = "converged"
BUDGET = "budget"
CAP = "cap"
INFEASIBLE = "infeasible"
OPTIMAL = "optimal"


@dataclass(frozen=True)
class AtsConfig:
    seed: int = 0
    tabu: TabuConfig = TabuConfig()
    qp: QpConfig = QpConfig()
    max_outer: int = 10
    budget_seconds: float = 600.0
    improve_tol: float = 1e-3
    # share of the budget after which zone searches wrap up early
    search_fraction: float = 0.7
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.budget_seconds > 0:
            raise ValueError("budget_seconds must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass
class OuterStep:
    round: int
    search_surplus: float       # sum of zone surpluses at the fixed flows
    qp_surplus: float
    qp_residual: float
    accepted: bool
    search_seconds: float = 0.0
    qp_seconds: float = 0.0


@dataclass
class SolveResult:
    """Outcome of any solver in the package, ready for serialisation."""
    method: str
    instance_sha256: str
    feasible: bool
    acceptance: dict
    outcome: Optional[ClearingOutcome]
    audit: Optional[AuditReport]
    surplus: float
    termination: str
    seed: int = 0
    trace: list = field(default_factory=list)
    pre_repair_surplus: Optional[float] = None
    post_repair_surplus: Optional[float] = None
    seconds: float = 0.0
    stats: dict = field(default_factory=dict)


def worker_count(config_threads: Optional[int] = None) -> int:
    if config_threads is not None:
        return max(1, int(config_threads))
    try:
        return max(1, int(os.environ.get("ZONAL_CLEAR_THREADS", "1")))
    except ValueError:
        return 1


def _solution_result(method, instance, sol: QpSolution, termination, seed=0, digest=None) -> SolveResult:
    out = sol.outcome()
    rep = audit(instance, out, sol.acceptance)
    return SolveResult(method=method, instance_sha256=digest or instance_digest(instance),
                       feasible=rep.passed, acceptance=dict(sol.acceptance), outcome=out,
                       audit=rep, surplus=sol.surplus, termination=termination, seed=seed)


def infeasible_result(method: str, instance: Instance, reason: str, seed: int = 0) -> SolveResult:
    return SolveResult(method=method, instance_sha256=instance_digest(instance), feasible=False,
                       acceptance={}, outcome=None, audit=None, surplus=-math.inf,
                       termination=INFEASIBLE, seed=seed, stats={"reason": reason})


def final_repair(instance: Instance, sol: QpSolution, config: AtsConfig, curves, bank) -> QpSolution:
    """Accept bids left paradoxically rejected at the QP prices, re-solving
    the QP after each sweep until the compatibility families hold."""
    for _ in range(len(instance.bids) + 1):
        rep = audit(instance, sol.outcome(), sol.acceptance)
        if rep.passes((6, 7)):
            return sol
        acc = dict(sol.acceptance)
        changed = False
        for zone in instance.zones:
            problem = ZoneProblem(instance, zone, sol.flows, bank, compat_tol=config.tabu.compat_tol)
            if not problem.bids:
                continue
            sub = {i: acc[i] for i in problem.ids}
            fixed, ok = repair_compatibility(problem, sub)
            if ok and fixed != sub:
                acc.update(fixed)
                changed = True
        if not changed:
            return sol
        nxt = solve_price_flow(instance, acc, config.qp, curves, bank, start=sol.flows)
        if not nxt.feasible:
            return sol
        sol = nxt
    return sol


def solve_ats(instance: Instance, config: AtsConfig = AtsConfig()) -> SolveResult:
    """Run ATS within ``config.budget_seconds`` of wall-clock time."""
    t0 = time.monotonic()
    deadline = t0 + config.budget_seconds
    search_deadline = t0 + config.search_fraction * config.budget_seconds
    digest = instance_digest(instance)
    curves = build_curves(instance)
    bank = CurveBank(instance, curves)
    poly = FlowPolytope.from_instance(instance)
    if poly.empty_lines():
        return infeasible_result("ats", instance, "line flow bounds admit no feasible flow", config.seed)
    L, T = len(instance.lines), instance.n_periods
    flows = poly.project(np.zeros((L, T)))

    best: Optional[QpSolution] = None
    acc: Optional[dict] = None
    trace: list[OuterStep] = []
    termination = CAP
    workers = worker_count(config.threads)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rnd in range(config.max_outer):
            ts0 = time.monotonic()
            problems = [ZoneProblem(instance, z, flows, bank, compat_tol=config.tabu.compat_tol)
                        for z in instance.zones]

            def run(p, rnd=rnd):
                warm = None if acc is None else {i: acc[i] for i in p.ids}
                return search_zone(p, config.tabu, zone_rng(config.seed, p.zone, rnd),
                                   start=warm, deadline=search_deadline)

            results = list(pool.map(run, problems)) if pool else [run(p) for p in problems]
            ts_secs = time.monotonic() - ts0
            if not all(r.feasible for r in results):
                termination = CONVERGED if best is not None else INFEASIBLE
                break
            cand = {}
            for r in results:
                cand.update(r.acceptance)
            qp0 = time.monotonic()
            sol = solve_price_flow(instance, cand, config.qp, curves, bank, start=flows)
            qp_secs = time.monotonic() - qp0
            improved = sol.feasible and (best is None or sol.surplus > best.surplus + config.improve_tol)
            trace.append(OuterStep(rnd + 1, float(sum(r.surplus for r in results)), sol.surplus,
                                   sol.kkt_residual, improved, ts_secs, qp_secs))
            if not improved:
                termination = CONVERGED if best is not None else INFEASIBLE
                break
            moved = float(np.max(np.abs(sol.flows - flows))) if sol.flows.size else 0.0
            best, acc, flows = sol, dict(sol.acceptance), sol.flows
            if moved <= 1e-9:
                termination = CONVERGED
                break
            if time.monotonic() >= search_deadline:
                termination = BUDGET
                break
    finally:
        if pool:
            pool.shutdown()

    if best is None:
        # every zone search failed at the projected start flows; try all-rejected
        rejected = {b.id: None for b in instance.bids}
        sol = solve_price_flow(instance, rejected, config.qp, curves, bank, start=flows)
        if not sol.feasible:
            return infeasible_result("ats", instance, "no clearable acceptance found", config.seed)
        best = sol
    pre = best.surplus
    if time.monotonic() < deadline:
        best = final_repair(instance, best, config, curves, bank)
    res = _solution_result("ats", instance, best, termination, config.seed, digest)
    res.trace = trace
    res.pre_repair_surplus = pre
    res.post_repair_surplus = best.surplus
    res.seconds = time.monotonic() - t0
    return res


def surplus_gap(result_a: SolveResult, result_b: SolveResult) -> float:
    """Surplus of ``result_a`` minus surplus of ``result_b``."""
    if result_a.instance_sha256 != result_b.instance_sha256:
        raise ValueError("results belong to different instances")
    return result_a.surplus - result_b.surplus
