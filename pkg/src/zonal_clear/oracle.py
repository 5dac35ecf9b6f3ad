"""Exact reference solvers for small instances.

Both solvers search acceptance vectors directly and hand each one to the
price-flow QP. Bids are visited mothers-first, then by id, and every bid's
options are tried as rejected first, then by increasing start period, so
the search order, and with it tie-breaking, does not depend on the order
in which bids appear in the instance.

Branch and bound uses one fact about the QP value V as a function of the
fixed non-convex volumes: V is concave and its supergradient is the vector
of zone prices. Accepting further bids on top of a reference vector can
therefore add at most the sum of their positive surpluses at the
reference prices.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .curves import CurveBank, build_curves
from .driver import SolveResult, infeasible_result
from .flowqp import QpConfig, QpSolution, solve_price_flow
from .model import AuditReport, Instance, NonConvexBid, audit, bid_surplus
from .serialize import instance_digest

OPTIMAL = "optimal"


class EnumerationCapExceeded(RuntimeError):
    """The instance is too large for the configured enumeration cap."""


@dataclass(frozen=True)
class OracleLimits:
    cap: int = 10**6
    method: str = "bnb"          # "bnb" or "enumerate"
    qp: QpConfig = QpConfig()

    def __post_init__(self):
        if self.method not in ("bnb", "enumerate"):
            raise ValueError(f"unknown oracle method {self.method!r}")
        if self.cap < 1:
            raise ValueError("cap must be positive")


def search_order(instance: Instance) -> list[NonConvexBid]:
    """Bids with every mother ahead of its children, ties by id."""
    placed: set[str] = set()
    order: list[NonConvexBid] = []
    pending = sorted(instance.bids, key=lambda b: b.id)
    while pending:
        ready = [b for b in pending if b.mother is None or b.mother in placed]
        for b in ready:
            placed.add(b.id)
        order.extend(ready)
        pending = [b for b in pending if b.id not in placed]
    return order


def vector_count(instance: Instance) -> int:
    return math.prod(len(b.profiles) + 1 for b in instance.bids)


def _key(order, acc) -> tuple:
    return tuple(-1 if acc[b.id] is None else acc[b.id] for b in order)


class _Evaluator:
    """Memoised QP solves plus full audits of acceptance vectors."""

    def __init__(self, instance: Instance, limits: OracleLimits):
        self.instance = instance
        self.limits = limits
        self.curves = build_curves(instance)
        self.bank = CurveBank(instance, self.curves)
        self.order = search_order(instance)
        self._memo: dict[tuple, tuple[QpSolution, Optional[AuditReport]]] = {}

    @property
    def solves(self) -> int:
        return len(self._memo)

    def __call__(self, acc, start=None) -> tuple[QpSolution, Optional[AuditReport]]:
        k = _key(self.order, acc)
        hit = self._memo.get(k)
        if hit is None:
            if len(self._memo) >= self.limits.cap:
                raise EnumerationCapExceeded(f"more than {self.limits.cap} QP solves needed")
            sol = solve_price_flow(self.instance, acc, self.limits.qp, self.curves, self.bank, start=start)
            rep = audit(self.instance, sol.outcome(), acc) if sol.feasible else None
            hit = (sol, rep)
            self._memo[k] = hit
        return hit


class _Incumbent:
    def __init__(self, order):
        self.order = order
        self.sol: Optional[QpSolution] = None

    @property
    def value(self) -> float:
        return -math.inf if self.sol is None else self.sol.surplus

    def offer(self, sol: QpSolution) -> None:
        if self.sol is None or sol.surplus > self.sol.surplus + 1e-9:
            self.sol = sol
        elif abs(sol.surplus - self.sol.surplus) <= 1e-9:
            if _key(self.order, sol.acceptance) < _key(self.order, self.sol.acceptance):
                self.sol = sol


def _links_ok(order, acc) -> bool:
    return all(acc[b.id] is None or b.mother is None or acc[b.mother] is not None for b in order)


def _enumerate(ev: _Evaluator, feasible) -> _Incumbent:
    order = ev.order
    inc = _Incumbent(order)
    options = [(None, *b.allowed_starts) for b in order]
    for combo in itertools.product(*options):
        acc = {b.id: s for b, s in zip(order, combo)}
        if not _links_ok(order, acc):
            continue
        sol, rep = ev(acc)
        if feasible(acc, sol, rep):
            inc.offer(sol)
    return inc


def _branch_and_bound(ev: _Evaluator, feasible, cuts=()) -> _Incumbent:
    order = ev.order
    inst = ev.instance
    inc = _Incumbent(order)
    n = len(order)

    def cut_dead(acc, k) -> bool:
        # a cut is dead once all its bids are decided and rejected
        decided = {b.id for b in order[:k]}
        return any(all(i in decided and acc[i] is None for i in cut) for cut in cuts)

    def node(acc: dict, k: int, start) -> None:
        if cut_dead(acc, k):
            return
        # warm start from the parent node, whose acceptance differs in one bid
        sol, rep = ev(acc, start)
        if k == n or all(acc[b.id] is None for b in order[k:]):
            if feasible(acc, sol, rep) and all(any(acc[i] is not None for i in c) for c in cuts):
                inc.offer(sol)
        if k == n:
            return
        if sol.feasible:
            gain = 0.0
            for b in order[k:]:
                gain += max(0.0, max(bid_surplus(inst, b, s, sol.prices) for s in b.allowed_starts))
            bound = sol.surplus + gain
            if bound + 1e-7 * max(1.0, abs(bound)) <= inc.value:
                return
        b = order[k]
        for s in (None, *b.allowed_starts):
            if s is not None and b.mother is not None and acc[b.mother] is None:
                continue
            child = dict(acc)
            child[b.id] = s
            node(child, k + 1, sol.flows if sol.feasible else start)

    node({b.id: None for b in order}, 0, None)
    return inc


def _full_feasible(acc, sol, rep) -> bool:
    return sol.feasible and rep is not None and rep.passed


def _relaxed_feasible(acc, sol, rep) -> bool:
    others = [f for f in range(1, 16) if f not in (6, 7)]
    return sol.feasible and rep is not None and rep.passes(others)


def _search(ev, feasible, limits, cuts=()):
    if limits.method == "enumerate":
        if vector_count(ev.instance) > limits.cap:
            raise EnumerationCapExceeded(
                f"{vector_count(ev.instance)} acceptance vectors exceed the cap {limits.cap}")
        if cuts:
            inner = feasible
            feasible = lambda acc, sol, rep: inner(acc, sol, rep) and all(  # noqa: E731
                any(acc[i] is not None for i in c) for c in cuts)
        return _enumerate(ev, feasible)
    return _branch_and_bound(ev, feasible, cuts)


def _result(method, instance, ev, inc, t0, stats) -> SolveResult:
    if inc.sol is None:
        res = infeasible_result(method, instance, "no feasible acceptance vector")
        res.stats.update(stats, qp_solves=ev.solves)
        return res
    sol = inc.sol
    out = sol.outcome()
    rep = audit(instance, out, sol.acceptance)
    stats = dict(stats, qp_solves=ev.solves)
    return SolveResult(method=method, instance_sha256=instance_digest(instance), feasible=rep.passed,
                       acceptance=dict(sol.acceptance), outcome=out, audit=rep,
                       surplus=sol.surplus, termination=OPTIMAL, seconds=time.monotonic() - t0,
                       stats=stats)


def solve_exact(instance: Instance, limits: OracleLimits = OracleLimits()) -> SolveResult:
    """Maximum-surplus acceptance vector whose QP solution passes every
    audit family; optimal by exhaustion (pruned or not)."""
    t0 = time.monotonic()
    ev = _Evaluator(instance, limits)
    inc = _search(ev, _full_feasible, limits)
    return _result("exact", instance, ev, inc, t0, {"method": limits.method})


def heuristic_cut_reference(instance: Instance, limits: OracleLimits = OracleLimits()) -> SolveResult:
    """Solve without the compatibility families, then cut.

    While the best relaxed vector leaves some bids paradoxically rejected,
    require at least one of those bids to be accepted and search again.
    """
    t0 = time.monotonic()
    ev = _Evaluator(instance, limits)
    cuts: list[frozenset] = []
    while True:
        inc = _search(ev, _relaxed_feasible, limits, cuts)
        if inc.sol is None:
            return _result("heuristic-cut", instance, ev, inc, t0, {"cuts": len(cuts)})
        sol = inc.sol
        rep = ev(sol.acceptance)[1]
        if rep.passes((6, 7)):
            return _result("heuristic-cut", instance, ev, inc, t0, {"cuts": len(cuts)})
        cut = frozenset(_violators(instance, sol))
        if not cut or cut in cuts:
            # no acceptance can repair it; drop the vector by a cut on itself
            cut = frozenset(b.id for b in instance.bids if sol.acceptance[b.id] is None)
            if not cut or cut in cuts:
                inc.sol = None
                return _result("heuristic-cut", instance, ev, inc, t0, {"cuts": len(cuts)})
        cuts.append(cut)


def _violators(instance: Instance, sol: QpSolution, tol: float = 1e-6) -> list[str]:
    out = []
    for b in instance.bids:
        if sol.acceptance[b.id] is not None:
            continue
        if b.mother is not None and sol.acceptance[b.mother] is None:
            continue
        if max(bid_surplus(instance, b, s, sol.prices) for s in b.allowed_starts) > tol:
            out.append(b.id)
    return out
