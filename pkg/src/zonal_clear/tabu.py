"""Per-zone tabu search over non-convex bid acceptance with flows held fixed.

With the line flows frozen, every zone is an independent problem: a
candidate acceptance only changes that zone's net injection, so scoring it
means re-clearing the zone's own periods. The search keeps two regions, a
relaxed one (balance, bounds, single start and links) and a compatible one
whose candidates are pushed through ``repair_compatibility`` first. Each
region has its own FIFO tabu list; a shared global list remembers the
surplus of every solution taken so the search never walks back onto a
value it has already visited.
"""

from __future__ import annotations

import math
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .curves import CurveBank
from .model import Instance, NonConvexBid

REJECTED = None


@dataclass(frozen=True)
class TabuMove:
    bid: str
    start: Optional[int]    # None means the bid is rejected


class LocalTabuList:
    """FIFO of recent moves with a fixed capacity."""

    def __init__(self, tenure: int):
        self.tenure = tenure
        self._q: deque = deque(maxlen=max(tenure, 0))

    def push(self, move: TabuMove) -> None:
        if self.tenure > 0:
            self._q.append(move)

    def __contains__(self, move: TabuMove) -> bool:
        return move in self._q

    def __len__(self) -> int:
        return len(self._q)

    def clear(self) -> None:
        self._q.clear()


class GlobalTabuList:
    """Surplus values already taken; equality is up to ``tol``."""

    def __init__(self, tol: float = 1e-6):
        self.tol = tol
        self._vals: list[float] = []
        self._sorted = np.empty(0)

    def add(self, value: float) -> None:
        self._vals.append(value)
        self._sorted = np.sort(np.asarray(self._vals))

    def __contains__(self, value: float) -> bool:
        if not self._vals or not math.isfinite(value):
            return False
        i = int(np.searchsorted(self._sorted, value))
        for j in (i - 1, i):
            if 0 <= j < len(self._sorted) and abs(self._sorted[j] - value) <= self.tol:
                return True
        return False

    def __len__(self) -> int:
        return len(self._vals)


@dataclass(frozen=True)
class TabuConfig:
    tenure: int = 7
    radius_max: Optional[int] = None    # default min(2 * bids, 50)
    radius_min: int = 5
    radius_step: Optional[int] = None   # default ceil(radius_max / 10)
    cond1: int = 200                    # iterations between jumps
    max_jumps: int = 4
    eligibility: str = "all"            # "all" or "as_written"
    global_tol: float = 1e-6
    compat_tol: float = 1e-7

    def __post_init__(self):
        if self.eligibility not in ("all", "as_written"):
            raise ValueError(f"unknown eligibility rule {self.eligibility!r}")
        if self.tenure < 0 or self.radius_min < 1 or self.cond1 < 1 or self.max_jumps < 0:
            raise ValueError("tabu parameters out of range")


def zone_rng(seed: int, zone: str, round_no: int = 0) -> np.random.Generator:
    """Independent stream per (master seed, zone, outer round)."""
    return np.random.default_rng([int(seed) & (2**64 - 1), zlib.crc32(zone.encode()), round_no])


# ----------------------------------------------------------------------
# zone problem


class ZoneProblem:
    """One zone's clearing with flows fixed; evaluations are memoised."""

    def __init__(self, instance: Instance, zone: str, flows: np.ndarray,
                 bank: Optional[CurveBank] = None, compat_tol: float = 1e-7):
        self.instance = instance
        self.zone = zone
        self.z = instance.zone_index[zone]
        self.T = instance.n_periods
        self.bank = bank if bank is not None else CurveBank(instance)
        self.rows = self.bank.rows_of_zone(self.z)
        self.lo = self.bank.lo[self.rows]
        self.hi = self.bank.hi[self.rows]
        self.bids: tuple[NonConvexBid, ...] = instance.bids_in_zone(zone)
        self.ids = tuple(b.id for b in self.bids)
        self.by_id = {b.id: b for b in self.bids}
        self.children = {b.id: tuple(c for c in instance.children.get(b.id, ())) for b in self.bids}
        self.compat_tol = compat_tol
        self._profiles = {(b.id, s): np.asarray(b.profiles[s], dtype=float)
                          for b in self.bids for s in b.allowed_starts}
        self._value = {(b.id, s): b.price * math.fsum(b.profiles[s])
                       for b in self.bids for s in b.allowed_starts}
        f = np.asarray(flows, dtype=float)
        if f.size:
            self.flow_injection = -(instance.incidence @ f)[self.z]
        else:
            self.flow_injection = np.zeros(self.T)
        self._memo: dict[tuple, tuple[float, Optional[np.ndarray]]] = {}
        self.evaluations = 0

    def key(self, acc) -> tuple:
        return tuple(acc[i] for i in self.ids)

    def evaluate(self, acc) -> tuple[float, Optional[np.ndarray]]:
        """Zone surplus (hourly welfare plus accepted bid value) and prices.

        Returns (-inf, None) when the zone cannot clear.
        """
        k = self.key(acc)
        hit = self._memo.get(k)
        if hit is not None:
            return hit
        self.evaluations += 1
        inj = self.flow_injection.copy()
        value = 0.0
        for i, s in zip(self.ids, k):
            if s is not None:
                inj -= self._profiles[i, s]
                value += self._value[i, s]
        if np.any(inj < self.lo - 1e-9) or np.any(inj > self.hi + 1e-9):
            out = (-math.inf, None)
        else:
            w, _, price = self.bank.solve(np.clip(inj, self.lo, self.hi), self.rows)
            out = (float(np.sum(w)) + value, price)
        self._memo[k] = out
        return out

    def bid_value(self, bid_id: str, start: int, prices: np.ndarray) -> float:
        b = self.by_id[bid_id]
        return float(np.dot(b.price - prices, self._profiles[bid_id, start]))

    def best_start(self, bid_id: str, prices: np.ndarray) -> tuple[int, float]:
        best = None
        for s in self.by_id[bid_id].allowed_starts:
            v = self.bid_value(bid_id, s, prices)
            if best is None or v > best[1]:
                best = (s, v)
        return best

    def violations(self, acc, prices: np.ndarray) -> list[tuple[float, str, int]]:
        """Rejected bids that would profit at some start while their mother
        (if any) is accepted, as (surplus, bid, best start), worst first."""
        out = []
        for b in self.bids:
            if acc[b.id] is not None:
                continue
            if b.mother is not None and acc[b.mother] is None:
                continue
            s, v = self.best_start(b.id, prices)
            if v > self.compat_tol:
                out.append((v, b.id, s))
        out.sort(key=lambda r: (-r[0], r[1]))
        return out

    def compatible(self, acc) -> bool:
        g, prices = self.evaluate(acc)
        return prices is not None and not self.violations(acc, prices)


# ----------------------------------------------------------------------
# operations


def initial_solution(bids, rng: np.random.Generator) -> dict[str, Optional[int]]:
    """Every bid accepted at a uniformly drawn allowed start."""
    return {b.id: int(b.allowed_starts[int(rng.integers(len(b.allowed_starts)))]) for b in bids}


def apply_move(problem: ZoneProblem, acc, move: TabuMove, rng: np.random.Generator) -> dict:
    """Apply ``move`` and restore the link relation: rejection cascades to
    all descendants, acceptance pulls in rejected ancestors at random starts."""
    new = dict(acc)
    new[move.bid] = move.start
    if move.start is None:
        stack = [move.bid]
        while stack:
            for c in problem.children.get(stack.pop(), ()):
                if new[c] is not None:
                    new[c] = None
                stack.append(c)
    else:
        b = problem.by_id[move.bid]
        while b.mother is not None and new[b.mother] is None:
            m = problem.by_id[b.mother]
            new[m.id] = int(m.allowed_starts[int(rng.integers(len(m.allowed_starts)))])
            b = m
    return new


def neighborhood(problem: ZoneProblem, acc, prices: np.ndarray, radius: int,
                 rng: np.random.Generator, eligibility: str = "all") -> list[tuple[TabuMove, dict]]:
    """Up to ``radius`` single-bid moves from ``acc``.

    Move kinds: reject an accepted bid, accept a rejected bid at a random
    start, shift an accepted bid to another start. Under "as_written" only
    positive-surplus bids are rejected and only negative-surplus bids are
    accepted; "all" drops the surplus filter. If no move qualifies, random
    single-bid moves are drawn instead so the search never stalls.
    """
    moves: list[TabuMove] = []
    for b in problem.bids:
        cur = acc[b.id]
        if cur is not None:
            if eligibility == "all" or problem.bid_value(b.id, cur, prices) > 0.0:
                moves.append(TabuMove(b.id, None))
            others = [s for s in b.allowed_starts if s != cur]
            if others:
                moves.append(TabuMove(b.id, int(others[int(rng.integers(len(others)))])))
        else:
            s = int(b.allowed_starts[int(rng.integers(len(b.allowed_starts)))])
            if eligibility == "all" or problem.bid_value(b.id, s, prices) < 0.0:
                moves.append(TabuMove(b.id, s))
    if not moves and problem.bids:
        seen = set()
        for _ in range(radius):
            b = problem.bids[int(rng.integers(len(problem.bids)))]
            options = [s for s in (None, *b.allowed_starts) if s != acc[b.id]]
            m = TabuMove(b.id, options[int(rng.integers(len(options)))])
            if m not in seen:
                seen.add(m)
                moves.append(m)
    if len(moves) > radius:
        pick = rng.permutation(len(moves))[:radius]
        moves = [moves[i] for i in sorted(pick)]
    return [(m, apply_move(problem, acc, m, rng)) for m in moves]


def repair_compatibility(problem: ZoneProblem, acc, rng: Optional[np.random.Generator] = None
                         ) -> tuple[dict, bool]:
    """Accept violating bids one at a time until none is left.

    Each step accepts the most profitable violator at its best start,
    skipping violators whose acceptance would leave the zone unclearable.
    Returns (acceptance, ok); ok is False when the state cannot be repaired,
    in which case the input is returned unchanged.
    """
    cur = dict(acc)
    for _ in range(len(problem.bids) + 1):
        g, prices = problem.evaluate(cur)
        if prices is None:
            return dict(acc), False
        viol = problem.violations(cur, prices)
        if not viol:
            return cur, True
        for _, bid_id, start in viol:
            cand = dict(cur)
            cand[bid_id] = start
            if problem.evaluate(cand)[1] is not None:
                cur = cand
                break
        else:
            return dict(acc), False
    return dict(acc), False


def adaptive_radius(streak: int, radius_max: int, radius_min: int, step: int) -> int:
    """Neighbourhood size after ``streak`` non-improving iterations."""
    radius_min = min(radius_min, radius_max)
    return max(radius_min, radius_max - step * streak)


def radius_bounds(n_bids: int, config: TabuConfig) -> tuple[int, int, int]:
    rmax = config.radius_max if config.radius_max is not None else min(2 * n_bids, 50)
    rmax = max(rmax, 1)
    step = config.radius_step if config.radius_step is not None else max(1, math.ceil(rmax / 10))
    return rmax, min(config.radius_min, rmax), step


@dataclass
class ZoneResult:
    zone: str
    acceptance: dict
    surplus: float
    prices: Optional[np.ndarray]
    compatible: bool
    feasible: bool
    iterations: int = 0
    jumps: int = 0
    evaluations: int = 0
    # (iteration, region, surplus, radius, move taken, move made tabu)
    trace: list = field(default_factory=list)


def search_zone(problem: ZoneProblem, config: TabuConfig, rng: np.random.Generator,
                start: Optional[dict] = None, deadline: Optional[float] = None) -> ZoneResult:
    """Dual-region adaptive tabu search on one zone.

    ``start`` replaces the random initial solution (used for warm starts).
    ``deadline`` is a ``time.monotonic()`` value after which the search
    returns its best compatible solution so far.
    """
    if not problem.bids:
        g, prices = problem.evaluate({})
        return ZoneResult(problem.zone, {}, g, prices, prices is not None, prices is not None)

    rmax, rmin, rstep = radius_bounds(len(problem.bids), config)
    current = dict(start) if start is not None else initial_solution(problem.bids, rng)
    g_cur, p_cur = problem.evaluate(current)
    if p_cur is None:
        current = {i: None for i in problem.ids}
        g_cur, p_cur = problem.evaluate(current)
        if p_cur is None:
            return ZoneResult(problem.zone, current, -math.inf, None, False, False)

    lists = {"relaxed": LocalTabuList(config.tenure), "compatible": LocalTabuList(config.tenure)}
    gtl = GlobalTabuList(config.global_tol)
    gtl.add(g_cur)
    best = (g_cur, current)
    best_compat: Optional[tuple[float, dict]] = None

    def note_compat(g, acc):
        nonlocal best_compat
        if best_compat is None or g > best_compat[0] + 1e-12:
            best_compat = (g, acc)

    if problem.compatible(current):
        note_compat(g_cur, current)
    else:
        rep, ok = repair_compatibility(problem, current, rng)
        if ok:
            note_compat(problem.evaluate(rep)[0], rep)

    trace = []
    it = jumps = streak = 0
    while True:
        phase_best = best[0]
        for _ in range(config.cond1):
            if deadline is not None and time.monotonic() > deadline:
                break
            it += 1
            radius = adaptive_radius(streak, rmax, rmin, rstep)
            cands = neighborhood(problem, current, p_cur, radius, rng, config.eligibility)
            picks = {}
            for region in ("relaxed", "compatible"):
                top = None
                for move, acc in cands:
                    if region == "compatible":
                        acc, ok = repair_compatibility(problem, acc, rng)
                        if not ok:
                            continue
                    g, prices = problem.evaluate(acc)
                    if prices is None or g in gtl:
                        continue
                    aspire = g > best[0] + config.global_tol
                    if move in lists[region] and not aspire:
                        continue
                    if top is None or g > top[0]:
                        top = (g, move, acc, prices)
                if top is not None:
                    picks[region] = top
            if not picks:
                break
            # compatible wins ties
            region = max(picks, key=lambda r: (picks[r][0], r == "compatible"))
            g, move, acc, prices = picks[region]
            reverse = TabuMove(move.bid, current[move.bid])
            lists[region].push(reverse)
            gtl.add(g)
            current, g_cur, p_cur = acc, g, prices
            if region == "compatible" or not problem.violations(acc, prices):
                note_compat(g, acc)
            if g > best[0] + config.global_tol:
                best = (g, acc)
                streak = 0
            else:
                streak += 1
            trace.append((it, region, g, radius, move, reverse))
        improved = best[0] > phase_best + config.global_tol
        if deadline is not None and time.monotonic() > deadline:
            break
        # stop at the jump cap, or once a jump has brought no improvement
        if jumps >= config.max_jumps or (jumps > 0 and not improved):
            break
        jumps += 1
        current = dict(best[1])
        g_cur, p_cur = problem.evaluate(current)
        streak = 0
        for lst in lists.values():
            lst.clear()

    if best_compat is None:
        for fallback in (best[1], {i: None for i in problem.ids}):
            rep, ok = repair_compatibility(problem, fallback, rng)
            if ok:
                note_compat(problem.evaluate(rep)[0], rep)
                break
    if best_compat is None:
        g, prices = problem.evaluate(best[1])
        return ZoneResult(problem.zone, dict(best[1]), g, prices, False, True,
                          it, jumps, problem.evaluations, trace)
    g, acc = best_compat
    return ZoneResult(problem.zone, dict(acc), g, problem.evaluate(acc)[1], True, True,
                      it, jumps, problem.evaluations, trace)
