"""Domain types for the zonal day-ahead clearing model, surplus evaluation and
the feasibility auditor.

Sign conventions follow the order book: supply volumes are non-positive,
demand volumes non-negative. A positive line flow runs from the line's source
zone to its sink zone. Periods are 0-based indices ``0 .. n_periods - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Optional, Sequence

import numpy as np

SUPPLY = "supply"
DEMAND = "demand"

# Acceptance vectors map bid id -> start period, or None for a rejected bid.
Acceptance = Mapping[str, Optional[int]]

BALANCE_TOL = 1e-6
COMPLEMENTARITY_TOL = 1e-6
BOUND_TOL = 1e-9

FAMILIES = tuple(range(1, 16))


class InstanceError(ValueError):
    """Raised when an instance violates a structural invariant."""


class ShapeError(ValueError):
    """Raised when a solution vector does not match its instance."""


@dataclass(frozen=True)
class Line:
    id: str
    source_zone: str
    sink_zone: str
    upper_cap: tuple[float, ...]
    lower_cap: tuple[float, ...]
    # math.inf means the ramp is unconstrained
    ramp_limit: tuple[float, ...]
    initial_flow: float = 0.0


@dataclass(frozen=True)
class Segment:
    zone: str
    period: int
    kind: str
    start_price: float
    end_price: float
    volume: float

    @property
    def is_supply(self) -> bool:
        return self.kind == SUPPLY


@dataclass(frozen=True)
class NonConvexBid:
    """Block or flexible order: one price, an all-or-nothing volume profile
    for every allowed start period."""

    id: str
    zone: str
    price: float
    # start period -> per-period signed volume, length n_periods
    profiles: Mapping[int, tuple[float, ...]]
    mother: Optional[str] = None

    @property
    def allowed_starts(self) -> tuple[int, ...]:
        return tuple(sorted(self.profiles))

    @property
    def is_supply(self) -> bool:
        return any(v < 0 for prof in self.profiles.values() for v in prof)


@dataclass(frozen=True)
class Instance:
    n_periods: int
    zones: tuple[str, ...]
    lines: tuple[Line, ...]
    segments: tuple[Segment, ...]
    bids: tuple[NonConvexBid, ...]
    price_min: float
    price_max: float
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------------
    # validation

    def validate(self) -> None:
        T = self.n_periods
        if T < 1:
            raise InstanceError("need at least one period")
        if not self.price_min < self.price_max:
            raise InstanceError("price_min must be below price_max")
        if len(set(self.zones)) != len(self.zones):
            raise InstanceError("duplicate zone ids")
        zones = set(self.zones)

        if len({ln.id for ln in self.lines}) != len(self.lines):
            raise InstanceError("duplicate line ids")
        for ln in self.lines:
            if ln.source_zone not in zones or ln.sink_zone not in zones:
                raise InstanceError(f"line {ln.id} references an unknown zone")
            if ln.source_zone == ln.sink_zone:
                raise InstanceError(f"line {ln.id} is a self-loop")
            for arr in (ln.upper_cap, ln.lower_cap, ln.ramp_limit):
                if len(arr) != T:
                    raise InstanceError(f"line {ln.id} needs {T} per-period values")
            for t in range(T):
                if not ln.lower_cap[t] <= ln.upper_cap[t]:
                    raise InstanceError(f"line {ln.id}: lower_cap > upper_cap at period {t}")
                if not ln.ramp_limit[t] >= 0:
                    raise InstanceError(f"line {ln.id}: negative ramp limit at period {t}")
            if not all(math.isfinite(v) for v in ln.upper_cap + ln.lower_cap):
                raise InstanceError(f"line {ln.id}: capacities must be finite")
            if not math.isfinite(ln.initial_flow):
                raise InstanceError(f"line {ln.id}: initial flow must be finite")

        for k, seg in enumerate(self.segments):
            if seg.zone not in zones or not 0 <= seg.period < T:
                raise InstanceError(f"segment {k} references an unknown zone/period")
            lo, hi = self.price_min, self.price_max
            if not (lo <= seg.start_price <= hi and lo <= seg.end_price <= hi):
                raise InstanceError(f"segment {k}: prices outside [price_min, price_max]")
            if seg.kind == SUPPLY:
                if not (seg.volume <= 0 and seg.start_price < seg.end_price):
                    raise InstanceError(f"segment {k}: supply needs Q <= 0 and P0 < P1")
            elif seg.kind == DEMAND:
                if not (seg.volume >= 0 and seg.end_price < seg.start_price):
                    raise InstanceError(f"segment {k}: demand needs Q >= 0 and P1 < P0")
            else:
                raise InstanceError(f"segment {k}: unknown kind {seg.kind!r}")
        self._check_stack_order()

        ids = [b.id for b in self.bids]
        if len(set(ids)) != len(ids):
            raise InstanceError("duplicate bid ids")
        by_id = {b.id: b for b in self.bids}
        for b in self.bids:
            if b.zone not in zones:
                raise InstanceError(f"bid {b.id} references an unknown zone")
            if not b.profiles:
                raise InstanceError(f"bid {b.id} has no allowed start")
            signs = set()
            for start, prof in b.profiles.items():
                if not 0 <= start < T or len(prof) != T:
                    raise InstanceError(f"bid {b.id}: bad start {start} or profile length")
                signs.update(np.sign([v for v in prof if v != 0]).tolist())
            if len(signs) > 1:
                raise InstanceError(f"bid {b.id}: profile mixes supply and demand volumes")
            if b.mother is not None:
                if b.mother == b.id or b.mother not in by_id:
                    raise InstanceError(f"bid {b.id}: mother {b.mother!r} is not another bid")
                if by_id[b.mother].zone != b.zone:
                    raise InstanceError(f"bid {b.id}: mother must sit in the same zone")
        for b in self.bids:
            seen = {b.id}
            cur = b
            while cur.mother is not None:
                if cur.mother in seen:
                    raise InstanceError(f"link cycle through bid {b.id}")
                seen.add(cur.mother)
                cur = by_id[cur.mother]

    def _check_stack_order(self) -> None:
        # Prices are read off the supply fractions (family 14), so the supply
        # stack must tile the price axis contiguously upward from price_min.
        tol = 1e-9 * max(1.0, abs(self.price_max), abs(self.price_min))
        for (zone, t), (sup, dem) in self.stacks.items():
            prev = self.price_min
            for k in sup:
                seg = self.segments[k]
                if abs(seg.start_price - prev) > tol:
                    raise InstanceError(
                        f"supply stack {zone}/{t} must be contiguous from price_min "
                        f"(segment {k} starts at {seg.start_price}, expected {prev})")
                prev = seg.end_price
            prev = self.price_max
            for k in dem:
                seg = self.segments[k]
                if seg.start_price > prev + tol:
                    raise InstanceError(f"demand stack {zone}/{t} is not descending at segment {k}")
                prev = seg.end_price

    # ------------------------------------------------------------------
    # index structures

    @cached_property
    def stacks(self) -> dict[tuple[str, int], tuple[tuple[int, ...], tuple[int, ...]]]:
        """(zone, period) -> (supply segment indices, demand segment indices),
        each in fill order: supply ascending and demand descending by start
        price, so the input order of segments does not matter."""
        out: dict[tuple[str, int], tuple[list[int], list[int]]] = {
            (z, t): ([], []) for z in self.zones for t in range(self.n_periods)}
        for k, seg in enumerate(self.segments):
            out[seg.zone, seg.period][0 if seg.is_supply else 1].append(k)
        seg = self.segments
        return {key: (tuple(sorted(s, key=lambda k: (seg[k].start_price, k))),
                      tuple(sorted(d, key=lambda k: (-seg[k].start_price, k))))
                for key, (s, d) in out.items()}

    @cached_property
    def zone_index(self) -> dict[str, int]:
        return {z: i for i, z in enumerate(self.zones)}

    @cached_property
    def bid_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.bids)}

    @cached_property
    def bid_by_id(self) -> dict[str, NonConvexBid]:
        return {b.id: b for b in self.bids}

    @cached_property
    def children(self) -> dict[str, tuple[str, ...]]:
        kids: dict[str, list[str]] = {b.id: [] for b in self.bids}
        for b in self.bids:
            if b.mother is not None:
                kids[b.mother].append(b.id)
        return {k: tuple(sorted(v)) for k, v in kids.items()}

    @cached_property
    def incidence(self) -> np.ndarray:
        """(zones, lines) matrix: +1 at the source zone, -1 at the sink zone,
        so ``incidence @ flows`` is each zone's net export."""
        A = np.zeros((len(self.zones), len(self.lines)))
        for j, ln in enumerate(self.lines):
            A[self.zone_index[ln.source_zone], j] += 1.0
            A[self.zone_index[ln.sink_zone], j] -= 1.0
        return A

    @cached_property
    def line_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(upper, lower, ramp, initial_flow) as arrays of shape (L, T) / (L,)."""
        T = self.n_periods
        up = np.array([ln.upper_cap for ln in self.lines], dtype=float).reshape(-1, T)
        lo = np.array([ln.lower_cap for ln in self.lines], dtype=float).reshape(-1, T)
        rl = np.array([ln.ramp_limit for ln in self.lines], dtype=float).reshape(-1, T)
        f0 = np.array([ln.initial_flow for ln in self.lines], dtype=float)
        return up, lo, rl, f0

    @cached_property
    def segment_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(zone idx, period, P0, P1, Q) for every segment."""
        zi = np.array([self.zone_index[s.zone] for s in self.segments], dtype=int)
        tt = np.array([s.period for s in self.segments], dtype=int)
        p0 = np.array([s.start_price for s in self.segments], dtype=float)
        p1 = np.array([s.end_price for s in self.segments], dtype=float)
        q = np.array([s.volume for s in self.segments], dtype=float)
        return zi, tt, p0, p1, q

    def bids_in_zone(self, zone: str) -> tuple[NonConvexBid, ...]:
        return tuple(b for b in self.bids if b.zone == zone)

    def nonconvex_volumes(self, acceptance: Acceptance) -> np.ndarray:
        """Accepted non-convex volume per (zone, period), signed as in the
        balance equation."""
        out = np.zeros((len(self.zones), self.n_periods))
        for b in self.bids:
            start = acceptance.get(b.id)
            if start is not None:
                out[self.zone_index[b.zone]] += b.profiles[start]
        return out

    def sub_instance(self, zones: Sequence[str]) -> "Instance":
        """Restrict to ``zones``, dropping every line that leaves the set."""
        keep = set(zones)
        return Instance(
            n_periods=self.n_periods,
            zones=tuple(z for z in self.zones if z in keep),
            lines=tuple(ln for ln in self.lines
                        if ln.source_zone in keep and ln.sink_zone in keep),
            segments=tuple(s for s in self.segments if s.zone in keep),
            bids=tuple(b for b in self.bids if b.zone in keep),
            price_min=self.price_min,
            price_max=self.price_max,
            meta=dict(self.meta),
        )


@dataclass
class ClearingOutcome:
    fractions: np.ndarray      # (n_segments,)
    prices: np.ndarray         # (n_zones, T)
    flows: np.ndarray          # (n_lines, T)
    mu_upper: np.ndarray       # (n_lines, T)
    mu_lower: np.ndarray
    rho_upper: np.ndarray
    rho_lower: np.ndarray
    surplus: float

    @classmethod
    def zeros(cls, instance: Instance) -> "ClearingOutcome":
        L, T = len(instance.lines), instance.n_periods
        return cls(
            fractions=np.zeros(len(instance.segments)),
            prices=np.full((len(instance.zones), T), float(instance.price_min)),
            flows=np.zeros((L, T)),
            mu_upper=np.zeros((L, T)), mu_lower=np.zeros((L, T)),
            rho_upper=np.zeros((L, T)), rho_lower=np.zeros((L, T)),
            surplus=0.0,
        )


@dataclass(frozen=True)
class FamilyCheck:
    family: int
    passed: bool
    worst: float
    where: Optional[tuple] = None

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        loc = "" if self.where is None else f" at {self.where}"
        return f"({self.family:>2}) {status}  worst={self.worst:.3e}{loc}"


@dataclass(frozen=True)
class AuditReport:
    checks: Mapping[int, FamilyCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    @property
    def failed(self) -> list[int]:
        return [f for f, c in sorted(self.checks.items()) if not c.passed]

    def passes(self, families) -> bool:
        return all(self.checks[f].passed for f in families)

    def __getitem__(self, family: int) -> FamilyCheck:
        return self.checks[family]

    def summary(self) -> dict[str, dict]:
        return {str(f): {"passed": c.passed, "worst": c.worst,
                         "where": None if c.where is None else list(c.where)}
                for f, c in sorted(self.checks.items())}

    def __str__(self) -> str:
        return "\n".join(str(self.checks[f]) for f in sorted(self.checks))


@dataclass(frozen=True)
class Tolerances:
    balance: float = BALANCE_TOL
    complementarity: float = COMPLEMENTARITY_TOL
    bound: float = BOUND_TOL


# ----------------------------------------------------------------------
# objective


def validate_acceptance(instance: Instance, acceptance: Acceptance) -> None:
    if set(acceptance) != set(instance.bid_by_id):
        raise ShapeError("acceptance must cover exactly the instance's bids")
    for bid_id, start in acceptance.items():
        if start is not None and start not in instance.bid_by_id[bid_id].profiles:
            raise ShapeError(f"bid {bid_id}: start {start} is not an allowed start")


def evaluate_surplus(instance: Instance, fractions, acceptance: Acceptance) -> float:
    """Total welfare of segment fractions plus accepted non-convex bids.

    Flows carry no value of their own and do not enter the sum.
    """
    x = np.asarray(fractions, dtype=float)
    if x.shape != (len(instance.segments),):
        raise ShapeError(f"expected {len(instance.segments)} fractions, got shape {x.shape}")
    validate_acceptance(instance, acceptance)
    _, _, p0, p1, q = instance.segment_arrays
    total = float(np.sum(q * p0 * x + q * (p1 - p0) * x * x / 2.0))
    for b in instance.bids:
        start = acceptance[b.id]
        if start is not None:
            total += b.price * math.fsum(b.profiles[start])
    return total


def bid_surplus(instance: Instance, bid: NonConvexBid, start: int, prices) -> float:
    """Surplus sum_t (P_b - p_t) * Q_t of ``bid`` started at ``start``.

    ``prices`` is either the full (zones, periods) array or the bid zone's
    per-period price vector.
    """
    if start not in bid.profiles:
        raise ValueError(f"start {start} is not allowed for bid {bid.id}")
    p = np.asarray(prices, dtype=float)
    if p.ndim == 2:
        p = p[instance.zone_index[bid.zone]]
    prof = np.asarray(bid.profiles[start])
    return float(np.dot(bid.price - p, prof))


# ----------------------------------------------------------------------
# auditor


class _Worst:
    """Track the largest violation and where it happened."""

    def __init__(self, family: int, tol: float):
        self.family = family
        self.tol = tol
        self.worst = 0.0
        self.where: Optional[tuple] = None

    def see(self, violation: float, where: tuple) -> None:
        if not violation <= self.worst:  # also catches nan
            self.worst = violation if not math.isnan(violation) else math.inf
            self.where = where

    def result(self) -> FamilyCheck:
        return FamilyCheck(self.family, self.worst <= self.tol, self.worst, self.where)


def _array_violations(fam: _Worst, viol: np.ndarray, labels) -> None:
    if viol.size == 0:
        return
    v = np.where(np.isnan(viol), np.inf, viol)
    k = int(np.argmax(v))
    idx = np.unravel_index(k, v.shape)
    fam.see(float(v[idx]), labels(idx))


def audit(instance: Instance, outcome: ClearingOutcome, acceptance: Acceptance,
          tol: Tolerances = Tolerances()) -> AuditReport:
    """Check every constraint family (1)-(15) of the clearing model.

    Families are numbered as in the model: balance (1), fraction cap (2),
    single start (3), links (4), ramps (5), compatibility (6)-(7),
    congestion complementarity (8)-(11), price-flow stationarity (12), fill
    order (13), supply price formula (14), bounds and integrality (15).
    """
    T = instance.n_periods
    Z, L = len(instance.zones), len(instance.lines)
    zones = instance.zones
    line_ids = [ln.id for ln in instance.lines]
    checks: dict[int, _Worst] = {
        f: _Worst(f, tol.balance if f in (1,) else
                  tol.complementarity if f in (6, 7, 8, 9, 10, 11, 12, 13, 14) else tol.bound)
        for f in FAMILIES}

    x = np.asarray(outcome.fractions, dtype=float)
    p = np.asarray(outcome.prices, dtype=float)
    f = np.asarray(outcome.flows, dtype=float)
    shadows = [np.asarray(a, dtype=float) for a in
               (outcome.mu_upper, outcome.mu_lower, outcome.rho_upper, outcome.rho_lower)]
    if (x.shape != (len(instance.segments),) or p.shape != (Z, T) or f.shape != (L, T)
            or any(s.shape != (L, T) for s in shadows)):
        raise ShapeError("outcome arrays do not match the instance")
    mu_up, mu_lo, rho_up, rho_lo = shadows

    # (3) and the integrality part of (15): starts must be allowed starts.
    acc: dict[str, Optional[int]] = {}
    for b in instance.bids:
        start = acceptance.get(b.id)
        if start is not None and start not in b.profiles:
            checks[3].see(math.inf, (b.id, start))
            start = None
        acc[b.id] = start
    for bid_id in acceptance:
        if bid_id not in instance.bid_by_id:
            checks[15].see(math.inf, ("unknown bid", bid_id))

    # (1) balance
    zi, tt, p0, p1, q = instance.segment_arrays
    residual = np.zeros((Z, T))
    np.add.at(residual, (zi, tt), q * x)
    residual += instance.nonconvex_volumes(acc)
    residual += instance.incidence @ f if L else 0.0
    _array_violations(checks[1], np.abs(residual), lambda i: (zones[i[0]], int(i[1])))

    # (2) x <= 1 and x >= 0 (the latter is part of (15))
    _array_violations(checks[2], x - 1.0, lambda i: ("segment", int(i[0])))
    _array_violations(checks[15], -x, lambda i: ("segment", int(i[0])))

    # (4) link relation
    for b in instance.bids:
        if b.mother is not None and acc[b.id] is not None and acc[b.mother] is None:
            checks[4].see(1.0, (b.id, b.mother))

    # (5) ramping, with f_0 fixed
    up, lo, rl, f0 = instance.line_arrays
    if L:
        prev = np.concatenate([f0[:, None], f[:, :-1]], axis=1)
        step = f - prev
        with np.errstate(invalid="ignore"):
            ramp_viol = np.abs(step) - rl
        _array_violations(checks[5], ramp_viol, lambda i: (line_ids[i[0]], int(i[1])))

    # (6)-(7) price-matching compatibility, for every allowed start
    for b in instance.bids:
        if b.mother is None:
            factor, fam = (1 if acc[b.id] is None else 0), 6
        else:
            factor = (acc[b.mother] is not None) - (acc[b.id] is not None)
            fam = 7
        if factor == 0:
            continue
        for start in b.allowed_starts:
            val = factor * bid_surplus(instance, b, start, p)
            checks[fam].see(val, (b.id, start))

    # (8)-(11) complementarity; an infinite ramp limit forces a zero shadow
    if L:
        with np.errstate(invalid="ignore"):
            comp = {
                8: np.abs((f - up) * mu_up),
                9: np.abs((lo - f) * mu_lo),
                10: np.where(rho_up == 0, 0.0, np.abs((step - rl) * rho_up)),
                11: np.where(rho_lo == 0, 0.0, np.abs((-step - rl) * rho_lo)),
            }
        for fam, arr in comp.items():
            _array_violations(checks[fam], arr, lambda i: (line_ids[i[0]], int(i[1])))

        # (12) stationarity; the last period has no t+1 ramp terms
        lhs = mu_up - mu_lo + rho_up - rho_lo
        lhs[:, :-1] += -rho_up[:, 1:] + rho_lo[:, 1:]
        src = np.array([instance.zone_index[ln.source_zone] for ln in instance.lines])
        snk = np.array([instance.zone_index[ln.sink_zone] for ln in instance.lines])
        rhs = p[snk] - p[src]
        _array_violations(checks[12], np.abs(lhs - rhs), lambda i: (line_ids[i[0]], int(i[1])))

        # (15) flow bounds and shadow signs
        _array_violations(checks[15], f - up, lambda i: ("flow>upper", line_ids[i[0]], int(i[1])))
        _array_violations(checks[15], lo - f, lambda i: ("flow<lower", line_ids[i[0]], int(i[1])))
        for name, arr in zip(("mu_upper", "mu_lower", "rho_upper", "rho_lower"), shadows):
            _array_violations(checks[15], -arr, lambda i, n=name: (n, line_ids[i[0]], int(i[1])))

    # (13) fill order within each stack, (14) supply price formula
    for (zone, t), (sup, dem) in instance.stacks.items():
        for stack in (sup, dem):
            for a, b in zip(stack, stack[1:]):
                checks[13].see(abs(x[b] * (1.0 - x[a])), (zone, t, b))
        n = instance.zone_index[zone]
        implied = instance.price_min + sum((p1[k] - p0[k]) * x[k] for k in sup)
        checks[14].see(abs(p[n, t] - implied), (zone, t))

    # (15) price bounds
    _array_violations(checks[15], instance.price_min - p, lambda i: ("price<min", zones[i[0]], int(i[1])))
    _array_violations(checks[15], p - instance.price_max, lambda i: ("price>max", zones[i[0]], int(i[1])))

    return AuditReport({fam: w.result() for fam, w in checks.items()})
