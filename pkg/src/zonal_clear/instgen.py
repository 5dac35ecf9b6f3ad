"""Synthetic order books and zone networks for benchmarking.

Books are parametric stand-ins for real exchange data: every zone-period gets
a piecewise-linear supply curve spanning [price_min, price_max] upward and a
demand curve spanning it downward, so any zone clears at zero flow. Bid
counts follow the daily averages of the 9-cell (zones x alpha) experiment
grid, scaled down by ``scale``.
"""

from __future__ import annotations

import math
import string
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .model import DEMAND, SUPPLY, Instance, Line, NonConvexBid, Segment

# (zones, alpha) -> (hourly pairs per day, non-convex bids per day), all zones
BOOK_SIZES = {
    (2, 0): (31_245, 311), (4, 0): (62_373, 618), (8, 0): (124_725, 1_217),
    (2, 100): (31_286, 307), (4, 100): (62_531, 606), (8, 100): (124_662, 1_226),
    (2, 1000): (31_192, 306), (4, 1000): (62_354, 623), (8, 1000): (124_431, 1_216),
}
GRID_ZONES = (2, 4, 8)
GRID_ALPHAS = (0, 100, 1000)


@dataclass(frozen=True)
class GenSpec:
    zone_count: int = 2
    alpha: float = 100.0
    seed: int = 0
    scale: float = 0.01
    n_periods: int = 24
    price_min: float = 0.0
    price_max: float = 2000.0
    # overrides for small test instances
    bids_per_zone: Optional[int] = None
    max_starts: int = 6
    segments_per_period: Optional[int] = None
    link_fraction: float = 0.1
    topology: str = "default"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.scale <= 1:
            raise ValueError("scale must lie in (0, 1]")
        if self.zone_count < 1 or self.n_periods < 1:
            raise ValueError("need at least one zone and one period")
        if self.max_starts < 1:
            raise ValueError("max_starts must be at least 1")


def zone_names(n: int) -> list[str]:
    letters = string.ascii_uppercase
    if n <= len(letters):
        return list(letters[:n])
    return [f"Z{i + 1}" for i in range(n)]


def topology(zone_count: int, kind: str = "default") -> list[tuple[str, str]]:
    """Line endpoints (source, sink).

    Defaults: 2 zones -> one line; 4 zones -> star around the first zone;
    8 zones -> two 4-zone stars joined by a line between their hubs. Any
    other count, or ``kind="ring"``, gives a ring.
    """
    names = zone_names(zone_count)
    if zone_count < 2:
        return []
    if zone_count == 2:
        return [(names[0], names[1])]
    if kind == "default" and zone_count == 4:
        return [(names[0], z) for z in names[1:]]
    if kind == "default" and zone_count == 8:
        left = [(names[0], z) for z in names[1:4]]
        right = [(names[4], z) for z in names[5:8]]
        return left + [(names[0], names[4])] + right
    if kind == "star":
        return [(names[0], z) for z in names[1:]]
    return [(names[i], names[(i + 1) % zone_count]) for i in range(zone_count)]


def capacities(endpoints, n_periods: int, alpha: float, rng: np.random.Generator) -> list[Line]:
    """Capacity and reverse capacity drawn from U[0, alpha] per period;
    ramps unconstrained and initial flows zero."""
    lines = []
    for j, (src, snk) in enumerate(endpoints):
        up = rng.uniform(0.0, alpha, n_periods) if alpha > 0 else np.zeros(n_periods)
        rev = rng.uniform(0.0, alpha, n_periods) if alpha > 0 else np.zeros(n_periods)
        lines.append(Line(
            id=f"L{j + 1}", source_zone=src, sink_zone=snk,
            upper_cap=tuple(_r(v, 3) for v in up),
            lower_cap=tuple(_r(-v, 3) + 0.0 for v in rev),
            ramp_limit=(math.inf,) * n_periods,
            initial_flow=0.0,
        ))
    return lines


def _r(v: float, nd: int) -> float:
    return float(round(float(v), nd))


def _book_size(spec: GenSpec) -> tuple[float, float]:
    """Per-zone daily (hourly pairs, non-convex bids)."""
    key = (spec.zone_count, int(spec.alpha))
    if key in BOOK_SIZES:
        hourly, nc = BOOK_SIZES[key]
    else:
        hourly, nc = 31_245 * spec.zone_count / 2, 311 * spec.zone_count / 2
    return spec.scale * hourly / spec.zone_count, spec.scale * nc / spec.zone_count


def _breaks(rng, k: int, lo: float, hi: float) -> np.ndarray:
    """k+1 strictly increasing price boundaries from lo to hi."""
    inner = np.unique(np.round(rng.uniform(lo, hi, k - 1), 2)) if k > 1 else np.array([])
    inner = inner[(inner > lo) & (inner < hi)]
    return np.concatenate([[lo], inner, [hi]])


def _curve_segments(zone: str, t: int, n_seg: int, volume: float, spec: GenSpec, rng) -> list[Segment]:
    n_sup = max(1, n_seg // 2)
    n_dem = max(1, n_seg - n_sup)
    out = []
    b = _breaks(rng, n_sup, spec.price_min, spec.price_max)
    vols = rng.dirichlet(np.ones(len(b) - 1)) * volume * rng.uniform(1.0, 1.3)
    for k in range(len(b) - 1):
        out.append(Segment(zone, t, SUPPLY, float(b[k]), float(b[k + 1]), -_r(max(vols[k], 0.1), 1)))
    b = _breaks(rng, n_dem, spec.price_min, spec.price_max)[::-1]
    vols = rng.dirichlet(np.ones(len(b) - 1)) * volume
    for k in range(len(b) - 1):
        out.append(Segment(zone, t, DEMAND, float(b[k]), float(b[k + 1]), _r(max(vols[k], 0.1), 1)))
    return out


def bids(zone: str, spec: GenSpec, rng: np.random.Generator, zone_volume: float = 1000.0,
         first_index: int = 0) -> tuple[list[Segment], list[NonConvexBid]]:
    """Hourly segments and non-convex bids of one zone for one day."""
    T = spec.n_periods
    pairs_per_day, nc_per_day = _book_size(spec)
    segments: list[Segment] = []
    for t in range(T):
        if spec.segments_per_period is not None:
            n_seg = spec.segments_per_period
        else:
            n_seg = int(rng.poisson(pairs_per_day / T))
        n_seg = max(2, n_seg)
        volume = zone_volume * rng.uniform(0.8, 1.2)
        segments.extend(_curve_segments(zone, t, n_seg, volume, spec, rng))

    if spec.bids_per_zone is not None:
        n_bids = spec.bids_per_zone
    else:
        n_bids = int(nc_per_day) + int(rng.random() < nc_per_day - int(nc_per_day))
    span = spec.price_max - spec.price_min
    out: list[NonConvexBid] = []
    for k in range(n_bids):
        bid_id = f"{zone}-b{first_index + k + 1}"
        mother = None
        if out and rng.random() < spec.link_fraction:
            mother_bid = out[int(rng.integers(len(out)))]
            mother = mother_bid.id
            supply = mother_bid.is_supply
        else:
            supply = bool(rng.random() < 0.5)
        flexible = spec.max_starts > 1 and T > 1 and rng.random() < 0.5
        if flexible:
            dur = int(rng.integers(1, min(4, T) + 1)) if T > 1 else 1
            dur = min(dur, T - 1)
            n_starts = int(rng.integers(2, spec.max_starts + 1))
            n_starts = min(n_starts, T - dur + 1)
            first = int(rng.integers(0, T - dur - n_starts + 2))
            starts = list(range(first, first + n_starts))
        else:
            dur = int(rng.integers(max(1, min(4, T) // 2), T + 1))
            starts = [int(rng.integers(0, T - dur + 1))]
        vol = _r(zone_volume * rng.uniform(0.02, 0.08), 1) * (-1.0 if supply else 1.0)
        if supply:
            price = _r(spec.price_min + span * rng.uniform(0.2, 0.7), 2)
        else:
            price = _r(spec.price_min + span * rng.uniform(0.3, 0.8), 2)
        profiles = {}
        for s in starts:
            prof = [0.0] * T
            for t in range(s, s + dur):
                prof[t] = vol
            profiles[s] = tuple(prof)
        out.append(NonConvexBid(bid_id, zone, price, profiles, mother))
    return segments, out


def generate(spec: GenSpec) -> Instance:
    """Build one instance; the same GenSpec always yields the same instance."""
    rng = np.random.default_rng(spec.seed)
    names = zone_names(spec.zone_count)
    lines = capacities(topology(spec.zone_count, spec.topology), spec.n_periods, spec.alpha, rng)
    segments: list[Segment] = []
    all_bids: list[NonConvexBid] = []
    for zone in names:
        zone_volume = float(rng.uniform(500.0, 1500.0))
        segs, bs = bids(zone, spec, rng, zone_volume)
        segments.extend(segs)
        all_bids.extend(bs)
    return Instance(
        n_periods=spec.n_periods,
        zones=tuple(names),
        lines=tuple(lines),
        segments=tuple(segments),
        bids=tuple(all_bids),
        price_min=spec.price_min,
        price_max=spec.price_max,
        meta={"seed": spec.seed, "generator": asdict(spec)},
    )
