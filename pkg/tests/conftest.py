import math
import sys

import pytest

from zonal_clear.instgen import GenSpec, generate
from zonal_clear.model import DEMAND, SUPPLY, Instance, Line, NonConvexBid, Segment


def supply(zone, t, p0, p1, q):
    return Segment(zone, t, SUPPLY, float(p0), float(p1), -abs(float(q)))


def demand(zone, t, p0, p1, q):
    return Segment(zone, t, DEMAND, float(p0), float(p1), abs(float(q)))


def cross_segments(zone, t, pmin=0.0, pmax=10.0, q=100.0):
    """The symmetric crossing: supply [pmin, pmax] and demand [pmax, pmin]."""
    return [supply(zone, t, pmin, pmax, q), demand(zone, t, pmax, pmin, q)]


def make_instance(zones=("A",), n_periods=1, segments=None, lines=(), bids=(), pmin=0.0, pmax=10.0):
    if segments is None:
        segments = [s for z in zones for t in range(n_periods) for s in cross_segments(z, t, pmin, pmax)]
    return Instance(n_periods=n_periods, zones=tuple(zones), lines=tuple(lines),
                    segments=tuple(segments), bids=tuple(bids), price_min=pmin, price_max=pmax)


def line(lid, src, snk, cap, n_periods, lower=None, ramp=math.inf, f0=0.0):
    lower = -cap if lower is None else lower
    return Line(lid, src, snk, (float(cap),) * n_periods, (float(lower),) * n_periods,
                (float(ramp),) * n_periods, f0)


def block(bid_id, zone, price, vol, starts, dur, n_periods, mother=None):
    """Constant-volume bid lasting ``dur`` periods from each allowed start."""
    profiles = {}
    for s in starts:
        prof = [0.0] * n_periods
        for t in range(s, s + dur):
            prof[t] = float(vol)
        profiles[s] = tuple(prof)
    return NonConvexBid(bid_id, zone, float(price), profiles, mother)


def small_spec(seed, zones=2, alpha=100.0, bids=2, periods=4, starts=3, segments=4):
    return GenSpec(zone_count=zones, alpha=alpha, seed=seed, n_periods=periods,
                   bids_per_zone=bids, max_starts=starts, segments_per_period=segments)


def small_instance(seed, **kw):
    return generate(small_spec(seed, **kw))


@pytest.fixture
def crossing():
    return make_instance()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
