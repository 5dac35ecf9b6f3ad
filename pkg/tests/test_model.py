from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import block, demand, line, make_instance, supply
from zonal_clear.model import (ClearingOutcome, InstanceError, NonConvexBid, ShapeError, audit,
                               bid_surplus, evaluate_surplus)


def exact_surplus(instance, x, acc):
    """Independent evaluation of the objective in rational arithmetic."""
    total = Fraction(0)
    for seg, xi in zip(instance.segments, x):
        xi = Fraction(xi)
        q, p0, p1 = Fraction(seg.volume), Fraction(seg.start_price), Fraction(seg.end_price)
        total += q * p0 * xi + q * (p1 - p0) * xi * xi / 2
    for b in instance.bids:
        if acc[b.id] is not None:
            total += Fraction(b.price) * sum(Fraction(v) for v in b.profiles[acc[b.id]])
    return total


def test_single_demand_segment_value():
    inst = make_instance(segments=[supply("A", 0, 0, 10, 1), demand("A", 0, 10, 0, 100)])
    assert evaluate_surplus(inst, [0.0, 1.0], {}) == pytest.approx(500.0)


def test_zero_fractions_all_rejected():
    b = block("b1", "A", 5.0, 10, [0], 1, 1)
    inst = make_instance(bids=[b])
    assert evaluate_surplus(inst, [0.0, 0.0], {"b1": None}) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_surplus_matches_rational_evaluation(seed):
    rng = np.random.default_rng(seed)
    segs = [supply("A", 0, 0, 10, rng.uniform(1, 50)),
            demand("A", 0, 10, rng.uniform(0, 9), rng.uniform(1, 50))]
    b = block("b1", "A", rng.uniform(0, 10), rng.uniform(1, 20), [0], 1, 1)
    inst = make_instance(segments=segs, bids=[b])
    x = rng.uniform(0, 1, 2)
    acc = {"b1": 0 if rng.random() < 0.5 else None}
    assert float(exact_surplus(inst, x, acc)) == pytest.approx(evaluate_surplus(inst, x, acc), rel=1e-12)


def test_surplus_shape_errors():
    inst = make_instance()
    with pytest.raises(ShapeError):
        evaluate_surplus(inst, [0.5], {})
    with pytest.raises(ShapeError):
        evaluate_surplus(inst, [0.5, 0.5], {"ghost": None})


def test_surplus_invariant_under_segment_order():
    segs = [supply("A", 0, 0, 10, 100), supply("A", 0, 10, 20, 30),
            demand("A", 0, 20, 10, 5), demand("A", 0, 10, 0, 100)]
    x = [1.0, 0.3, 1.0, 0.7]
    a = make_instance(segments=segs, pmax=20)
    perm = [2, 0, 3, 1]
    b = make_instance(segments=[segs[i] for i in perm], pmax=20)
    assert evaluate_surplus(a, x, {}) == pytest.approx(evaluate_surplus(b, [x[i] for i in perm], {}))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4),
       st.lists(st.floats(0, 1), min_size=4, max_size=4),
       st.floats(0, 1))
def test_surplus_concave_in_fractions(x1, x2, lam):
    segs = [supply("A", 0, 0, 10, 100), supply("A", 0, 10, 20, 30),
            demand("A", 0, 20, 10, 5), demand("A", 0, 10, 0, 100)]
    inst = make_instance(segments=segs, pmax=20)
    x1, x2 = np.array(x1), np.array(x2)
    mid = evaluate_surplus(inst, lam * x1 + (1 - lam) * x2, {})
    assert mid >= lam * evaluate_surplus(inst, x1, {}) + (1 - lam) * evaluate_surplus(inst, x2, {}) - 1e-9


def test_bid_surplus_examples():
    inst = make_instance(n_periods=2, bids=[
        NonConvexBid("s", "A", 50.0, {0: (-10.0, -10.0)}),
        block("d", "A", 9.0, 5, [0], 2, 2)], pmax=100)
    assert bid_surplus(inst, inst.bid_by_id["s"], 0, [40.0, 60.0]) == 0.0
    assert bid_surplus(inst, inst.bid_by_id["d"], 0, np.array([[3.0, 4.0]])) > 0
    assert bid_surplus(inst, inst.bid_by_id["d"], 0, [9.0, 9.0]) == 0.0
    with pytest.raises(ValueError):
        bid_surplus(inst, inst.bid_by_id["d"], 1, [9.0, 9.0])


def test_audit_vacuous_instance_passes():
    inst = make_instance(zones=("A",), segments=[])
    rep = audit(inst, ClearingOutcome.zeros(inst), {})
    assert rep.passed


def _clearing_outcome(inst, price, fractions):
    out = ClearingOutcome.zeros(inst)
    out.prices[:] = price
    out.fractions[:] = fractions
    return out


def test_audit_compatibility_family_six():
    # crossing at p = 5 when the bid is accepted volume 0 net: use a tiny bid
    d = block("d", "A", 8.0, 1e-3, [0], 1, 1)
    inst = make_instance(bids=[d])
    # accepted demand bid: balance -100 x_s + 100 x_d = 1e-3 at p with x_s = p/10, x_d = 1 - p/10
    p = 5.0 + 1e-3 / 20
    out = _clearing_outcome(inst, p, [p / 10, 1 - p / 10])
    assert audit(inst, out, {"d": 0}).passed
    # the same bid rejected while its surplus is positive breaks (6)
    out = _clearing_outcome(inst, 5.0, [0.5, 0.5])
    rep = audit(inst, out, {"d": None})
    assert rep.failed == [6]


def test_audit_paradoxically_accepted_bid_is_allowed():
    d = block("d", "A", 1.0, 1e-3, [0], 1, 1)
    inst = make_instance(bids=[d])
    p = 5.0 + 1e-3 / 20
    out = _clearing_outcome(inst, p, [p / 10, 1 - p / 10])
    assert audit(inst, out, {"d": 0}).passes([6, 7])


def test_audit_link_and_child_compatibility():
    m = block("m", "A", 8.0, 1e-3, [0], 1, 1)
    c = block("c", "A", 8.0, 1e-3, [0], 1, 1, mother="m")
    inst = make_instance(bids=[m, c])
    out = _clearing_outcome(inst, 5.0, [0.5, 0.5])
    rep = audit(inst, out, {"m": None, "c": 0})
    assert not rep[4].passed
    p = 5.0 + 1e-3 / 20
    out = _clearing_outcome(inst, p, [p / 10, 1 - p / 10])
    rep = audit(inst, out, {"m": 0, "c": None})
    assert not rep[7].passed and rep[6].passed


def test_audit_flow_families():
    inst = make_instance(zones=("A", "B"), lines=[line("L", "A", "B", 5.0, 1, ramp=3.0)])
    out = ClearingOutcome.zeros(inst)
    out.prices[:] = 5.0
    out.fractions[:] = 0.5
    assert audit(inst, out, {}).passed
    out.mu_upper[0, 0] = 1.0      # uncongested line with a shadow price
    rep = audit(inst, out, {})
    assert not rep[8].passed and not rep[12].passed
    out = ClearingOutcome.zeros(inst)
    out.prices[:] = 5.0
    out.fractions[:] = 0.5
    out.flows[0, 0] = 4.0          # breaks the ramp and the balance
    rep = audit(inst, out, {})
    assert not rep[5].passed and not rep[1].passed


def test_audit_shape_error():
    inst = make_instance()
    out = ClearingOutcome.zeros(inst)
    out.prices = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        audit(inst, out, {})


def test_instance_validation():
    with pytest.raises(InstanceError):
        make_instance(segments=[supply("A", 0, 2, 10, 100), demand("A", 0, 10, 0, 100)])
    with pytest.raises(InstanceError):
        make_instance(bids=[block("a", "A", 1, 1, [0], 1, 1, mother="b"),
                            block("b", "A", 1, 1, [0], 1, 1, mother="a")])
    with pytest.raises(InstanceError):
        make_instance(bids=[NonConvexBid("x", "A", 1.0, {0: (1.0,)}, None),
                            NonConvexBid("y", "A", 1.0, {0: (1.0,)}, "zz")])
    with pytest.raises(InstanceError):
        make_instance(bids=[NonConvexBid("x", "A", 1.0, {}, None)])
    with pytest.raises(InstanceError):
        make_instance(pmin=5.0, pmax=5.0, segments=[])
