import numpy as np
import pytest

from conftest import demand, make_instance, supply
from oracles import merit_welfare, random_stacks
from zonal_clear.curves import (CurveBank, InfeasibleClearing, build_curves, clear_zone_period,
                                surplus_of_clearing)
from zonal_clear.model import ClearingOutcome, audit, evaluate_surplus


def curve_of(segments, pmin=0.0, pmax=10.0):
    inst = make_instance(segments=segments, pmin=pmin, pmax=pmax)
    return inst, build_curves(inst)["A", 0]


def stacks_instance(s, d, pmax=100.0):
    segs = [supply("A", 0, a, b, q) for a, b, q in zip(*s)]
    segs += [demand("A", 0, a, b, q) for a, b, q in zip(*d)]
    return curve_of(segs, 0.0, pmax)


def test_build_curves_orders_and_prefix_sums():
    inst, c = curve_of([supply("A", 0, 10, 20, 50), supply("A", 0, 0, 10, 100),
                        demand("A", 0, 20, 0, 10)], pmax=20)
    assert [inst.segments[k].start_price for k in c.supply_stack] == [0.0, 10.0]
    assert list(c.supply_cum) == [-100.0, -150.0]


def test_build_curves_empty_stack():
    inst = make_instance(segments=[supply("A", 0, 0, 10, 5)])
    c = build_curves(inst)["A", 0]
    assert c.demand_stack == () and len(c.demand_cum) == 0


def test_build_curves_permutation_invariant():
    rng = np.random.default_rng(3)
    segs = [supply("A", 0, 10 * k, 10 * (k + 1), 5 + k) for k in range(5)]
    segs += [demand("A", 0, 50 - 10 * k, 40 - 10 * k, 7 + k) for k in range(5)]
    _, a = curve_of(segs, pmax=50)
    perm = rng.permutation(10)
    inst_b, b = curve_of([segs[i] for i in perm], pmax=50)
    assert np.array_equal(a.supply_p0, b.supply_p0) and np.array_equal(a.demand_q, b.demand_q)
    assert np.array_equal(a.supply_cum, b.supply_cum)


def test_symmetric_crossing():
    _, c = curve_of([supply("A", 0, 0, 10, 100), demand("A", 0, 10, 0, 100)])
    cl = clear_zone_period(c, 0.0)
    assert cl.feasible
    assert cl.price == pytest.approx(5.0)
    assert cl.fractions[0] == pytest.approx(0.5) and cl.fractions[1] == pytest.approx(0.5)
    assert cl.traded_volume == pytest.approx(50.0)
    assert surplus_of_clearing(c, cl) == pytest.approx(250.0)


def test_export_example():
    # 25 MWh leave the zone
    _, c = curve_of([supply("A", 0, 0, 10, 100), demand("A", 0, 10, 0, 100)])
    cl = clear_zone_period(c, -25.0)
    assert cl.fractions[0] == pytest.approx(0.625)
    assert cl.fractions[1] == pytest.approx(0.375)
    assert cl.price == pytest.approx(6.25)


def test_export_example_against_grid():
    xs = np.linspace(0, 1, 10001)
    xd = xs - 0.25          # balance: -100 xs + 100 xd = -25
    ok = (xd >= 0) & (xd <= 1)
    val = -100 * 10 * xs[ok] ** 2 / 2 + 100 * 10 * xd[ok] - 100 * 10 * xd[ok] ** 2 / 2
    k = int(np.argmax(val))
    _, c = curve_of([supply("A", 0, 0, 10, 100), demand("A", 0, 10, 0, 100)])
    cl = clear_zone_period(c, -25.0)
    assert xs[ok][k] == pytest.approx(cl.fractions[0], abs=1e-4)


def test_demand_only_infeasible():
    _, c = curve_of([demand("A", 0, 10, 0, 100)])
    assert not clear_zone_period(c, -150.0).feasible
    assert not clear_zone_period(c, 120.0).feasible
    cl = clear_zone_period(c, 40.0)
    assert cl.feasible and cl.price == 0.0


def test_surplus_of_infeasible_clearing_raises():
    _, c = curve_of([demand("A", 0, 10, 0, 100)])
    with pytest.raises(InfeasibleClearing):
        surplus_of_clearing(c, clear_zone_period(c, -150.0))


def test_empty_curve_surplus_zero():
    inst = make_instance(segments=[])
    c = build_curves(inst)["A", 0]
    cl = clear_zone_period(c, 0.0)
    assert cl.feasible and surplus_of_clearing(c, cl) == 0.0


@pytest.mark.parametrize("seed", range(40))
def test_matches_merit_order_grid(seed):
    rng = np.random.default_rng(seed)
    s, d = random_stacks(rng)
    inst, c = stacks_instance(s, d)
    inj = rng.uniform(-c.total_supply, c.total_demand) if rng.random() < 0.7 else 0.0
    cl = clear_zone_period(c, inj)
    assert cl.feasible
    assert surplus_of_clearing(c, cl) == pytest.approx(merit_welfare(s, d, inj), abs=1e-3)
    assert abs(cl.balance_residual) <= 1e-9


@pytest.mark.parametrize("seed", range(40))
def test_output_passes_price_families(seed):
    rng = np.random.default_rng(seed)
    s, d = random_stacks(rng)
    inst, c = stacks_instance(s, d)
    cl = clear_zone_period(c, 0.0)
    out = ClearingOutcome.zeros(inst)
    out.prices[0, 0] = cl.price
    out.fractions[:] = [cl.fractions[k] for k in range(len(inst.segments))]
    rep = audit(inst, out, {})
    assert rep.passes([1, 2, 13, 14, 15])
    out.surplus = evaluate_surplus(inst, out.fractions, {})
    assert out.surplus == pytest.approx(surplus_of_clearing(c, cl), rel=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_price_monotone_in_injection(seed):
    rng = np.random.default_rng(1000 + seed)
    s, d = random_stacks(rng)
    _, c = stacks_instance(s, d)
    injs = np.sort(rng.uniform(-c.total_supply, c.total_demand, 8))
    prices = [clear_zone_period(c, v).price for v in injs]
    assert all(b <= a + 1e-9 for a, b in zip(prices, prices[1:]))


def test_slice_sum_property():
    from zonal_clear.instgen import GenSpec, generate
    inst = generate(GenSpec(zone_count=2, seed=4, n_periods=3, bids_per_zone=0))
    curves = build_curves(inst)
    x = np.zeros(len(inst.segments))
    total = 0.0
    for c in curves.values():
        cl = clear_zone_period(c, 0.0)
        total += surplus_of_clearing(c, cl)
        for k, v in cl.fractions.items():
            x[k] = v
    assert total == pytest.approx(evaluate_surplus(inst, x, {}), rel=1e-9)


def test_curve_bank_matches_net_curves():
    from zonal_clear.instgen import GenSpec, generate
    inst = generate(GenSpec(zone_count=3, seed=9, n_periods=5, bids_per_zone=0))
    curves = build_curves(inst)
    bank = CurveBank(inst, curves)
    rng = np.random.default_rng(0)
    inj = rng.uniform(bank.lo, bank.hi)
    w, pm, price = bank.solve(inj)
    for r, (z, t) in enumerate((z, t) for z in inst.zones for t in range(5)):
        ww, mm, pp = curves[z, t].solve(inj[r])
        assert w[r] == pytest.approx(ww, rel=1e-12, abs=1e-9)
        assert pm[r] == pytest.approx(mm) and price[r] == pytest.approx(pp)
