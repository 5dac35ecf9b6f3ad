import csv
import json
import math

import numpy as np
import pytest

from conftest import block, make_instance, small_spec
from zonal_clear import cli
from zonal_clear.instgen import GenSpec, generate
from zonal_clear.serialize import (FormatError, dumps, instance_digest, instance_from_dict,
                                   instance_to_dict, save_instance)

ROW_HEADER = "set,case,method,surplus,seconds,feasible,audit_pass"
AGG_HEADER = "zones,alpha,cases,mean_surplus_difference,mean_seconds_ats,mean_seconds_exact"


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    save_instance(generate(small_spec(3, bids=2)), path)
    return path


def test_gen_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("gen", "--zones", 2, "--alpha", 0, "--seed", 1, "--out", a) == 0
    assert run("gen", "--zones", 2, "--alpha", 0, "--seed", 1, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["seed"] == 1


def test_gen_grid(tmp_path):
    out = tmp_path / "grid"
    assert run("gen", "--grid", "--cases", 5, "--periods", 4, "--bids-per-zone", 1,
               "--segments", 4, "--out", out) == 0
    cells = sorted(p.name for p in out.iterdir())
    assert cells == sorted(f"z{z}_a{a}" for z in (2, 4, 8) for a in (0, 100, 1000))
    assert sum(len(list(p.glob("*.json"))) for p in out.iterdir()) == 45
    inst = json.loads((out / "z4_a100" / "case_002.json").read_text())
    assert len(inst["zones"]) == 4 and inst["meta"]["generator"]["alpha"] == 100


@pytest.mark.parametrize("argv", [["gen", "--alpha", "-1"], ["gen", "--zones", "x"], ["solve"],
                                  ["frobnicate"], ["gen", "--grid"]])
def test_usage_errors(argv, capsys):
    assert cli.main(argv) == 64


def test_missing_instance_is_usage_error(tmp_path):
    assert run("solve", tmp_path / "nope.json") == 64


def test_exact_result_checks(tmp_path, tiny, capsys):
    res = tmp_path / "res.json"
    assert run("solve", tiny, "--method", "exact", "--out", res) == 0
    data = json.loads(res.read_text())
    assert data["audit"]["passed"] is True
    assert run("check", tiny, res) == 0
    assert "PASS" in capsys.readouterr().out


def test_one_bid_exact(tmp_path):
    inst = make_instance(n_periods=2, bids=[block("b", "A", 7, 30, [0, 1], 1, 2)])
    path, res = tmp_path / "i.json", tmp_path / "r.json"
    save_instance(inst, path)
    assert run("solve", path, "--method", "exact", "--out", res) == 0
    assert all(f["passed"] for f in json.loads(res.read_text())["audit"]["families"].values())


def test_corrupted_price_fails(tmp_path, tiny, capsys):
    res = tmp_path / "res.json"
    run("solve", tiny, "--method", "exact", "--out", res)
    data = json.loads(res.read_text())
    data["prices_eur_mwh"][0][1] += 37.0
    res.write_text(json.dumps(data))
    assert run("check", tiny, res) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out
    assert "(12) FAIL" in out or "(14) FAIL" in out


def test_solve_deterministic(tmp_path, tiny):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("solve", tiny, "--seed", 4, "--out", a) == 0
    assert run("solve", tiny, "--seed", 4, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


def test_record_times_flag(tmp_path, tiny):
    a = tmp_path / "a.json"
    run("solve", tiny, "--out", a)
    assert "seconds" not in json.loads(a.read_text())
    run("solve", tiny, "--out", a, "--record-times")
    assert "seconds" in json.loads(a.read_text())


def test_budget_flag(tmp_path):
    path, res = tmp_path / "i.json", tmp_path / "r.json"
    save_instance(generate(GenSpec(zone_count=4, alpha=100.0, seed=2, bids_per_zone=5)), path)
    assert run("solve", path, "--budget-seconds", 2, "--out", res) == 0
    assert json.loads(res.read_text())["feasible"] is True


def test_config_file(tmp_path, tiny):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ats": {"max_outer": 1}, "tabu": {"tenure": 3, "cond1": 20}}))
    assert run("solve", tiny, "--config", cfg, "--out", tmp_path / "r.json") == 0
    cfg.write_text(json.dumps({"tabu": {"colour": 3}}))
    assert run("solve", tiny, "--config", cfg) == 64


def test_cap_refusal_exit(tmp_path, tiny):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"oracle": {"cap": 1}}))
    assert run("solve", tiny, "--method", "exact", "--config", cfg, "--out", tmp_path / "r.json") == 3


def test_infeasible_exit(tmp_path):
    from zonal_clear.model import Line
    ln = Line("L", "A", "B", (10.0,), (5.0,), (1.0,), 0.0)
    path = tmp_path / "i.json"
    save_instance(make_instance(zones=("A", "B"), lines=[ln]), path)
    assert run("solve", path, "--out", tmp_path / "r.json") == 2
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["feasible"] is False and data["surplus_eur"] is None


def mutate(value, rng):
    """Random structural damage to a JSON value."""
    if isinstance(value, dict) and value:
        key = list(value)[int(rng.integers(len(value)))]
        roll = rng.random()
        if roll < 0.3:
            del value[key]
        elif roll < 0.5:
            value[key] = [None, "x", -1e300, {}, [], True][int(rng.integers(6))]
        else:
            value[key] = mutate(value[key], rng)
        return value
    if isinstance(value, list) and value:
        i = int(rng.integers(len(value)))
        if rng.random() < 0.3:
            value.pop(i)
        else:
            value[i] = mutate(value[i], rng)
        return value
    return [None, "nan", 1e308, -3, [1, 2], {"a": 1}][int(rng.integers(6))]


def test_check_fuzz(tmp_path, tiny):
    res = tmp_path / "res.json"
    run("solve", tiny, "--method", "exact", "--out", res)
    base = res.read_text()
    rng = np.random.default_rng(0)
    bad = tmp_path / "bad.json"
    for _ in range(300):
        data = json.loads(base)
        for _ in range(int(rng.integers(1, 4))):
            data = mutate(data, rng)
        bad.write_text(json.dumps(data))
        ok, text = cli.check_files(tiny, bad)
        assert isinstance(ok, bool) and text
    bad.write_text("{not json")
    assert cli.check_files(tiny, bad)[0] is False
    assert cli.check_files(tmp_path / "missing.json", bad)[0] is False


@pytest.mark.parametrize("block_start", range(0, 1000, 100))
def test_round_trip(block_start):
    for seed in range(block_start, block_start + 100):
        spec = GenSpec(zone_count=(2, 4, 8)[seed % 3], alpha=(0.0, 100.0, 1000.0)[seed % 3],
                       seed=seed, n_periods=4, bids_per_zone=2, segments_per_period=4)
        inst = generate(spec)
        back = instance_from_dict(json.loads(dumps(instance_to_dict(inst))))
        assert back == inst
        assert instance_digest(back) == instance_digest(inst)


def test_round_trip_keeps_infinite_ramp():
    inst = generate(GenSpec(seed=1, n_periods=3, bids_per_zone=1))
    d = instance_to_dict(inst)
    assert d["lines"][0]["ramp_limit_mw"] == [None] * 3
    assert all(math.isinf(r) for r in instance_from_dict(d).lines[0].ramp_limit)


def test_wrong_format_rejected():
    d = instance_to_dict(generate(GenSpec(seed=1, n_periods=2, bids_per_zone=1)))
    d["format"] = "something-else"
    with pytest.raises(FormatError):
        instance_from_dict(d)
    del d["format"]
    with pytest.raises(FormatError):
        instance_from_dict({"format": "zonal-clear-instance/1"})


def small_grid(tmp_path, cases=3):
    out = tmp_path / "grid"
    run("gen", "--grid", "--cases", cases, "--periods", 3, "--bids-per-zone", 1, "--max-starts", 2,
        "--segments", 4, "--out", out)
    return out


def test_bench_counts_and_schema(tmp_path):
    grid = small_grid(tmp_path)
    out = tmp_path / "bench.csv"
    assert run("bench", "--dir", grid, "--methods", "ats,exact", "--out", out, "--timing", "none") == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ROW_HEADER
    rows = list(csv.DictReader(lines))
    assert len(rows) == 27 * 2
    agg_lines = (tmp_path / "bench_aggregate.csv").read_text().splitlines()
    assert agg_lines[0] == AGG_HEADER
    agg = list(csv.DictReader(agg_lines))
    assert len(agg) == 9
    assert all(r["seconds"] == "" for r in rows)
    by_case = {}
    for r in rows:
        by_case.setdefault((r["set"], r["case"]), {})[r["method"]] = r
    for pair in by_case.values():
        assert pair["ats"]["feasible"] == "1" and pair["ats"]["audit_pass"] == "1"
        assert float(pair["ats"]["surplus"]) <= float(pair["exact"]["surplus"]) + 1e-5
    assert all(float(r["mean_surplus_difference"]) <= 1e-5 for r in agg)


def test_bench_byte_identical(tmp_path):
    grid = small_grid(tmp_path, cases=1)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("bench", "--dir", grid, "--methods", "ats", "--out", a, "--timing", "none")
    run("bench", "--dir", grid, "--methods", "ats", "--out", b, "--timing", "none", "--jobs", 2)
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a_aggregate.csv").read_bytes() == (tmp_path / "b_aggregate.csv").read_bytes()


def test_bench_wall_timing_has_seconds(tmp_path):
    grid = small_grid(tmp_path, cases=1)
    out = tmp_path / "w.csv"
    run("bench", "--dir", grid, "--methods", "ats", "--out", out)
    rows = list(csv.DictReader(out.read_text().splitlines()))
    assert all(float(r["seconds"]) >= 0 for r in rows)


def test_bench_unknown_method(tmp_path):
    grid = small_grid(tmp_path, cases=1)
    assert run("bench", "--dir", grid, "--methods", "ats,magic") == 64
