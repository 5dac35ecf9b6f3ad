"""JSON instance and result files.

Field names carry units and sign conventions (``volume_mwh_signed``: supply
negative, demand positive). Periods are 0-based. Non-finite numbers are
written as ``null``: an unconstrained ramp limit, or the surplus of an
infeasible result. The full layout is documented in docs/format.md.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Optional

import numpy as np

from .model import ClearingOutcome, Instance, Line, NonConvexBid, Segment

INSTANCE_FORMAT = "zonal-clear-instance/1"
RESULT_FORMAT = "zonal-clear-result/1"


class FormatError(ValueError):
    """Raised for files that do not follow the documented layout."""


def _num(v) -> Optional[float]:
    v = float(v)
    return v if math.isfinite(v) else None


def _ramp(v) -> float:
    return math.inf if v is None else float(v)


# ----------------------------------------------------------------------
# instances


def instance_to_dict(instance: Instance) -> dict:
    return {
        "format": INSTANCE_FORMAT,
        "seed": instance.meta.get("seed"),
        "meta": dict(instance.meta),
        "n_periods": instance.n_periods,
        "price_min_eur_mwh": instance.price_min,
        "price_max_eur_mwh": instance.price_max,
        "zones": list(instance.zones),
        "lines": [{
            "id": ln.id,
            "source_zone": ln.source_zone,
            "sink_zone": ln.sink_zone,
            "upper_cap_mw": list(ln.upper_cap),
            "lower_cap_mw": list(ln.lower_cap),
            "ramp_limit_mw": [_num(r) for r in ln.ramp_limit],
            "initial_flow_mw": ln.initial_flow,
        } for ln in instance.lines],
        "segments": [{
            "zone": s.zone,
            "period": s.period,
            "kind": s.kind,
            "start_price_eur_mwh": s.start_price,
            "end_price_eur_mwh": s.end_price,
            "volume_mwh_signed": s.volume,
        } for s in instance.segments],
        "bids": [{
            "id": b.id,
            "zone": b.zone,
            "price_eur_mwh": b.price,
            "mother": b.mother,
            "profiles": [{"start": s, "volume_mwh_signed": list(b.profiles[s])}
                         for s in b.allowed_starts],
        } for b in instance.bids],
    }


def instance_from_dict(d: dict) -> Instance:
    try:
        if d.get("format") != INSTANCE_FORMAT:
            raise FormatError(f"expected format {INSTANCE_FORMAT!r}, got {d.get('format')!r}")
        lines = tuple(Line(
            id=str(ln["id"]),
            source_zone=str(ln["source_zone"]),
            sink_zone=str(ln["sink_zone"]),
            upper_cap=tuple(float(v) for v in ln["upper_cap_mw"]),
            lower_cap=tuple(float(v) for v in ln["lower_cap_mw"]),
            ramp_limit=tuple(_ramp(v) for v in ln["ramp_limit_mw"]),
            initial_flow=float(ln.get("initial_flow_mw", 0.0)),
        ) for ln in d["lines"])
        segments = tuple(Segment(
            zone=str(s["zone"]), period=int(s["period"]), kind=str(s["kind"]),
            start_price=float(s["start_price_eur_mwh"]), end_price=float(s["end_price_eur_mwh"]),
            volume=float(s["volume_mwh_signed"]),
        ) for s in d["segments"])
        bids = tuple(NonConvexBid(
            id=str(b["id"]), zone=str(b["zone"]), price=float(b["price_eur_mwh"]),
            profiles={int(p["start"]): tuple(float(v) for v in p["volume_mwh_signed"])
                      for p in b["profiles"]},
            mother=None if b.get("mother") is None else str(b["mother"]),
        ) for b in d["bids"])
        return Instance(
            n_periods=int(d["n_periods"]),
            zones=tuple(str(z) for z in d["zones"]),
            lines=lines, segments=segments, bids=bids,
            price_min=float(d["price_min_eur_mwh"]),
            price_max=float(d["price_max_eur_mwh"]),
            meta=dict(d.get("meta") or {}),
        )
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed instance: {exc!r}") from exc


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def instance_digest(instance: Instance) -> str:
    """SHA-256 of the canonical JSON form."""
    blob = json.dumps(instance_to_dict(instance), sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


def save_instance(instance: Instance, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(instance_to_dict(instance)))


def load_instance(path) -> Instance:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise FormatError(f"{path}: top level must be an object")
    return instance_from_dict(d)


# ----------------------------------------------------------------------
# results


def _matrix(a) -> list:
    return [[_num(v) for v in row] for row in np.asarray(a, dtype=float)]


def result_to_dict(result, instance: Instance, record_times: bool = False) -> dict:
    """Serialise a ``driver.SolveResult``. Wall times are left out unless
    ``record_times`` so that reruns produce identical files."""
    d: dict[str, Any] = {
        "format": RESULT_FORMAT,
        "method": result.method,
        "seed": result.seed,
        "instance_sha256": result.instance_sha256,
        "feasible": bool(result.feasible),
        "termination": result.termination,
        "surplus_eur": _num(result.surplus),
        "pre_repair_surplus_eur": None if result.pre_repair_surplus is None else _num(result.pre_repair_surplus),
        "post_repair_surplus_eur": None if result.post_repair_surplus is None else _num(result.post_repair_surplus),
        "acceptance": {b.id: result.acceptance.get(b.id) for b in instance.bids} if result.acceptance else {},
        "zones": list(instance.zones),
        "lines": [ln.id for ln in instance.lines],
    }
    out = result.outcome
    if out is not None:
        d.update({
            "prices_eur_mwh": _matrix(out.prices),
            "flows_mw": _matrix(out.flows),
            "segment_fractions": [_num(v) for v in out.fractions],
            "mu_upper": _matrix(out.mu_upper),
            "mu_lower": _matrix(out.mu_lower),
            "rho_upper": _matrix(out.rho_upper),
            "rho_lower": _matrix(out.rho_lower),
        })
    trace = []
    for step in result.trace:
        row = {k: (_num(v) if isinstance(v, float) else v) for k, v in vars(step).items()
               if record_times or not k.endswith("seconds")}
        trace.append(row)
    d["trace"] = trace
    d["audit"] = None if result.audit is None else {
        "passed": result.audit.passed, "families": result.audit.summary()}
    d["stats"] = dict(result.stats)
    if record_times:
        d["seconds"] = round(result.seconds, 3)
    return d


def save_result(result, instance: Instance, path, record_times: bool = False) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(result_to_dict(result, instance, record_times)))


def outcome_from_result(d: dict, instance: Instance) -> tuple[dict, ClearingOutcome]:
    """Acceptance and outcome stored in a result file, shape-checked
    against ``instance``; raises FormatError on anything unexpected."""
    if not isinstance(d, dict) or d.get("format") != RESULT_FORMAT:
        raise FormatError(f"expected format {RESULT_FORMAT!r}")
    Z, T, L = len(instance.zones), instance.n_periods, len(instance.lines)

    def arr(key, shape):
        try:
            a = np.array(d[key], dtype=float)
        except KeyError:
            raise FormatError(f"missing field {key!r}") from None
        except (TypeError, ValueError) as exc:
            raise FormatError(f"field {key!r} is not numeric: {exc}") from None
        if a.shape != shape:
            if a.size == 0 and 0 in shape:
                return np.zeros(shape)
            raise FormatError(f"field {key!r} has shape {a.shape}, expected {shape}")
        return a

    acc_raw = d.get("acceptance")
    if not isinstance(acc_raw, dict):
        raise FormatError("acceptance must be an object")
    acc = {}
    for b in instance.bids:
        if b.id not in acc_raw:
            raise FormatError(f"acceptance lacks bid {b.id!r}")
        v = acc_raw[b.id]
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise FormatError(f"start of bid {b.id!r} must be an integer or null")
        acc[b.id] = v
    if set(acc_raw) - set(acc):
        raise FormatError("acceptance names unknown bids")
    outcome = ClearingOutcome(
        fractions=arr("segment_fractions", (len(instance.segments),)),
        prices=arr("prices_eur_mwh", (Z, T)),
        flows=arr("flows_mw", (L, T)),
        mu_upper=arr("mu_upper", (L, T)),
        mu_lower=arr("mu_lower", (L, T)),
        rho_upper=arr("rho_upper", (L, T)),
        rho_lower=arr("rho_lower", (L, T)),
        surplus=float(d["surplus_eur"]) if isinstance(d.get("surplus_eur"), (int, float)) else math.nan,
    )
    return acc, outcome
