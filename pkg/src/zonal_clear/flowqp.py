"""Price-flow problem: with non-convex acceptance fixed, choose line flows and
segment fractions maximising total surplus under balance, capacity and ramp
constraints, then recover prices and congestion/ramp shadow prices.

The inner fraction problem separates into zone-period clearings, so the
outer problem is a concave maximisation over flows alone, solved by
projected gradient ascent with Armijo backtracking. The gradient with
respect to a line flow is the sink price minus the source price.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import nnls

from .curves import CurveBank, build_curves
from .model import (Acceptance, AuditReport, ClearingOutcome, Instance, Line,
                    Tolerances, audit, validate_acceptance)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


class InfeasibleLine(ValueError):
    """No flow trajectory satisfies the line's capacity and ramp limits."""


# ----------------------------------------------------------------------
# projection onto one line's capacity + ramp polytope


class _Deriv:
    """Non-decreasing piecewise-linear derivative of a convex 1-D function.

    Knots carry left and right limits so jumps are exact. Outside
    ``[x[0], x[-1]]`` the function is +inf.
    """

    __slots__ = ("x", "dl", "dr")

    def __init__(self, x, dl, dr):
        self.x, self.dl, self.dr = x, dl, dr

    def left(self, u: float) -> float:
        x = self.x
        if u <= x[0]:
            return -math.inf
        if u > x[-1]:
            return math.inf
        i = _bisect(x, u)          # x[i-1] < u <= x[i]
        if x[i] == u:
            return self.dl[i]
        return _lerp(x[i - 1], self.dr[i - 1], x[i], self.dl[i], u)

    def right(self, u: float) -> float:
        x = self.x
        if u < x[0]:
            return -math.inf
        if u >= x[-1]:
            return math.inf
        i = _bisect(x, u)
        if x[i] == u:
            return self.dr[i]
        return _lerp(x[i - 1], self.dr[i - 1], x[i], self.dl[i], u)

    def argmin(self) -> float:
        x, dl, dr = self.x, self.dl, self.dr
        for i in range(len(x)):
            if i > 0 and dl[i] >= 0:
                return _root(x[i - 1], dr[i - 1], x[i], dl[i])
            if dr[i] >= 0:
                return x[i]
        return x[-1]


def _bisect(x, u):
    lo, hi = 0, len(x) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if x[mid] < u:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _lerp(x0, y0, x1, y1, u):
    if x1 == x0:
        return y1
    return y0 + (y1 - y0) * (u - x0) / (x1 - x0)


def _root(x0, y0, x1, y1):
    # y0 < 0 <= y1 on [x0, x1]
    if y1 == y0:
        return x1
    return x0 + (x1 - x0) * (-y0) / (y1 - y0)


def _window(h: _Deriv, r: float) -> _Deriv:
    """Derivative of u -> min_{|u - v| <= r} V(v) given V' = h.

    Left of the minimiser the derivative is h shifted by -r, right of it h
    shifted by +r, and zero in between. Knots are shifted directly rather
    than re-evaluated so that jumps survive rounding.
    """
    v = h.argmin()
    k = _bisect(h.x, v)
    at_knot = k < len(h.x) and h.x[k] == v
    hl = h.dl[k] if at_knot else h.left(v)
    hr = h.dr[k] if at_knot else h.right(v)
    x, dl, dr = [], [], []
    for xi, l, rr in zip(h.x, h.dl, h.dr):
        if xi < v:
            x.append(xi - r)
            dl.append(min(0.0, l))
            dr.append(min(0.0, rr))
    x.append(v - r)
    dl.append(min(0.0, hl))
    dr.append(0.0)
    if r > 0:
        x.append(v + r)
        dl.append(0.0)
        dr.append(max(0.0, hr))
    else:
        dr[-1] = max(0.0, hr)
    for xi, l, rr in zip(h.x, h.dl, h.dr):
        if xi > v:
            x.append(xi + r)
            dl.append(max(0.0, l))
            dr.append(max(0.0, rr))
    dl[0] = -math.inf
    dr[-1] = math.inf
    return _Deriv(x, dl, dr)


def _add_quadratic_and_clip(h: _Deriv, c: float, lo: float, hi: float) -> Optional[_Deriv]:
    """h(u) + 2(u - c) restricted to [lo, hi]; None if the domain is empty."""
    a, b = max(h.x[0], lo), min(h.x[-1], hi)
    if a > b:
        return None
    x, dl, dr = [a], [h.right(a)], [h.right(a)]
    for xi, l, r in zip(h.x, h.dl, h.dr):
        if a < xi < b:
            x.append(xi)
            dl.append(l)
            dr.append(r)
    if b > a:
        x.append(b)
        dl.append(h.left(b))
        dr.append(h.left(b))
    else:
        dr[0] = dl[0] = 0.0
    dl = [d + 2.0 * (u - c) for u, d in zip(x, dl)]
    dr = [d + 2.0 * (u - c) for u, d in zip(x, dr)]
    return _Deriv(x, dl, dr)


def project_line_flows(line: Line, candidate, initial_flow: Optional[float] = None) -> np.ndarray:
    """Euclidean projection of ``candidate`` onto
    ``lower_cap <= f_t <= upper_cap``, ``|f_t - f_{t-1}| <= ramp_limit``
    with ``f_{-1}`` the line's initial flow.

    Exact dynamic programme over convex piecewise-quadratic value functions.
    """
    c = np.asarray(candidate, dtype=float)
    lo = np.asarray(line.lower_cap, dtype=float)
    up = np.asarray(line.upper_cap, dtype=float)
    rl = np.asarray(line.ramp_limit, dtype=float)
    f0 = line.initial_flow if initial_flow is None else initial_flow
    return _project(c, lo, up, rl, f0, line.id)


def _project(c, lo, up, rl, f0, name="line"):
    T = len(c)
    clipped = np.clip(c, lo, up)
    steps = np.diff(np.concatenate([[f0], clipped]))
    if np.all(np.abs(steps) <= rl):
        return clipped
    stages: list[_Deriv] = []
    h = _Deriv([f0, f0], [-math.inf, 0.0], [0.0, math.inf])
    for t in range(T):
        if math.isinf(rl[t]):
            w = _Deriv([lo[t], up[t]], [-math.inf, 0.0], [0.0, math.inf])
        else:
            w = _window(h, rl[t])
        h = _add_quadratic_and_clip(w, c[t], lo[t], up[t])
        if h is None:
            raise InfeasibleLine(f"{name}: ramp chain leaves the capacity band at period {t}")
        stages.append(h)
    out = np.empty(T)
    out[-1] = stages[-1].argmin()
    for t in range(T - 1, 0, -1):
        v = stages[t - 1].argmin()
        r = rl[t]
        out[t - 1] = min(max(v, out[t] - r), out[t] + r)
    return out


@dataclass(frozen=True)
class FlowPolytope:
    """Feasible flow set of every line: capacity bands plus ramp chains."""

    upper: np.ndarray
    lower: np.ndarray
    ramp: np.ndarray
    initial_flow: np.ndarray
    line_ids: tuple[str, ...] = ()

    @classmethod
    def from_instance(cls, instance: Instance) -> "FlowPolytope":
        up, lo, rl, f0 = instance.line_arrays
        return cls(up, lo, rl, f0, tuple(ln.id for ln in instance.lines))

    @property
    def dimension(self) -> int:
        return self.upper.size

    def empty_lines(self) -> list[str]:
        """Lines whose ramp chain cannot stay inside the capacity band,
        found by forward interval propagation."""
        bad = []
        for j in range(self.upper.shape[0]):
            a = b = self.initial_flow[j]
            for t in range(self.upper.shape[1]):
                a, b = max(a - self.ramp[j, t], self.lower[j, t]), min(b + self.ramp[j, t], self.upper[j, t])
                if a > b:
                    bad.append(self.line_ids[j] if self.line_ids else str(j))
                    break
        return bad

    def project(self, flows: np.ndarray) -> np.ndarray:
        out = np.clip(flows, self.lower, self.upper)
        for j in np.flatnonzero(~np.all(np.isinf(self.ramp), axis=1)):
            out[j] = _project(flows[j], self.lower[j], self.upper[j], self.ramp[j],
                              self.initial_flow[j], self.line_ids[j] if self.line_ids else str(j))
        return out


# ----------------------------------------------------------------------
# price-flow solve


@dataclass(frozen=True)
class QpConfig:
    # Stop once the max-norm of the projected gradient drops below gtol.
    gtol: float = 1e-9
    max_iter: int = 5000
    armijo: float = 1e-4
    # initial step, MW per unit of price gap, as a fraction of the price range
    step_fraction: float = 0.01
    active_tol: float = 1e-7
    # money/MWh per MW of curvature applied outside a zone's clearable range
    penalty: float = 1e6
    feasibility_tol: float = 1e-7


@dataclass
class QpSolution:
    acceptance: dict
    status: str
    flows: np.ndarray
    fractions: np.ndarray
    prices: np.ndarray
    marginal_prices: np.ndarray
    mu_upper: np.ndarray
    mu_lower: np.ndarray
    rho_upper: np.ndarray
    rho_lower: np.ndarray
    surplus: float
    kkt_residual: float
    iterations: int
    history: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status != INFEASIBLE

    def outcome(self) -> ClearingOutcome:
        return ClearingOutcome(
            fractions=self.fractions, prices=self.prices, flows=self.flows,
            mu_upper=self.mu_upper, mu_lower=self.mu_lower,
            rho_upper=self.rho_upper, rho_lower=self.rho_lower,
            surplus=self.surplus)


class _Evaluator:
    """Total hourly-curve welfare and its flow gradient for fixed acceptance.

    Outside a zone-period's clearable range the welfare is continued as a
    concave quadratic so the ascent is pushed back toward feasibility.
    """

    def __init__(self, instance: Instance, bank: CurveBank, fixed: np.ndarray, penalty: float):
        self.bank = bank
        self.fixed = fixed
        self.A = instance.incidence
        self.K = penalty
        self.src = np.array([instance.zone_index[ln.source_zone] for ln in instance.lines], dtype=int)
        self.snk = np.array([instance.zone_index[ln.sink_zone] for ln in instance.lines], dtype=int)

    def injections(self, flows: np.ndarray) -> np.ndarray:
        inj = -self.fixed
        if flows.size:
            inj = inj - self.A @ flows
        return inj

    def __call__(self, flows: np.ndarray):
        inj = self.injections(flows).reshape(-1)
        clamped = np.clip(inj, self.bank.lo, self.bank.hi)
        e = inj - clamped
        w, m, _ = self.bank.solve(clamped)
        total = float(np.sum(w + m * e - 0.5 * self.K * e * e))
        marg = (m - self.K * e).reshape(self.bank.shape)
        grad = marg[self.snk] - marg[self.src]
        return total, grad, marg, float(np.max(np.abs(e))) if e.size else 0.0


def solve_price_flow(instance: Instance, acceptance: Acceptance,
                     config: QpConfig = QpConfig(), curves=None, bank: Optional[CurveBank] = None,
                     start: Optional[np.ndarray] = None) -> QpSolution:
    """Maximise surplus over flows and fractions with ``acceptance`` fixed.

    Each iterate clears every zone-period exactly; the ascent direction for
    a flow is the price difference sink minus source. On termination the
    congestion and ramp shadow prices are fitted to the price differences
    by non-negative least squares over the active constraints only, so
    inactive constraints carry zero shadow price.
    """
    validate_acceptance(instance, acceptance)
    if bank is None:
        bank = CurveBank(instance, curves if curves is not None else build_curves(instance))
    T, L = instance.n_periods, len(instance.lines)
    poly = FlowPolytope.from_instance(instance)
    fixed = instance.nonconvex_volumes(acceptance)
    ev = _Evaluator(instance, bank, fixed, config.penalty)

    if poly.empty_lines():
        return _infeasible(instance, acceptance, np.zeros((L, T)))

    f = poly.project(np.zeros((L, T)) if start is None else np.asarray(start, dtype=float))
    G, grad, _, _ = ev(f)
    history = [G]
    s0 = config.step_fraction * (instance.price_max - instance.price_min)
    step = s0
    status = MAX_ITER
    it = 0
    if L == 0:
        status = OPTIMAL
    for it in range(1, config.max_iter + 1):
        if L == 0:
            break
        pg = poly.project(f + grad) - f
        if np.max(np.abs(pg)) <= config.gtol:
            status = OPTIMAL
            break
        s = step
        accepted = False
        while s >= 1e-14 * s0:
            fn = poly.project(f + s * grad)
            d = fn - f
            Gn, gn, _, _ = ev(fn)
            # second test: the gradient at fn still ascends along d, which
            # for a concave objective certifies Gn >= G free of rounding noise
            if Gn >= G + config.armijo * float(np.sum(grad * d)) or float(np.sum(gn * d)) >= 0.0:
                accepted = True
                break
            s *= 0.5
        if not accepted or not np.any(d):
            break
        dg = gn - grad
        curv = -float(np.sum(d * dg))
        # Barzilai-Borwein trial step for the next iteration
        step = float(np.sum(d * d)) / curv if curv > 0 else s0
        step = min(max(step, 1e-12 * s0), 1e6 * s0)
        f, G, grad = fn, Gn, gn
        history.append(G)

    f = _snap_to_bounds(f, poly, config.active_tol)
    return _finish(instance, acceptance, curves, ev, poly, f, status, it, history, config)


def _snap_to_bounds(f, poly: FlowPolytope, tol: float) -> np.ndarray:
    if not f.size:
        return f
    g = np.where(np.abs(f - poly.upper) <= tol, poly.upper, f)
    g = np.where(np.abs(g - poly.lower) <= tol, poly.lower, g)
    prev = np.concatenate([poly.initial_flow[:, None], g[:, :-1]], axis=1)
    if np.all(np.abs(g - prev) <= poly.ramp + 1e-12):
        return g
    return f


def _infeasible(instance, acceptance, flows) -> QpSolution:
    Z, T, L = len(instance.zones), instance.n_periods, len(instance.lines)
    zeros = np.zeros((L, T))
    return QpSolution(
        acceptance=dict(acceptance), status=INFEASIBLE, flows=flows,
        fractions=np.zeros(len(instance.segments)),
        prices=np.full((Z, T), float(instance.price_min)),
        marginal_prices=np.full((Z, T), float(instance.price_min)),
        mu_upper=zeros, mu_lower=zeros.copy(), rho_upper=zeros.copy(), rho_lower=zeros.copy(),
        surplus=-math.inf, kkt_residual=math.inf, iterations=0)


def _finish(instance, acceptance, curves, ev, poly, f, status, iterations, history, config) -> QpSolution:
    Z, T = len(instance.zones), instance.n_periods
    bank = ev.bank
    inj = ev.injections(f).reshape(-1)
    tol = config.feasibility_tol
    if np.any(inj > bank.hi + tol) or np.any(inj < bank.lo - tol):
        return _infeasible(instance, acceptance, f)
    _, marg, prices = bank.solve(np.clip(inj, bank.lo, bank.hi))
    zi, per, p0, p1, q = instance.segment_arrays
    # one formula serves both stacks: demand segments have p1 < p0
    x = np.clip((marg[zi * T + per] - p0) / (p1 - p0), 0.0, 1.0)
    prices = prices.reshape(Z, T)
    marg = marg.reshape(Z, T)

    surplus = float(np.sum(q * (p0 * x + (p1 - p0) * x * x / 2.0)))
    for b in instance.bids:
        st = acceptance[b.id]
        if st is not None:
            surplus += b.price * math.fsum(b.profiles[st])

    mu_up, mu_lo, rho_up, rho_lo, resid = recover_shadow_prices(instance, f, prices, config.active_tol)
    return QpSolution(
        acceptance=dict(acceptance), status=status, flows=f, fractions=x,
        prices=prices, marginal_prices=marg,
        mu_upper=mu_up, mu_lower=mu_lo, rho_upper=rho_up, rho_lower=rho_lo,
        surplus=surplus, kkt_residual=resid, iterations=iterations, history=history)


def recover_shadow_prices(instance: Instance, flows: np.ndarray, prices: np.ndarray,
                          active_tol: float = 1e-7):
    """Fit (mu_upper, mu_lower, rho_upper, rho_lower) to the zone price
    differences of every line, using only constraints active at ``flows``.

    Returns the four (L, T) arrays and the max stationarity/complementarity
    residual recomputed from the fitted values.
    """
    L, T = len(instance.lines), instance.n_periods
    up, lo, rl, f0 = instance.line_arrays
    out = [np.zeros((L, T)) for _ in range(4)]
    worst = 0.0
    for j, ln in enumerate(instance.lines):
        dp = prices[instance.zone_index[ln.sink_zone]] - prices[instance.zone_index[ln.source_zone]]
        fj = flows[j]
        prev = np.concatenate([[f0[j]], fj[:-1]])
        step = fj - prev
        cols, tags = [], []
        for t in range(T):
            if fj[t] >= up[j, t] - active_tol:
                col = np.zeros(T); col[t] = 1.0
                cols.append(col); tags.append((0, t))
            if fj[t] <= lo[j, t] + active_tol:
                col = np.zeros(T); col[t] = -1.0
                cols.append(col); tags.append((1, t))
            if math.isfinite(rl[j, t]) and step[t] >= rl[j, t] - active_tol:
                col = np.zeros(T); col[t] = 1.0
                if t > 0:
                    col[t - 1] = -1.0
                cols.append(col); tags.append((2, t))
            if math.isfinite(rl[j, t]) and -step[t] >= rl[j, t] - active_tol:
                col = np.zeros(T); col[t] = -1.0
                if t > 0:
                    col[t - 1] = 1.0
                cols.append(col); tags.append((3, t))
        if cols and all(kind < 2 for kind, _ in tags):
            # caps only: every period stands alone
            for kind, t in tags:
                out[kind][j, t] = max(dp[t], 0.0) if kind == 0 else max(-dp[t], 0.0)
            fit = out[0][j] - out[1][j]
        elif cols:
            M = np.column_stack(cols)
            lam, _ = nnls(M, dp)
            for (kind, t), v in zip(tags, lam):
                out[kind][j, t] = v
            fit = M @ lam
        else:
            fit = np.zeros(T)
        worst = max(worst, float(np.max(np.abs(fit - dp))) if T else 0.0)
        slack_r = np.where(np.isfinite(rl[j]), rl[j], 0.0)
        comp = max(
            float(np.max(np.abs((fj - up[j]) * out[0][j]))),
            float(np.max(np.abs((lo[j] - fj) * out[1][j]))),
            float(np.max(np.abs((step - slack_r) * out[2][j]))),
            float(np.max(np.abs((-step - slack_r) * out[3][j]))),
        )
        worst = max(worst, comp)
    return out[0], out[1], out[2], out[3], worst


def verify_price_flow(instance: Instance, solution: QpSolution, tol: float = 1e-5) -> AuditReport:
    """Check the complementarity and stationarity families (8)-(12)."""
    report = audit(instance, solution.outcome(), solution.acceptance,
                   Tolerances(complementarity=tol))
    return AuditReport({f: report.checks[f] for f in (8, 9, 10, 11, 12)})
