"""Per zone-period supply/demand curves and the single zone-period clearing.

``injection`` throughout this module is the net volume pushed INTO the zone
by everything that is held fixed (accepted non-convex bids and line flows)::

    injection = -(accepted non-convex volume + exports - imports)

so the balance equation of the zone-period reads ``sum_i Q_i x_i = injection``.
A zone exporting 25 MWh has injection -25. Raising the injection never raises
the clearing price.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .model import Instance

_VOL_TOL = 1e-9


class InfeasibleClearing(ValueError):
    """The zone-period balance cannot be met for the given injection."""


@dataclass(frozen=True, eq=False)
class NetCurve:
    zone: str
    period: int
    price_min: float
    price_max: float
    supply_stack: tuple[int, ...]     # segment indices, ascending price
    demand_stack: tuple[int, ...]     # segment indices, descending price
    supply_p0: np.ndarray
    supply_p1: np.ndarray
    supply_q: np.ndarray              # signed, <= 0
    demand_p0: np.ndarray
    demand_p1: np.ndarray
    demand_q: np.ndarray              # signed, >= 0

    @property
    def supply_cum(self) -> np.ndarray:
        return np.cumsum(self.supply_q)

    @property
    def demand_cum(self) -> np.ndarray:
        return np.cumsum(self.demand_q)

    @property
    def total_supply(self) -> float:
        return float(-self.supply_q.sum())

    @property
    def total_demand(self) -> float:
        return float(self.demand_q.sum())

    def __post_init__(self):
        # Knots of the volume-at-price functions, ascending in price.
        s_vol = -self.supply_q
        if len(s_vol):
            sx = np.concatenate([[self.supply_p0[0]], self.supply_p1])
            sy = np.concatenate([[0.0], np.cumsum(s_vol)])
        else:
            sx, sy = np.array([self.price_min]), np.array([0.0])
        if len(self.demand_q):
            cum = np.concatenate([[0.0], np.cumsum(self.demand_q)])
            # walk the descending stack backwards: (P1_k, V_k), (P0_k, V_{k-1})
            dx = np.empty(2 * len(self.demand_q))
            dy = np.empty_like(dx)
            dx[0::2] = self.demand_p1[::-1]
            dy[0::2] = cum[1:][::-1]
            dx[1::2] = self.demand_p0[::-1]
            dy[1::2] = cum[:-1][::-1]
        else:
            dx, dy = np.array([self.price_min]), np.array([0.0])
        bp = np.unique(np.concatenate([sx, dx, [self.price_min, self.price_max]]))
        bp = bp[(bp >= self.price_min) & (bp <= self.price_max)]
        object.__setattr__(self, "_sx", sx)
        object.__setattr__(self, "_sy", sy)
        object.__setattr__(self, "_dx", dx)
        object.__setattr__(self, "_dy", dy)
        object.__setattr__(self, "_bp", bp)
        object.__setattr__(self, "_d_at_bp", np.interp(bp, dx, dy))
        object.__setattr__(self, "_s_at_bp", np.interp(bp, sx, sy))
        top = self.price_min + float(np.sum(self.supply_p1 - self.supply_p0))
        object.__setattr__(self, "_supply_top", top)

    def supply_volume_at(self, price: float) -> float:
        return float(np.interp(price, self._sx, self._sy))

    def demand_volume_at(self, price: float) -> float:
        return float(np.interp(price, self._dx, self._dy))

    def feasible(self, injection: float) -> bool:
        return -self.total_supply - _VOL_TOL <= injection <= self.total_demand + _VOL_TOL

    def marginal_price(self, injection: float) -> float:
        """Price at which demand minus supply equals ``injection``.

        This is the derivative of the zone-period welfare with respect to the
        injection. Where the excess-demand function is flat at zero over a
        price interval the midpoint is returned.
        """
        excess = self._d_at_bp - self._s_at_bp - injection
        bp = self._bp
        nonpos = np.flatnonzero(excess <= 0.0)
        if len(nonpos) == 0:
            return float(bp[-1])
        hi = int(nonpos[0])
        if excess[hi] < 0.0:
            if hi == 0:
                return float(bp[0])
            lo = hi - 1
            e_lo, e_hi = excess[lo], excess[hi]
            return float(bp[lo] + (bp[hi] - bp[lo]) * e_lo / (e_lo - e_hi))
        # exact zero at bp[hi]; extend over a flat stretch
        end = hi
        while end + 1 < len(bp) and excess[end + 1] == 0.0:
            end += 1
        return float(0.5 * (bp[hi] + bp[end]))

    def fractions_at(self, price: float) -> tuple[np.ndarray, np.ndarray]:
        """Fill fractions of the supply and demand stacks at ``price``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            xs = np.clip((price - self.supply_p0) / (self.supply_p1 - self.supply_p0), 0.0, 1.0)
            xd = np.clip((self.demand_p0 - price) / (self.demand_p0 - self.demand_p1), 0.0, 1.0)
        return xs, xd

    def welfare(self, xs: np.ndarray, xd: np.ndarray) -> float:
        ws = self.supply_q * (self.supply_p0 * xs + (self.supply_p1 - self.supply_p0) * xs * xs / 2.0)
        wd = self.demand_q * (self.demand_p0 * xd + (self.demand_p1 - self.demand_p0) * xd * xd / 2.0)
        return float(ws.sum() + wd.sum())

    def solve(self, injection: float) -> tuple[float, float, float]:
        """Hot-path clearing: (welfare, marginal price, reported price).

        Raises InfeasibleClearing when the balance is out of reach.
        """
        if not self.feasible(injection):
            raise InfeasibleClearing(f"{self.zone}/{self.period}: injection {injection} out of range")
        pm = self.marginal_price(injection)
        xs, xd = self.fractions_at(pm)
        price = min(pm, self._supply_top) if len(self.supply_q) else self.price_min
        return self.welfare(xs, xd), pm, price


@dataclass(frozen=True)
class ZonePeriodClearing:
    zone: str
    period: int
    feasible: bool
    price: float = float("nan")
    marginal_price: float = float("nan")
    fractions: Mapping[int, float] = None
    traded_volume: float = 0.0
    balance_residual: float = float("nan")


def build_curves(instance: Instance) -> dict[tuple[str, int], NetCurve]:
    """Aggregate the instance's segments into one NetCurve per zone-period."""
    _, _, p0, p1, q = instance.segment_arrays
    out = {}
    for (zone, t), (sup, dem) in instance.stacks.items():
        s, d = list(sup), list(dem)
        out[zone, t] = NetCurve(
            zone=zone, period=t,
            price_min=float(instance.price_min), price_max=float(instance.price_max),
            supply_stack=tuple(sup), demand_stack=tuple(dem),
            supply_p0=p0[s], supply_p1=p1[s], supply_q=q[s],
            demand_p0=p0[d], demand_p1=p1[d], demand_q=q[d],
        )
    return out


def clear_zone_period(curve: NetCurve, injection: float) -> ZonePeriodClearing:
    """Welfare-maximising clearing of one zone-period with everything except
    the hourly segments frozen into ``injection``.

    The price reported is the supply-side price formula
    ``price_min + sum_supply (P1 - P0) x``; it coincides with the marginal
    price unless the supply stack is exhausted or empty.
    """
    if not curve.feasible(injection):
        return ZonePeriodClearing(curve.zone, curve.period, feasible=False)
    pm = curve.marginal_price(injection)
    xs, xd = curve.fractions_at(pm)
    price = curve.price_min + float(np.sum((curve.supply_p1 - curve.supply_p0) * xs))
    fractions = {k: float(v) for k, v in zip(curve.supply_stack, xs)}
    fractions.update({k: float(v) for k, v in zip(curve.demand_stack, xd)})
    residual = float(np.dot(curve.supply_q, xs) + np.dot(curve.demand_q, xd) - injection)
    return ZonePeriodClearing(
        zone=curve.zone, period=curve.period, feasible=True,
        price=price, marginal_price=pm, fractions=fractions,
        traded_volume=float(np.dot(curve.demand_q, xd)),
        balance_residual=residual,
    )


def surplus_of_clearing(curve: NetCurve, clearing: ZonePeriodClearing) -> float:
    """Welfare of the hourly segments of one zone-period."""
    if not clearing.feasible:
        raise InfeasibleClearing(f"{curve.zone}/{curve.period}: clearing is infeasible")
    xs = np.array([clearing.fractions[k] for k in curve.supply_stack], dtype=float)
    xd = np.array([clearing.fractions[k] for k in curve.demand_stack], dtype=float)
    return curve.welfare(xs, xd)


class CurveBank:
    """All zone-period curves of an instance packed into padded arrays so a
    whole grid of clearings runs as a handful of numpy operations.

    Row ``z * n_periods + t`` holds zone ``z``, period ``t``. Results agree
    with ``NetCurve.solve`` row by row.
    """

    def __init__(self, instance: Instance, curves: Mapping[tuple[str, int], NetCurve] | None = None):
        curves = curves if curves is not None else build_curves(instance)
        T = instance.n_periods
        self.shape = (len(instance.zones), T)
        rows = [curves[z, t] for z in instance.zones for t in range(T)]
        n = len(rows)
        pmin, pmax = float(instance.price_min), float(instance.price_max)
        self.price_min = pmin

        kb = max(len(c._bp) for c in rows)
        ks = max(1, max(len(c.supply_q) for c in rows))
        kd = max(1, max(len(c.demand_q) for c in rows))
        self.bp = np.empty((n, kb))
        self.excess0 = np.empty((n, kb))   # demand minus supply volume at each breakpoint
        # padding never fills: supply pads sit above price_max, demand pads below price_min
        self.s_p0 = np.full((n, ks), pmax); self.s_p1 = np.full((n, ks), pmax + 1.0)
        self.s_q = np.zeros((n, ks))
        self.d_p0 = np.full((n, kd), pmin); self.d_p1 = np.full((n, kd), pmin - 1.0)
        self.d_q = np.zeros((n, kd))
        self.lo = np.empty(n)
        self.hi = np.empty(n)
        for r, c in enumerate(rows):
            m = len(c._bp)
            self.bp[r, :m] = c._bp
            self.bp[r, m:] = c._bp[-1]
            e = c._d_at_bp - c._s_at_bp
            self.excess0[r, :m] = e
            self.excess0[r, m:] = e[-1]
            m = len(c.supply_q)
            self.s_p0[r, :m], self.s_p1[r, :m], self.s_q[r, :m] = c.supply_p0, c.supply_p1, c.supply_q
            m = len(c.demand_q)
            self.d_p0[r, :m], self.d_p1[r, :m], self.d_q[r, :m] = c.demand_p0, c.demand_p1, c.demand_q
            self.lo[r] = -c.total_supply
            self.hi[r] = c.total_demand
        self.s_w = self.s_p1 - self.s_p0
        self.d_w = self.d_p0 - self.d_p1

    def rows_of_zone(self, z: int) -> slice:
        T = self.shape[1]
        return slice(z * T, (z + 1) * T)

    def solve(self, injection, rows=slice(None)):
        """Clear the selected rows at ``injection``, which must lie inside
        each row's clearable range.

        Returns (welfare, marginal price, reported price) arrays.
        """
        inj = np.asarray(injection, dtype=float).reshape(-1)
        bp = self.bp[rows]
        e = self.excess0[rows] - inj[:, None]
        k = bp.shape[1]
        n_pos = np.count_nonzero(e > 0.0, axis=1)
        n_nonneg = np.count_nonzero(e >= 0.0, axis=1)
        idx = np.arange(len(inj))
        hi = np.minimum(n_pos, k - 1)
        lo = np.maximum(hi - 1, 0)
        e_lo, e_hi = e[idx, lo], e[idx, hi]
        b_lo, b_hi = bp[idx, lo], bp[idx, hi]
        with np.errstate(divide="ignore", invalid="ignore"):
            interp = b_lo + (b_hi - b_lo) * e_lo / (e_lo - e_hi)
        flat_end = bp[idx, np.clip(n_nonneg - 1, 0, k - 1)]
        pm = np.where(n_pos >= k, bp[:, -1],
                      np.where(e_hi == 0.0, 0.5 * (b_hi + flat_end),
                               np.where(n_pos == 0, bp[:, 0], interp)))
        col = pm[:, None]
        s_p0, s_w, s_q = self.s_p0[rows], self.s_w[rows], self.s_q[rows]
        d_p0, d_w, d_q = self.d_p0[rows], self.d_w[rows], self.d_q[rows]
        xs = np.clip((col - s_p0) / s_w, 0.0, 1.0)
        xd = np.clip((d_p0 - col) / d_w, 0.0, 1.0)
        welfare = (np.sum(s_q * (s_p0 * xs + s_w * xs * xs / 2.0), axis=1)
                   + np.sum(d_q * (d_p0 * xd - d_w * xd * xd / 2.0), axis=1))
        price = self.price_min + np.sum(s_w * xs, axis=1)
        return welfare, pm, price
