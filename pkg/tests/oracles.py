"""Independent reference computations used by several test modules."""

import numpy as np


def random_stacks(rng, pmin=0.0, pmax=100.0, max_seg=5):
    """Contiguous supply stack and descending demand stack as arrays
    (p0, p1, |q|) each."""
    ns, nd = int(rng.integers(1, max_seg + 1)), int(rng.integers(1, max_seg + 1))
    sb = np.sort(rng.uniform(pmin, pmax, ns - 1))
    sb = np.concatenate([[pmin], sb, [pmax]])
    s = (sb[:-1], sb[1:], rng.uniform(1, 50, ns))
    db = np.sort(rng.uniform(pmin, pmax, nd + 1))[::-1]
    if rng.random() < 0.5:
        db[0], db[-1] = pmax, pmin
    d = (db[:-1], db[1:], rng.uniform(1, 50, nd))
    return s, d


def merit_welfare(s, d, injection, grid=4001):
    """Best welfare of a zone-period by search over traded supply volume.

    For a given supply volume the cheapest dispatch and the most valuable
    demand allocation are filled greedily; the resulting value is concave
    in the volume, so a dense grid followed by ternary refinement finds the
    optimum. Returns -inf if the injection cannot be balanced.
    """
    sp0, sp1, sq = s
    dp0, dp1, dq = d
    so = np.argsort(sp0)
    do = np.argsort(-dp0)

    def fill(p0, p1, q, order, vol):
        val = 0.0
        left = vol
        for k in order:
            take = min(q[k], max(left, 0.0))
            x = take / q[k]
            val += q[k] * (p0[k] * x + (p1[k] - p0[k]) * x * x / 2.0)
            left -= take
        return val

    stot, dtot = sq.sum(), dq.sum()
    # supply volume v, demand volume v + injection (injection pushes volume in)
    lo = max(0.0, -injection)
    hi = min(stot, dtot - injection)
    if lo > hi + 1e-12:
        return -np.inf

    def f(v):
        return fill(dp0, dp1, dq, do, v + injection) - fill(sp0, sp1, sq, so, v)

    vs = np.linspace(lo, hi, grid)
    vals = np.array([f(v) for v in vs])
    k = int(np.argmax(vals))
    a, b = vs[max(k - 1, 0)], vs[min(k + 1, grid - 1)]
    for _ in range(100):
        m1, m2 = a + (b - a) / 3, b - (b - a) / 3
        if f(m1) < f(m2):
            a = m1
        else:
            b = m2
    return max(float(vals[k]), f(0.5 * (a + b)))
