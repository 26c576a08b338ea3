"""Second-moment kernel, its GMC counterpart and correlation-product series."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from .quadrature import MCEstimate, QuadSpec, integrate_1d, mc_mean, simplex_integral
from .special_fn import gtheta_table, heat_kernel_r2

TWO_PI = 2.0 * math.pi
K2_FLOOR = 1e-8


def _check(t):
    if not (0 < t <= 1):
        raise ValueError("horizon must lie in (0, 1]")


def K2(t: float, theta: float, r: float, spec: QuadSpec = QuadSpec()) -> float:
    """2 pi int_0^t g_s(r) Gbar(t - s) ds; +inf at r = 0.

    Quadrature runs in x = log s, where the integrand
    exp(-r^2 e^{-x} / 2) Gbar(t - e^x) is bounded and smooth.
    """
    _check(t)
    if r < 0:
        raise ValueError("separation must be nonnegative")
    if r == 0:
        return math.inf
    tab = gtheta_table(theta)
    r2 = r * r
    lt = math.log(t)
    lo = math.log(r2 / 1490.0)
    if lo >= lt:
        return 0.0

    def f(x):
        return math.exp(-0.5 * r2 * math.exp(-x)) * float(tab.Gbar(-t * math.expm1(x - lt)))

    val, _ = integrate_1d(f, lo, lt, spec, points=[math.log(r2 / 2.0)])
    return val


def k2_second_moment(t: float, theta: float, delta: float) -> float:
    """1 + int int g_delta(x) g_delta(x') K2(|x - x'|) dx dx'.

    x - x' has variance 2 delta per axis; with rho = r^2 / (4 delta) the
    radial measure becomes exp(-rho) d rho.
    """
    _check(t)
    if delta <= 0:
        raise ValueError("delta must be positive")
    f = lambda rho: math.exp(-rho) * K2(t, theta, math.sqrt(4.0 * delta * rho))
    lo = 1e-12 / delta
    total = 0.0
    for a, b in ((0.0, lo), (lo, 1.0), (1.0, 60.0)):
        total += integrate.quad(f, a, b, limit=200, epsabs=1e-13, epsrel=1e-10)[0]
    return 1.0 + total


def k_gmc(t: float, theta: float, r: float) -> float:
    """Matched GMC covariance log(1 + K2)."""
    k = K2(t, theta, r)
    return math.inf if math.isinf(k) else math.log1p(k)


class K2Table:
    """Cubic spline of log K2 in log r on [K2_FLOOR, r_hi]; zero beyond r_hi."""

    def __init__(self, t: float, theta: float, n: int = 400):
        _check(t)
        self.t, self.theta = float(t), float(theta)
        self.r_hi = 12.0 * math.sqrt(t)
        lr = np.linspace(math.log(K2_FLOOR), math.log(self.r_hi), n)
        vals = np.array([K2(t, theta, math.exp(x)) for x in lr])
        self._spline = CubicSpline(lr, np.log(vals))
        self.floor_hits = 0

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        self.floor_hits += int(np.count_nonzero(r < K2_FLOOR))
        x = np.log(np.clip(r, K2_FLOOR, self.r_hi))
        out = np.exp(self._spline(x))
        return np.where(r >= self.r_hi, 0.0, out)


_K2_TABLES: dict[tuple[float, float], K2Table] = {}


def k2_table(t: float, theta: float) -> K2Table:
    key = (float(t), float(theta))
    if key not in _K2_TABLES:
        _K2_TABLES[key] = K2Table(t, theta)
    return _K2_TABLES[key]


def K2_covariance_full(t: float, theta: float, x, xp, y, yp) -> float:
    """Two-time covariance kernel K_t(x, x'; y, y').

    With sigma = s + q (q = t - u) the double time integral becomes
    int_0^t G(t - sigma) sigma int_0^1 g_{sigma l}(x'-x) g_{sigma(1-l)}(y'-y) dl dsigma.
    The outer integral is split at t/2: panels in log sigma below (where the
    heat kernels peak), dGbar substitution above (where G is singular). The
    inner integral is adaptive and vectorized over the outer nodes.
    """
    _check(t)
    x, xp, y, yp = (np.asarray(v, dtype=float) for v in (x, xp, y, yp))
    rx2 = float(np.sum((xp - x) ** 2))
    ry2 = float(np.sum((yp - y) ** 2))
    if rx2 == 0.0 or ry2 == 0.0:
        return math.inf
    mid = 0.5 * (y + yp) - 0.5 * (x + xp)
    front = math.pi * heat_kernel_r2(t / 4.0, float(np.sum(mid * mid)))
    tab = gtheta_table(theta)
    half = 0.5 * t
    xg, wg = np.polynomial.legendre.leggauss(16)
    # lower part: sigma = e^s, exp(-(rx + ry)^2 / 2 sigma) negligible below lo
    lo = min(math.log((math.sqrt(rx2) + math.sqrt(ry2)) ** 2 / 1400.0), math.log(half) - 1.0)
    edges = np.linspace(lo, math.log(half), max(2, int(math.log(half) - lo) + 2))
    sig_lo, w_lo = [], []
    for e0, e1 in zip(edges[:-1], edges[1:]):
        sv = np.exp(e0 + 0.5 * (e1 - e0) * (xg + 1.0))
        sig_lo.append(sv)
        w_lo.append(0.5 * (e1 - e0) * wg * sv * tab.G(t - sv))
    # upper part: w = t - sigma in (0, t/2), v = Gbar(w)
    top = float(tab.Gbar(half))
    xh, wh = np.polynomial.legendre.leggauss(48)
    v = 0.5 * top * (xh + 1.0)
    sig_hi = t - tab.Gbar_inv(v)
    w_hi = 0.5 * top * wh
    sig = np.concatenate(sig_lo + [sig_hi])
    wts = np.concatenate(w_lo + [w_hi])
    keep = sig > 0
    sig, wts = sig[keep], wts[keep]

    def inner(lam):
        lam = min(max(lam, 1e-300), 1.0 - 1e-16)
        return heat_kernel_r2(sig * lam, rx2) * heat_kernel_r2(sig * (1.0 - lam), ry2)

    vals, _ = integrate.quad_vec(inner, 0.0, 1.0, epsabs=0.0, epsrel=1e-10, limit=2000)
    return front * float(np.dot(wts, sig * vals))


def K3_gmc(t: float, theta: float, r12: float, r13: float, r23: float) -> float:
    """GMC centered third-moment kernel from pairwise K2 values."""
    if min(r12, r13, r23) <= 0:
        return math.inf
    k12, k13, k23 = (K2(t, theta, r) for r in (r12, r13, r23))
    return k12 * k23 * k13 + k12 * k23 + k12 * k13 + k13 * k23


# --- correlation-product series -------------------------------------------
#
# A term of order m is an integral over ordered times a_1 < b_1 < ... < a_m
# (the last renewal gap integrated out) of a sum over label sequences.
# A label's first visit at block i contributes 2 pi g_{a_i}(r_label); a
# revisit contributes 1 / (a_i - b_prev), prev being its last earlier visit.
# Consecutive labels differ.


def _sequence_dp(n, m, n_labels, factor, require_all):
    """Sum over consecutive-distinct label sequences of products of step factors.

    ``factor(d, j, i, last)`` is the factor for visiting label d at block i
    when its previous visit was block j (j = -1 for a first visit); ``last``
    holds the last visit of every label before the step. The state is
    (current label, last visit of every label), so the cost is polynomial in m.
    """
    states: dict[tuple, np.ndarray] = {}
    for c in range(n_labels):
        last = [-1] * n_labels
        last[c] = 0
        states[(c, tuple(last))] = np.array(factor(c, -1, 0, tuple([-1] * n_labels)), dtype=float) * np.ones(n)
    for i in range(1, m):
        nxt: dict[tuple, np.ndarray] = {}
        for (c, last), wgt in states.items():
            for d in range(n_labels):
                if d == c:
                    continue
                new = list(last)
                new[d] = i
                key = (d, tuple(new))
                val = wgt * factor(d, last[d], i, last)
                if key in nxt:
                    nxt[key] += val
                else:
                    nxt[key] = val
        states = nxt
    total = np.zeros(n)
    for (_, last), wgt in states.items():
        if require_all and min(last) < 0:
            continue
        total += wgt
    return total


def label_sequence_weights(a, b, radii, require_all: bool = True):
    """Integrand of an order-m term at chains (a, b), summed over label sequences."""
    n, m = a.shape
    first = [TWO_PI * heat_kernel_r2(a, float(r) ** 2) for r in radii]

    def factor(d, j, i, last):
        return first[d][:, i] if j < 0 else 1.0 / (a[:, i] - b[:, j])

    return _sequence_dp(n, m, len(radii), factor, require_all)


def count_label_sequences(n_labels: int, m: int, require_all: bool) -> int:
    """Number of consecutive-distinct sequences (inclusion-exclusion on labels)."""
    def seqs(k):
        return k * (k - 1) ** (m - 1) if k > 0 else 0
    if not require_all:
        return seqs(n_labels)
    tot = 0
    for k in range(n_labels, 0, -1):
        tot += (-1) ** (n_labels - k) * math.comb(n_labels, k) * seqs(k)
    return tot


def _e1_mass(r2, lo, hi):
    """int_lo^hi exp(-r2 / 2a) / a da = E1(r2 / 2hi) - E1(r2 / 2lo)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ylo = np.where(lo > 0, r2 / (2.0 * np.maximum(lo, 1e-300)), np.inf)
        mass = special.exp1(r2 / (2.0 * hi)) - special.exp1(ylo)
        # short intervals lose digits to cancellation: midpoint rule instead
        mid = 0.5 * (lo + hi)
        short = (hi - lo) < 1e-6 * hi
        approx = (hi - lo) * np.exp(-r2 / (2.0 * mid)) / mid
    return np.where(short, approx, mass)


def _sample_first_visit(rng, r2, lo, hi):
    """Draw a in (lo, hi) with density proportional to exp(-r2 / 2a) / a.

    Inverse CDF in y = r2 / 2a: bisection on log y, then Newton steps.
    """
    with np.errstate(divide="ignore"):
        y_top = np.where(lo > 0, r2 / (2.0 * np.maximum(lo, 1e-300)), np.inf)
    y_top = np.minimum(y_top, 800.0)
    y_bot = r2 / (2.0 * hi)
    e_top = special.exp1(y_top)
    target = e_top + rng.random(lo.shape) * (special.exp1(y_bot) - e_top)
    s_lo, s_hi = np.log(y_bot), np.log(y_top)
    for _ in range(24):
        mid = 0.5 * (s_lo + s_hi)
        small_y = special.exp1(np.exp(mid)) > target
        s_lo = np.where(small_y, mid, s_lo)
        s_hi = np.where(small_y, s_hi, mid)
    s_mid = 0.5 * (s_lo + s_hi)
    for _ in range(3):
        # d E1(e^s) / ds = -exp(-e^s)
        y = np.exp(s_mid)
        s_mid = np.clip(s_mid + (special.exp1(y) - target) * np.exp(y), s_lo, s_hi)
    a = r2 / (2.0 * np.exp(s_mid))
    return np.clip(a, lo, hi)


class HeatProposal:
    """First-visit times with density proportional to 2 pi g_a(r) = exp(-r^2 / 2a) / a."""

    def __init__(self, r: float):
        self.r2 = float(r) ** 2

    def unnorm(self, a):
        return np.exp(-self.r2 / (2.0 * a)) / a

    def mass(self, lo, hi):
        return _e1_mass(self.r2, lo, hi)

    def sample(self, rng, lo, hi):
        return _sample_first_visit(rng, self.r2, lo, hi)


class ShiftProposal:
    """First-visit times with density proportional to 1 / (a + c)."""

    def __init__(self, c: float):
        if c <= 0:
            raise ValueError("shift must be positive")
        self.c = float(c)

    def unnorm(self, a):
        return 1.0 / (a + self.c)

    def mass(self, lo, hi):
        return np.log((hi + self.c) / (lo + self.c))

    def sample(self, rng, lo, hi):
        ratio = (hi + self.c) / (lo + self.c)
        a = (lo + self.c) * np.exp(rng.random(np.shape(lo)) * np.log(ratio)) - self.c
        return np.clip(a, lo, hi)


def _future_revisits(m, i, unvisited):
    """Revisits still to come after block i when ``unvisited`` labels remain."""
    return np.maximum(m - 1 - i - np.asarray(unvisited), 0)


# mixture weights of the chain sampler
FIRST_MIX = (0.5, 0.5)        # whole interval, compact interval
U_MIX = (0.4, 0.3, 0.3)       # whole room, below the distance back, compact
W_TILT = 0.5                  # share of revisit gaps drawn toward zero


def _u_caps(t, m, i, a_i, back):
    """Upper ends of the renewal-gap mixture components in block i."""
    room = t - a_i
    back = np.where(np.isfinite(back), np.minimum(back, room), room)
    return room, back, room / (m - i)


def _u_ratio(table, u, caps):
    """Mixture density of u relative to G / Gbar(room)."""
    groom = table.Gbar(caps[0])
    out = np.zeros_like(u)
    for p, cap in zip(U_MIX, caps):
        out += p * (u <= cap) * groom / table.Gbar(cap)
    return out


def _first_caps(t, m, i, lo):
    return t, lo + (t - lo) / (m - i + 1)


def _first_density(prop, a, lo, caps):
    h = prop.unnorm(a)
    out = np.zeros_like(a)
    for q, hi in zip(FIRST_MIX, caps):
        out += q * (a <= hi) * h / prop.mass(lo, hi)
    return out


def chain_term_sampler(t, m, table, proposals, first_factor=None, head=None,
                       require_all=True):
    """Sequential importance sampler for one order-m chain term.

    The term integrates, over ordered times with the last renewal gap
    integrated out, a sum over consecutive-distinct label sequences of
    products of step factors: ``first_factor(d, a_i)`` at a label's first
    visit (default: the proposal's own unnormalized density) and
    1 / (a_i - b_prev) at a revisit. ``head(a, b)``, if given, multiplies the
    whole integrand and may return several columns, which are then estimated
    on common draws.

    A label sequence is drawn by a uniform Markov rule. First visits draw
    their time from the label's proposal (on the whole remaining interval or
    a compact one); renewal gaps come from G restricted to one of a few upper
    ends; the gap before a revisit is drawn from the density proportional to
    1 / (c + w), c being the distance back to the matching earlier block,
    optionally tilted toward zero. The weight divides by the mixture density
    over all sequences, computed by the same dynamic program as the integrand.
    """
    L = len(proposals)
    if first_factor is None:
        first_factor = lambda d, a: proposals[d].unnorm(a)

    def draw(rng, n):
        rows = np.arange(n)
        seq = np.empty((n, m), dtype=int)
        seq[:, 0] = rng.integers(0, L, n)
        for i in range(1, m):
            seq[:, i] = (seq[:, i - 1] + rng.integers(1, L, n)) % L
        a = np.empty((n, m))
        b = np.full((n, m), np.nan)
        last = np.full((n, L), -1)

        def place_first(i, sel, lo):
            caps = _first_caps(t, m, i, lo)
            hi = np.where(rng.random(sel.size) < FIRST_MIX[0], caps[0], caps[1])
            out = np.empty(sel.size)
            for d in range(L):
                k = seq[sel, i] == d
                if np.any(k):
                    out[k] = proposals[d].sample(rng, lo[k], hi[k])
            return out

        a[:, 0] = place_first(0, rows, np.zeros(n))
        last[rows, seq[:, 0]] = 0
        logw = np.zeros(n)
        for i in range(m - 1):
            d_next = seq[:, i + 1]
            j = last[rows, d_next]
            rev = j >= 0
            back = np.where(rev, a[:, i] - b[rows, np.maximum(j, 0)], np.inf)
            caps = _u_caps(t, m, i, a[:, i], back)
            with np.errstate(divide="ignore"):
                logw += np.log(table.Gbar(caps[0]))
            pick = rng.random(n)
            cap = np.where(pick < U_MIX[0], caps[0],
                           np.where(pick < U_MIX[0] + U_MIX[1], caps[1], caps[2]))
            u = np.minimum(table.Gbar_inv(rng.random(n) * table.Gbar(cap)), cap)
            b[:, i] = a[:, i] + u
            room2 = np.maximum(t - b[:, i], 0.0)
            nxt = np.empty(n)
            if np.any(rev):
                c = np.maximum(b[rev, i] - b[rows[rev], j[rev]], 1e-300)
                big = np.log1p(room2[rev] / c)
                k = _future_revisits(m, i + 1, np.count_nonzero(last[rev] < 0, axis=1))
                v = rng.random(c.size)
                tilt = rng.random(c.size) < W_TILT
                x = np.where(tilt, big * (1.0 - v ** (1.0 / (k + 1))), big * v)
                nxt[rev] = b[rev, i] + np.minimum(c * np.expm1(x), room2[rev])
            if np.any(~rev):
                sel = rows[~rev]
                nxt[~rev] = place_first(i + 1, sel, b[sel, i])
            a[:, i + 1] = nxt
            last[rows, d_next] = i + 1
        with np.errstate(divide="ignore"):
            logw += np.log(table.Gbar(t - a[:, -1]))
        memo: dict = {}

        def f_num(dd, jj, ii, lst):
            key = ("num", dd, jj, ii)
            if key not in memo:
                memo[key] = (first_factor(dd, a[:, ii]) if jj < 0
                             else 1.0 / (a[:, ii] - b[:, jj]))
            return memo[key]

        def f_den(dd, jj, ii, lst):
            key = ("den", dd, jj, ii, sum(v < 0 for v in lst))
            if key in memo:
                return memo[key]
            if ii == 0:
                z = np.zeros(n)
                out = _first_density(proposals[dd], a[:, 0], z, _first_caps(t, m, 0, z)) / L
            else:
                prev = ii - 1
                rkey = ("rho", prev, jj)
                if rkey not in memo:
                    u = b[:, prev] - a[:, prev]
                    back = a[:, prev] - b[:, jj] if jj >= 0 else np.full(n, np.inf)
                    memo[rkey] = _u_ratio(table, u, _u_caps(t, m, prev, a[:, prev], back))
                rho = memo[rkey]
                if jj < 0:
                    lo = b[:, prev]
                    dens = _first_density(proposals[dd], a[:, ii], lo, _first_caps(t, m, ii, lo))
                else:
                    c = np.maximum(b[:, prev] - b[:, jj], 1e-300)
                    big = np.log1p((t - b[:, prev]) / c)
                    x = np.log1p((a[:, ii] - b[:, prev]) / c)
                    k = _future_revisits(m, ii, key[-1])
                    tilt = (k + 1) * np.clip(1.0 - x / big, 0.0, 1.0) ** k
                    dens = ((1.0 - W_TILT) + W_TILT * tilt) / ((a[:, ii] - b[:, jj]) * big)
                out = rho * dens / (L - 1)
            memo[key] = out
            return out

        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            num = _sequence_dp(n, m, L, f_num, require_all)
            den = _sequence_dp(n, m, L, f_den, False)
            out = np.exp(logw) * num / den
            if head is not None:
                h = np.asarray(head(a, b), dtype=float)
                out = out[:, None] * h if h.ndim == 2 else out * h
        return np.where(np.isfinite(out), out, 0.0)

    return draw


@dataclass(frozen=True)
class SeriesResult:
    value: float
    error: float
    terms: tuple
    term_errors: tuple
    m_last: int
    tail: float

    def __iter__(self):
        return iter((self.value, self.error))


def _tail_estimate(vals):
    """Last term, inflated by a geometric extrapolation when terms still decay slowly."""
    last = vals[-1]
    if len(vals) < 3 or last <= 0:
        return last
    q = min(0.95, math.sqrt(vals[-1] / vals[-3])) if vals[-3] > 0 else 0.95
    return last * max(1.0, q / (1.0 - q))


def _run_series(term, m_min, m_max, rel_tol):
    vals, errs = [], []
    running = 0.0
    for m in range(m_min, m_max + 1):
        v, e = term(m)
        if v < 0:
            raise RuntimeError(f"negative series term at m={m}")
        vals.append(v)
        errs.append(e)
        running += v
        if v < rel_tol * running:
            break
    tail = _tail_estimate(vals)
    err = math.sqrt(sum(e * e for e in errs)) + tail
    return SeriesResult(running, err, tuple(vals), tuple(errs), m_min + len(vals) - 1, tail)


def _product_series(t, theta, radii, m_min, m_max, spec, rel_tol, seed):
    _check(t)
    tab = gtheta_table(theta)
    L = len(radii)

    def term(m):
        if m <= L:
            # no revisits: smooth integrand, deterministic rule
            fn = lambda a, b: label_sequence_weights(a, b, radii, True)
            sp = replace(spec, order=max(spec.order, 40)) if m == 2 else spec
            res = simplex_integral(fn, t, m, sp, table=tab, free_last=True)
            return res.value, res.error
        props = [HeatProposal(r) for r in radii]
        est = mc_mean(chain_term_sampler(t, m, tab, props), spec.mc_samples,
                      seed, 1000 + m, spec.chunk, spec.jobs)
        return est.mean, est.stderr

    return _run_series(term, m_min, m_max, rel_tol)


def prod2_series(t: float, theta: float, r12: float, r23: float, m_max: int = 12,
                 spec: QuadSpec = QuadSpec(), rel_tol: float = 1e-3, seed: int = 0) -> SeriesResult:
    """Series for K2(r12) K2(r23) over alternating label sequences."""
    if m_max < 2 or min(r12, r23) <= 0:
        raise ValueError("need m_max >= 2 and positive separations")
    return _product_series(t, theta, (r12, r23), 2, m_max, spec, rel_tol, seed)


def prod3_series(t: float, theta: float, r12: float, r13: float, r23: float, m_max: int = 12,
                 n_samples: int | None = None, spec: QuadSpec = QuadSpec(),
                 rel_tol: float = 1e-3, seed: int = 0) -> MCEstimate:
    """Series for K2(r12) K2(r13) K2(r23) over sequences visiting all three labels.

    Every such sequence is one of the six orderings of the labels' first
    visits followed by a free consecutive-distinct continuation, so the sum
    equals the symmetrized six-ordering expansion. ``stderr`` combines the
    per-term errors with the truncation tail.
    """
    if m_max < 3 or min(r12, r13, r23) <= 0:
        raise ValueError("need m_max >= 3 and positive separations")
    if m_max > 12:
        raise ValueError("label enumeration capped at m_max = 12")
    if n_samples is not None:
        spec = replace(spec, mc_samples=int(n_samples))
    res = _product_series(t, theta, (r12, r23, r13), 3, m_max, spec, rel_tol, seed)
    return MCEstimate(res.value, res.error, spec.mc_samples, seed, 1000)


# --- deterministic chain transfer -------------------------------------------
#
# For chains whose revisit factor is always 1 / (a_i - b_{i-2}) (two labels
# alternating), the density F(p, q) of (b_{i-1}, b_i) evolves by
#   (T F)(q, s) = int_0^q F(p, q) K(p, q, s) dp,
#   K(p, q, s) = int_q^s G(s - a) / (a - p) da,
# and the order-m term is int int F_{m-1}(p, q) E(p, q) dp dq with
#   E(p, q) = int_q^t Gbar(t - a) / (a - p) da.
# A weighted sum over m is one linear solve. Densities are stored at
# (q_k, x_l) with p = q (1 - x): the relative gap x is geometric near 0 and 1
# so short gaps are resolved at every q.


def _log_panels(lo, hi, panels, order):
    """Gauss-Legendre nodes in log(d) on [lo, hi] (arrays), for int f(d) dd."""
    y, w = np.polynomial.legendre.leggauss(order)
    u0, u1 = np.log(lo)[:, None], np.log(hi)[:, None]
    edges = u0 + (u1 - u0) * np.linspace(0.0, 1.0, panels + 1)[None, :]
    half = 0.5 * (edges[:, 1:] - edges[:, :-1])
    u = (edges[:, :-1, None] + half[:, :, None] * (y + 1.0)).reshape(len(lo), -1)
    wu = (half[:, :, None] * w).reshape(len(lo), -1)
    d = np.exp(u)
    return d, wu * d


def _relative_gap_rule(x_min, panels, order):
    """Nodes/weights on (0, 1) for x = (q - p) / q, geometric toward both ends."""
    d, w = _log_panels(np.array([x_min]), np.array([0.5]), panels, order)
    x = np.concatenate([d[0], 1.0 - d[0][::-1]])
    wx = np.concatenate([w[0], w[0][::-1]])
    return x, wx


def _lagrange_rows(nodes, targets, width: int = 6):
    """Indices and weights of local Lagrange interpolation on sorted nodes."""
    n = len(nodes)
    pos = np.searchsorted(nodes, targets) - width // 2
    start = np.clip(pos, 0, n - width)
    idx = start[..., None] + np.arange(width)
    xs = nodes[idx]
    tt = targets[..., None]
    lag = np.ones(idx.shape)
    for c in range(width):
        for d in range(width):
            if c != d:
                lag[..., c] *= (tt[..., 0] - xs[..., d]) / (xs[..., c] - xs[..., d])
    return idx, lag


class ChainTransfer:
    """Discretized transfer operator for alternating two-label chains.

    Nystrom method: densities live at (q_k, x_l) with x_l composite
    Gauss-Legendre nodes in log x and log(1 - x), where every factor is
    smooth; values at off-grid q come from local interpolation in log q. The inner
    time integral defining the kernel uses log-graded panels above q and the
    dGbar substitution near s.
    """

    def __init__(self, t: float, theta: float, n_q: int = 72, x_panels: int = 12,
                 x_order: int = 8, x_min: float = 1e-12, a_panels: int = 16, a_order: int = 8):
        _check(t)
        self.t, self.theta = float(t), float(theta)
        self.table = tab = gtheta_table(theta)
        q = np.concatenate([np.geomspace(1e-7, 0.05, n_q // 4, endpoint=False),
                            np.linspace(0.05, 0.95, n_q // 2, endpoint=False),
                            1.0 - np.geomspace(0.05, 1e-6, n_q - n_q // 4 - n_q // 2)])
        self.q = q * t
        self.x, self.wx = _relative_gap_rule(x_min, x_panels, x_order)
        self.L = L = len(self.x)
        self._a_rule = (a_panels, a_order)
        yg, wg = np.polynomial.legendre.leggauss(24)
        self._y, self._wy = 0.5 * (yg + 1.0), 0.5 * wg
        lq = np.log(self.q)
        targets = self.q[:, None] * (1.0 - self.x[None, :])
        self._idx, self._lag = _lagrange_rows(lq, np.log(targets))
        # below the first node the density is taken linear down to q = 0
        low = targets < self.q[0]
        self._idx[low] = 0
        self._lag[low] = 0.0
        self._lag[low, 0] = targets[low] / self.q[0]
        self.W = np.stack([self._weights(s, targets[k], tab.G, False)
                           for k, s in enumerate(self.q)])
        self.V = self._weights(t, self.q, tab.Gbar, True)
        self._lq = np.concatenate([[lq[0] - 30.0], lq])

    def _weights(self, top, qq, kern, smooth_top):
        """(B, L) weights: w_l(q) * int_q^top kern(top - a) / (a - p_l) da."""
        qq = np.asarray(qq, float)
        half = 0.5 * (top - qq)
        lo = np.minimum(half, qq * self.x[0]) * 1e-5
        d, wd = _log_panels(lo, half, *self._a_rule)
        a_lo = qq[:, None] + d
        w_lo = wd * kern(top - a_lo)
        if smooth_top:
            a_hi = top - half[:, None] * (self._y ** 3)[None, :]
            w_hi = half[:, None] * (3.0 * self._y ** 2 * self._wy)[None, :] * kern(top - a_hi)
        else:
            tab = self.table
            vt = np.asarray(tab.Gbar(half), float)
            a_hi = np.minimum(top - tab.Gbar_inv(vt[:, None] * self._y[None, :]),
                              np.nextafter(top, 0.0))
            w_hi = vt[:, None] * self._wy[None, :]
        a = np.concatenate([a_lo, a_hi], axis=1)
        w = np.concatenate([w_lo, w_hi], axis=1)
        p = qq[:, None] * (1.0 - self.x[None, :])
        K = np.einsum("bn,bnl->bl", w, 1.0 / (a[:, :, None] - p[:, None, :]))
        return K * qq[:, None] * self.wx[None, :]

    def initial(self, head, order: int = 48) -> np.ndarray:
        """F2 at the nodes: int int head(a1, a2) G(p - a1) G(q - a2), a1 < p < a2 < q."""
        tab = self.table
        y, wy = np.polynomial.legendre.leggauss(order)
        y, wy = 0.5 * (y + 1.0), 0.5 * wy
        qq = np.repeat(self.q, self.L)
        pp = qq * (1.0 - np.tile(self.x, len(self.q)))
        t1 = np.asarray(tab.Gbar(pp), float)
        t2 = np.asarray(tab.Gbar(qq - pp), float)
        a1 = pp[:, None] - tab.Gbar_inv(t1[:, None] * y[None, :])
        a2 = qq[:, None] - tab.Gbar_inv(t2[:, None] * y[None, :])
        out = np.empty(len(qq))
        for i0 in range(0, len(qq), 256):
            sl = slice(i0, i0 + 256)
            h = head(a1[sl, :, None], a2[sl, None, :])
            out[sl] = t1[sl] * t2[sl] * np.einsum("i,bij,j->b", wy, h, wy)
        return out.reshape(len(self.q), self.L)

    def step(self, f: np.ndarray) -> np.ndarray:
        """Apply the transfer operator once."""
        fi = np.einsum("klc,klcj->klj", self._lag, f[self._idx])
        return np.einsum("klj,klj->kl", self.W, fi)

    def functional(self, f: np.ndarray) -> float:
        """int int F(p, q) E(p, q) dp dq."""
        Q = np.einsum("kl,kl->k", self.V, f)
        vals = np.concatenate([[0.0], Q * self.q])
        return float(CubicSpline(self._lq, vals).integrate(self._lq[0], self._lq[-1]))

    def solve(self, f2: np.ndarray, ratio: float, tol: float = 1e-13, max_iter: int = 400):
        """Sum ratio^i T^i F2 until the terms stall; returns (Phi, term functionals)."""
        phi = f2.copy()
        cur = f2
        terms = [self.functional(f2)]
        for _ in range(max_iter):
            cur = ratio * self.step(cur)
            phi = phi + cur
            terms.append(self.functional(cur))
            if abs(terms[-1]) < tol * abs(sum(terms)):
                break
        return phi, terms


_TRANSFER_CACHE: dict = {}
TRANSFER_LEVELS = (64, 96, 144)  # time-grid sizes, constant refinement ratio
TRANSFER_RTOL = 1e-4             # floor covering the inner quadrature rules
SAFETY = 1.25                    # factor on the extrapolated grid error
MAX_ORDER = 6.0


def grid_error(sums, ratio: float) -> float:
    """Error of the finest of three sums on grids refined by ``ratio``.

    The observed order p comes from the two successive changes; the error is
    SAFETY * |last change| / (ratio^p - 1). Without monotone convergence the
    sum of both changes is returned instead.
    """
    d1, d2 = sums[1] - sums[0], sums[2] - sums[1]
    if d2 == 0.0:
        return 0.0
    rho = d1 / d2
    if rho <= ratio:      # slower than first order, or oscillating
        return abs(d1) + abs(d2)
    p = min(math.log(rho) / math.log(ratio), MAX_ORDER)
    return SAFETY * abs(d2) / (ratio ** p - 1.0)


def chain_transfer(t: float, theta: float, n_q: int) -> ChainTransfer:
    key = (float(t), float(theta), int(n_q))
    if key not in _TRANSFER_CACHE:
        _TRANSFER_CACHE[key] = ChainTransfer(t, theta, n_q=n_q)
    return _TRANSFER_CACHE[key]


@dataclass
class ChainSeries:
    """Sum over m >= 3 of ratio^(m-3) * (order-m term), with per-m terms.

    ``error`` is the extrapolated time-grid error of the finest solve plus a
    small relative floor.
    """
    value: float
    error: float
    terms: list

    def __iter__(self):
        yield self.value
        yield self.error


def chain_series(t: float, theta: float, head, ratio: float,
                 levels=TRANSFER_LEVELS) -> ChainSeries:
    """Deterministic sum of the alternating-chain series with a given head."""
    sums, terms = [], []
    for n_q in levels:
        ct = chain_transfer(t, theta, n_q)
        _, terms = ct.solve(ct.initial(head), ratio)
        sums.append(sum(terms))
    fine = sums[-1]
    if len(levels) == 3:
        err = grid_error(sums, levels[2] / levels[1])
    else:
        err = abs(fine - sums[0])
    return ChainSeries(fine, err + TRANSFER_RTOL * abs(fine), terms)
