"""h-th moments of the flow and of the matched multiplicative chaos.

Pairings index the chain terms of the moment kernel. Space is handled
exactly by Gaussian conditioning; only times and pairings are sampled.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import (FIRST_MIX, U_MIX, W_TILT, ShiftProposal, _first_caps, _first_density,
                      _tail_estimate, _u_caps, _u_ratio, k2_table)
from .quadrature import MCEstimate, QuadSpec, mc_mean
from .special_fn import g_theta, gtheta_table

log = logging.getLogger(__name__)

PAIRING_CAP = 10 ** 7
REVISIT_SHARE = 0.7     # proposal weight on the near-coincidence shape when it applies


def _pairs(h: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(h), 2))


@dataclass(frozen=True)
class PairingSequence:
    h: int
    pairs: tuple

    def __post_init__(self):
        if self.h < 2:
            raise ValueError("h >= 2 required")
        for p in self.pairs:
            if len(p) != 2 or not 0 <= p[0] < p[1] < self.h:
                raise ValueError(f"bad pair {p!r}")
        for p, q in zip(self.pairs, self.pairs[1:]):
            if p == q:
                raise ValueError("consecutive pairs must differ")

    @property
    def m(self) -> int:
        return len(self.pairs)


def pairing_count(h: int, m: int) -> int:
    n = math.comb(h, 2)
    return n * (n - 1) ** (m - 1)


def enumerate_pairings(h: int, m: int):
    """Yield every sequence of m pairs from {0..h-1} with consecutive pairs distinct."""
    if h < 2 or m < 1:
        raise ValueError("need h >= 2 and m >= 1")
    if pairing_count(h, m) > PAIRING_CAP:
        raise OverflowError(f"{pairing_count(h, m)} pairings exceed the cap")
    pairs = _pairs(h)

    def rec(prefix):
        if len(prefix) == m:
            yield PairingSequence(h, tuple(prefix))
            return
        for p in pairs:
            if not prefix or p != prefix[-1]:
                yield from rec(prefix + [p])

    yield from rec([])


@dataclass
class GaussianState:
    """Unnormalized Gaussian law of h planar points.

    Both planar axes are independent with the same h x h covariance ``cov``,
    so the full 2h x 2h covariance is ``kron(cov, I2)``.
    """
    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0

    @classmethod
    def start(cls, points, var: float = 0.0) -> "GaussianState":
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        h = len(pts)
        return cls(pts.copy(), var * np.eye(h), 1.0)

    @property
    def h(self) -> int:
        return len(self.mean)

    @property
    def covariance(self) -> np.ndarray:
        return np.kron(self.cov, np.eye(2))

    def copy(self) -> "GaussianState":
        return GaussianState(self.mean.copy(), self.cov.copy(), self.weight)


def _diff(h, pair):
    i, j = pair
    e = np.zeros(h)
    e[i], e[j] = 1.0, -1.0
    return e


def apply_Q(state: GaussianState, pair, elapsed: float) -> GaussianState:
    """Diffuse every point for variance-time elapsed/2, then pin x_i = x_j."""
    if elapsed <= 0:
        raise ValueError("elapsed must be positive")
    h = state.h
    cov = state.cov + 0.5 * elapsed * np.eye(h)
    e = _diff(h, pair)
    v = float(e @ cov @ e)
    if not v > 0:
        raise RuntimeError("singular conditioning covariance")
    k = cov @ e
    d = state.mean[pair[0]] - state.mean[pair[1]]
    dens = math.exp(-float(d @ d) / (2.0 * v)) / (2.0 * math.pi * v)
    mean = state.mean - np.outer(k / v, d)
    cov = cov - np.outer(k, k) / v
    return GaussianState(mean, 0.5 * (cov + cov.T), state.weight * dens)


def apply_G(state: GaussianState, pair, gap: float, theta: float = 0.0) -> GaussianState:
    """Weight by G_theta(gap); the pinned pair moves together at half speed."""
    if not 0 < gap <= 1:
        raise ValueError("gap must lie in (0, 1]")
    e = _diff(state.h, pair)
    scale = max(1.0, float(np.abs(state.cov).max()))
    if abs(float(e @ state.cov @ e)) > 1e-12 * scale or \
            not np.allclose(state.mean[pair[0]], state.mean[pair[1]], atol=1e-12):
        raise ValueError("pair is not pinned")
    cov = state.cov + 0.5 * gap * np.eye(state.h)
    i, j = pair
    for a, b in ((i, i), (j, j), (i, j), (j, i)):
        cov[a, b] -= 0.25 * gap if a == b else -0.25 * gap
    return GaussianState(state.mean.copy(), cov, state.weight * g_theta(theta, gap))


# --- batched spatial weights -------------------------------------------------

def _batched_chain_weight(delta, seq_i, seq_j, a, b, h):
    """prod over blocks of 2 pi * (density of X_i - X_j at 0) for centred g_delta starts.

    seq_i, seq_j, a: (n, m); b: (n, m - 1). Returns (n,).
    """
    n, m = a.shape
    rows = np.arange(n)
    cov = np.broadcast_to(delta * np.eye(h), (n, h, h)).copy()
    eye = np.eye(h)
    logw = np.zeros(n)
    prev = np.zeros(n)
    for ell in range(m):
        i, j = seq_i[:, ell], seq_j[:, ell]
        cov += 0.5 * (a[:, ell] - prev)[:, None, None] * eye
        k = cov[rows, :, i] - cov[rows, :, j]
        v = k[rows, i] - k[rows, j]
        logw -= np.log(v)
        cov -= k[:, :, None] * k[:, None, :] / v[:, None, None]
        if ell < m - 1:
            u = b[:, ell] - a[:, ell]
            cov += 0.5 * u[:, None, None] * eye
            q = 0.25 * u
            cov[rows, i, i] -= q
            cov[rows, j, j] -= q
            cov[rows, i, j] += q
            cov[rows, j, i] += q
            prev = b[:, ell]
    return np.exp(logw)


def _anchor(seq_i, seq_j, ell):
    """Index of the block whose end sets the near-coincidence scale for block ell.

    When block ell shares one point with block ell - 1, it is the last earlier
    block touching the other point; otherwise the last earlier block touching
    either point. -1 if there is none.
    """
    n = seq_i.shape[0]
    out = np.full(n, -1)
    if ell < 2:
        return out
    pi, pj = seq_i[:, ell], seq_j[:, ell]
    qi, qj = seq_i[:, ell - 1], seq_j[:, ell - 1]
    share_i = (pi == qi) | (pi == qj)
    share_j = (pj == qi) | (pj == qj)
    for k in range(ell - 2, -1, -1):
        ri, rj = seq_i[:, k], seq_j[:, k]
        touch_i = (ri == pi) | (rj == pi)
        touch_j = (ri == pj) | (rj == pj)
        hit = np.where(share_i & ~share_j, touch_j,
                       np.where(share_j & ~share_i, touch_i, touch_i | touch_j))
        out = np.where((out < 0) & hit, k, out)
    return out


def moment_term_sampler(h: int, t: float, theta: float, delta: float, m: int):
    """Importance sampler for the order-m chain term of E[(2Z_t(g_delta))^h].

    Pairs are drawn uniformly subject to the constraint and weighted by the
    count. The start of block 1 has density proportional to 1 / (a + 2 delta);
    later starts mix that shape with 1 / (a - b_anchor), the scale at which
    the pinned pair can nearly coincide already. Renewal gaps follow G on a
    few truncations as in the chain sampler of ``kernels``.
    """
    pairs = np.array(_pairs(h))
    L = len(pairs)
    if m > 1 and L < 2:
        return lambda rng, n: np.zeros(n)
    table = gtheta_table(theta)
    first = ShiftProposal(2.0 * delta)
    log_count = math.log(L) + (m - 1) * math.log(max(L - 1, 1))

    def draw(rng, n):
        lab = np.empty((n, m), dtype=int)
        lab[:, 0] = rng.integers(0, L, n)
        for ell in range(1, m):
            lab[:, ell] = (lab[:, ell - 1] + rng.integers(1, L, n)) % L
        si, sj = pairs[lab, 0], pairs[lab, 1]
        anchors = [_anchor(si, sj, ell) for ell in range(m)]
        a = np.empty((n, m))
        b = np.full((n, m), np.nan)
        logw = np.full(n, log_count)
        zero = np.zeros(n)

        caps0 = _first_caps(t, m, 0, zero)
        hi = np.where(rng.random(n) < FIRST_MIX[0], caps0[0], caps0[1])
        a[:, 0] = first.sample(rng, zero, hi)
        logw -= np.log(_first_density(first, a[:, 0], zero, caps0))
        rows = np.arange(n)
        for ell in range(m - 1):
            nxt = anchors[ell + 1]
            has = nxt >= 0
            back = np.where(has, a[:, ell] - b[rows, np.maximum(nxt, 0)], np.inf)
            caps = _u_caps(t, m, ell, a[:, ell], back)
            pick = rng.random(n)
            cap = np.where(pick < U_MIX[0], caps[0],
                           np.where(pick < U_MIX[0] + U_MIX[1], caps[1], caps[2]))
            u = np.minimum(table.Gbar_inv(rng.random(n) * table.Gbar(cap)), cap)
            b[:, ell] = a[:, ell] + u
            with np.errstate(divide="ignore"):
                logw += np.log(table.Gbar(caps[0])) - np.log(_u_ratio(table, u, caps))
            lo = b[:, ell]
            room = np.maximum(t - lo, 0.0)
            # shifted-first draw
            fcaps = _first_caps(t, m, ell + 1, lo)
            fhi = np.where(rng.random(n) < FIRST_MIX[0], fcaps[0], fcaps[1])
            a_first = first.sample(rng, lo, fhi)
            # near-coincidence draw
            c = np.where(has, np.maximum(lo - b[rows, np.maximum(nxt, 0)], 1e-300), 1.0)
            big = np.log1p(room / c)
            kk = max(m - 2 - ell, 0)
            v = rng.random(n)
            x = np.where(rng.random(n) < W_TILT, big * (1.0 - v ** (1.0 / (kk + 1))), big * v)
            a_rev = lo + np.minimum(c * np.expm1(x), room)
            use_rev = has & (rng.random(n) < REVISIT_SHARE)
            a[:, ell + 1] = np.where(use_rev, a_rev, a_first)
            an = a[:, ell + 1]
            with np.errstate(divide="ignore", invalid="ignore"):
                xr = np.log1p((an - lo) / c)
                tilt = (kk + 1) * np.clip(1.0 - xr / big, 0.0, 1.0) ** kk
                d_rev = ((1.0 - W_TILT) + W_TILT * tilt) / ((an - lo + c) * big)
                share = np.where(has, REVISIT_SHARE, 0.0)
                dens = (1.0 - share) * _first_density(first, an, lo, fcaps) + share * d_rev
                logw -= np.log(dens)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logw += np.log(table.Gbar(t - a[:, -1]))
            out = np.exp(logw) * _batched_chain_weight(delta, si, sj, a, b[:, :-1], h)
        return np.where(np.isfinite(out), out, 0.0)

    return draw


@dataclass(frozen=True)
class MomentSeries:
    """Partial sum 1 + sum_{m <= m_last} of the chain terms.

    Every term is nonnegative, so ``value`` is a lower bound for the moment
    up to ``stderr``; ``tail`` extrapolates what the truncation left out.
    """
    value: float
    stderr: float
    terms: tuple
    term_errors: tuple
    tail: float
    seed: int
    n: int

    @property
    def m_last(self) -> int:
        return len(self.terms)

    @property
    def error(self) -> float:
        return self.stderr + self.tail

    def estimate(self) -> MCEstimate:
        return MCEstimate(self.value, self.error, self.n, self.seed, 0)


def shf_moment_series(h: int, t: float, theta: float, delta: float, m_max: int = 12,
                      spec: QuadSpec = QuadSpec(), seed: int = 0,
                      rel_tol: float = 1e-4) -> MomentSeries:
    """1 + sum over m of the order-m chain term, each by its own MC stream."""
    if not 2 <= h <= 5:
        raise ValueError("2 <= h <= 5 supported")
    if not 0 < t <= 1 or delta <= 0:
        raise ValueError("need 0 < t <= 1 and delta > 0")
    m_top = 1 if h == 2 else m_max
    vals, errs = [], []
    running = 1.0
    for m in range(1, m_top + 1):
        est = mc_mean(moment_term_sampler(h, t, theta, delta, m), spec.mc_samples,
                      seed, 2000 + m, spec.chunk, spec.jobs)
        vals.append(est.mean)
        errs.append(est.stderr)
        running += est.mean
        if est.mean < rel_tol * running:
            break
    tail = 0.0 if m_top == 1 else _tail_estimate(vals)
    err = math.sqrt(sum(e * e for e in errs))
    return MomentSeries(running, err, tuple(vals), tuple(errs), tail, seed, spec.mc_samples)


def shf_moment_mc(h: int, t: float, theta: float, delta: float, m_max: int = 12,
                  spec: QuadSpec = QuadSpec(), seed: int = 0) -> MCEstimate:
    """E[(2 Z_t(g_delta))^h]; ``m_max = 0`` gives the constant term 1."""
    if m_max == 0:
        return MCEstimate(1.0, 0.0, 0, seed, 0)
    return shf_moment_series(h, t, theta, delta, m_max, spec, seed).estimate()


def gmc_moment_mc(h: int, t: float, theta: float, delta: float,
                  spec: QuadSpec = QuadSpec(), seed: int = 0, stream: int = 0) -> MCEstimate:
    """E prod_{i<j} (1 + K2(|x_i - x_j|)) with x_i iid centred, variance delta per axis."""
    if h < 2:
        raise ValueError("h >= 2 required")
    tab = k2_table(t, theta)
    ii, jj = np.triu_indices(h, 1)
    sd = math.sqrt(delta)

    def draw(rng, n):
        x = sd * rng.standard_normal((n, h, 2))
        r = np.linalg.norm(x[:, ii] - x[:, jj], axis=-1)
        return np.prod(1.0 + tab(r), axis=1)

    hits0 = tab.floor_hits
    est = mc_mean(draw, spec.mc_samples, seed, 3000 + 97 * h + stream, spec.chunk, spec.jobs)
    if tab.floor_hits > hits0:
        log.info("K2 table floor used %d times", tab.floor_hits - hits0)
    return est


def _ratio(num: MCEstimate, den: MCEstimate, power: int):
    d = den.mean ** power
    val = num.mean / d
    rel = math.hypot(num.stderr / num.mean, power * den.stderr / den.mean)
    return val, abs(val) * rel


def factorization_constant(t: float, theta: float) -> float:
    """C_{t,theta} = 2 int_0^t G_theta."""
    return 2.0 * float(gtheta_table(theta).Gbar(t))


@dataclass
class FactorizationRow:
    delta: float
    ratio: float
    stderr: float
    h_moment: MCEstimate
    second: MCEstimate
    log_display: float


def factorization_report(h: int, t: float, theta: float, delta_list,
                         spec: QuadSpec = QuadSpec(), seed: int = 0) -> list[FactorizationRow]:
    """E[(2M)^h] / E[(2M)^2]^C(h,2) along a sequence of delta."""
    if h not in (2, 3, 4):
        raise ValueError("h must be 2, 3 or 4")
    npair = math.comb(h, 2)
    c = factorization_constant(t, theta)
    rows = []
    for k, d in enumerate(delta_list):
        second = gmc_moment_mc(2, t, theta, d, spec, seed, stream=k)
        if h == 2:
            num, ratio, err = second, 1.0, 0.0
        else:
            num = gmc_moment_mc(h, t, theta, d, spec, seed, stream=k)
            ratio, err = _ratio(num, second, npair)
        rows.append(FactorizationRow(float(d), ratio, err, num, second,
                                     (c * math.log(1.0 / math.sqrt(d))) ** npair))
    return rows


@dataclass
class ExcessReport:
    """Excess of the flow moment over the matched chaos baseline.

    When the chain series is truncated (``truncated``), ``excess`` comes from
    the partial sum and is a lower bound: a positive value is conclusive, a
    negative one is not.
    """
    h: int
    t: float
    theta: float
    delta: float
    excess: float
    error: float
    truncated: bool
    shf: MomentSeries
    second: MCEstimate
    status: str = field(default="")

    def __post_init__(self):
        if not self.status:
            if self.excess > 3.0 * self.error:
                self.status = "positive"
            elif self.excess < -3.0 * self.error and not self.truncated:
                self.status = "negative"
            else:
                self.status = "inconclusive"


def shf_vs_gmc_report(h: int, t: float, theta: float, delta: float,
                      spec: QuadSpec = QuadSpec(), seed: int = 0,
                      m_max: int = 12) -> ExcessReport:
    """E[(2Z)^h] / E[(2M)^2]^C(h,2) - 1 with a combined error."""
    shf = shf_moment_series(h, t, theta, delta, m_max, spec, seed)
    second = gmc_moment_mc(2, t, theta, delta, spec, seed, stream=500)
    num = MCEstimate(shf.value, shf.stderr, shf.n, seed, 0)
    ratio, err = _ratio(num, second, math.comb(h, 2))
    truncated = shf.tail > shf.stderr
    return ExcessReport(h, t, theta, delta, ratio - 1.0, err, truncated, shf, second)
