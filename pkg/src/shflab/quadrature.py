"""Integration engines and seeded random streams.

Every moment series integrates over ordered times
``0 < a_1 < b_1 < ... < a_m < b_m < t``. The engines here work in gap
coordinates: free gaps ``f_0 = a_1, f_i = a_{i+1} - b_i`` and renewal gaps
``w_i = b_i - a_i``. When a renewal table is supplied the integrand is
understood to carry an implicit factor prod_i G_theta(w_i), which is
absorbed by the substitution ``dGbar(w) = G(w) dw``.
"""
from __future__ import annotations

import math
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .special_fn import GThetaTable

MASK64 = (1 << 64) - 1


class QuadratureError(RuntimeError):
    """Raised when an adaptive rule misses its tolerance; carries the best estimate."""

    def __init__(self, msg: str, value: float, error: float):
        super().__init__(msg)
        self.value = value
        self.error = error


@dataclass(frozen=True)
class QuadSpec:
    abs_tol: float = 1e-12
    rel_tol: float = 1e-10
    max_depth: int = 200
    mc_samples: int = 1 << 16
    order: int = 20
    chunk: int = 1 << 13
    jobs: int = 1

    def __post_init__(self):
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n: int
    seed: int
    stream: int

    def __add__(self, other: "MCEstimate") -> "MCEstimate":
        """Sum of two independent estimates (errors in quadrature)."""
        return MCEstimate(self.mean + other.mean, math.hypot(self.stderr, other.stderr),
                          self.n + other.n, self.seed, self.stream)

    def scaled(self, c: float) -> "MCEstimate":
        return MCEstimate(c * self.mean, abs(c) * self.stderr, self.n, self.seed, self.stream)


@dataclass
class TimeChain:
    t: float
    times: np.ndarray = field(repr=True)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if not (0 < self.t <= 1):
            raise ValueError("horizon must lie in (0, 1]")
        if self.times.ndim != 1 or self.times.size < 2 or self.times.size % 2:
            raise ValueError("a chain holds (a_1, b_1, ..., a_m, b_m)")
        full = np.concatenate([[0.0], self.times, [self.t]])
        if np.any(np.diff(full) <= 0):
            raise ValueError("chain times must be strictly increasing inside (0, t)")

    @property
    def m(self) -> int:
        return self.times.size // 2

    @property
    def a(self) -> np.ndarray:
        return self.times[0::2]

    @property
    def b(self) -> np.ndarray:
        return self.times[1::2]


# --- 1-d adaptive quadrature ------------------------------------------------

def integrate_1d(f: Callable[[float], float], lo: float, hi: float,
                 spec: QuadSpec = QuadSpec(), points=None) -> tuple[float, float]:
    """Adaptive Gauss-Kronrod (QUADPACK) with a hard tolerance check.

    Endpoint singularities are fine as long as they are integrable; interior
    trouble spots can be passed as ``points``.
    """
    if not lo < hi:
        raise ValueError("need lo < hi")
    kw = dict(epsabs=spec.abs_tol, epsrel=spec.rel_tol, limit=spec.max_depth, full_output=1)
    if points is not None and np.isfinite(lo) and np.isfinite(hi):
        pts = [p for p in points if lo < p < hi]
        kw["points"] = pts or None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        res = integrate.quad(f, lo, hi, **kw)
    value, err = res[0], res[1]
    ier = res[3] if len(res) > 3 and isinstance(res[3], str) else None
    if err > max(spec.abs_tol, spec.rel_tol * abs(value)) * 10:
        raise QuadratureError(f"integrate_1d did not converge ({ier})", value, err)
    return value, err


# --- random streams ---------------------------------------------------------

def rng_stream(seed: int, stream: int = 0, block: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream); ``block`` selects a disjoint
    counter range, so blocks are independent substreams of one stream."""
    key = np.array([seed & MASK64, stream & MASK64], dtype=np.uint64)
    counter = np.array([0, 0, 0, block & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


_ACTIVE_FN = None


def _chunk_moments_forked(seed, stream, block, size):
    return _chunk_moments(_ACTIVE_FN, seed, stream, block, size)


def _chunk_moments(fn, seed, stream, block, size):
    # samples may be (size,) or (size, p); moments are taken column-wise
    vals = np.asarray(fn(rng_stream(seed, stream, block), size), dtype=float)
    mean = vals.mean(axis=0)
    m2 = np.sum((vals - mean) ** 2, axis=0)
    return size, mean, m2


def merge_moments(parts):
    """Fold (n, mean, M2) triples in the given order (Chan et al. update)."""
    n, mean, m2 = 0, 0.0, 0.0
    for k, mu, s2 in parts:
        tot = n + k
        delta = mu - mean
        mean += delta * k / tot
        m2 += s2 + delta * delta * n * k / tot
        n = tot
    return n, mean, m2


def mc_mean(fn: Callable[[np.random.Generator, int], np.ndarray], n: int, seed: int,
            stream: int = 0, chunk: int = 1 << 13, jobs: int = 1) -> MCEstimate:
    """Mean of ``fn`` samples over ``n`` draws split into fixed-size blocks.

    ``fn(rng, k)`` returns k samples, or a (k, p) array for p coupled columns,
    in which case a list of p estimates sharing the same draws is returned.

    Block ``j`` always uses substream ``j`` and blocks are merged in index
    order, so the result does not depend on ``jobs``.
    """
    if n < 2:
        raise ValueError("need at least two samples")
    sizes = [min(chunk, n - s) for s in range(0, n, chunk)]
    if jobs > 1 and len(sizes) > 1:
        # workers are forked so closures need not be picklable
        global _ACTIVE_FN
        _ACTIVE_FN = fn
        try:
            ctx = multiprocessing.get_context("fork")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
                futs = [ex.submit(_chunk_moments_forked, seed, stream, j, k)
                        for j, k in enumerate(sizes)]
                parts = [f.result() for f in futs]
        finally:
            _ACTIVE_FN = None
    else:
        parts = [_chunk_moments(fn, seed, stream, j, k) for j, k in enumerate(sizes)]
    tot, mean, m2 = merge_moments(parts)
    se = np.sqrt(m2 / (tot - 1) / tot)
    if np.ndim(mean) == 0:
        return MCEstimate(float(mean), float(se), tot, seed, stream)
    return [MCEstimate(float(a), float(e), tot, seed, stream) for a, e in zip(mean, se)]


# --- ordered-time sampling --------------------------------------------------

def _uniform_simplex(rng, n, dim, total):
    """Uniform points on {x >= 0, sum x <= total} in ``dim`` dimensions."""
    e = -np.log1p(-rng.random((n, dim + 1)))
    s = e.sum(axis=1, keepdims=True)
    return (e[:, :dim] / s) * np.asarray(total)[:, None]


def _assemble(f, w):
    n, m = w.shape
    gaps = np.empty((n, 2 * m))
    gaps[:, 0::2] = f[:, :m]
    gaps[:, 1::2] = w
    times = np.cumsum(gaps, axis=1)
    return times[:, 0::2], times[:, 1::2]


def sample_time_chain(t: float, m: int, rng: np.random.Generator, n: int,
                      table: GThetaTable | None = None, free_last: bool = False):
    """Draw ``n`` chains; returns (a, b, weight) with arrays of shape (n, m).

    Without a table the chain is uniform on the simplex and the weight is the
    simplex volume. With a table, renewal gaps are drawn from G/Gbar(t) by
    inverse CDF, the weight is integrand-free (it absorbs prod G), and chains
    whose renewal gaps overflow the horizon get weight 0. With ``free_last``
    the last renewal gap is integrated out: ``b[:, -1]`` is NaN and the weight
    carries Gbar(t - a_m).
    """
    if t <= 0:
        raise ValueError("horizon must be positive")
    if t > 1 or m < 1:
        raise ValueError("need m >= 1 and t <= 1")
    if table is None:
        u = np.sort(rng.random((n, 2 * m)) * t, axis=1)
        weight = np.full(n, t ** (2 * m) / math.factorial(2 * m))
        a, b = u[:, 0::2], u[:, 1::2].copy()
        if free_last:
            b[:, -1] = np.nan
        return a, b, weight
    k = m - 1 if free_last else m
    gb_t = float(table.Gbar(t))
    w = np.zeros((n, m))
    if k:
        w[:, :k] = table.Gbar_inv(rng.random((n, k)) * gb_t)
    room = t - w.sum(axis=1)
    ok = room > 0
    # keep rejected chains well formed; their weight is zero anyway
    w[~ok] *= 0.5 * t / w[~ok].sum(axis=1, keepdims=True)
    room = np.where(ok, room, 0.5 * t)
    f = _uniform_simplex(rng, n, m, room)
    a, b = _assemble(f, w)
    weight = gb_t ** k * room ** m / math.factorial(m)
    if free_last:
        weight = weight * table.Gbar(t - a[:, -1])
        b[:, -1] = np.nan
    weight = np.where(ok, weight, 0.0)
    return a, b, weight


# --- deterministic nested rule ---------------------------------------------

def _gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _graded(order, kind="smooth"):
    x, wq = _gl(order)
    if kind == "square":
        return x * x, 2.0 * x * wq
    if kind == "smooth":
        return x * x * (3.0 - 2.0 * x), 6.0 * x * (1.0 - x) * wq
    if kind == "quintic":
        return x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x), 30.0 * x * x * (1.0 - x) ** 2 * wq
    return x, wq


GRADING = "smooth"


def _nested(integrand, t, m, table, free_last, order):
    """Tensor Gauss-Legendre over gap coordinates.

    Free gaps use graded nodes that cluster at both ends, which tames the
    corner singularities of 1/(gap sums) and the log-type behaviour of
    Gbar near 0.
    """
    x, wq = _gl(order)
    xg, wg = _graded(order, GRADING)
    kinds = []
    for i in range(m):
        kinds.append("f")
        if i < m - 1 or not free_last:
            kinds.append("w")
    total = 0.0
    # loop on the first free gap to bound memory
    for x0, w0 in zip(xg, wg):
        pos = np.array([x0 * t])
        wt = np.array([w0 * t])
        cols = [pos.copy()]
        for kind in kinds[1:]:
            room = t - pos
            if kind == "f":
                nodes, wts = xg, wg
                step = room[:, None] * nodes[None, :]
                jac = room[:, None] * wts[None, :]
            elif table is None:
                nodes, wts = x, wq
                step = room[:, None] * nodes[None, :]
                jac = room[:, None] * wts[None, :]
            else:
                top = table.Gbar(room)
                step = table.Gbar_inv(top[:, None] * x[None, :])
                jac = top[:, None] * wq[None, :]
            k = step.shape[1]
            cols = [np.repeat(c, k) for c in cols]
            pos = np.repeat(pos, k) + step.ravel()
            wt = np.repeat(wt, k) * jac.ravel()
            cols.append(pos.copy())
        times = np.stack(cols, axis=1)
        a = times[:, 0::2]
        if free_last:
            b = np.concatenate([times[:, 1::2], np.full((a.shape[0], 1), np.nan)], axis=1)
            extra = table.Gbar(t - a[:, -1]) if table is not None else (t - a[:, -1])
        else:
            b = times[:, 1::2]
            extra = 1.0
        total += float(np.sum(wt * extra * integrand(a, b)))
    return total


@dataclass(frozen=True)
class SimplexResult:
    value: float
    error: float
    method: str
    n: int


def simplex_integral(integrand, t: float, m: int, spec: QuadSpec = QuadSpec(),
                     table: GThetaTable | None = None, free_last: bool = False,
                     seed: int = 0, stream: int = 0, det_max_m: int = 3) -> SimplexResult:
    """Integrate ``integrand(a, b)`` over the ordered simplex of m blocks.

    Tensor Gauss-Legendre for m <= det_max_m (error = difference between two
    orders), importance-sampled Monte Carlo otherwise (error = stderr).
    """
    if m < 1:
        raise ValueError("m >= 1 required")
    if m <= det_max_m:
        hi = _nested(integrand, t, m, table, free_last, spec.order)
        lo = _nested(integrand, t, m, table, free_last, max(4, (2 * spec.order) // 3))
        return SimplexResult(hi, abs(hi - lo), "gauss-legendre", spec.order)

    def draw(rng, k):
        a, b, w = sample_time_chain(t, m, rng, k, table, free_last)
        out = np.zeros(k)
        nz = w > 0
        if np.any(nz):
            out[nz] = w[nz] * integrand(a[nz], b[nz])
        return out

    est = mc_mean(draw, spec.mc_samples, seed, stream, spec.chunk, spec.jobs)
    return SimplexResult(est.mean, est.stderr, "importance-mc", est.n)
