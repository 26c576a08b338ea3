"""Pre-limit Monte Carlo: lattice polymer replicas, transfer matrices, mollified SHE."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special

from .lattice_renewal import (GaussianMollifier, continuum_overlap_Reps, renewal_sequence,
                              sigma2_from_window)
from .quadrature import MCEstimate, QuadSpec, mc_mean, rng_stream

N_MAX_REPLICA = 1 << 14
N_MAX_TRANSFER = 1 << 10
LEAK_TOL = 1e-6
TIME_BLOCK = 256
_STEPS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=np.int32)


def even_time(x: float) -> int:
    """Even integer closest to x."""
    return 2 * int(round(x / 2.0))


def round_to_even_sites(X):
    """Nearest points of Z^2_even to the rows of X (lattice units).

    In the rotated coordinates u = (x1 + x2) / 2, v = (x1 - x2) / 2 the even
    sublattice is Z^2 and its Voronoi cells are unit squares.
    """
    X = np.asarray(X, dtype=float)
    u = np.rint(0.5 * (X[..., 0] + X[..., 1]))
    v = np.rint(0.5 * (X[..., 0] - X[..., 1]))
    return np.stack([u + v, u - v], axis=-1).astype(np.int64)


def _check_walk_params(h, N, delta):
    if h < 1:
        raise ValueError("h >= 1 required")
    if N < 2 or N % 2 or N > N_MAX_REPLICA:
        raise ValueError(f"N must be even and at most {N_MAX_REPLICA}")
    if delta <= 0:
        raise ValueError("delta must be positive")


def window_beta2(N: int, theta: float) -> float:
    """Gaussian-disorder coupling with e^{beta^2} - 1 = sigma_N^2 exactly."""
    return math.log1p(sigma2_from_window(N, theta))


def collision_counts(rng, starts, n_steps: int):
    """Pairwise collision counts of independent simple random walks.

    starts: (n, h, 2) integer sites. Counts times 1 .. n_steps - 1 at which
    two walks share a site. Returns (counts, first) with shape (n, h(h-1)/2)
    each, in triu order; ``first`` is the first collision time or -1.
    """
    n, h, _ = starts.shape
    ii, jj = np.triu_indices(h, 1)
    counts = np.zeros((n, len(ii)), dtype=np.int64)
    first = np.full((n, len(ii)), -1, dtype=np.int64)
    pos = starts.astype(np.int64).copy()
    done = 0
    last = n_steps - 1
    while done < last:
        k = min(TIME_BLOCK, last - done)
        steps = _STEPS[rng.integers(0, 4, (n, h, k))]
        path = pos[:, :, None, :] + np.cumsum(steps, axis=2)
        for c, (i, j) in enumerate(zip(ii, jj)):
            same = np.all(path[:, i] == path[:, j], axis=-1)
            counts[:, c] += same.sum(axis=1)
            hit = same.any(axis=1) & (first[:, c] < 0)
            first[hit, c] = done + 1 + np.argmax(same[hit], axis=1)
        pos = path[:, :, -1, :]
        done += k
    return counts, first


def polymer_replica_moment(h: int, N: int, theta: float, delta: float,
                           spec: QuadSpec = QuadSpec(), t: float = 1.0,
                           seed: int = 0, beta2: float | None = None,
                           method: str = "auto") -> MCEstimate:
    """E[(2 Z_N(g_delta))^h] for Gaussian disorder via the replica identity.

    h walks start at even sites nearest to sqrt(N) x_i, x_i iid g_delta, and
    each sample is weighted by exp(beta_N^2 * total pairwise collisions).

    For h = 2, ``method="conditional"`` (the default) stops each pair at its
    first collision tau and replaces the rest of the weight by its exact mean
    (1 + sigma^2)(1 + sum_{m <= n_steps - 1 - tau} U_N(m)). Near criticality
    the plain weight has a very heavy tail, while this one is bounded.
    """
    _check_walk_params(h, N, delta)
    if method == "auto":
        method = "conditional" if h == 2 else "plain"
    if method == "conditional" and h != 2:
        raise ValueError("conditional estimator needs h = 2")
    n_steps = even_time(N * t)
    b2 = window_beta2(N, theta) if beta2 is None else beta2
    sd = math.sqrt(N * delta)
    if method == "conditional":
        s2 = math.expm1(b2)
        u = renewal_sequence(n_steps, s2)
        rest = 1.0 + np.concatenate([[0.0], np.cumsum(u)])

    def draw(rng, n):
        starts = round_to_even_sites(sd * rng.standard_normal((n, h, 2)))
        if h == 1:
            return np.ones(n)
        counts, first = collision_counts(rng, starts, n_steps)
        if method == "plain":
            return np.exp(b2 * counts.sum(axis=1))
        tau = first[:, 0]
        hit = tau > 0
        out = np.ones(n)
        out[hit] = (1.0 + s2) * rest[n_steps - 1 - tau[hit]]
        return out

    return mc_mean(draw, spec.mc_samples, seed, 5000 + h, spec.chunk, spec.jobs)


# --- transfer matrix ---------------------------------------------------------

def start_distribution(N: int, delta: float, box: int) -> np.ndarray:
    """P(nearest even site to sqrt(N) x = w) for x ~ g_delta, on the box grid."""
    z = np.arange(-box, box + 1)
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    even = (z1 + z2) % 2 == 0
    s = math.sqrt(N * delta / 2.0)      # std of each rotated coordinate
    cell = lambda c: 0.5 * (special.erf((c + 0.5) / (s * math.sqrt(2.0)))
                            - special.erf((c - 0.5) / (s * math.sqrt(2.0))))
    p = cell((z1 + z2) / 2.0) * cell((z1 - z2) / 2.0)
    return np.where(even, p, 0.0)


def _neighbour_mean(u):
    out = np.zeros_like(u)
    out[1:, :] += u[:-1, :]
    out[:-1, :] += u[1:, :]
    out[:, 1:] += u[:, :-1]
    out[:, :-1] += u[:, 1:]
    return 0.25 * out


def _backward_field(n_steps, box, beta, rng):
    size = 2 * box + 1
    u = np.ones((size, size))
    lam = 0.5 * beta * beta
    for _ in range(n_steps - 1, 0, -1):
        u = _neighbour_mean(u)
        if beta:
            u *= np.exp(beta * rng.standard_normal((size, size)) - lam)
    return _neighbour_mean(u)


@lru_cache(maxsize=16)
def _box_leak(N, delta, box, n_steps):
    """Start-weighted probability that a walk leaves the box before n_steps."""
    p = start_distribution(N, delta, box)
    stay = _backward_field(n_steps, box, 0.0, None)
    return float(1.0 - np.sum(p * stay))


@dataclass
class PolymerField:
    N: int
    box: int
    seed: int
    field: np.ndarray     # Z_N(w) summed over endpoints, indexed by w + box
    value: float          # Z_N(g_delta), with the 1/2 of the rescaled measure
    leak: float

    def to_bytes(self) -> bytes:
        """Little-endian header (N, box, seed) as int64, then the field as float64 rows."""
        head = np.array([self.N, self.box, self.seed], dtype="<i8").tobytes()
        return head + np.ascontiguousarray(self.field, dtype="<f8").tobytes()


def polymer_transfer_matrix(N: int, theta: float, box: int | None = None, seed: int = 0,
                            delta: float = 0.25, t: float = 1.0, replica: int = 0,
                            beta2: float | None = None) -> PolymerField:
    """One disorder realization of the point-to-line partition function field."""
    if N < 2 or N % 2 or N > N_MAX_TRANSFER:
        raise ValueError(f"N must be even and at most {N_MAX_TRANSFER}")
    box = int(math.ceil(6.0 * math.sqrt(N))) if box is None else int(box)
    if box < 3.0 * math.sqrt(N):
        raise ValueError("box radius must be at least 3 sqrt(N)")
    n_steps = even_time(N * t)
    leak = _box_leak(N, delta, box, n_steps)
    if leak > LEAK_TOL:
        raise RuntimeError(f"box leaks mass {leak:.3g}; enlarge it")
    b2 = window_beta2(N, theta) if beta2 is None else beta2
    rng = rng_stream(seed, 6000, replica)
    field = _backward_field(n_steps, box, math.sqrt(b2), rng)
    p = start_distribution(N, delta, box)
    return PolymerField(N, box, seed, field, 0.5 * float(np.sum(p * field)), leak)


def transfer_moments(N: int, theta: float, delta: float, n_disorder: int, seed: int = 0,
                     box: int | None = None, beta2: float | None = None) -> list[MCEstimate]:
    """Estimates of E[2 Z_N(g_delta)] and E[(2 Z_N(g_delta))^2] over disorder."""
    vals = np.array([2.0 * polymer_transfer_matrix(N, theta, box, seed, delta,
                                                   replica=k, beta2=beta2).value
                     for k in range(n_disorder)])
    out = []
    for v in (vals, vals ** 2):
        out.append(MCEstimate(float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v))),
                              len(v), seed, 6000))
    return out


# --- mollified SHE -----------------------------------------------------------

def she_beta2(eps: float, theta: float, mollifier=None) -> float:
    """Critical coupling 1/R_eps * (1 + theta / log eps^-2)."""
    return (1.0 + theta / math.log(eps ** -2)) / continuum_overlap_Reps(eps, mollifier)


def _gaussian_mollifier(mollifier):
    mol = mollifier or GaussianMollifier()
    if not isinstance(mol, GaussianMollifier):
        raise ValueError("path simulation supports Gaussian mollifiers")
    return mol


def collision_functional(rng, starts, t: float, eps: float, sigma: float, pairs,
                         dt_min: float, reach: float = 6.0, split: float = 8.0):
    """int_0^t J_eps(W_i - W_j) ds for standard Brownian paths, trapezoid rule.

    J_eps is the centred Gaussian density with variance 2 sigma^2 eps^2 per
    axis. Steps are adaptive: dt = ((d - reach * w) / split)^2 when the closest
    listed pair is at distance d beyond reach * w (w the kernel width), else
    dt_min, so far-apart paths move in large exact Gaussian steps.
    """
    n = starts.shape[0]
    var = 2.0 * (sigma * eps) ** 2
    width = math.sqrt(var)
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    pos = np.array(starts, dtype=float)
    now = np.zeros(n)
    out = np.zeros((n, len(pairs)))

    def kern(p):
        d = p[:, ii] - p[:, jj]
        r2 = np.sum(d * d, axis=-1)
        return np.exp(-0.5 * r2 / var) / (2.0 * math.pi * var), np.sqrt(r2.min(axis=1))

    j_old, dist = kern(pos)
    active = np.arange(n)
    while active.size:
        far = np.maximum(dist[active] - reach * width, 0.0) / split
        dt = np.minimum(np.maximum(far * far, dt_min), t - now[active])
        pos[active] += np.sqrt(dt)[:, None, None] * rng.standard_normal((active.size,) + pos.shape[1:])
        j_new, d_new = kern(pos[active])
        out[active] += 0.5 * dt[:, None] * (j_old[active] + j_new)
        j_old[active] = j_new
        dist[active] = d_new
        now[active] += dt
        active = active[now[active] < t * (1.0 - 1e-12)]
    return out


def _she_draw(h, t, eps, delta, n_steps, mol, b2, pairs, combine):
    sd = math.sqrt(2.0 * delta)

    def draw(rng, n):
        starts = sd * rng.standard_normal((n, h, 2))
        if not pairs or b2 == 0.0:
            return combine(np.zeros((n, max(len(pairs), 1))))
        L = collision_functional(rng, starts, t, eps, mol.sigma, pairs, t / n_steps)
        return combine(b2 * L)

    return draw


@dataclass
class SheEstimate:
    estimate: MCEstimate
    coarse: MCEstimate
    step_bias: float


def she_replica_moment(h: int, t: float, theta: float, eps: float, delta: float,
                       n_steps: int, spec: QuadSpec = QuadSpec(), seed: int = 0,
                       mollifier=None, beta2: float | None = None) -> SheEstimate:
    """E prod_{i<j} exp(beta_eps^2 L_ij) for Brownian replicas started from g_{2 delta}.

    Runs at n_steps and 2 n_steps (floor step t / n_steps) and reports the
    change as the step bias.
    """
    if not 1e-3 <= eps <= 1e-1:
        raise ValueError("eps must lie in [1e-3, 1e-1]")
    mol = _gaussian_mollifier(mollifier)
    b2 = she_beta2(eps, theta, mol) if beta2 is None else beta2
    pairs = list(zip(*np.triu_indices(h, 1)))
    combine = lambda x: np.exp(x.sum(axis=1))
    ests = [mc_mean(_she_draw(h, t, eps, delta, k, mol, b2, pairs, combine),
                    spec.mc_samples, seed, 7000 + h, spec.chunk, spec.jobs)
            for k in (n_steps, 2 * n_steps)]
    return SheEstimate(ests[1], ests[0], abs(ests[1].mean - ests[0].mean))


@dataclass
class RatioEstimate:
    ratio: float
    stderr: float
    numerator: MCEstimate
    denominator: MCEstimate


def gci_ratio_mc(t: float, theta: float, eps: float, delta: float,
                 spec: QuadSpec = QuadSpec(), n_steps: int | None = None, seed: int = 0,
                 mollifier=None, beta2: float | None = None) -> RatioEstimate:
    """E[e^{b L12 + b L13}] / E[e^{b L12}]^2 on common paths.

    The denominator uses both e^{b L12} and e^{b L13}, which have the same
    law. The error is the delta-method standard error of the ratio.
    """
    mol = _gaussian_mollifier(mollifier)
    b2 = she_beta2(eps, theta, mol) if beta2 is None else beta2
    n_steps = n_steps or int(math.ceil(16.0 * t / eps ** 2))

    def combine(x):
        num = np.exp(x[:, 0] + x[:, 1])
        den = 0.5 * (np.exp(x[:, 0]) + np.exp(x[:, 1]))
        return np.stack([num, den, num * num, den * den, num * den], axis=1)

    draw = _she_draw(3, t, eps, delta, n_steps, mol, b2, [(0, 1), (0, 2)], combine)
    cols = mc_mean(draw, spec.mc_samples, seed, 7100, spec.chunk, spec.jobs)
    mn, md, mnn, mdd, mnd = (c.mean for c in cols)
    n = cols[0].n
    r = mn / md ** 2
    var = ((mnn - mn ** 2) / md ** 4 + 4.0 * mn ** 2 * (mdd - md ** 2) / md ** 6
           - 4.0 * mn * (mnd - mn * md) / md ** 5)
    return RatioEstimate(r, math.sqrt(max(var, 0.0) / n), cols[0], cols[1])
