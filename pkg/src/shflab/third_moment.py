"""Third-moment kernel of the flow and its comparison with the GMC bound.

The kernel integrates, over ordered time chains, a convolution of heat kernels
that collapses to a product of three Gaussians after a top-down reduction of
the chain. Averaged against a test function it is bounded below by the series
``I3``; the GMC third moment is bounded above by ``I3_tilde``. Both series are
summed by the deterministic chain transfer of :mod:`shflab.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .kernels import ShiftProposal, chain_series, chain_term_sampler
from .quadrature import MCEstimate, QuadSpec, TimeChain, mc_mean, simplex_integral
from .special_fn import gtheta_table

TWO_PI = 2.0 * math.pi
BRUTE_MAX_M = 6


# --- reduction of the heat-kernel convolution --------------------------------

@dataclass(frozen=True)
class GmReduction:
    m: int
    bar_a2: float
    bar_gaps: tuple
    slack_a2: float      # (a_2 - b_1/4) - bar_a2 >= 0
    slack_gaps: tuple    # ((a_i - b_{i-2}) - (b_{i-1} - a_{i-1})/4) - bar_gap_i >= 0


def _harmonic(s, t):
    return s * t / (s + t)


def _chain_times(chain) -> np.ndarray:
    if isinstance(chain, TimeChain):
        return chain.times
    times = np.asarray(chain, dtype=float)
    if times.ndim != 1 or times.size < 4 or times.size % 2:
        raise ValueError("a chain holds (a_1, b_1, ..., a_m, b_m) with m >= 2")
    if times[0] <= 0 or np.any(np.diff(times) <= 0):
        raise ValueError("chain times must be positive and strictly increasing")
    return times


def gm_reduce_arrays(a: np.ndarray, b: np.ndarray):
    """Vectorized reduction over rows of (n, m) arrays.

    Returns (bar_a2, bar_gaps) with bar_gaps[:, i-3] for i = 3..m. The last
    b column is never read.
    """
    a = np.array(a, dtype=float, copy=True)
    b = np.asarray(b, dtype=float)
    n, m = a.shape
    gaps = np.empty((n, m - 2))
    for k in range(m - 1, 1, -1):          # block k (1-based) absorbs block k+1
        ak, bk, bkm1 = a[:, k - 1], b[:, k - 1], b[:, k - 2]
        akp1 = a[:, k]
        gaps[:, k - 2] = (akp1 - bkm1) - 0.25 * (bk - ak)
        a[:, k - 1] = 0.5 * (ak + bkm1) + _harmonic(0.5 * (ak - bkm1),
                                                   akp1 - 0.5 * bkm1 - 0.25 * (ak + bk))
    bar_a2 = a[:, 1] - 0.25 * b[:, 0]
    return bar_a2, gaps


def gm_reduce(chain) -> GmReduction:
    times = _chain_times(chain)
    a, b = times[0::2], times[1::2]
    m = a.size
    bar_a2, gaps = gm_reduce_arrays(a[None, :], b[None, :])
    bar_a2, gaps = float(bar_a2[0]), gaps[0]
    if bar_a2 <= 0 or np.any(gaps <= 0):
        raise RuntimeError("reduction produced a nonpositive time")
    plain = np.array([(a[i] - b[i - 2]) - 0.25 * (b[i - 1] - a[i - 1]) for i in range(2, m)])
    return GmReduction(m, bar_a2, tuple(float(g) for g in gaps),
                       float(a[1] - 0.25 * b[0] - bar_a2),
                       tuple(float(d) for d in plain - gaps))


def _g2(s, v):
    """Planar heat kernel at time s and displacement v (last axis of size 2)."""
    v = np.asarray(v, dtype=float)
    return np.exp(-0.5 * np.sum(v * v, axis=-1) / s) / (TWO_PI * s)


def gm_eval(chain, z1, z2, z3) -> float:
    red = gm_reduce(chain)
    times = _chain_times(chain)
    z1, z2, z3 = (np.asarray(z, dtype=float) for z in (z1, z2, z3))
    val = _g2(times[0], z1 - z2) * _g2(red.bar_a2, z3 - 0.5 * (z1 + z2))
    for g in red.bar_gaps:
        val /= TWO_PI * g
    return float(val)


def _gaussian_axis(n, quad, lin, const):
    """log of int exp(-x'Ax/2 + B'x + c) dx over R^n."""
    sign, logdet = np.linalg.slogdet(quad)
    if sign <= 0:
        raise RuntimeError("singular Gaussian form")
    sol = np.linalg.solve(quad, lin)
    return 0.5 * n * math.log(TWO_PI) - 0.5 * logdet + 0.5 * float(lin @ sol) + const


def brute_gm(chain, z1, z2, z3) -> float:
    """The heat-kernel convolution integrated variable by variable.

    Each planar kernel factors over the two coordinates, so the integral over
    (x_l, y_l) is a Gaussian integral per axis, done with a dense quadratic
    form. No use is made of the reduction.
    """
    times = _chain_times(chain)
    a, b = times[0::2], times[1::2]
    m = a.size
    if m > BRUTE_MAX_M:
        raise ValueError(f"brute force capped at m = {BRUTE_MAX_M}")
    # variables per axis: x_1, y_1, ..., x_m, y_m  -> index 2l, 2l+1
    links = []   # (variance, i, j) meaning g(v_i - v_j); j may be ("z", k)
    links += [(a[0] / 2, 0, ("z", 0)), (a[0] / 2, 0, ("z", 1)), ((b[0] - a[0]) / 4, 1, 0)]
    links += [(a[1] / 2, 2, ("z", 2)), ((a[1] - b[0]) / 2, 2, 1), ((b[1] - a[1]) / 4, 3, 2)]
    for l in range(2, m):
        x, y = 2 * l, 2 * l + 1
        links += [((a[l] - b[l - 2]) / 2, x, 2 * (l - 2) + 1),
                  ((a[l] - b[l - 1]) / 2, x, 2 * (l - 1) + 1),
                  ((b[l] - a[l]) / 4, y, x)]
    n = 2 * m
    zs = np.array([z1, z2, z3], dtype=float)
    total = 0.0
    for axis in range(2):
        A = np.zeros((n, n))
        B = np.zeros(n)
        c = 0.0
        lognorm = 0.0
        for s, i, j in links:
            lognorm -= 0.5 * math.log(TWO_PI * s)
            p = 1.0 / s
            A[i, i] += p
            if isinstance(j, tuple):
                zc = zs[j[1], axis]
                B[i] += p * zc
                c -= 0.5 * p * zc * zc
            else:
                A[j, j] += p
                A[i, j] -= p
                A[j, i] -= p
        total += _gaussian_axis(n, A, B, c) + lognorm
    return math.exp(total)


# --- test functions ----------------------------------------------------------

@dataclass(frozen=True)
class TestFunctionSpec:
    kind: str   # "heat" or "ball"
    r: float

    __test__ = False

    def __post_init__(self):
        if self.kind not in ("heat", "ball"):
            raise ValueError(f"unknown test function kind {self.kind!r}")
        if not self.r > 0:
            raise ValueError("radius must be positive")

    @classmethod
    def parse(cls, text: str) -> "TestFunctionSpec":
        kind, sep, arg = text.partition(":")
        if not sep:
            raise ValueError(f"expected heat:R or ball:R, got {text!r}")
        return cls(kind, float(arg))

    def __str__(self):
        return f"{self.kind}:{self.r:g}"

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "heat":
            return _g2(self.r, z)
        return (np.sum(z * z, axis=-1) <= self.r ** 2).astype(float)


# --- disk geometry -----------------------------------------------------------

def lens_area(d, r: float = 1.0):
    """Area of the intersection of two disks of radius r at distance d."""
    d = np.minimum(np.asarray(d, dtype=float), 2.0 * r)
    return 2.0 * r * r * np.arccos(d / (2.0 * r)) - 0.5 * d * np.sqrt(4.0 * r * r - d * d)


def triple_disk_area(centers, r: float = 1.0, tol: float = 1e-12):
    """Area of the intersection of three disks of common radius r.

    ``centers`` has shape (..., 3, 2). The intersection is convex and its
    boundary is made of arcs; each circle contributes the arc lying inside
    both other disks (an intersection of two angular intervals), and Green's
    theorem turns the arcs into the area. This covers every containment case
    without a case table. Coincident circles are collapsed onto one copy.
    """
    c = np.asarray(centers, dtype=float)
    shape = c.shape[:-2]
    c = c.reshape(-1, 3, 2)
    area = np.zeros(len(c))
    for i in range(3):
        half, phi = [], []
        skip = np.zeros(len(c), bool)
        empty = np.zeros(len(c), bool)
        for j in (j for j in range(3) if j != i):
            v = c[:, j] - c[:, i]
            d = np.hypot(v[:, 0], v[:, 1])
            same = d < tol
            if j < i:
                skip |= same
            empty |= d >= 2.0 * r
            half.append(np.where(same, math.pi, np.arccos(np.clip(d / (2.0 * r), 0.0, 1.0))))
            phi.append(np.arctan2(v[:, 1], v[:, 0]))
        h1, h2 = half
        full1, full2 = h1 >= math.pi, h2 >= math.pi
        delta = np.angle(np.exp(1j * (phi[1] - phi[0])))
        lo = np.maximum(-h1, delta - h2)
        hi = np.minimum(h1, delta + h2)
        base = phi[0]
        # a coincident neighbour imposes nothing: keep the other arc whole
        lo = np.where(full1, -h2, np.where(full2, -h1, lo))
        hi = np.where(full1, h2, np.where(full2, h1, hi))
        base = np.where(full1, phi[1], base)
        ok = (hi > lo) & ~skip & ~empty
        b0, b1 = base + lo, base + hi
        cx, cy = c[:, i, 0], c[:, i, 1]
        contrib = 0.5 * (r * r * (b1 - b0)
                         + r * (cx * (np.sin(b1) - np.sin(b0)) - cy * (np.cos(b1) - np.cos(b0))))
        area += np.where(ok, contrib, 0.0)
    return area.reshape(shape)


def _centres(rho, sig, psi, tilde):
    """Disk centres for the ball functionals (unit radius).

    scrG: z1, z2 at -+y/2 around their midpoint, z3 at -w from it.
    scrG_tilde: z1 at y, z2 at 0, z3 at -w.
    """
    zero = np.zeros_like(rho)
    w = np.stack([-sig * np.cos(psi), -sig * np.sin(psi)], axis=-1)
    if tilde:
        p1 = np.stack([rho, zero], axis=-1)
        p2 = np.stack([zero, zero], axis=-1)
    else:
        p1 = np.stack([0.5 * rho, zero], axis=-1)
        p2 = np.stack([-0.5 * rho, zero], axis=-1)
    return np.stack([p1, p2, w], axis=-2)


class BallHeads:
    """scrG and scrG_tilde for the unit-ball indicator, tabulated.

    With y = z2 - z1 and w = z3 - (midpoint or z2), the functional is
    (2 pi)^2 int int g_{a1}(y) g_{a2}(w) A(y, w) dy dw where A is a triple-disk
    area. Averaging A over the relative angle gives H(|y|, |w|); the radial
    Gaussian measure becomes uniform in U = 1 - exp(-rho^2 / 2a), so
    scrG = 2 pi int int H dU1 dU2. H is tabulated on [0, 2]^2 and the result
    on a log-a grid; ``rel_error`` compares two table resolutions.
    """

    A_MIN, A_MAX = 1e-8, 1e4

    def __init__(self, n_grid: int = 161, n_psi: int = 96, n_u: int = 64, n_a: int = 81):
        self.tables = {}
        coarse = {}
        for tilde in (False, True):
            self.tables[tilde] = self._build(tilde, n_grid, n_psi, n_u, n_a)
            coarse[tilde] = self._build(tilde, (n_grid + 1) // 2, n_psi // 2 + 8, n_u, n_a)
        rel = 0.0
        for tilde in (False, True):
            fine_v = self.tables[tilde][2]
            rel = max(rel, float(np.max(np.abs(np.expm1(coarse[tilde][2] - fine_v)))))
        self.rel_error = rel
        self._splines = {k: RectBivariateSpline(v[0], v[1], v[2]) for k, v in self.tables.items()}

    @staticmethod
    def _angular(tilde, n_grid, n_psi):
        grid = np.linspace(0.0, 2.0, n_grid)
        y, w = np.polynomial.legendre.leggauss(n_psi)
        psi = 0.5 * math.pi * (y + 1.0)
        wpsi = math.pi * w            # 2 * (pi / 2) * w over [0, pi], doubled by symmetry
        H = np.empty((n_grid, n_grid))
        for i, rho in enumerate(grid):
            R, S, P = np.meshgrid([rho], grid, psi, indexing="ij")
            A = triple_disk_area(_centres(R[0], S[0], P[0], tilde))
            H[i] = A @ wpsi
        return grid, H

    def _build(self, tilde, n_grid, n_psi, n_u, n_a):
        grid, H = self._angular(tilde, n_grid, n_psi)
        spl = RectBivariateSpline(grid, grid, H, kx=3, ky=3)
        y, w = np.polynomial.legendre.leggauss(n_u)
        y, w = 0.5 * (y + 1.0), 0.5 * w
        la = np.linspace(math.log(self.A_MIN), math.log(self.A_MAX), n_a)
        av = np.exp(la)
        umax = -np.expm1(-2.0 / av)                       # rho_max = 2
        radii = []
        for a, top in zip(av, umax):
            u = top * y
            radii.append((np.sqrt(-2.0 * a * np.log1p(-u)), top * w))
        vals = np.empty((n_a, n_a))
        for i, (r1, w1) in enumerate(radii):
            for j, (r2, w2) in enumerate(radii):
                vals[i, j] = TWO_PI * float(w1 @ spl(r1, r2) @ w2)
        return la, la, np.log(vals)

    def __call__(self, a1, a2, tilde: bool = False):
        a1 = np.clip(np.asarray(a1, dtype=float), self.A_MIN, self.A_MAX)
        a2 = np.clip(np.asarray(a2, dtype=float), self.A_MIN, self.A_MAX)
        return np.exp(self._splines[tilde].ev(np.log(a1), np.log(a2)))


@lru_cache(maxsize=1)
def ball_heads() -> BallHeads:
    return BallHeads()


def scrG(a1, a2, phi: TestFunctionSpec):
    """(2 pi)^2 int phi phi phi g_{a1}(z2 - z1) g_{a2}(z3 - (z1 + z2)/2)."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    r = phi.r
    if phi.kind == "heat":
        return 1.0 / ((a1 + 2.0 * r) * (a2 + 1.5 * r))
    # scaling: ball of radius r -> unit ball with times a / r^2
    return r * r * ball_heads()(a1 / (r * r), a2 / (r * r), False)


def scrG_tilde(a1, a2, phi: TestFunctionSpec):
    """(2 pi)^2 int phi phi phi g_{a1}(z2 - z1) g_{a2}(z3 - z2)."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    r = phi.r
    if phi.kind == "heat":
        return 1.0 / (a1 * a2 + 2.0 * r * (a1 + a2) + 3.0 * r * r)
    return r * r * ball_heads()(a1 / (r * r), a2 / (r * r), True)


def head_rel_error(phi: TestFunctionSpec) -> float:
    return 0.0 if phi.kind == "heat" else ball_heads().rel_error


# --- the I3 series -------------------------------------------------------------

@dataclass
class ThirdMomentSeries:
    value: float
    error: float
    terms: list          # order-m contributions, m = 2, 3, ...
    m_max: int | None = None

    def __iter__(self):
        yield self.value
        yield self.error

    @property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.terms)


def _two_block_term(t, theta, head) -> tuple[float, float]:
    """Order-2 term: int head(a1, a2) G(b1 - a1) Gbar(t - a2) over the simplex."""
    fn = lambda a, b: head(a[:, 0], a[:, 1])
    res = simplex_integral(fn, t, 2, QuadSpec(order=60), table=gtheta_table(theta),
                           free_last=True)
    return res.value, res.error


def _i3_series(t, theta, head, rel_head_err, m_max) -> ThirdMomentSeries:
    if not (0 < t <= 1):
        raise ValueError("horizon must lie in (0, 1]")
    t2, e2 = _two_block_term(t, theta, head)
    chain = chain_series(t, theta, head, 2.0)
    # order m >= 3 carries 3 * 2^(m-1); chain terms are scaled by 2^(m-3)
    terms = [6.0 * t2] + [12.0 * v for v in chain.terms]
    value = 6.0 * t2 + 12.0 * chain.value
    error = 6.0 * e2 + 12.0 * chain.error + rel_head_err * value
    if m_max is not None:
        if m_max < 2:
            raise ValueError("m_max >= 2 required")
        kept = terms[:m_max - 1]
        error += value - sum(kept)       # the omitted tail, known from the full sum
        value = sum(kept)
        terms = kept
    return ThirdMomentSeries(value, error, terms, m_max)


def I3(t: float, theta: float, phi: TestFunctionSpec, m_max: int | None = None,
       spec: QuadSpec = QuadSpec()) -> ThirdMomentSeries:
    """Lower-bound series for the third moment against phi."""
    return _i3_series(t, theta, lambda x, y: scrG(x, y, phi), head_rel_error(phi), m_max)


def I3_tilde(t: float, theta: float, phi: TestFunctionSpec, m_max: int | None = None,
             spec: QuadSpec = QuadSpec()) -> ThirdMomentSeries:
    """Upper-bound series for the GMC third moment against phi."""
    return _i3_series(t, theta, lambda x, y: scrG_tilde(x, y, phi), head_rel_error(phi), m_max)


@dataclass
class ThirdMomentVerdict:
    t: float
    theta: float
    phi: str
    I3: float
    I3_error: float
    I3_tilde: float
    I3_tilde_error: float
    gap: float
    relative_gap: float
    combined_error: float
    certified: bool
    status: str
    terms: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def third_moment_verdict(t: float, theta: float, phi: TestFunctionSpec) -> ThirdMomentVerdict:
    """Certify I3 > I3_tilde: gap > 3 (err_I3 + err_I3_tilde)."""
    up = I3(t, theta, phi)
    lo = I3_tilde(t, theta, phi)
    gap = up.value - lo.value
    comb = up.error + lo.error
    ok = bool(np.isfinite(gap) and gap > 3.0 * comb)
    status = "certified" if ok else ("inconclusive" if abs(gap) <= 3.0 * comb else "violated")
    return ThirdMomentVerdict(t, theta, str(phi), up.value, up.error, lo.value, lo.error,
                              gap, gap / up.value if up.value else math.nan, comb,
                              ok, status, {"I3": up.terms, "I3_tilde": lo.terms})


# --- the full kernel, by Monte Carlo ------------------------------------------------

def _k3_sampler(t, m, table, scale, head):
    props = [ShiftProposal(scale)] * 2
    ones = lambda d, a: np.ones_like(a)
    return chain_term_sampler(t, m, table, props, first_factor=ones, head=head)


def _k3_series(t, theta, m_max, head_of_m, spec, seed, rel_tol, scale):
    """Sum over m of 2^(m-1) * (chain integral of head); heads see (a, b).

    The sampler's integrand already carries prod 1/(a_i - b_{i-2}) and a
    factor 2 from the two alternating label sequences.
    """
    if not (0 < t <= 1):
        raise ValueError("horizon must lie in (0, 1]")
    table = gtheta_table(theta)
    total, var, terms = 0.0, 0.0, []
    for m in range(2, m_max + 1):
        draw = _k3_sampler(t, m, table, scale, head_of_m(m))
        est = mc_mean(draw, spec.mc_samples, seed, 3000 + m, spec.chunk, spec.jobs)
        c = 2.0 ** (m - 1) / 2.0
        terms.append(c * est.mean)
        total += c * est.mean
        var += (c * est.stderr) ** 2
        if c * est.mean < rel_tol * total:
            break
    tail = terms[-1] if len(terms) > 1 else 0.0
    return total, math.sqrt(var) + tail, terms


def K3_point(t: float, theta: float, z1, z2, z3, m_max: int = 10,
             spec: QuadSpec = QuadSpec(), seed: int = 0, rel_tol: float = 1e-3):
    """Pointwise third-moment kernel, symmetrized over the cyclic orderings.

    Returns (value, error); the error adds the last computed term as a
    truncation allowance.
    """
    zs = [np.asarray(z, dtype=float) for z in (z1, z2, z3)]
    orders = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]

    def head_of_m(m):
        def head(a, b):
            bar_a2, gaps = gm_reduce_arrays(a, b)
            out = np.zeros(len(a))
            for i, j, k in orders:
                zi, zj, zk = zs[i], zs[j], zs[k]
                out += _g2(a[:, 0], zi - zj) * _g2(bar_a2, zk - 0.5 * (zi + zj))
            # (2 pi)^m g-products: g_bar(0) = 1/(2 pi bar); undo the sampler's 1/(a - b)
            plain = a[:, 2:] - b[:, :-2]
            return TWO_PI ** 2 * out * np.prod(plain / gaps, axis=1)
        return head

    scale = max(0.05, float(np.mean([np.sum((zs[i] - zs[j]) ** 2) for i, j in
                                     ((0, 1), (1, 2), (0, 2))])))
    total, err, _ = _k3_series(t, theta, m_max, head_of_m, spec, seed, rel_tol, scale)
    return total, err


def K3_phi(t: float, theta: float, phi: TestFunctionSpec, m_max: int = 10,
           spec: QuadSpec = QuadSpec(), seed: int = 0, rel_tol: float = 1e-3):
    """Averaged kernel int phi phi phi K3 and the CRN excess over the I3 integrand.

    Returns ((value, error), (excess, excess_error)); the excess is the
    pointwise-nonnegative difference K3 - I3 summed to the same order.
    """
    def head_of_m(m):
        def head(a, b):
            bar_a2, gaps = gm_reduce_arrays(a, b)
            plain = a[:, 2:] - b[:, :-2]
            full = 3.0 * scrG(a[:, 0], bar_a2, phi) * np.prod(plain / gaps, axis=1)
            low = 3.0 * scrG(a[:, 0], a[:, 1], phi)
            return np.stack([full, full - low], axis=1)
        return head

    if not (0 < t <= 1):
        raise ValueError("horizon must lie in (0, 1]")
    table = gtheta_table(theta)
    sums = np.zeros(2)
    var = np.zeros(2)
    last = np.zeros(2)
    for m in range(2, m_max + 1):
        draw = _k3_sampler(t, m, table, 1.75 * phi.r, head_of_m(m))
        ests = mc_mean(draw, spec.mc_samples, seed, 4000 + m, spec.chunk, spec.jobs)
        c = 2.0 ** (m - 1) / 2.0
        vals = np.array([e.mean for e in ests]) * c
        sums += vals
        var += (np.array([e.stderr for e in ests]) * c) ** 2
        last = vals
        if vals[0] < rel_tol * sums[0]:
            break
    err = np.sqrt(var) + np.abs(last)
    return (float(sums[0]), float(err[0])), (float(sums[1]), float(err[1]))
