"""Critical-window quantities on the lattice and in the continuum."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, special
from scipy.interpolate import CubicSpline

from .special_fn import EULER_GAMMA, heat_kernel_r2

ALPHA = EULER_GAMMA + math.log(16.0) - math.pi
UN_MAX = 1 << 16


def q2n_zero(n):
    """Return probability of the 2d simple random walk at time 2n, squared binomial form."""
    arr = np.asarray(n)
    if np.any(arr < 1):
        raise ValueError("q2n_zero needs n >= 1")
    nn = arr.astype(float)
    log_p = special.gammaln(2 * nn + 1) - 2 * special.gammaln(nn + 1) - 2 * nn * math.log(2.0)
    out = np.exp(2.0 * log_p)
    return float(out) if out.ndim == 0 else out


def replica_overlap_RN(N: int) -> float:
    if N < 1:
        raise ValueError("N >= 1 required")
    return math.fsum(q2n_zero(np.arange(1, N + 1)))


def rn_asymptotic_gap(N: int) -> float:
    """R_N minus its two-term asymptotic (log N + alpha)/pi."""
    return replica_overlap_RN(N) - (math.log(N) + ALPHA) / math.pi


def critical_beta2_N(N: int, theta: float, kappa4: float = 0.0) -> float:
    if N < 8:
        raise ValueError("N >= 8 required")
    c = EULER_GAMMA + math.log(16.0) - 0.5 * math.pi + 7.0 / 12.0 * math.pi * kappa4
    ln = math.log(N)
    return math.pi / ln * (1.0 + (theta - c) / ln)


def sigma2_from_window(N: int, theta: float) -> float:
    if N < 2:
        raise ValueError("N >= 2 required")
    return (1.0 + theta / math.log(N)) / replica_overlap_RN(N)


def sigma2_window_gap(N: int, theta: float) -> float:
    """|e^{beta_N^2} - 1 - sigma_N^2| for Gaussian disorder; O(1/log^2 N)."""
    return abs(math.expm1(critical_beta2_N(N, theta)) - sigma2_from_window(N, theta))


@dataclass(frozen=True)
class LatticeWindow:
    N: int
    theta: float
    R_N: float
    sigma2_N: float
    beta2_N: float
    kappa4: float = 0.0


def lattice_window(N: int, theta: float, kappa4: float = 0.0) -> LatticeWindow:
    rn = replica_overlap_RN(N)
    return LatticeWindow(N, theta, rn, (1.0 + theta / math.log(N)) / rn,
                         critical_beta2_N(N, theta, kappa4), kappa4)


def renewal_sequence(n: int, sigma2: float) -> np.ndarray:
    """U(1..n) for the renewal with step weights sigma2 * q2n_zero(k).

    Direct O(n^2) recursion with BLAS dot products; entry k-1 holds U(k).
    """
    if n > UN_MAX:
        raise MemoryError(f"U_N recursion capped at N = {UN_MAX}")
    q = sigma2 * q2n_zero(np.arange(1, n + 1))
    u = np.empty(n)
    qrev = q[::-1].copy()  # qrev[n-k] = q[k-1]
    for k in range(1, n + 1):
        conv = float(np.dot(qrev[n - k + 1:], u[: k - 1])) if k > 1 else 0.0
        u[k - 1] = q[k - 1] + conv
    return u


def discrete_renewal_UN(N: int, theta: float) -> np.ndarray:
    """U_N(1..N) at the window sigma_N^2; entry k-1 holds U_N(k)."""
    if N > UN_MAX:
        raise MemoryError(f"U_N recursion capped at N = {UN_MAX}")
    return renewal_sequence(N, sigma2_from_window(N, theta))


# --- continuum window --------------------------------------------------------

class GaussianMollifier:
    """j = heat kernel of variance-time sigma^2, so J = j * j = g_{2 sigma^2}."""

    def __init__(self, sigma: float = 0.5):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.name = f"gaussian:{sigma:g}"

    def J(self, r):
        return heat_kernel_r2(2.0 * self.sigma ** 2, np.asarray(r, float) ** 2)

    def cutoff(self) -> float:
        return 40.0 * self.sigma


class RadialMollifier:
    """Any integrable radial profile J(|x|), given directly."""

    def __init__(self, profile: Callable[[float], float], cutoff: float, name: str = "radial"):
        self.profile = profile
        self._cut = float(cutoff)
        self.name = name

    def J(self, r):
        return self.profile(r)

    def cutoff(self) -> float:
        return self._cut


def parse_mollifier(text: str):
    kind, _, arg = text.partition(":")
    if kind == "gaussian":
        return GaussianMollifier(float(arg) if arg else 0.5)
    raise ValueError(f"unknown mollifier {text!r}")


def _hankel(mol, k: float) -> float:
    """Planar Fourier transform of the radial profile at |xi| = k."""
    cut = mol.cutoff()
    f = lambda r: 2.0 * math.pi * r * float(mol.J(r)) * special.j0(k * r)
    n_osc = int(k * cut / math.pi) + 1
    pts = np.linspace(0.0, cut, min(n_osc, 400) + 1)[1:-1] if n_osc > 4 else None
    with warnings.catch_warnings():
        # roundoff warning at this tolerance is benign; checked against the closed form
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, _ = integrate.quad(f, 0.0, cut, points=pts, limit=2000, epsabs=1e-17, epsrel=1e-13)
    return val


def _kmax(mol) -> float:
    if isinstance(mol, GaussianMollifier):
        return math.sqrt(40.0) / mol.sigma  # Jhat = exp(-sigma^2 k^2) < e^-40 beyond
    return getattr(mol, "kmax", 200.0 / mol.cutoff())


def _spectrum(mol, kmax):
    cached = getattr(mol, "_spectrum", None)
    if cached is None:
        logk = np.linspace(math.log(kmax) - 30.0, math.log(kmax), 2400)
        jhat = CubicSpline(logk, [_hankel(mol, math.exp(v)) for v in logk])
        cached = (logk, jhat, _hankel(mol, 0.0))
        mol._spectrum = cached
    return cached


def continuum_overlap_Reps(eps: float, mollifier=None, method: str = "auto") -> float:
    """Expected replica overlap up to time eps^-2.

    Gaussian mollifiers have the closed form (1/4pi) log(1 + eps^-2 / (2 sigma^2)).
    The numeric route writes the spatial double integral spectrally,
    A(t) = (1/2pi) int_0^inf k Jhat(k)^2 exp(-t k^2) dk, with Jhat from a
    numeric Hankel transform, and integrates A over time by quadrature.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    mol = mollifier or GaussianMollifier()
    horizon = eps ** -2
    if method == "auto":
        method = "closed" if isinstance(mol, GaussianMollifier) else "quadrature"
    if method == "closed":
        if not isinstance(mol, GaussianMollifier):
            raise ValueError("closed form only for Gaussian mollifiers")
        return math.log1p(horizon / (2.0 * mol.sigma ** 2)) / (4.0 * math.pi)
    kmax = _kmax(mol)
    logk, jhat, j0 = _spectrum(mol, kmax)
    xk, wk = np.polynomial.legendre.leggauss(120)

    def jhat_at(k):
        out = np.where(k < math.exp(logk[0]), j0, 0.0)
        mid = (k >= math.exp(logk[0])) & (k <= kmax)
        out[mid] = jhat(np.log(k[mid]))
        return out

    def area(t):
        # k = kappa / sqrt(t); kappa up to 9 (e^-81) or the spectral cutoff
        top = min(9.0, kmax * math.sqrt(t)) if t > 0 else 9.0
        kap = 0.5 * top * (xk + 1.0)
        w = 0.5 * top * wk
        vals = kap * jhat_at(kap / math.sqrt(t)) ** 2 * np.exp(-kap * kap)
        return float(np.dot(w, vals)) / (2.0 * math.pi * t)

    t0 = 1e-8
    head = t0 * float(integrate.quad(lambda k: k * float(jhat_at(np.array([k]))[0]) ** 2,
                                     0.0, kmax, limit=400)[0]) / (2.0 * math.pi)
    tail, _ = integrate.quad(lambda s: math.exp(s) * area(math.exp(s)), math.log(t0),
                             math.log(horizon), limit=400, epsabs=1e-15, epsrel=1e-13)
    return head + tail


def constant_C(mollifier=None) -> float:
    """2 int int J(x) log(1/|x-y|) J(y) dx dy + log 4 - gamma.

    The angular integral of log|x-y| over circles of radii r1, r2 equals
    2 pi log max(r1, r2), so the double integral is 2 int dens(r) log(1/r) M(r) dr
    with radial density dens and cumulative mass M. Both are done with
    Gauss-Legendre panels on a geometric grid.
    """
    mol = mollifier or GaussianMollifier()
    cut = mol.cutoff()
    edges = np.concatenate([[0.0], np.geomspace(1e-14 * cut, cut, 400)])
    x, w = np.polynomial.legendre.leggauss(24)
    dens = lambda r: 2.0 * math.pi * r * np.asarray(mol.J(r), float)
    total_mass = 0.0
    dbl = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes = lo + half * (x + 1.0)
        d = dens(nodes)
        # mass inside the panel up to each node: GL on [lo, node]
        sub = lo + 0.5 * (nodes[:, None] - lo) * (x[None, :] + 1.0)
        partial = 0.5 * (nodes - lo) * (dens(sub) @ w)
        dbl += half * float(np.sum(w * d * np.log(1.0 / nodes) * (total_mass + partial)))
        total_mass += half * float(np.dot(w, d))
    if not np.isfinite(total_mass) or total_mass <= 0:
        raise ValueError("J is not integrable")
    dbl *= 2.0
    return 2.0 * dbl + math.log(4.0) - EULER_GAMMA


def reps_intercept(mollifier=None, eps_list=(1e-1, 1e-2, 1e-3, 1e-4)):
    """Sweep eps and extrapolate 4 pi R_eps - log eps^-2 to eps = 0.

    Returns (intercept, extrapolation error, raw differences).
    """
    diffs = np.array([4.0 * math.pi * continuum_overlap_Reps(e, mollifier) - math.log(e ** -2)
                      for e in eps_list])
    eps = np.asarray(eps_list)
    # the correction is O(eps^2): Richardson on the last two points
    r = (eps[-2] / eps[-1]) ** 2
    extrap = (r * diffs[-1] - diffs[-2]) / (r - 1.0)
    return float(extrap), float(abs(extrap - diffs[-1]) + 1e-15), diffs


S_COV = 0.5
T_PERIOD = 2.0


def she_polymer_rescale(t: float, x):
    """Map u-tilde(t, x) = (1/T) u_{beta sqrt(T/s)}(s T t, x / sqrt(s)) with s=1/2, T=2.

    Returns (t', x', amplitude); the coupling is multiplied by beta_factor().
    """
    x = np.asarray(x, dtype=float)
    return S_COV * T_PERIOD * t, x / math.sqrt(S_COV), 1.0 / T_PERIOD


def beta_factor() -> float:
    return math.sqrt(T_PERIOD / S_COV)
