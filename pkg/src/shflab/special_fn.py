"""Heat kernel, the Dickman renewal density and exact Gaussian identities.

The renewal density on (0, 1] is

    G(theta, t) = int_0^inf exp((theta - gamma) u) u t^(u-1) / Gamma(u+1) du

and its antiderivative is the same integral with ``t^u / Gamma(u+1)``.
Both are evaluated in the variable ``L = -log t`` so that arbitrarily small
times never underflow.
"""
from __future__ import annotations

import functools
import hashlib
import os
import struct
from pathlib import Path

import numpy as np
from scipy import integrate, optimize, special
from scipy.interpolate import CubicSpline, PchipInterpolator

EULER_GAMMA = float(np.euler_gamma)

# Taylor coefficients of 1/Gamma(1+u) at u=0, used for the t -> 0 expansion.
_RGAMMA_TAYLOR = np.array([
    1.0,
    0.57721566490153286061,
    -0.65587807152025388108,
    -0.042002635034095235529,
    0.1665386113822914895,
    -0.042197734555544336748,
    -0.0096219715278769735621,
    0.0072189432466630995424,
    -0.0011651675918590651121,
    -0.00021524167411495097282,
    0.00012805028238811618615,
    -0.000020134854780788238656,
    -1.2504934821426706573e-6,
    1.1330272319816958824e-6,
    -2.0563384169776071035e-7,
    6.1160951044814158179e-9,
    5.0020076444692229301e-9,
])
_FACT = special.factorial(np.arange(len(_RGAMMA_TAYLOR) + 1), exact=False)

# Below this time the tables switch to the 1/L expansion.
T_SERIES = 1e-30
_LOG_CUT = 16.0 * np.log(10.0)  # 1e-16 relative truncation of the u-integral


def heat_kernel(t, x):
    """Planar heat kernel g_t(x) = exp(-|x|^2 / 2t) / (2 pi t).

    ``x`` is a planar vector or an array whose last axis has length 2.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat kernel needs t > 0")
    x = np.asarray(x, dtype=float)
    r2 = np.sum(x * x, axis=-1)
    out = np.exp(-r2 / (2.0 * t)) / (2.0 * np.pi * t)
    return float(out) if np.ndim(out) == 0 else out


def heat_kernel_r2(t, r2):
    """g_t evaluated at squared distance r2 (no validation, vectorized)."""
    return np.exp(-r2 / (2.0 * t)) / (2.0 * np.pi * t)


def log_heat_kernel_r2(t, r2):
    return -r2 / (2.0 * t) - np.log(2.0 * np.pi * t)


def _check_time(t):
    if not (0.0 < t <= 1.0):
        raise ValueError(f"G_theta is defined for 0 < t <= 1, got {t!r}")


def _u_integral(theta: float, big_l: float, with_u: bool) -> float:
    """int_0^inf exp((theta-gamma) u - u L - lgamma(u+1)) [u] du.

    The log-integrand is concave, so it has a single peak. The range is cut
    where the integrand drops below 1e-16 of that peak.
    """
    slope = theta - EULER_GAMMA - big_l

    def logf(u):
        base = slope * u - special.gammaln(u + 1.0)
        return base + np.log(u) if with_u else base

    def dlogf(u):
        d = slope - special.digamma(u + 1.0)
        return d + 1.0 / u if with_u else d

    if with_u:
        hi = 1.0
        while dlogf(hi) > 0:
            hi *= 2.0
        peak = optimize.brentq(dlogf, 1e-300, hi, xtol=1e-14)
    elif dlogf(0.0) <= 0:
        peak = 0.0
    else:
        hi = 1.0
        while dlogf(hi) > 0:
            hi *= 2.0
        peak = optimize.brentq(dlogf, 0.0, hi, xtol=1e-14)
    top = logf(peak) if peak > 0 else (0.0 if not with_u else -np.inf)
    hi = max(2.0 * peak, 1.0)
    while logf(hi) > top - _LOG_CUT:
        hi *= 2.0
    u_max = optimize.brentq(lambda u: logf(u) - (top - _LOG_CUT), max(peak, 1e-300), hi)

    def f(u):
        return np.exp(logf(u) - top) if u > 0 else (0.0 if with_u else 1.0)

    pts = [0.0, peak, u_max] if peak > 0 else [0.0, u_max]
    if with_u:
        # the mass sits near u ~ 1/L for small t; give quad a hint
        pts = sorted(set(pts + [min(u_max, 0.25 * peak), min(u_max, 4.0 * peak)]))
    total = 0.0
    for lo, hi_ in zip(pts[:-1], pts[1:]):
        if hi_ > lo:
            val, _ = integrate.quad(f, lo, hi_, epsabs=0.0, epsrel=1e-13, limit=200)
            total += val
    return total * np.exp(top)


def _series_gbar(theta, big_l):
    lp = big_l - theta + EULER_GAMMA
    k = np.arange(len(_RGAMMA_TAYLOR))
    lp = np.asarray(lp, dtype=float)[..., None]
    return np.sum(_RGAMMA_TAYLOR * _FACT[k] / lp ** (k + 1), axis=-1)


def _series_tg(theta, big_l):
    """t * G(t) from the small-t expansion."""
    lp = big_l - theta + EULER_GAMMA
    k = np.arange(len(_RGAMMA_TAYLOR))
    lp = np.asarray(lp, dtype=float)[..., None]
    return np.sum(_RGAMMA_TAYLOR * _FACT[k + 1] / lp ** (k + 2), axis=-1)


def _series_ok(theta, big_l):
    return big_l - theta + EULER_GAMMA > 60.0


def g_theta(theta: float, t: float) -> float:
    """Renewal density G_theta(t) for 0 < t <= 1, by adaptive quadrature."""
    _check_time(t)
    big_l = -np.log(t)
    if _series_ok(theta, big_l):
        return float(_series_tg(theta, big_l) / t)
    return float(_u_integral(float(theta), big_l, True) / t)


def g_theta_antiderivative(theta: float, t: float) -> float:
    """Gbar_theta(t) = int_0^t G_theta, via the reduced u-integral."""
    _check_time(t)
    big_l = -np.log(t)
    if _series_ok(theta, big_l):
        return float(_series_gbar(theta, big_l))
    return float(_u_integral(float(theta), big_l, False))


def _log_grid(n_total: int, t_min: float, t_switch: float = 1e-2):
    n_log = n_total * 2 // 3
    n_lin = n_total - n_log
    left = np.exp(np.linspace(np.log(t_min), np.log(t_switch), n_log))
    right = np.linspace(t_switch, 1.0, n_lin + 1)[1:]
    return np.concatenate([left, right])


_MAGIC = b"SHFGTAB1"


class GThetaTable:
    """Interpolable samples of G_theta and Gbar_theta on (0, 1].

    Interpolation is cubic in log t for log G and log Gbar. Times below
    ``T_SERIES`` use the small-t expansion, which is exact to double
    precision there.
    """

    def __init__(self, theta: float, grid, values_g, values_gbar):
        self.theta = float(theta)
        self.grid = np.asarray(grid, dtype=float)
        self.values_G = np.asarray(values_g, dtype=float)
        self.values_Gbar = np.asarray(values_gbar, dtype=float)
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(self.values_G <= 0) or np.any(np.diff(self.values_Gbar) <= 0):
            raise ValueError("table values violate positivity or monotonicity")
        y = np.log(self.grid)
        self._y0 = y[0]
        self._logg = CubicSpline(y, np.log(self.values_G))
        self._loggb = CubicSpline(y, np.log(self.values_Gbar))
        self._inv = PchipInterpolator(self.values_Gbar, y)
        self.gbar_min = float(self.values_Gbar[0])
        self.gbar_one = float(self.values_Gbar[-1])

    @classmethod
    def build(cls, theta: float, n: int = 2048, t_min: float = T_SERIES) -> "GThetaTable":
        grid = _log_grid(n, t_min)
        vg = np.array([g_theta(theta, t) for t in grid])
        vgb = np.array([g_theta_antiderivative(theta, t) for t in grid])
        return cls(theta, grid, vg, vgb)

    # --- evaluation -----------------------------------------------------
    def G(self, t):
        """Vectorized G_theta; +inf at t = 0, nan outside [0, 1]."""
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, np.nan)
        pos = t > 0
        y = np.log(np.where(pos, t, 1.0))
        tab = pos & (y >= self._y0) & (t <= 1.0 + 1e-12)
        out[tab] = np.exp(self._logg(y[tab]))
        small = pos & (y < self._y0)
        if np.any(small):
            out[small] = _series_tg(self.theta, -y[small]) / t[small]
        out[t == 0] = np.inf
        return out

    def Gbar(self, t):
        """Vectorized Gbar_theta; 0 for t <= 0, clipped at t = 1."""
        t = np.minimum(np.asarray(t, dtype=float), 1.0)
        out = np.zeros(t.shape)
        pos = t > 0
        y = np.log(np.where(pos, t, 1.0))
        tab = pos & (y >= self._y0)
        out[tab] = np.exp(self._loggb(y[tab]))
        small = pos & (y < self._y0)
        if np.any(small):
            out[small] = _series_gbar(self.theta, -y[small])
        return out

    def Gbar_inv(self, v):
        """Inverse of Gbar on (0, Gbar(1)]; returns times (possibly 0 on underflow)."""
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape)
        tab = v >= self.gbar_min
        if np.any(tab):
            vv = np.minimum(v[tab], self.gbar_one)
            y = self._inv(vv)
            for _ in range(3):
                # Newton on log Gbar(exp(y)) = log v
                lgb = self._loggb(y)
                slope = self._loggb(y, 1)
                y = np.minimum(y - (lgb - np.log(vv)) / slope, 0.0)
            out[tab] = np.exp(y)
        small = (~tab) & (v > 0)
        if np.any(small):
            out[small] = np.exp(-self._series_inverse_l(v[small]))
        return out

    def _series_inverse_l(self, v):
        lp = 1.0 / v  # leading order: Gbar ~ 1/L'
        big_l = lp + self.theta - EULER_GAMMA
        for _ in range(30):
            f = _series_gbar(self.theta, big_l) - v
            # d Gbar / dL = -(t G(t))
            df = -_series_tg(self.theta, big_l)
            step = f / df
            big_l = big_l - step
            if np.all(np.abs(step) <= 1e-13 * np.abs(big_l)):
                break
        return big_l

    # --- persistence ------------------------------------------------------
    def to_bytes(self) -> bytes:
        head = _MAGIC + struct.pack("<IdI", 1, self.theta, self.grid.size)
        body = np.stack([self.grid, self.values_G, self.values_Gbar]).astype("<f8").tobytes()
        return head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "GThetaTable":
        if raw[:8] != _MAGIC:
            raise ValueError("not a G_theta table")
        version, theta, n = struct.unpack("<IdI", raw[8:24])
        if version != 1:
            raise ValueError(f"unsupported table version {version}")
        arr = np.frombuffer(raw[24:], dtype="<f8").reshape(3, n)
        return cls(theta, arr[0], arr[1], arr[2])


def _table_path(theta: float, n: int) -> Path | None:
    root = os.environ.get("SHFLAB_TABLE_DIR")
    if not root:
        return None
    key = hashlib.sha1(struct.pack("<dI", theta, n)).hexdigest()[:16]
    return Path(root) / f"gtheta_{key}.bin"


@functools.lru_cache(maxsize=32)
def gtheta_table(theta: float, n: int = 2048) -> GThetaTable:
    """Shared table for ``theta``; cached in memory and optionally on disk."""
    theta = float(theta)
    path = _table_path(theta, n)
    if path is not None and path.exists():
        return GThetaTable.from_bytes(path.read_bytes())
    tab = GThetaTable.build(theta, n)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_bytes(tab.to_bytes())
        tmp.replace(path)
    return tab


def gauss_h(s: float, t: float) -> float:
    """Harmonic combination st/(s+t)."""
    if s <= 0 or t <= 0:
        raise ValueError("gauss_h needs positive arguments")
    return s * t / (s + t)


def gauss_midpoint(s: float, t: float, a, b):
    """Weighted point t/(s+t) a + s/(s+t) b."""
    if s <= 0 or t <= 0:
        raise ValueError("gauss_midpoint needs positive weights")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return (t * a + s * b) / (s + t)


def triple_gauss_integral(s: float, t: float, u: float, a, b, c) -> float:
    """Closed form of int g_s(x-a) g_t(x-b) g_u(x-c) dx over the plane."""
    if min(s, t, u) <= 0:
        raise ValueError("variance times must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m = gauss_midpoint(s, t, a, b)
    return heat_kernel(s + t, a - b) * heat_kernel(gauss_h(s, t) + u, c - m)
