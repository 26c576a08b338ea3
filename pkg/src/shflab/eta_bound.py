"""The strictly positive eta of the third-moment lower bound.

All functions of y depend on |y| only. Time integrals against G_theta use
the substitution w = Gbar(u), which removes the renewal singularity at 0;
spatial integrals against a heat kernel use rho = |y|^2 / 2t, turning
2 pi r g_t(r) dr into exp(-rho) d rho.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special_fn import gtheta_table

X_MIN = 1e-16          # smallest t - s kept by the graded rules; the rest is below 1e-17
RHO_MAX = 60.0


def _gl(n):
    return np.polynomial.legendre.leggauss(n)


def _graded_rule(lo, hi, x_min, panels, order):
    """Nodes and weights on (lo, hi) graded geometrically toward hi."""
    x, w = _gl(order)
    edges = np.geomspace(x_min, hi - lo, panels + 1)
    edges[0] = 0.0
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (a + b) + 0.5 * (b - a) * x)
        weights.append(0.5 * (b - a) * w)
    d = np.concatenate(nodes)
    return hi - d, np.concatenate(weights)


def _dgbar_rule(table, top, order):
    """Nodes u in (0, top) and weights for int_0^top f(u) G(u) du."""
    x, w = _gl(order)
    gtop = float(table.Gbar(top))
    v = 0.5 * gtop * (x + 1.0)
    return np.minimum(table.Gbar_inv(v), top), 0.5 * gtop * w


def _rho_rule(panels, order):
    x, w = _gl(order)
    edges = np.linspace(0.0, RHO_MAX, panels + 1)
    nodes = (0.5 * (edges[:-1] + edges[1:])[:, None] + 0.5 * np.diff(edges)[:, None] * x).ravel()
    weights = (0.5 * np.diff(edges)[:, None] * w).ravel()
    return nodes, weights


def _log_heat_ratio(y2, t_num, t_den):
    """log(g_{t_num}(y) / g_{t_den}(y)) for squared radius y2."""
    return np.log(t_den / t_num) - 0.5 * y2 * (1.0 / t_num - 1.0 / t_den)


def _check(t, delta=None):
    if not 0 < t <= 1:
        raise ValueError("t must lie in (0, 1]")
    if delta is not None and delta <= 0:
        raise ValueError("delta must be positive")


def phi_bar(t: float, theta: float, delta: float, panels: int = 40, order: int = 16) -> float:
    """1 + int_0^t Gbar(t - s) / (2 delta + s) ds."""
    _check(t, delta)
    tab = gtheta_table(theta)
    s, w = _graded_rule(0.0, t, X_MIN, panels, order)
    return 1.0 + float(np.dot(w, tab.Gbar(t - s) / (2.0 * delta + s)))


def psi_bar_delta(y, t: float, theta: float, delta: float, panels: int = 40,
                  order: int = 16, inner: int = 48):
    """Normalized one-point weight at finite delta, as a function of |y|."""
    _check(t, delta)
    tab = gtheta_table(theta)
    yy = np.atleast_1d(np.asarray(y, dtype=float))
    y2 = (yy * yy if yy.ndim == 1 else np.sum(yy * yy, axis=-1)).ravel()
    # graded toward s = 0, where 1 / (2 delta + s) varies on scale delta, and toward t
    s_lo, w_lo = _graded_rule(-0.5 * t, 0.0, 1e-3 * min(delta, t), panels, order)
    s_hi, w_hi = _graded_rule(0.5 * t, t, X_MIN, panels, order)
    s = np.concatenate([-s_lo, s_hi])
    ws = np.concatenate([w_lo, w_hi])
    total = np.zeros_like(y2)
    big_t = t + 2.0 * delta
    x, w = _gl(inner)
    for si, wi in zip(s, ws):
        top = float(tab.Gbar(t - si))
        if top <= 0:
            continue
        v = 0.5 * top * (x + 1.0)
        u = si + np.minimum(tab.Gbar_inv(v), t - si)
        lr = _log_heat_ratio(y2[:, None], t + delta - 0.5 * u[None, :], big_t)
        total += wi / (2.0 * delta + si) * (np.exp(lr) @ (0.5 * top * w))
    out = (1.0 + total) / phi_bar(t, theta, delta)
    return out.reshape(np.shape(y)[:-1] if yy.ndim > 1 else np.shape(y))


def psi_bar_zero(y, t: float, theta: float, order: int = 96):
    """int_0^t g_{t - u/2}(y) G(u) du / (g_t(y) Gbar(t)), as a function of |y|."""
    _check(t)
    tab = gtheta_table(theta)
    yy = np.asarray(y, dtype=float)
    y2 = yy * yy
    u, w = _dgbar_rule(tab, t, order)
    lr = _log_heat_ratio(y2[..., None], t - 0.5 * u, t)
    return np.exp(lr) @ w / float(tab.Gbar(t))


def radial_mean(f, t: float, panels: int = 30, order: int = 16) -> float:
    """int g_t(y) f(|y|) dy for a radial f given as a function of |y|."""
    rho, w = _rho_rule(panels, order)
    r = np.sqrt(2.0 * t * rho)
    return float(np.dot(w * np.exp(-rho), f(r)))


def eta_closed(t: float, theta: float, order: int = 96) -> float:
    """E[Psi0^2] - 1 with the Gaussian integral done exactly.

    int g_t R(u) R(u') dy = t / (T + T' - T T' / t), T = t - u/2.
    """
    tab = gtheta_table(theta)
    u, w = _dgbar_rule(tab, t, order)
    T = t - 0.5 * u
    mat = t / (T[:, None] + T[None, :] - T[:, None] * T[None, :] / t)
    return float(w @ mat @ w) / float(tab.Gbar(t)) ** 2 - 1.0


@dataclass
class EtaReport:
    t: float
    theta: float
    delta: float | None
    phi_bar: float | None
    psi0_second_moment: float
    eta: float
    eta_error: float
    normalization_residual: float
    closed_form: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def eta_lower(t: float, theta: float, delta: float | None = None, panels: int = 30,
              order: int = 96) -> EtaReport:
    """eta = int g_t Psi0^2 - 1 by radial quadrature, with a mesh-doubling error."""
    _check(t, delta)

    def second(p, o):
        return radial_mean(lambda r: psi_bar_zero(r, t, theta, o) ** 2, t, p)

    coarse = second(panels, order)
    fine = second(2 * panels, 2 * order)
    eta = fine - 1.0
    if not eta > 0:
        raise RuntimeError(f"nonpositive eta {eta} at t={t}, theta={theta}")
    norm = radial_mean(lambda r: psi_bar_zero(r, t, theta, 2 * order), t, 2 * panels) - 1.0
    pb = phi_bar(t, theta, delta) if delta is not None else None
    return EtaReport(t, theta, delta, pb, fine, eta, abs(fine - coarse), abs(norm),
                     eta_closed(t, theta, 2 * order))
