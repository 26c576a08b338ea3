"""The acceptance suite as a batch job: one CSV per criterion plus a summary."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import eta_bound, higher_moments, kernels, lattice_renewal, simulate, third_moment
from .quadrature import QuadSpec, rng_stream
from .records import build_id, write_csv
from .special_fn import g_theta

log = logging.getLogger(__name__)

PASS, FAIL, INCONCLUSIVE, SKIPPED = "pass", "fail", "inconclusive", "skipped"


@dataclass
class Budget:
    quick: bool = False
    jobs: int = 1

    def spec(self, full: int, quick: int) -> QuadSpec:
        return QuadSpec(mc_samples=quick if self.quick else full, jobs=self.jobs)


@dataclass
class Outcome:
    key: str
    name: str
    status: str
    rows: list[dict]
    note: str = ""
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def _verdict(ok: bool) -> str:
    return PASS if ok else FAIL


# --- criteria -----------------------------------------------------------------

def gaussian_reduction(seed: int, b: Budget):
    rng = rng_stream(seed, 9001)
    n_chains = 4 if b.quick else 20
    rows, worst = [], 0.0
    for m in (2, 3, 4, 5):
        m_worst = 0.0
        for _ in range(n_chains):
            chain = np.sort(rng.uniform(0.0, 1.0, 2 * m))
            for _ in range(5):
                # points on the scale of the first block, so no factor underflows
                z = np.sqrt(chain[0]) * rng.standard_normal((3, 2))
                fast = third_moment.gm_eval(chain, *z)
                slow = third_moment.brute_gm(chain, *z)
                m_worst = max(m_worst, abs(fast - slow) / abs(slow))
        rows.append({"m": m, "chains": n_chains, "triples": 5, "max_rel_error": m_worst})
        worst = max(worst, m_worst)
    return _verdict(worst <= 1e-10), rows, f"max relative error {worst:.3g}"


def closed_form_gap(seed: int, b: Budget):
    rows, ok = [], True
    grid = [10.0 ** k for k in range(-3, 2)]
    for r in (0.1, 1.0, 10.0):
        phi = third_moment.TestFunctionSpec("heat", r)
        for a1 in grid:
            for a2 in grid:
                up = float(third_moment.scrG(a1, a2, phi))
                lo = float(third_moment.scrG_tilde(a1, a2, phi))
                ok &= up - lo > 0
                rows.append({"r": r, "a1": a1, "a2": a2, "scrG": up, "scrG_tilde": lo,
                             "gap": up - lo})
    phi = third_moment.TestFunctionSpec("heat", 1.0)
    up = float(third_moment.scrG(1.0, 1.0, phi))
    lo = float(third_moment.scrG_tilde(1.0, 1.0, phi))
    ok &= math.isclose(up, 2.0 / 15.0, rel_tol=1e-14) and math.isclose(lo, 0.125, rel_tol=1e-14)
    return _verdict(ok), rows, f"unit values {up:.15g}, {lo:.15g}"


VERDICT_CASES = ((1.0, 0.0, "heat:0.1"), (1.0, 0.0, "heat:1"), (0.5, 2.0, "ball:0.5"))


def third_moment_verdicts(seed: int, b: Budget):
    if b.quick:
        return SKIPPED, [], "skipped in quick mode"
    rows, ok = [], True
    for t, theta, phi in VERDICT_CASES:
        t0 = time.perf_counter()
        v = third_moment.third_moment_verdict(t, theta, third_moment.TestFunctionSpec.parse(phi))
        secs = time.perf_counter() - t0
        ok &= v.certified and secs < 600.0
        rows.append({"t": t, "theta": theta, "phi": phi, "I3": v.I3, "I3_error": v.I3_error,
                     "I3_tilde": v.I3_tilde, "I3_tilde_error": v.I3_tilde_error, "gap": v.gap,
                     "combined_error": v.combined_error, "status": v.status})
    return _verdict(ok), rows, ""


def eta_positivity(seed: int, b: Budget):
    ts = (1.0,) if b.quick else (0.25, 0.5, 1.0)
    thetas = (0.0,) if b.quick else (-2.0, 0.0, 2.0)
    rows, ok = [], True
    for t in ts:
        for theta in thetas:
            rep = eta_bound.eta_lower(t, theta)
            delta = 0.25
            norm_d = abs(eta_bound.radial_mean(
                lambda r: eta_bound.psi_bar_delta(r, t, theta, delta), t + 2.0 * delta) - 1.0)
            stable = rep.eta_error <= 1e-6 * rep.eta
            ok &= rep.eta > 0 and stable and rep.normalization_residual <= 1e-8 and norm_d <= 1e-8
            rows.append({"t": t, "theta": theta, "eta": rep.eta, "mesh_change": rep.eta_error,
                         "closed_form": rep.closed_form,
                         "normalization_residual": rep.normalization_residual,
                         "normalization_residual_delta": norm_d})
    return _verdict(ok), rows, ""


def renewal_limit(seed: int, b: Budget):
    rows, by_theta = [], {}
    ts = np.arange(1, 10) / 10.0
    for theta in (0.0, 2.0):
        worst = {}
        for N in (1 << 12, 1 << 14):
            u = lattice_renewal.discrete_renewal_UN(N, theta)
            for t in ts:
                scaled = N / math.log(N) * u[int(math.floor(t * N)) - 1]
                g = g_theta(theta, float(t))
                rel = abs(scaled / g - 1.0)
                worst[N] = max(worst.get(N, 0.0), rel)
                rows.append({"theta": theta, "N": N, "t": float(t), "scaled_U": scaled,
                             "G": g, "rel_discrepancy": rel})
        by_theta[theta] = worst[1 << 14] <= 0.10 and worst[1 << 14] < worst[1 << 12]
    ok = all(by_theta.values())
    note = ", ".join(f"theta={th:g}: {'ok' if v else 'outside 10%'}" for th, v in by_theta.items())
    return _verdict(ok), rows, note, {"per_theta": by_theta}


def second_moment_routes(seed: int, b: Budget):
    deltas = (0.25,) if b.quick else (0.25, 0.5)
    n_top = 1 << 8 if b.quick else 1 << 12
    sizes = [n_top >> 2, n_top >> 1, n_top]
    rows, ok = [], True
    for delta in deltas:
        k2 = kernels.k2_second_moment(1.0, 0.0, delta)
        pb = eta_bound.phi_bar(1.0, 0.0, delta)
        ok &= abs(k2 - pb) <= 1e-6
        rows.append({"delta": delta, "route": "k2_quadrature", "N": "", "value": k2, "stderr": 0.0,
                     "allowance": "", "within": True})
        rows.append({"delta": delta, "route": "phi_bar", "N": "", "value": pb, "stderr": 0.0,
                     "allowance": 1e-6, "within": abs(k2 - pb) <= 1e-6})
        shf = higher_moments.shf_moment_mc(2, 1.0, 0.0, delta, spec=b.spec(1 << 16, 1 << 12),
                                           seed=seed)
        inside = abs(shf.mean - k2) <= 3.0 * shf.stderr
        ok &= inside
        rows.append({"delta": delta, "route": "shf_moment_mc", "N": "", "value": shf.mean,
                     "stderr": shf.stderr, "allowance": 0.0, "within": inside})
        for N in sizes:
            est = simulate.polymer_replica_moment(2, N, 0.0, delta,
                                                  spec=b.spec(1 << 15, 1 << 11), seed=seed)
            allow = 0.05 * n_top / N
            inside = abs(est.mean - k2) <= 3.0 * est.stderr + allow * k2
            if N == n_top:
                ok &= inside
            rows.append({"delta": delta, "route": "polymer_replica", "N": N, "value": est.mean,
                         "stderr": est.stderr, "allowance": allow, "within": inside})
    return _verdict(ok), rows, ""


def gmc_factorization(seed: int, b: Budget):
    spec = b.spec(10 ** 6, 1 << 14)
    table = higher_moments.factorization_report(3, 1.0, 0.0, [1e-1, 1e-2, 1e-3], spec, seed)
    dev = [abs(r.ratio - 1.0) for r in table]
    ok = all(x > y for x, y in zip(dev, dev[1:])) and dev[-1] < 0.5 * dev[0]
    rows = [{"delta": r.delta, "ratio": r.ratio, "stderr": r.stderr,
             "third": r.h_moment.mean, "second": r.second.mean} for r in table]
    return _verdict(ok), rows, ""


def shf_gmc_excess(seed: int, b: Budget):
    rows, ok = [], True
    base = b.spec(1 << 16, 1 << 11)
    m_max = 4 if b.quick else 12
    for delta in (0.25, 0.0625):
        spec = base
        for attempt in range(2):
            rep = higher_moments.shf_vs_gmc_report(3, 1.0, 0.0, delta, spec, seed, m_max)
            if rep.status == "positive" or attempt == 1:
                break
            spec = replace(spec, mc_samples=4 * spec.mc_samples)
        ok &= rep.status == "positive"
        rows.append({"delta": delta, "samples": spec.mc_samples, "excess": rep.excess,
                     "error": rep.error, "truncated": rep.truncated, "status": rep.status,
                     "shf_moment": rep.shf.value, "gmc_second": rep.second.mean})
    return _verdict(ok), rows, ""


def correlation_products(seed: int, b: Budget):
    spec = b.spec(1 << 16, 1 << 11)
    m_max = 4 if b.quick else 12
    k = kernels.K2(1.0, 0.0, 0.3)
    p2 = kernels.prod2_series(1.0, 0.0, 0.3, 0.3, m_max=m_max, spec=spec, seed=seed)
    ok2 = abs(p2.value - k * k) <= max(0.02 * k * k, 3.0 * p2.error)
    k3 = kernels.K2(1.0, 0.0, 0.5) ** 3
    p3 = kernels.prod3_series(1.0, 0.0, 0.5, 0.5, 0.5, m_max=m_max, spec=spec, seed=seed)
    ok3 = abs(p3.mean - k3) <= max(0.05 * k3, 3.0 * p3.stderr)
    rows = [{"series": "prod2", "r": 0.3, "value": p2.value, "error": p2.error, "oracle": k * k,
             "within": ok2},
            {"series": "prod3", "r": 0.5, "value": p3.mean, "error": p3.stderr, "oracle": k3,
             "within": ok3}]
    return _verdict(ok2 and ok3), rows, ""


def window_asymptotics(seed: int, b: Budget):
    rows = []
    gaps = []
    for N in (10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6):
        g = lattice_renewal.rn_asymptotic_gap(N)
        gaps.append(abs(g))
        rows.append({"quantity": "R_N gap", "param": N, "value": g, "reference": 0.0})
    ok = gaps[-1] <= 0.02 and all(x > y for x, y in zip(gaps, gaps[1:]))
    mol = lattice_renewal.GaussianMollifier()
    for eps in (1e-1, 1e-2, 1e-3):
        c = lattice_renewal.continuum_overlap_Reps(eps, mol, "closed")
        q = lattice_renewal.continuum_overlap_Reps(eps, mol, "quadrature")
        ok &= abs(c - q) <= 1e-8
        rows.append({"quantity": "R_eps", "param": eps, "value": q, "reference": c})
    icpt, err, _ = lattice_renewal.reps_intercept(mol)
    cc = lattice_renewal.constant_C(mol)
    ok &= abs(icpt - cc) <= max(err, 1e-8)
    rows.append({"quantity": "intercept", "param": "", "value": icpt, "reference": cc})
    return _verdict(ok), rows, f"intercept error {err:.3g}"


CRITERIA: dict[str, tuple[str, Callable]] = {
    "A1": ("gaussian_reduction", gaussian_reduction),
    "A2": ("closed_form_gap", closed_form_gap),
    "A3": ("third_moment_verdicts", third_moment_verdicts),
    "A4": ("eta_positivity", eta_positivity),
    "A5": ("renewal_limit", renewal_limit),
    "A6": ("second_moment_routes", second_moment_routes),
    "A7": ("gmc_factorization", gmc_factorization),
    "A8": ("shf_gmc_excess", shf_gmc_excess),
    "A9": ("correlation_products", correlation_products),
    "A10": ("window_asymptotics", window_asymptotics),
}


def run_criterion(key: str, seed: int, budget: Budget) -> Outcome:
    name, fn = CRITERIA[key]
    t0 = time.perf_counter()
    res = fn(seed, budget)
    secs = time.perf_counter() - t0
    status, rows, note = res[:3]
    extra = res[3] if len(res) > 3 else {}
    log.info("%s %s: %s (%.1f s)", key, name, status, secs)
    return Outcome(key, name, status, rows, note, secs, extra)


def run_suite(keys, seed: int, budget: Budget, out: Path | None = None,
              config: dict | None = None) -> list[Outcome]:
    meta = {"config": config or {}, "build": build_id(), "seed": seed}
    results = []
    for key in keys:
        oc = run_criterion(key, seed, budget)
        results.append(oc)
        if out is not None:
            write_csv(Path(out) / f"{key}_{oc.name}.csv", oc.rows, meta)
    if out is not None:
        summary = [{"criterion": o.key, "name": o.name, "status": o.status, "note": o.note}
                   for o in results]
        write_csv(Path(out) / "summary.csv", summary, meta)
    return results


def summary_table(results: list[Outcome]) -> str:
    lines = [f"{'criterion':<10}{'name':<26}{'status':<14}{'seconds':>9}  note"]
    for o in results:
        lines.append(f"{o.key:<10}{o.name:<26}{o.status:<14}{o.seconds:>9.1f}  {o.note}")
    return "\n".join(lines)


PLOT_SCRIPT = '''"""Plot the renewal, factorization and second-moment CSVs in this directory."""
import csv
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent


def load(name):
    path = next(here.glob(name), None)
    if path is None:
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(l for l in fh if not l.startswith("#")))


fig, axes = plt.subplots(1, 3, figsize=(14, 4))
rows = load("A5_*.csv")
for theta in sorted({r["theta"] for r in rows}):
    for n in sorted({r["N"] for r in rows}, key=int):
        sel = [r for r in rows if r["theta"] == theta and r["N"] == n]
        axes[0].plot([float(r["t"]) for r in sel], [float(r["scaled_U"]) for r in sel],
                     marker="o", label=f"theta={theta} N={n}")
    sel = [r for r in rows if r["theta"] == theta]
    axes[0].plot([float(r["t"]) for r in sel], [float(r["G"]) for r in sel], "k--")
axes[0].set_title("scaled renewal vs G_theta")
axes[0].legend(fontsize=7)
rows = load("A7_*.csv")
if rows:
    axes[1].errorbar([float(r["delta"]) for r in rows], [float(r["ratio"]) for r in rows],
                     yerr=[float(r["stderr"]) for r in rows], marker="o")
    axes[1].set_xscale("log")
    axes[1].axhline(1.0, color="k", lw=0.5)
axes[1].set_title("GMC third/second^3")
rows = [r for r in load("A6_*.csv") if r["route"] == "polymer_replica"]
for d in sorted({r["delta"] for r in rows}):
    sel = [r for r in rows if r["delta"] == d]
    axes[2].errorbar([int(r["N"]) for r in sel], [float(r["value"]) for r in sel],
                     yerr=[3 * float(r["stderr"]) for r in sel], marker="o", label=f"delta={d}")
axes[2].set_xscale("log", base=2)
axes[2].set_title("polymer second moment")
axes[2].legend(fontsize=7)
fig.tight_layout()
fig.savefig(here / "acceptance.png", dpi=120)
'''


def emit_plot_script(out: Path) -> Path:
    path = Path(out) / "plot_results.py"
    path.write_text(PLOT_SCRIPT, encoding="utf-8")
    return path
