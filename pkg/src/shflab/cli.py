"""Command-line entry point: every operation as a subcommand, JSON or CSV output."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import (eta_bound, higher_moments, kernels, lattice_renewal, reproduce, simulate,
               special_fn, third_moment)
from .quadrature import QuadSpec
from .records import build_id, csv_text, jsonable, write_csv

log = logging.getLogger("shflab")


def _spec(args) -> QuadSpec:
    kw = {"jobs": args.jobs}
    if getattr(args, "samples", None):
        kw["mc_samples"] = args.samples
    return QuadSpec(**kw)


def _as_rows(result) -> list[dict]:
    if isinstance(result, list):
        return [_as_dict(r) for r in result]
    return [_as_dict(result)]


def _as_dict(obj) -> dict:
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                for k, w in _as_dict(v).items():
                    out[f"{f.name}.{k}"] = w
            elif not isinstance(v, (tuple, list, dict)) and not hasattr(v, "shape"):
                out[f.name] = v
        return out
    return dict(obj)


def _emit(args, result) -> int:
    config = {k: v for k, v in vars(args).items() if k != "func"}
    meta = {"config": config, "build": build_id(), "seed": args.seed}
    rows = _as_rows(result)
    if args.format == "csv":
        text = csv_text(rows, meta)
        if args.out:
            write_csv(args.out, rows, meta)
        else:
            sys.stdout.write(text)
        return 0
    doc = {**meta, "result": rows[0] if len(rows) == 1 else rows}
    text = json.dumps(jsonable(doc), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


# --- handlers -----------------------------------------------------------------

def cmd_gtheta(args):
    direct = special_fn.g_theta(args.theta, args.t)
    table = float(special_fn.gtheta_table(args.theta).G(args.t))
    gbar = special_fn.g_theta_antiderivative(args.theta, args.t)
    return _emit(args, {"theta": args.theta, "t": args.t, "value": direct,
                        "error": abs(direct - table), "Gbar": gbar})


def cmd_window(args):
    out = dataclasses.asdict(lattice_renewal.lattice_window(args.N, args.theta, args.kappa4))
    out["beta2_window_gap"] = lattice_renewal.sigma2_window_gap(args.N, args.theta)
    out["rn_asymptotic_gap"] = lattice_renewal.rn_asymptotic_gap(args.N)
    if args.eps is not None:
        mol = lattice_renewal.parse_mollifier(args.mollifier)
        out["eps"] = args.eps
        out["R_eps"] = lattice_renewal.continuum_overlap_Reps(args.eps, mol)
        out["beta2_eps"] = simulate.she_beta2(args.eps, args.theta, mol)
        out["constant_C"] = lattice_renewal.constant_C(mol)
    return _emit(args, out)


def cmd_kernel(args):
    if args.which == "k2":
        rows = [{"t": args.t, "theta": args.theta, "r": r, "K2": kernels.K2(args.t, args.theta, r),
                 "k_gmc": kernels.k_gmc(args.t, args.theta, r)} for r in args.r]
        return _emit(args, rows)
    if args.which == "second-moment":
        return _emit(args, {"t": args.t, "theta": args.theta, "delta": args.delta,
                            "value": kernels.k2_second_moment(args.t, args.theta, args.delta)})
    if args.which == "prod2":
        res = kernels.prod2_series(args.t, args.theta, args.r12, args.r23, args.m_max,
                                   _spec(args), seed=args.seed)
        return _emit(args, {"value": res.value, "error": res.error, "m_last": res.m_last,
                            "tail": res.tail})
    res = kernels.prod3_series(args.t, args.theta, args.r12, args.r13, args.r23, args.m_max,
                               spec=_spec(args), seed=args.seed)
    return _emit(args, res)


def cmd_third_moment(args):
    phi = third_moment.TestFunctionSpec.parse(args.phi)
    if args.which == "verdict":
        return _emit(args, third_moment.third_moment_verdict(args.t, args.theta, phi))
    fn = third_moment.I3 if args.which == "i3" else third_moment.I3_tilde
    return _emit(args, fn(args.t, args.theta, phi))


def cmd_moments(args):
    spec = _spec(args)
    if args.which == "shf":
        return _emit(args, higher_moments.shf_moment_series(args.h, args.t, args.theta,
                                                            args.delta, args.m_max, spec,
                                                            args.seed))
    if args.which == "gmc":
        return _emit(args, higher_moments.gmc_moment_mc(args.h, args.t, args.theta, args.delta,
                                                        spec, args.seed))
    if args.which == "compare":
        return _emit(args, higher_moments.shf_vs_gmc_report(args.h, args.t, args.theta,
                                                            args.delta, spec, args.seed,
                                                            args.m_max))
    deltas = args.deltas or [args.delta]
    return _emit(args, higher_moments.factorization_report(args.h, args.t, args.theta, deltas,
                                                           spec, args.seed))


def cmd_simulate(args):
    spec = _spec(args)
    if args.which == "polymer":
        return _emit(args, simulate.polymer_replica_moment(args.h, args.N, args.theta, args.delta,
                                                           spec, args.t, args.seed,
                                                           method=args.method))
    if args.which == "transfer":
        first, second = simulate.transfer_moments(args.N, args.theta, args.delta,
                                                  args.disorder, args.seed)
        return _emit(args, {"mean": first.mean, "mean_stderr": first.stderr,
                            "second": second.mean, "second_stderr": second.stderr,
                            "n": first.n})
    mol = lattice_renewal.parse_mollifier(args.mollifier)
    if args.which == "she":
        return _emit(args, simulate.she_replica_moment(args.h, args.t, args.theta, args.eps,
                                                       args.delta, args.steps, spec, args.seed,
                                                       mol))
    return _emit(args, simulate.gci_ratio_mc(args.t, args.theta, args.eps, args.delta, spec,
                                             args.steps, args.seed, mol))


def cmd_eta(args):
    return _emit(args, eta_bound.eta_lower(args.t, args.theta, args.delta))


def cmd_reproduce(args):
    if args.all:
        keys = list(reproduce.CRITERIA)
    elif args.only:
        keys = [k.strip() for k in args.only.split(",")]
        bad = [k for k in keys if k not in reproduce.CRITERIA]
        if bad:
            print(f"unknown criteria: {', '.join(bad)}", file=sys.stderr)
            return 2
    else:
        print("reproduce needs --all or --only", file=sys.stderr)
        return 2
    out = Path(args.out)
    config = {"criteria": keys, "quick": args.quick, "strict": args.strict}
    results = reproduce.run_suite(keys, args.seed, reproduce.Budget(args.quick, args.jobs), out,
                                  config)
    if args.emit_plot_script:
        reproduce.emit_plot_script(out)
    print(reproduce.summary_table(results))
    statuses = {o.status for o in results}
    soft = statuses & {reproduce.INCONCLUSIVE, reproduce.SKIPPED}
    if soft:
        print(f"warning: {len(soft)} kind(s) of non-decisive result: {', '.join(sorted(soft))}",
              file=sys.stderr)
    if reproduce.FAIL in statuses:
        return 1
    return 1 if (soft and args.strict) else 0


# --- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", default=None)
    p.add_argument("--samples", type=int, default=None, help="Monte Carlo sample count")


def _ttheta(p, t=1.0):
    p.add_argument("--t", type=float, default=t)
    p.add_argument("--theta", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shflab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gtheta", help="renewal density G_theta(t)")
    _ttheta(p, 0.5)
    _common(p)
    p.set_defaults(func=cmd_gtheta)

    p = sub.add_parser("window", help="critical-window constants")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--kappa4", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--mollifier", default="gaussian:0.5")
    _common(p)
    p.set_defaults(func=cmd_window)

    p = sub.add_parser("kernel", help="second-moment kernel and product series")
    p.add_argument("which", choices=("k2", "second-moment", "prod2", "prod3"))
    _ttheta(p)
    p.add_argument("--r", type=float, nargs="+", default=[1.0])
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--r12", type=float, default=0.3)
    p.add_argument("--r13", type=float, default=0.5)
    p.add_argument("--r23", type=float, default=0.3)
    p.add_argument("--m-max", type=int, default=12)
    _common(p)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("third-moment", help="third-moment series and verdict")
    p.add_argument("which", choices=("verdict", "i3", "i3-tilde"))
    _ttheta(p)
    p.add_argument("--phi", default="heat:1")
    _common(p)
    p.set_defaults(func=cmd_third_moment)

    p = sub.add_parser("moments", help="higher moments of the flow and of the matched GMC")
    p.add_argument("which", choices=("shf", "gmc", "compare", "factorization"))
    p.add_argument("--h", type=int, default=3)
    _ttheta(p)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--deltas", type=float, nargs="+", default=None)
    p.add_argument("--m-max", type=int, default=12)
    _common(p)
    p.set_defaults(func=cmd_moments)

    p = sub.add_parser("simulate", help="pre-limit Monte Carlo")
    p.add_argument("which", choices=("polymer", "transfer", "she", "gci"))
    p.add_argument("--h", type=int, default=2)
    _ttheta(p)
    p.add_argument("--N", type=int, default=256)
    p.add_argument("--delta", type=float, default=0.25)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--disorder", type=int, default=64, help="disorder realizations (transfer)")
    p.add_argument("--method", choices=("auto", "conditional", "plain"), default="auto")
    p.add_argument("--mollifier", default="gaussian:0.5")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eta", help="strict excess eta of the third-moment lower bound")
    _ttheta(p)
    p.add_argument("--delta", type=float, default=None)
    _common(p)
    p.set_defaults(func=cmd_eta)

    p = sub.add_parser("reproduce", help="run the acceptance suite")
    p.add_argument("--all", action="store_true")
    p.add_argument("--only", default=None, help="comma-separated criterion ids, e.g. A1,A7")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--strict", action="store_true", help="treat inconclusive as failure")
    p.add_argument("--quick", action="store_true", help="reduced budgets; skips the verdicts")
    p.add_argument("--out", default="results")
    p.add_argument("--emit-plot-script", action="store_true")
    p.set_defaults(func=cmd_reproduce)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    del args.verbose
    try:
        return args.func(args)
    except (ValueError, OverflowError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
