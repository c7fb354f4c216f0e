"""Command-line front end.

    epbloch simulate   -> polarization time series (CSV)
    epbloch invert     -> harmonic inversion report (JSON)
    epbloch map        -> (delta, eps) grid of F, min_gap, amp_norm, region (CSV)
    epbloch scan-ep2   -> EP2 on a detuning scan (JSON)
    epbloch find-ep3   -> EP3 search report (JSON) and its trace (CSV)
    epbloch estimate   -> physical parameters (JSON)

Settings come from flags, then a JSON ``--config`` file (flat, or keyed by
command name), then built-in defaults.  The effective settings are echoed into
every output.  Exit codes: 0 success, 2 usage or validation error, 3 a search
that did not converge (its report is still written).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io as eio
from .bloch import ControlParams, RateParams, ep3_locus, eigenvalues_closed_form, rates_to_controls
from .estimator import BlochParameterEstimator, LabExperiment, estimate_at_ep3
from .harminv import InversionConfig, extended_invert, standard_invert
from .locate import (
    EPReport,
    Objective,
    ValleyConfig,
    map_grid,
    root_search_pq,
    scan_ep2,
    seed_interior,
    surface_root_search,
    valley_ascend,
)
from .propagator import add_noise, average, simulate

EXIT_OK, EXIT_USAGE, EXIT_NOCONV = 0, 2, 3

DEFAULTS = {
    "simulate": {
        "gamma": None,
        "delta": 0.0,
        "eps": 0.0,
        "kappa_down": None,
        "kappa_up": 0.0,
        "dephasing": 0.0,
        "n": None,
        "dt": None,
        "noise": 0.0,
        "averages": 1,
        "seed": 0,
        "out": None,
    },
    "invert": {
        "input": None,
        "extended": False,
        "order": 3,
        "degeneracy_tol": 1e-6,
        "rank_tol": 1e-10,
        "offset": False,
        "refine": False,
        "out": None,
    },
    "map": {
        "gamma": 0.1,
        "delta_range": [-0.05, 0.05],
        "eps_range": [0.0, 0.05],
        "steps": [41, 21],
        "mode": "oracle",
        "n": None,
        "workers": None,
        "out": None,
    },
    "scan-ep2": {
        "gamma": 0.1,
        "eps": 0.01,
        "delta_range": [0.0, 5e-3],
        "steps": 51,
        "mode": "oracle",
        "tol": 1e-12,
        "n": None,
        "out": None,
    },
    "find-ep3": {
        "gamma": 0.1,
        "method": "rootsearch",
        "mode": "oracle",
        "start": None,
        "n": None,
        "half_width": None,
        "out": None,
        "trace": None,
    },
    "estimate": {
        "planted": None,
        "mode": "experimental",
        "nu_range": [0.9, 1.1],
        "field_range": [0.0, 0.2],
        "grid": [11, 5],
        "method": "surface",
        "n": None,
        "dt": None,
        "noise": 0.0,
        "averages": 1,
        "seed": 0,
        "nu": None,
        "field": None,
        "inversion": None,
        "branch": 1,
        "out": None,
    },
}


class UsageError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file with settings (flags take precedence)")
    common.add_argument("--out", help="output file (default: stdout)")

    p = argparse.ArgumentParser(prog="epbloch", description="Exceptional points of the driven, damped Bloch equations.")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    s = sub.add_parser("simulate", parents=[common], argument_default=S, help="simulate the polarization signal")
    s.add_argument("--gamma", type=float, help="relaxation rate G")
    s.add_argument("--delta", type=float, help="detuning")
    s.add_argument("--eps", type=float, help="drive amplitude")
    s.add_argument("--kappa-down", dest="kappa_down", type=float, help="downward rate (alternative to --gamma)")
    s.add_argument("--kappa-up", dest="kappa_up", type=float)
    s.add_argument("--dephasing", type=float)
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--dt", type=float, help="sampling step")
    s.add_argument("--noise", type=float, help="Gaussian noise standard deviation")
    s.add_argument("--averages", type=int, help="noisy repetitions averaged")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("invert", parents=[common], argument_default=S, help="harmonic inversion of a series CSV")
    s.add_argument("input", help="time series CSV")
    s.add_argument("--extended", action="store_true", help="allow confluent (polynomial-amplitude) modes")
    s.add_argument("--order", type=int)
    s.add_argument("--degeneracy-tol", dest="degeneracy_tol", type=float)
    s.add_argument("--rank-tol", dest="rank_tol", type=float)
    s.add_argument("--offset", action="store_true", help="fit a constant offset too")
    s.add_argument("--refine", action="store_true", help="least-squares polish of the poles")

    s = sub.add_parser("map", parents=[common], argument_default=S, help="grid of F and EP diagnostics")
    s.add_argument("--gamma", type=float)
    s.add_argument("--delta-range", dest="delta_range", type=float, nargs=2)
    s.add_argument("--eps-range", dest="eps_range", type=float, nargs=2)
    s.add_argument("--steps", type=int, nargs=2, help="grid points along delta and eps")
    s.add_argument("--mode", choices=["oracle", "experimental"])
    s.add_argument("--n", type=int)
    s.add_argument("--workers", type=int)

    s = sub.add_parser("scan-ep2", parents=[common], argument_default=S, help="locate an EP2 on a detuning scan")
    s.add_argument("--gamma", type=float)
    s.add_argument("--eps", type=float)
    s.add_argument("--delta-range", dest="delta_range", type=float, nargs=2)
    s.add_argument("--steps", type=int)
    s.add_argument("--mode", choices=["oracle", "experimental"])
    s.add_argument("--tol", type=float)
    s.add_argument("--n", type=int)

    s = sub.add_parser("find-ep3", parents=[common], argument_default=S, help="search for the EP3")
    s.add_argument("--gamma", type=float)
    s.add_argument("--method", choices=["valley", "rootsearch", "surface"])
    s.add_argument("--mode", choices=["oracle", "experimental"])
    s.add_argument("--start", type=float, nargs=2, help="start point (delta, eps)")
    s.add_argument("--n", type=int)
    s.add_argument("--half-width", dest="half_width", type=float, help="valley cone half-angle (radians)")
    s.add_argument("--trace", help="write the search trace CSV here")

    s = sub.add_parser("estimate", parents=[common], argument_default=S, help="estimate (omega_s, mu, G)")
    s.add_argument("--planted", type=float, nargs=3, metavar=("OMEGA_S", "MU", "GAMMA"), help="simulate this system")
    s.add_argument("--mode", choices=["oracle", "experimental"])
    s.add_argument("--nu-range", dest="nu_range", type=float, nargs=2)
    s.add_argument("--field-range", dest="field_range", type=float, nargs=2)
    s.add_argument("--grid", type=int, nargs=2)
    s.add_argument("--method", choices=["surface", "rootsearch", "valley"])
    s.add_argument("--n", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--noise", type=float)
    s.add_argument("--averages", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--nu", type=float, help="drive frequency at a measured EP3")
    s.add_argument("--field", type=float, help="field amplitude at a measured EP3")
    s.add_argument("--inversion", help="inversion report JSON measured at the EP3")
    s.add_argument("--branch", type=int, choices=[1, -1])
    return p


def _settings(args: argparse.Namespace) -> dict:
    cmd = args.command
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    from_file = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        from_file = data.get(cmd, data) if isinstance(data.get(cmd), dict) else data
        from_file = {k.replace("-", "_"): v for k, v in from_file.items() if k not in DEFAULTS}
        unknown = set(from_file) - set(DEFAULTS[cmd])
        if unknown:
            raise UsageError(f"unknown {cmd} settings in config: {sorted(unknown)}")
    return {**DEFAULTS[cmd], **from_file, **given}


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _echo(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in ("out", "trace")}


def _range(cfg: dict, key: str) -> tuple[float, float]:
    lo, hi = cfg[key]
    if not hi > lo:
        raise UsageError(f"{key} must be an increasing pair, got {cfg[key]}")
    return float(lo), float(hi)


def _controls(cfg: dict) -> tuple[ControlParams, Optional[RateParams]]:
    if cfg["kappa_down"] is not None:
        rates = RateParams(cfg["kappa_down"], cfg["kappa_up"], cfg["dephasing"])
        p = rates_to_controls(rates, cfg["delta"], cfg["eps"])
        if cfg["gamma"] is not None and abs(cfg["gamma"] - p.gamma_rate) > 1e-12 * max(1.0, p.gamma_rate):
            raise UsageError("--gamma conflicts with the rates given")
        return p, rates
    if cfg["gamma"] is None:
        raise UsageError("give --gamma or --kappa-down")
    return ControlParams(cfg["gamma"], cfg["delta"], cfg["eps"]), None


def cmd_simulate(cfg: dict) -> int:
    p, rates = _controls(cfg)
    if cfg["averages"] < 1:
        raise UsageError("--averages must be >= 1")
    s = simulate(p, rates, n=cfg["n"], dt=cfg["dt"])
    if cfg["noise"] > 0:
        s = average([add_noise(s, cfg["noise"], (cfg["seed"], 0, k)) for k in range(cfg["averages"])])
    s.meta["seed"] = cfg["seed"]
    _emit(eio.write_series_csv(s, extra={"config": _echo(cfg)}), cfg["out"])
    return EXIT_OK


def cmd_invert(cfg: dict) -> int:
    try:
        s = eio.read_series_csv(cfg["input"])
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    icfg = InversionConfig(
        model_order=cfg["order"],
        degeneracy_tol=cfg["degeneracy_tol"],
        rank_tol=cfg["rank_tol"],
        offset=cfg["offset"],
        refine=cfg["refine"],
    )
    rep = (extended_invert if cfg["extended"] else standard_invert)(s, icfg)
    out = eio.inversion_to_dict(rep)
    out["config"] = _echo(cfg)
    _emit(eio.dump_json(out), cfg["out"])
    return EXIT_OK


def cmd_map(cfg: dict) -> int:
    d_lo, d_hi = _range(cfg, "delta_range")
    e_lo, e_hi = _range(cfg, "eps_range")
    nx, ny = cfg["steps"]
    if nx < 1 or ny < 1:
        raise UsageError("--steps must be positive")
    obj = Objective(cfg["gamma"], cfg["mode"], n=cfg["n"])
    rows = map_grid(np.linspace(d_lo, d_hi, nx), np.linspace(e_lo, e_hi, ny), obj, workers=cfg["workers"])
    comment = "config=" + json.dumps(eio._json_safe(_echo(cfg)), sort_keys=True, separators=(",", ":"))
    _emit(eio.grid_csv(rows, comment), cfg["out"])
    return EXIT_OK


def _report_out(rep: EPReport, cfg: dict, extra: Optional[dict] = None) -> dict:
    out = eio.ep_report_to_dict(rep)
    out["config"] = _echo(cfg)
    if extra:
        out.update(extra)
    return out


def cmd_scan_ep2(cfg: dict) -> int:
    lo, hi = _range(cfg, "delta_range")
    obj = Objective(cfg["gamma"], cfg["mode"], n=cfg["n"])
    rep = scan_ep2(cfg["gamma"], cfg["eps"], (lo, hi), cfg["steps"], obj, tol=cfg["tol"])
    _emit(eio.dump_json(_report_out(rep, cfg)), cfg["out"])
    return EXIT_OK


def cmd_find_ep3(cfg: dict) -> int:
    g = cfg["gamma"]
    obj = Objective(g, cfg["mode"], n=cfg["n"])
    start = tuple(cfg["start"]) if cfg["start"] is not None else seed_interior(g, obj)
    if cfg["method"] == "valley":
        vcfg = ValleyConfig() if cfg["mode"] == "oracle" else ValleyConfig.experimental()
        if cfg["half_width"] is not None:
            vcfg = ValleyConfig(**{**vcfg.__dict__, "half_width": cfg["half_width"]})
        rep = valley_ascend(start, g, obj, vcfg)
    elif cfg["method"] == "surface":
        rep = surface_root_search(start, g, obj)
    else:
        rep = root_search_pq(start, g, obj)
    exact = ep3_locus(g)[0 if rep.location[0] >= 0 else 1]
    extra = {"reference": {"delta": exact.detuning, "eps": exact.drive}}
    _emit(eio.dump_json(_report_out(rep, cfg, extra)), cfg["out"])
    if cfg["trace"]:
        Path(cfg["trace"]).write_text(eio.trace_csv(rep.trace), encoding="utf-8")
    return EXIT_OK if rep.converged else EXIT_NOCONV


def _estimate_measured(cfg: dict) -> dict:
    missing = [k for k in ("nu", "field", "inversion") if cfg[k] is None]
    if missing:
        raise UsageError(f"measured estimate needs --{' --'.join(missing)} (or use --planted)")
    try:
        data = json.loads(Path(cfg["inversion"]).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read inversion report: {exc}") from exc
    rep = eio.inversion_from_dict(data)
    if rep.frequencies.size != 3:
        raise UsageError("inversion report must hold three frequencies (with multiplicity)")
    ep = EPReport(location=(float(cfg["branch"]), 0.0), order=3, F_value=float("nan"), min_gap=rep.min_gap,
                  amp_norm=rep.amp_norm, iterations=0, status="measured")
    return estimate_at_ep3(ep, cfg["nu"], cfg["field"], rep.frequencies, branch=cfg["branch"]).to_dict()


def cmd_estimate(cfg: dict) -> int:
    if cfg["planted"] is None:
        out = _estimate_measured(cfg)
        status = EXIT_OK
    else:
        omega_s, mu, gamma = cfg["planted"]
        if not (gamma > 0 and mu > 0):
            raise UsageError("planted mu and gamma must be > 0")
        if cfg["mode"] == "oracle":
            ep = ep3_locus(gamma)[0]
            nu, field = omega_s - ep.detuning, ep.drive / mu
            w = eigenvalues_closed_form(ep).frequencies
            rep = EPReport(location=(ep.detuning, ep.drive), order=3, F_value=float("inf"), min_gap=0.0,
                           amp_norm=float("nan"), iterations=0)
            out = estimate_at_ep3(rep, nu, field, w).to_dict()
            status = EXIT_OK
        else:
            lab = LabExperiment(omega_s, mu, gamma, n=cfg["n"], dt=cfg["dt"], noise=cfg["noise"],
                                averages=cfg["averages"], seed=cfg["seed"])
            est = BlochParameterEstimator(
                nu_range=tuple(_range(cfg, "nu_range")),
                field_range=tuple(_range(cfg, "field_range")),
                grid=tuple(cfg["grid"]),
                method=cfg["method"],
                refine=True,
            ).fit(lab)
            out = est.params_.to_dict()
            out["diagnostics"]["measurements"] = lab.measurements
            status = EXIT_OK if out["diagnostics"]["converged"] else EXIT_NOCONV
        truth = {"omega_s": omega_s, "mu": mu, "gamma": gamma}
        out["diagnostics"]["relative_error"] = {k: abs(out[k] - v) / abs(v) for k, v in truth.items()}
    out["config"] = _echo(cfg)
    _emit(eio.dump_json(out), cfg["out"])
    return status


COMMANDS = {
    "simulate": cmd_simulate,
    "invert": cmd_invert,
    "map": cmd_map,
    "scan-ep2": cmd_scan_ep2,
    "find-ep3": cmd_find_ep3,
    "estimate": cmd_estimate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _settings(args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ValueError) as exc:
        print(f"epbloch {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
