"""Plain-text serialization: CSV for series, grids and traces, JSON for reports.

Floats are written with 17 significant digits so that files round-trip
exactly and identical runs produce byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .harminv import InversionReport
from .locate import EPReport, TracePoint
from .propagator import Mode, ModeSet, TimeSeries

__all__ = [
    "format_float",
    "write_series_csv",
    "read_series_csv",
    "inversion_to_dict",
    "inversion_from_dict",
    "ep_report_to_dict",
    "ep_report_from_dict",
    "trace_csv",
    "grid_csv",
    "dump_json",
]

PathLike = Union[str, Path]
HEADER_KEYS = ("t0", "dt", "gamma", "delta", "eps", "seed")


def format_float(x) -> str:
    return "%.17g" % x


def _json_safe(obj):
    """Replace non-finite floats (not valid JSON) by strings and numpy scalars by Python ones."""
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def dump_json(obj: dict) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_series_csv(s: TimeSeries, path: Optional[PathLike] = None, extra: Optional[dict] = None) -> str:
    """``# t0=.. dt=.. gamma=.. delta=.. eps=.. seed=..`` then ``t,value`` rows.

    Header values missing from the series metadata are written as ``nan``;
    ``extra`` appends ``key=value`` pairs (used to echo the run configuration).
    """
    meta = {"t0": s.t0, "dt": s.dt, **s.meta}
    parts = []
    for key in HEADER_KEYS:
        v = meta.get(key, float("nan"))
        if isinstance(v, (list, tuple)):
            v = ":".join(str(int(x)) for x in v)
        elif isinstance(v, (float, np.floating)):
            v = format_float(v)
        parts.append(f"{key}={v}")
    for key, v in sorted((extra or {}).items()):
        parts.append(f"{key}={json.dumps(_json_safe(v), sort_keys=True, separators=(',', ':'))}")
    buf = io.StringIO()
    buf.write("# " + " ".join(parts) + "\n")
    buf.write("t,value\n")
    for t, v in zip(s.times, s.samples):
        buf.write(f"{format_float(t)},{format_float(v)}\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_series_csv(source: PathLike) -> TimeSeries:
    """Inverse of :func:`write_series_csv`; also accepts a bare ``t,value`` file."""
    text = Path(source).read_text(encoding="utf-8")
    lines = text.splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for part in lines[0][1:].split():
            if "=" in part:
                k, v = part.split("=", 1)
                meta[k] = v
        lines = lines[1:]
    rows = [r for r in csv.reader(lines) if r]
    if rows and rows[0][0].strip() == "t":
        rows = rows[1:]
    if not rows:
        raise ValueError(f"{source}: no samples")
    data = np.array([[float(a), float(b)] for a, b in rows])
    t = data[:, 0]
    if "dt" in meta and meta["dt"] != "nan":
        dt = float(meta["dt"])
    elif t.size > 1:
        dt = float(t[1] - t[0])
    else:
        raise ValueError(f"{source}: cannot infer dt from a single sample")
    if t.size > 1 and not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0):
        raise ValueError(f"{source}: samples are not uniformly spaced")
    info = {}
    for key in ("gamma", "delta", "eps"):
        if key in meta and meta[key] != "nan":
            info[key] = float(meta[key])
    if "seed" in meta and meta["seed"] != "nan":
        info["seed"] = [int(v) for v in meta["seed"].split(":")] if ":" in meta["seed"] else int(meta["seed"])
    return TimeSeries(t0=float(t[0]), dt=dt, samples=data[:, 1], meta=info)


def inversion_to_dict(rep: InversionReport) -> dict:
    modes = [
        {
            "omega_re": float(m.omega.real),
            "omega_im": float(m.omega.imag),
            "multiplicity": m.multiplicity,
            "amplitudes": [[float(a.real), float(a.imag)] for a in m.amplitudes],
        }
        for m in rep.modes.modes
    ]
    return {
        "modes": modes,
        "residual_rms": rep.residual_rms,
        "min_gap": rep.min_gap,
        "amp_norm": rep.amp_norm,
        "subspace_rank": rep.subspace_rank,
        "offset": rep.offset,
    }


def inversion_from_dict(d: dict) -> InversionReport:
    modes = []
    for m in d["modes"]:
        amps = np.array([complex(re, im) for re, im in m["amplitudes"]])
        if len(amps) != m["multiplicity"]:
            raise ValueError("amplitude count does not match multiplicity")
        modes.append(Mode(complex(m["omega_re"], m["omega_im"]), amps))
    freqs = np.array([md.omega for md in modes for _ in range(md.multiplicity)], dtype=complex)
    return InversionReport(
        modes=ModeSet(modes),
        residual_rms=float(d["residual_rms"]),
        min_gap=float(d["min_gap"]),
        amp_norm=float(d["amp_norm"]),
        subspace_rank=int(d["subspace_rank"]),
        raw_frequencies=freqs,
        offset=float(d.get("offset", 0.0)),
    )


def _trace_to_list(trace: Sequence[TracePoint]) -> list:
    out = []
    for p in trace:
        item = {"delta": p.point[0], "eps": p.point[1], "F": p.F_value}
        if p.radius is not None:
            item["radius"] = p.radius
        if p.angles is not None:
            item["angle_lo"], item["angle_hi"] = p.angles
        out.append(item)
    return out


def ep_report_to_dict(rep: EPReport) -> dict:
    return {
        "location": {"delta": rep.location[0], "eps": rep.location[1]},
        "order": rep.order,
        "F_value": rep.F_value,
        "min_gap": rep.min_gap,
        "amp_norm": rep.amp_norm,
        "iterations": rep.iterations,
        "found": rep.found,
        "status": rep.status,
        "evaluations": rep.evaluations,
        "trace": _trace_to_list(rep.trace),
    }


def ep_report_from_dict(d: dict) -> EPReport:
    trace = []
    for item in d.get("trace", []):
        angles = (float(item["angle_lo"]), float(item["angle_hi"])) if "angle_lo" in item else None
        radius = float(item["radius"]) if "radius" in item else None
        trace.append(TracePoint((float(item["delta"]), float(item["eps"])), float(item["F"]), radius, angles))
    return EPReport(
        location=(float(d["location"]["delta"]), float(d["location"]["eps"])),
        order=int(d["order"]),
        F_value=float(d["F_value"]),
        min_gap=float(d["min_gap"]),
        amp_norm=float(d["amp_norm"]),
        iterations=int(d["iterations"]),
        trace=trace,
        found=bool(d.get("found", True)),
        status=str(d.get("status", "converged")),
        evaluations=int(d.get("evaluations", 0)),
    )


def _csv_text(header: Sequence[str], rows: Iterable[Sequence], comment: Optional[str] = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        cells = [format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row]
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def trace_csv(trace: Sequence[TracePoint], comment: Optional[str] = None) -> str:
    """``step,delta,eps,F,radius,angle_lo,angle_hi``; blank cells where not applicable."""
    rows = []
    for k, p in enumerate(trace):
        lo, hi = (float(a) for a in p.angles) if p.angles is not None else ("", "")
        radius = "" if p.radius is None else float(p.radius)
        rows.append([k, float(p.point[0]), float(p.point[1]), float(p.F_value), radius, lo, hi])
    return _csv_text(["step", "delta", "eps", "F", "radius", "angle_lo", "angle_hi"], rows, comment)


def grid_csv(rows: Sequence[tuple], comment: Optional[str] = None) -> str:
    """Rows from :func:`map_grid`: ``delta,eps,F,min_gap,amp_norm,region``."""
    return _csv_text(["delta", "eps", "F", "min_gap", "amp_norm", "region"], rows, comment)
