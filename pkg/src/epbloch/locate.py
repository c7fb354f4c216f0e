"""Locating EP2 curves and the EP3 cusp in the (detuning, drive) plane.

Every search runs against an :class:`Objective`, which answers "what are the
three complex frequencies at (x, y)?" either from the closed form (``oracle``)
or by simulating a polarization signal and inverting it (``experimental``).
The experimental path can be pointed at any probe callable, so the same
searches work in laboratory control coordinates.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, least_squares, minimize

from .bloch import (
    REGION_TOL,
    ControlParams,
    classify_region,
    discriminant_pq,
    eigenvalues_closed_form,
    region_discriminant,
)
from .harminv import InversionConfig, standard_invert
from .propagator import TimeSeries, add_noise, average, default_sampling, simulate

__all__ = [
    "F_CAP",
    "Objective",
    "TracePoint",
    "EPReport",
    "ValleyConfig",
    "evaluate_F",
    "region_from_frequencies",
    "golden_section",
    "scan_ep2",
    "seed_interior",
    "valley_ascend",
    "root_search_pq",
    "surface_root_search",
    "map_grid",
    "worker_count",
]

F_CAP = 80.0
# |normalized degeneracy measure| accepted as a touching zero
TOUCH_TOL = 1e-9
# largest pairwise gap (in units of G) still accepted as an EP3; on the EP2 curve
# away from the cusp it stays of order G, near the EP3 it shrinks as distance^(1/3)
EP3_SPREAD = 0.15

log = logging.getLogger(__name__)

Mode = Literal["oracle", "experimental"]
Probe = Callable[[float, float], TimeSeries]


def worker_count(default: Optional[int] = None) -> int:
    env = os.environ.get("EPBLOCH_THREADS")
    if env:
        return max(1, int(env))
    if default:
        return max(1, default)
    return os.cpu_count() or 1


def golden_section(f: Callable[[float], float], a: float, b: float, rel_tol: float = 1e-12, max_iter: int = 200):
    """Minimize a unimodal function on [a, b]; returns (x, f(x))."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    width0 = abs(b - a)
    for _ in range(max_iter):
        if abs(b - a) <= rel_tol * max(width0, abs(a), abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def region_from_frequencies(omega: Sequence[complex]) -> float:
    """Signed degeneracy measure of a measured frequency triple (see :meth:`Objective.region_value`)."""
    return _region_from_coeffs(*_cubic_m_coeffs(np.asarray(omega)))


def _cubic_m_coeffs(omega: np.ndarray) -> np.ndarray:
    """Real coefficients (a, b, c) of m^3 + a m^2 + b m + c with m = -1j omega."""
    m = -1j * np.asarray(omega, dtype=complex)
    a = -(m[0] + m[1] + m[2])
    b = m[0] * m[1] + m[1] * m[2] + m[0] * m[2]
    c = -(m[0] * m[1] * m[2])
    return np.array([a, b, c]).real


def _region_from_coeffs(a: float, b: float, c: float) -> float:
    """Normalized minus-discriminant: < 0 for three real roots, > 0 for a complex pair."""
    disc = 18 * a * b * c - 4 * a**3 * c + a * a * b * b - 4 * b**3 - 27 * c * c
    scale = max(abs(a), math.sqrt(abs(b)), abs(c) ** (1 / 3), 1e-300)
    return -disc / scale**6


@dataclass
class Objective:
    """Frequency source for the searches, with an evaluation counter.

    In experimental mode each evaluation simulates ``n`` samples (default
    sampling when ``None``), optionally averages ``averages`` noisy copies of
    standard deviation ``noise``, and inverts the result.  With
    ``noise_stream="common"`` every evaluation reuses the same noise draws, so
    the objective is a smooth deterministic function of the controls;
    ``"fresh"`` draws new noise for each evaluation, like repeated lab runs.
    ``record=True`` keeps every ``(x, y, frequencies)`` in ``history``.  ``probe`` replaces the
    built-in simulator with any ``(x, y) -> TimeSeries`` experiment.
    """

    gamma_rate: float
    mode: Mode = "oracle"
    n: Optional[int] = None
    dt: Optional[float] = None
    noise: float = 0.0
    averages: int = 1
    seed: int = 0
    probe: Optional[Probe] = None
    inversion: InversionConfig = field(default_factory=InversionConfig)
    noise_stream: Literal["common", "fresh"] = "common"
    record: bool = False
    evaluations: int = 0
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.gamma_rate > 0:
            raise ValueError(f"gamma_rate must be > 0, got {self.gamma_rate}")
        if self.mode not in ("oracle", "experimental"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.probe is not None and self.mode != "experimental":
            raise ValueError("a probe only makes sense in experimental mode")
        if self.noise_stream not in ("common", "fresh"):
            raise ValueError(f"unknown noise_stream {self.noise_stream!r}")
        if self.averages < 1 or self.noise < 0:
            raise ValueError("averages must be >= 1 and noise >= 0")

    @property
    def scale(self) -> float:
        """Typical size of a parameter step (the relaxation rate)."""
        return self.gamma_rate

    def params(self, x: float, y: float) -> ControlParams:
        return ControlParams(self.gamma_rate, x, y)

    def series(self, x: float, y: float) -> TimeSeries:
        if self.probe is not None:
            clean = self.probe(x, y)
        else:
            p = self.params(x, y)
            dt, n = default_sampling(p)
            clean = simulate(p, n=self.n or n, dt=self.dt or dt)
        if self.noise > 0:
            run = self.evaluations if self.noise_stream == "fresh" else 0
            noisy = [add_noise(clean, self.noise, (self.seed, run, k)) for k in range(self.averages)]
            return average(noisy)
        return clean

    def frequencies(self, x: float, y: float) -> np.ndarray:
        self.evaluations += 1
        if self.mode == "oracle":
            w = eigenvalues_closed_form(self.params(x, y)).frequencies
        else:
            w = standard_invert(self.series(x, y), self.inversion).raw_frequencies
        if self.record:
            self.history.append((x, y, w))
        return w

    def region_value(self, x: float, y: float) -> float:
        """Signed degeneracy measure: negative inside the all-real region, zero on EP2 curves."""
        if self.mode == "oracle":
            self.evaluations += 1
            return region_discriminant(self.params(x, y))
        return region_from_frequencies(self.frequencies(x, y))

    def pq(self, x: float, y: float) -> np.ndarray:
        """Normalized (p, Im q) of the frequency cubic; both vanish at an EP3."""
        g = self.gamma_rate
        if self.mode == "oracle":
            self.evaluations += 1
            p_val, q_val = discriminant_pq(self.params(x, y))
        else:
            w = self.frequencies(x, y)
            r = -(w[0] + w[1] + w[2])
            s = w[0] * w[1] + w[1] * w[2] + w[0] * w[2]
            t = -(w[0] * w[1] * w[2])
            p_val = s - r * r / 3.0
            q_val = 2.0 * r**3 / 27.0 - r * s / 3.0 + t
        return np.array([p_val.real / g**2, q_val.imag / g**3])


def _f_from_frequencies(w: np.ndarray) -> float:
    prod = abs((w[0] - w[1]) * (w[1] - w[2]) * (w[2] - w[0]))
    if prod == 0 or not math.isfinite(prod):
        return F_CAP
    return min(F_CAP, -math.log(prod))


def evaluate_F(x: float, y: float, obj: Objective) -> float:
    """log |1 / ((w1 - w2)(w2 - w3)(w3 - w1))|, capped at ``F_CAP``."""
    return _f_from_frequencies(obj.frequencies(x, y))


@dataclass
class TracePoint:
    point: tuple
    F_value: float
    radius: Optional[float] = None
    angles: Optional[tuple] = None


@dataclass
class EPReport:
    location: tuple
    order: int
    F_value: float
    min_gap: float
    amp_norm: float
    iterations: int
    trace: list = field(default_factory=list)
    found: bool = True
    status: str = "converged"
    evaluations: int = 0

    def __post_init__(self):
        if self.order not in (2, 3):
            raise ValueError(f"order must be 2 or 3, got {self.order}")

    @property
    def converged(self) -> bool:
        return self.found and self.status == "converged"


def _diagnostics(x: float, y: float, obj: Objective) -> tuple[float, float, float]:
    """(F, min_gap, amp_norm) at a point; amp_norm from a standard inversion when experimental."""
    if obj.mode == "oracle":
        w = obj.frequencies(x, y)
        amp = float("nan")
    else:
        obj.evaluations += 1
        rep = standard_invert(obj.series(x, y), obj.inversion)
        w, amp = rep.raw_frequencies, rep.amp_norm
    gaps = [abs(w[0] - w[1]), abs(w[1] - w[2]), abs(w[2] - w[0])]
    return _f_from_frequencies(w), float(min(gaps)), amp


def _min_gap_at(x: float, y: float, obj: Objective) -> float:
    w = obj.frequencies(x, y)
    return float(min(abs(w[0] - w[1]), abs(w[1] - w[2]), abs(w[2] - w[0])))


def scan_ep2(
    gamma_rate: float,
    drive: float,
    delta_range: tuple[float, float],
    steps: int,
    obj: Objective,
    tol: float = 1e-12,
) -> EPReport:
    """1-D scan in detuning at fixed drive, then refinement of the EP2 location.

    The scan minimum of the smallest frequency gap is bracketed by its grid
    neighbours; the oracle refines by root finding on the EP2 polynomial sign,
    the experimental path by golden section on the measured gap.  Without a sign
    change of the degeneracy measure across the bracket the gap minimum is still
    accepted when the measure vanishes there (a tangential touch, as at the EP3
    cusp); otherwise the result is reported as not found.
    """
    lo, hi = map(float, delta_range)
    if not hi > lo:
        raise ValueError("delta_range must be increasing")
    if steps < 3:
        raise ValueError("steps must be >= 3")
    if not math.isclose(gamma_rate, obj.gamma_rate):
        raise ValueError("objective was built for a different gamma_rate")
    grid = np.linspace(lo, hi, steps)
    gaps = np.array([_min_gap_at(d, drive, obj) for d in grid])
    trace = [TracePoint((float(d), drive), float("nan")) for d in grid]
    i = int(np.argmin(gaps))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, steps - 1)]
    left, right = obj.region_value(a, drive), obj.region_value(b, drive)
    found = left * right <= 0
    if found and obj.mode == "oracle":
        if left == 0:
            x = a
        elif right == 0:
            x = b
        else:
            x = brentq(lambda d: obj.region_value(d, drive), a, b, xtol=tol * obj.scale, rtol=1e-15, maxiter=500)
    elif found or obj.mode == "experimental":
        x, _ = golden_section(lambda d: _min_gap_at(d, drive, obj), a, b, rel_tol=tol)
    else:
        # the closed-form gap is flat zero in a small window around the cusp; the
        # degeneracy measure itself is a smooth parabola there
        x, _ = golden_section(lambda d: obj.region_value(d, drive), a, b, rel_tol=tol)
    if not found:
        # the degeneracy curve may touch the scan line without crossing it (cusp tip)
        found = abs(obj.region_value(x, drive)) <= TOUCH_TOL
    F, gap, amp = _diagnostics(x, drive, obj)
    return EPReport(
        location=(float(x), float(drive)),
        order=2,
        F_value=F,
        min_gap=gap,
        amp_norm=amp,
        iterations=steps,
        trace=trace,
        found=bool(found),
        status="converged" if found else "not-found",
        evaluations=obj.evaluations,
    )


def seed_interior(gamma_rate: float, obj: Objective, candidate: Optional[tuple] = None) -> tuple[float, float]:
    """A point inside the all-real region: (0, G/8) by default, else a coarse grid search.

    For the oracle the candidate is checked with :func:`classify_region`; the
    experimental path uses the sign of the measured degeneracy measure.
    """
    if not gamma_rate > 0:
        raise ValueError("gamma_rate must be > 0")
    g = gamma_rate

    def inside(x, y):
        if obj.mode == "oracle":
            return classify_region(ControlParams(g, x, y)) == "all-real"
        return obj.region_value(x, y) < 0

    x0, y0 = candidate if candidate is not None else (0.0, g / 8.0)
    if inside(x0, y0):
        return float(x0), float(y0)
    best = None
    for y in np.linspace(g / 40.0, g / 4.0, 10):
        for x in np.linspace(-g / 10.0, g / 10.0, 21):
            if inside(x, y):
                F = evaluate_F(x, y, obj)
                if best is None or F < best[0]:
                    best = (F, float(x), float(y))
    if best is None:
        raise RuntimeError("no all-real point found on the seed grid")
    return best[1], best[2]


@dataclass(frozen=True)
class ValleyConfig:
    """Valley-ascend settings.

    ``half_width`` is the initial half-angle of the search cone around
    ``direction`` (radians); afterwards the cone follows the previous step and
    narrows as the valley straightens.  ``radius_rtol`` is the relative
    tolerance of each ray's EP2 crossing and ``refine_radius`` additionally
    minimizes the crossing distance over the ray angle.  ``axis_offset``
    (in units of G) moves a start on the zero-detuning axis off it, where one
    of the three modes is absent from the polarization signal.
    """

    direction: float = math.pi / 2
    half_width: float = math.pi / 4
    max_iter: int = 50
    step_tol: float = 1e-10
    rays: int = 9
    arc_samples: int = 17
    stagnation: int = 3
    arc_tol: float = 1e-12
    radius_rtol: float = 1e-13
    refine_radius: bool = True
    axis_offset: float = 0.0
    ray_start: float = 0.125

    @classmethod
    def experimental(cls, **overrides) -> "ValleyConfig":
        """Coarser sub-searches matched to the resolution of signal inversion."""
        base = dict(
            step_tol=1e-7,
            rays=7,
            arc_samples=9,
            arc_tol=1e-6,
            radius_rtol=1e-2,
            refine_radius=False,
            axis_offset=1e-3,
            ray_start=0.5,
        )
        base.update(overrides)
        return cls(**base)


def _ray_hit(obj: Objective, x: float, y: float, theta: float, rho0: float, rmax: float, rtol: float) -> float:
    """Distance along a ray to the first sign change of the degeneracy measure."""
    c, s = math.cos(theta), math.sin(theta)

    def f(r):
        return obj.region_value(x + r * c, y + r * s)

    a, b = 0.0, rho0
    fb = f(b)
    while fb < 0:
        a, b = b, 2.0 * b
        if b > rmax:
            return math.inf
        fb = f(b)
    if fb == 0:
        return b
    if a == 0.0 and f(0.0) >= 0:
        # the point itself already sits on (or across) the EP2 curve
        return 0.0
    return brentq(f, a, b, xtol=max(rtol * a, 1e-15 * obj.scale), rtol=max(rtol, 1e-15), maxiter=200)


def valley_ascend(
    start: tuple[float, float],
    gamma_rate: float,
    obj: Objective,
    cfg: Optional[ValleyConfig] = None,
) -> EPReport:
    """Climb the valley of F toward the EP3.

    A line minimization of F along the initial direction puts the first point
    on the valley floor.  Each iteration then takes the radius as the distance
    to the nearest EP2 point inside the current angular range and moves to the
    minimum of F on that arc.  Only strictly increasing F values are accepted.
    A start at negative detuning is solved as its mirror image and reflected
    back, since F is even in the detuning.
    """
    if cfg is None:
        cfg = ValleyConfig() if obj.mode == "oracle" else ValleyConfig.experimental()
    if start[0] < 0:
        flipped = replace(cfg, direction=math.pi - cfg.direction)
        return _mirror_report(valley_ascend((-start[0], start[1]), gamma_rate, obj, flipped))
    g = gamma_rate
    if obj.mode == "oracle" and classify_region(ControlParams(g, *start)) != "all-real":
        raise ValueError(f"start {start} is not inside the all-real region")
    x, y = map(float, start)
    # a start on (or shifted just off) the zero-detuning axis sees a mirror-symmetric valley
    on_axis = abs(x) <= cfg.axis_offset * g
    side = -1.0 if x < 0 else 1.0
    if x == 0.0 and cfg.axis_offset:
        x = cfg.axis_offset * g
    rmax = g
    rt = cfg.radius_rtol
    theta = cfg.direction
    # preliminary line search across the all-real segment through the start
    up = _ray_hit(obj, x, y, theta, g / 64.0, rmax, rt)
    down = _ray_hit(obj, x, y, theta + math.pi, g / 64.0, rmax, rt)
    up = min(up, rmax)
    down = min(down, rmax)
    c, s = math.cos(theta), math.sin(theta)
    lower = -0.999 * down
    if s > 0:
        # the mirror valley at negative drive is the same valley; stay at drive >= 0
        lower = max(lower, -y / s)
    t_best, F = golden_section(lambda t: evaluate_F(x + t * c, y + t * s, obj), lower, 0.999 * up, rel_tol=cfg.arc_tol)
    x, y = x + t_best * c, y + t_best * s
    trace = [TracePoint((x, y), F)]
    half = cfg.half_width
    rho = min(up, down)
    fails = 0
    status = "budget"
    it = 0
    for it in range(1, cfg.max_iter + 1):
        thetas = theta + np.linspace(-half, half, cfg.rays)
        hits = [_ray_hit(obj, x, y, t, max(rho * cfg.ray_start, 1e-14 * g), rmax, rt) for t in thetas]
        k = int(np.argmin(hits))
        r = hits[k]
        if cfg.refine_radius and math.isfinite(r) and 0 < k < cfg.rays - 1:
            _, r = golden_section(
                lambda t: _ray_hit(obj, x, y, t, max(r / 8.0, 1e-14 * g), rmax, rt),
                thetas[k - 1],
                thetas[k + 1],
                rel_tol=1e-6,
            )
        r = min(r, hits[k])
        if not math.isfinite(r) or r <= cfg.step_tol * g:
            status = "converged"
            break

        def on_arc(t):
            return evaluate_F(x + r * math.cos(t), y + r * math.sin(t), obj)

        arc = theta + np.linspace(-half, half, cfg.arc_samples)
        vals = [on_arc(t) for t in arc]
        j = int(np.argmin(vals))
        t_new, F_new = golden_section(
            on_arc, arc[max(j - 1, 0)], arc[min(j + 1, cfg.arc_samples - 1)], rel_tol=cfg.arc_tol
        )
        if vals[j] < F_new:
            t_new, F_new = arc[j], vals[j]
        nx, ny = x + r * math.cos(t_new), y + r * math.sin(t_new)
        if on_axis and nx * side < 0:
            # symmetric arc: stay on the side of the start (positive detuning from the axis itself)
            nx, t_new = -nx, math.pi - t_new
        if F_new <= F:
            fails += 1
            half = max(half / 2.0, 1e-12)
            if fails >= cfg.stagnation:
                status = "stagnated"
                break
            continue
        fails = 0
        on_axis = False
        turn = (t_new - theta + math.pi) % (2 * math.pi) - math.pi
        at_edge = abs(turn) > 0.9 * half
        trace.append(TracePoint((nx, ny), F_new, r, (theta - half, theta + half)))
        log.debug("valley %d: (%.12g, %.12g) F=%.6g r=%.3g half=%.3g evals=%d", it, nx, ny, F_new, r, half, obj.evaluations)
        x, y, F, theta, rho = nx, ny, F_new, t_new, r
        half = min(cfg.half_width, 3.0 * half) if at_edge else min(cfg.half_width, max(4.0 * abs(turn), half / 4.0, 1e-9))
        if F >= F_CAP:
            status = "converged"
            break
    if status == "converged":
        w = obj.frequencies(x, y)
        if max(abs(w[0] - w[1]), abs(w[1] - w[2]), abs(w[2] - w[0])) > EP3_SPREAD * g:
            # F diverges on the whole EP2 curve; the valley ended on it, not at the cusp
            status = "ep2"
    F, gap, amp = _diagnostics(x, y, obj)
    return EPReport(
        location=(x, y),
        order=3,
        F_value=F,
        min_gap=gap,
        amp_norm=amp,
        iterations=it,
        trace=trace,
        status=status,
        evaluations=obj.evaluations,
    )


def _mirror_report(rep: EPReport) -> EPReport:
    def flip(p: TracePoint) -> TracePoint:
        angles = None if p.angles is None else (math.pi - p.angles[1], math.pi - p.angles[0])
        return TracePoint((-p.point[0], p.point[1]), p.F_value, p.radius, angles)

    return replace(rep, location=(-rep.location[0], rep.location[1]), trace=[flip(p) for p in rep.trace])


def root_search_pq(
    start: tuple[float, float],
    gamma_rate: float,
    obj: Objective,
    tol: Optional[float] = None,
    max_iter: int = 100,
) -> EPReport:
    """Damped Newton on the normalized (p, q) pair with a central-difference Jacobian.

    A start on the symmetry axis (zero detuning) is nudged to positive
    detuning.  A near-singular Jacobian hands over to a Nelder-Mead pass on
    |p|^2 + |q|^2 before Newton resumes.
    """
    g = gamma_rate
    experimental = obj.mode == "experimental"
    if tol is None:
        tol = 1e-9 if experimental else 1e-14
    h = (1e-5 if experimental else 1e-7) * g
    x = np.array(start, dtype=float)
    if abs(x[0]) < 1e-3 * g:
        x[0] = 1e-2 * g
    fx = obj.pq(*x)
    trace = [TracePoint(tuple(x), float(np.abs(fx).sum()))]
    status = "budget"
    it = 0
    simplex_used = False
    for it in range(1, max_iter + 1):
        if np.abs(fx).sum() < tol:
            status = "converged"
            break
        J = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            J[:, k] = (obj.pq(*(x + e)) - obj.pq(*(x - e))) / (2 * h)
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12:
            if simplex_used:
                status = "singular"
                break
            simplex_used = True
            res = minimize(
                lambda v: float(np.sum(obj.pq(*v) ** 2)),
                x,
                method="Nelder-Mead",
                options={"xatol": 1e-12 * g, "fatol": 1e-30, "maxiter": 400},
            )
            x = res.x
            fx = obj.pq(*x)
            trace.append(TracePoint(tuple(x), float(np.abs(fx).sum())))
            continue
        step = np.linalg.solve(J, -fx)
        lam = 1.0
        norm0 = np.abs(fx).sum()
        while lam > 1e-6:
            trial = x + lam * step
            ft = obj.pq(*trial)
            if np.abs(ft).sum() < norm0:
                break
            lam /= 2.0
        else:
            status = "converged" if norm0 < 1e3 * tol else "stalled"
            break
        x, fx = trial, ft
        trace.append(TracePoint(tuple(x), float(np.abs(fx).sum())))
        if np.max(np.abs(lam * step)) < (1e-13 if not experimental else 1e-11) * g and np.abs(fx).sum() < 1e3 * tol:
            status = "converged"
            break
    F, gap, amp = _diagnostics(*x, obj)
    return EPReport(
        location=(float(x[0]), float(x[1])),
        order=3,
        F_value=F,
        min_gap=gap,
        amp_norm=amp,
        iterations=it,
        trace=trace,
        status=status,
        evaluations=obj.evaluations,
    )


def _poly_terms(u: np.ndarray, v: np.ndarray, degree: int) -> np.ndarray:
    return np.column_stack([u**i * v**j for i in range(degree + 1) for j in range(degree + 1 - i)])


def _robust_fit(B: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Linear fit with a soft-L1 loss scaled by the residual MAD of the plain fit."""
    c0 = np.linalg.lstsq(B, y, rcond=None)[0]
    r0 = B @ c0 - y
    spread = 1.4826 * float(np.median(np.abs(r0 - np.median(r0))))
    if spread <= 1e-12 * (float(np.max(np.abs(y))) + 1e-300):
        return c0
    fit = least_squares(lambda c: B @ c - y, c0, loss="soft_l1", f_scale=3.0 * spread)
    return fit.x


DEFAULT_SCHEDULE = ((0.05, 7), (0.025, 9), (0.025, 13))


def surface_root_search(
    center: tuple[float, float],
    gamma_rate: float,
    obj: Objective,
    schedule: Sequence[tuple[float, int]] = DEFAULT_SCHEDULE,
    degree: int = 3,
) -> EPReport:
    """EP3 from polynomial fits of (p, q) over stencils of measurements.

    p and q are low-degree polynomials in the controls, so a least-squares fit
    of degree ``degree`` over a square stencil has no model error, and noise
    in the individual (p, q) estimates averages down over the stencil.  The
    fit uses a soft-L1 loss so that a few failed inversions do not drag it.  Each
    ``schedule`` entry ``(half_width / G, points per axis)`` is one round; the
    common root of the fitted surfaces becomes the next stencil centre.
    Suited to noisy measurements, where finite-difference Newton steps drown
    in noise.
    """
    g = gamma_rate
    if not schedule:
        raise ValueError("empty schedule")
    for width, points in schedule:
        if not width > 0 or points < degree + 1:
            raise ValueError("each round needs half_width > 0 and at least degree + 1 points per axis")
    cx, cy = map(float, center)
    trace = [TracePoint((cx, cy), float("nan"))]
    status = "converged"
    for width, points in schedule:
        h = width * g
        grid = np.linspace(-1.0, 1.0, points)
        U, V = (a.ravel() for a in np.meshgrid(grid, grid))
        B = _poly_terms(U, V, degree)
        vals = np.array([obj.pq(cx + h * u, cy + h * v) for u, v in zip(U, V)])
        cp = _robust_fit(B, vals[:, 0])
        cq = _robust_fit(B, vals[:, 1])

        def model(z):
            T = _poly_terms(np.atleast_1d(z[0]), np.atleast_1d(z[1]), degree)
            return np.array([T @ cp, T @ cq]).ravel()

        sol = least_squares(model, np.zeros(2), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        u, v = sol.x
        cx, cy = cx + h * u, cy + h * v
        residual = float(np.abs(sol.fun).sum())
        trace.append(TracePoint((cx, cy), float("nan"), h))
        log.debug("surface round: (%.12g, %.12g) |model|=%.3g h=%.3g", cx, cy, residual, h)
        status = "converged" if max(abs(u), abs(v)) <= 1.0 and residual < 1e-8 else "outside-stencil"
    F, gap, amp = _diagnostics(cx, cy, obj)
    return EPReport(
        location=(cx, cy),
        order=3,
        F_value=F,
        min_gap=gap,
        amp_norm=amp,
        iterations=len(schedule),
        trace=trace,
        status=status,
        evaluations=obj.evaluations,
    )


def _region_label(value: float) -> str:
    if value < -REGION_TOL:
        return "all-real"
    if value > REGION_TOL:
        return "complex-pair"
    return "degenerate"


def _map_row(args):
    obj, y, xs = args
    rows = []
    for x in xs:
        if obj.mode == "experimental":
            obj.evaluations += 1
            rep = standard_invert(obj.series(x, y), obj.inversion)
            w, amp = rep.raw_frequencies, rep.amp_norm
            region = _region_label(region_from_frequencies(w))
        else:
            w = obj.frequencies(x, y)
            amp = float("nan")
            region = classify_region(obj.params(x, y))
        F = _f_from_frequencies(w)
        gap = float(min(abs(w[0] - w[1]), abs(w[1] - w[2]), abs(w[2] - w[0])))
        rows.append((float(x), float(y), F, gap, amp, region))
    return rows


def map_grid(
    deltas: Sequence[float], drives: Sequence[float], obj: Objective, workers: Optional[int] = None
) -> list[tuple]:
    """Rows (delta, drive, F, min_gap, amp_norm, region) over a grid, drive-major order.

    Rows come back in grid order regardless of how the work was scheduled.
    """
    deltas = [float(d) for d in deltas]
    drives = [float(e) for e in drives]
    if not deltas or not drives:
        raise ValueError("empty grid")
    jobs = [(obj, y, deltas) for y in drives]
    n_workers = min(worker_count(workers), len(jobs))
    if n_workers <= 1 or obj.probe is not None:
        chunks = [_map_row(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            chunks = list(pool.map(_map_row, jobs))
    return [row for chunk in chunks for row in chunk]
