"""Physical parameters from a located EP3, and the branch-point sensitivity probe.

In the laboratory the controls are the drive frequency ``nu`` and the field
amplitude ``field``.  They map onto the generator through

    detuning = omega_s - nu,    drive = mu * field,

so locating the EP3 in (nu, field) and reading Gamma off the trace of the
measured frequencies fixes the transition frequency ``omega_s`` and the dipole
strength ``mu``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from itertools import permutations
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .bloch import SQRT_1_108, SQRT_8_108, ControlParams, eigenvalues_closed_form, ep3_locus
from .harminv import InversionConfig, standard_invert
from .locate import EPReport, Objective, root_search_pq, surface_root_search, valley_ascend
from .propagator import TimeSeries, add_noise, average, default_sampling, simulate

__all__ = [
    "PhysicalParams",
    "LabExperiment",
    "gamma_from_frequencies",
    "estimate_at_ep3",
    "branch_probe",
    "controls_from_frequencies",
    "rough_calibration",
    "locate_lab_ep3",
    "BlochParameterEstimator",
]

# relative trace residue above which a frequency triple is flagged
TRACE_RESIDUE_TOL = 1e-6


@dataclass(frozen=True)
class PhysicalParams:
    """System parameters together with the lab controls they were read at."""

    omega_s: float
    mu: float
    gamma_rate: float
    nu: float
    field: float
    diagnostics: dict = dc_field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.mu < 0 or self.field < 0:
            raise ValueError("mu and field must be nonnegative")
        if self.gamma_rate < 0:
            raise ValueError("gamma_rate must be nonnegative")

    def controls(self, nu: Optional[float] = None, field: Optional[float] = None) -> ControlParams:
        """Generator parameters at (nu, field); defaults to the stored controls."""
        nu = self.nu if nu is None else nu
        field = self.field if field is None else field
        return ControlParams(self.gamma_rate, self.omega_s - nu, self.mu * field)

    def to_dict(self) -> dict:
        return {
            "omega_s": self.omega_s,
            "mu": self.mu,
            "gamma": self.gamma_rate,
            "nu": self.nu,
            "field": self.field,
            "diagnostics": dict(self.diagnostics),
        }


def gamma_from_frequencies(frequencies: Sequence[complex], strict: bool = False) -> tuple[float, float]:
    """Relaxation rate from the trace of the generator.

    The three frequencies sum to ``-2j * Gamma``; returns ``(Gamma, residue)``
    where the residue is the real part of the sum over 2, which must vanish.
    With ``strict=True`` a residue above ``1e-6 * Gamma`` raises.
    """
    w = np.asarray(frequencies, dtype=complex).ravel()
    if w.size != 3:
        raise ValueError(f"need exactly three frequencies, got {w.size}")
    total = 0.5j * w.sum()
    gamma, residue = float(total.real), float(total.imag)
    if strict and abs(residue) > TRACE_RESIDUE_TOL * max(abs(gamma), 1e-300):
        raise ValueError(f"frequencies violate the trace identity (residue {residue:.3g}, Gamma {gamma:.6g})")
    return gamma, residue


def estimate_at_ep3(
    ep: EPReport,
    nu: float,
    field: float,
    frequencies: Sequence[complex],
    branch: Optional[int] = None,
    gamma_rate: Optional[float] = None,
) -> PhysicalParams:
    """Invert the EP3 conditions for (omega_s, mu, Gamma).

    ``branch`` is the sign of the detuning at the located EP3 (+1 when the
    cusp sits at nu below omega_s).  It defaults to the sign recorded in the
    report's location.  ``gamma_rate``, when given (e.g. pooled over many
    measurements), replaces the trace estimate from ``frequencies``; the
    trace residue of ``frequencies`` is still reported.
    """
    if ep.order != 3:
        raise ValueError(f"need an EP3 report, got order {ep.order}")
    if not field > 0:
        raise ValueError("field at the EP3 must be > 0")
    if branch is None:
        branch = 1 if ep.location[0] >= 0 else -1
    if branch not in (1, -1):
        raise ValueError("branch must be +1 or -1")
    gamma, residue = gamma_from_frequencies(frequencies)
    if gamma_rate is not None:
        gamma = gamma_rate
    gamma = max(gamma, 0.0)
    omega_s = nu + branch * SQRT_1_108 * gamma
    mu = SQRT_8_108 * gamma / field
    diag = {"trace_residue": residue, "branch": branch, "ep_F": ep.F_value, "ep_status": ep.status}
    return PhysicalParams(omega_s=omega_s, mu=mu, gamma_rate=gamma, nu=nu, field=field, diagnostics=diag)


def _max_shift(w: np.ndarray, ref: np.ndarray) -> float:
    """max_k |w_k - ref_k| under the best pairing of the two triples."""
    return min(max(abs(w[list(p)] - ref)) for p in permutations(range(3)))


def branch_probe(
    gamma_rate: float,
    offsets: Sequence[float],
    axis: str = "nu",
    at: Optional[ControlParams] = None,
    frequencies: Optional[Callable[[ControlParams], np.ndarray]] = None,
) -> float:
    """Log-log slope of the frequency shift against a control offset.

    Offsets are applied to the drive frequency (``axis="nu"``, detuning moves by
    -delta) or to the drive (``axis="field"``) starting from ``at``, which
    defaults to the +detuning EP3.  Frequencies come from the closed form
    unless a ``frequencies`` callable is given.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.size < 2 or np.any(offsets <= 0):
        raise ValueError("need at least two positive offsets")
    if axis not in ("nu", "field"):
        raise ValueError(f"axis must be 'nu' or 'field', got {axis!r}")
    if at is None:
        at = ep3_locus(gamma_rate)[0]
    freq = frequencies or (lambda p: eigenvalues_closed_form(p).frequencies)
    ref = np.asarray(freq(at))
    shifts = []
    for d in offsets:
        if axis == "nu":
            p = ControlParams(at.gamma_rate, at.detuning - d, at.drive)
        else:
            p = ControlParams(at.gamma_rate, at.detuning, at.drive + d)
        shifts.append(_max_shift(np.asarray(freq(p)), ref))
    slope, _ = np.polyfit(np.log(offsets), np.log(shifts), 1)
    return float(slope)


@dataclass
class LabExperiment:
    """A simulated apparatus with hidden (omega_s, mu, Gamma).

    ``measure`` returns the polarization signal at lab controls (nu, field),
    averaged over ``averages`` noisy repetitions when ``noise > 0``.  Noise is
    drawn afresh for each measurement from a stream keyed by ``seed`` and the
    measurement count, so a run is reproducible.
    """

    omega_s: float
    mu: float
    gamma_rate: float
    n: Optional[int] = None
    dt: Optional[float] = None
    noise: float = 0.0
    averages: int = 1
    seed: int = 0
    measurements: int = 0

    def __post_init__(self):
        if not self.gamma_rate > 0:
            raise ValueError("gamma_rate must be > 0")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.averages < 1:
            raise ValueError("averages must be >= 1")

    def measure(self, nu: float, field: float) -> TimeSeries:
        self.measurements += 1
        p = ControlParams(self.gamma_rate, self.omega_s - nu, self.mu * field)
        dt, n = default_sampling(p)
        clean = simulate(p, n=self.n or n, dt=self.dt or dt)
        if self.noise > 0:
            # every measurement gets its own shots
            shots = [add_noise(clean, self.noise, (self.seed, self.measurements, k)) for k in range(self.averages)]
            return average(shots)
        return clean


def controls_from_frequencies(frequencies: Sequence[complex]) -> tuple[float, float, float]:
    """(Gamma, detuning^2, drive^2) from one frequency triple.

    The rate polynomial m^3 + a m^2 + b m + c has a = 2 G,
    b = 5 G^2 / 4 + D^2 + E^2 and c = G^3 / 4 + G D^2 + G E^2 / 2, which is
    linear in (D^2, E^2) once G is known.  The signs of D and E are lost.
    """
    w = np.asarray(frequencies, dtype=complex).ravel()
    if w.size != 3:
        raise ValueError(f"need exactly three frequencies, got {w.size}")
    a, b, c = np.poly(-1j * w).real[1:]
    gamma = a / 2.0
    if not gamma > 0:
        raise ValueError("frequencies do not decay")
    total = b - 1.25 * gamma**2
    weighted = c / gamma - 0.25 * gamma**2
    return float(gamma), float(2.0 * weighted - total), float(2.0 * (total - weighted))


def rough_calibration(experiment, nus: Sequence[float], fields: Sequence[float], cfg: InversionConfig) -> dict:
    """Rough (omega_s, mu, Gamma) from a control sweep, one inversion per point.

    Each point gives detuning^2 and drive^2 through
    :func:`controls_from_frequencies`; (omega_s - nu)^2 and (mu * field)^2
    are then fitted with a robust loss, since points near zero detuning miss
    one mode in the polarization signal.  Zero-field points carry a single
    mode and are skipped.
    """
    rows = []
    for f in fields:
        if f <= 0:
            continue
        for v in nus:
            try:
                w = standard_invert(experiment.measure(v, f), cfg).raw_frequencies
                rows.append((v, f, *controls_from_frequencies(w)))
            except ValueError:
                continue
    if len(rows) < 3:
        raise RuntimeError("too few usable points in the sweep")
    data = np.array(rows)
    nu, fld, gam, d2, e2 = data.T
    gamma = float(np.median(gam))
    scale = gamma**2

    def resid(theta):
        omega_s, mu = theta
        return np.r_[(d2 - (omega_s - nu) ** 2) / scale, (e2 - (mu * fld) ** 2) / scale]

    start = [float(nu[np.argmin(d2)]), float(np.sqrt(max(np.median(e2 / fld**2), 0.0)))]
    fit = least_squares(resid, start, loss="soft_l1", f_scale=0.1)
    omega_s, mu = fit.x
    return {"omega_s": float(omega_s), "mu": float(abs(mu)), "gamma": gamma, "points": len(rows), "gamma_samples": gam}


def locate_lab_ep3(
    experiment,
    nu_range: tuple[float, float],
    field_range: tuple[float, float],
    grid: tuple[int, int] = (11, 5),
    method: str = "surface",
    cfg: InversionConfig = InversionConfig(),
) -> dict:
    """Sweep the lab controls, then locate both EP3 cusps by signal inversion only.

    A coarse (nu, field) sweep gives rough values of omega_s and mu (see
    :func:`rough_calibration`).  The searches then run in the rescaled coordinates x = omega_hat - nu,
    y = mu_hat * field, which look like (detuning, drive) up to small errors in
    the rough values; the located points are mapped back exactly.

    ``method`` picks the locator: ``"surface"`` (stencil fits, tolerant of
    noise), ``"rootsearch"`` (finite-difference Newton, needs clean signals) or
    ``"valley"``.
    """
    if method not in ("rootsearch", "valley", "surface"):
        raise ValueError(f"unknown method {method!r}")
    nus = np.linspace(*nu_range, grid[0])
    fields = np.linspace(*field_range, grid[1])
    if not (nus[-1] > nus[0] and fields[-1] > fields[0] and fields[0] >= 0):
        raise ValueError("sweep ranges must be increasing with nonnegative field")
    rough = rough_calibration(experiment, nus, fields, cfg)
    gamma, omega_hat, mu_hat = rough["gamma"], rough["omega_s"], rough["mu"]
    if not (gamma > 0 and mu_hat > 0):
        raise RuntimeError(f"sweep calibration failed: {rough}")

    def probe(x, y):
        return experiment.measure(omega_hat - x, y / mu_hat)

    cusps = []
    for sign in (1, -1):
        obj = Objective(gamma, "experimental", probe=probe, inversion=cfg, record=True)
        if method == "surface":
            rep = surface_root_search((sign * SQRT_1_108 * gamma, SQRT_8_108 * gamma), gamma, obj)
        elif method == "rootsearch":
            rep = root_search_pq((sign * 0.05 * gamma, gamma / 8.0), gamma, obj)
        else:
            rep = valley_ascend((sign * 1e-3 * gamma, gamma / 8.0), gamma, obj)
        x, y = rep.location
        if (1 if x >= 0 else -1) != sign:
            # this search ran into the other cusp
            continue
        nu_ep, field_ep = omega_hat - x, y / mu_hat
        w = standard_invert(experiment.measure(nu_ep, field_ep), cfg).raw_frequencies
        # the trace identity holds at every measured point, so Gamma pools over sweep and search;
        # the median shrugs off points where a weak mode was lost in the noise
        pooled = np.r_[rough["gamma_samples"], [gamma_from_frequencies(h[2])[0] for h in obj.history]]
        cusps.append(
            {
                "report": rep,
                "branch": sign,
                "nu": nu_ep,
                "field": field_ep,
                "frequencies": w,
                "gamma_pooled": float(np.median(pooled)),
                "pooled_count": len(pooled),
            }
        )
    if not cusps:
        raise RuntimeError("no EP3 located; check the sweep ranges")
    return {"gamma_sweep": gamma, "omega_hat": omega_hat, "mu_hat": mu_hat, "sweep_points": rough["points"], "cusps": cusps}


class BlochParameterEstimator(BaseEstimator):
    """Estimate (omega_s, mu, Gamma) of a driven two-level system from its EP3.

    ``fit`` takes an experiment object with a ``measure(nu, field)`` method that
    returns a :class:`TimeSeries`.  Both cusps are located; each yields an
    estimate through :func:`estimate_at_ep3` with its own branch sign, and the
    fitted values are their mean.  ``refine`` turns on the least-squares
    polish of every inversion, which matters for noisy signals.  ``predict``
    returns the model frequencies at an (n, 2) array of (nu, field) controls.
    """

    def __init__(
        self,
        nu_range: tuple = (0.9, 1.1),
        field_range: tuple = (0.0, 0.2),
        grid: tuple = (11, 5),
        method: str = "surface",
        refine: bool = True,
        degeneracy_tol: float = 1e-6,
        rank_tol: float = 1e-10,
    ):
        self.nu_range = nu_range
        self.field_range = field_range
        self.grid = grid
        self.method = method
        self.refine = refine
        self.degeneracy_tol = degeneracy_tol
        self.rank_tol = rank_tol

    def fit(self, X, y=None):
        if not hasattr(X, "measure"):
            raise TypeError("fit expects an experiment with a measure(nu, field) method")
        cfg = InversionConfig(degeneracy_tol=self.degeneracy_tol, rank_tol=self.rank_tol, refine=self.refine)
        found = locate_lab_ep3(X, tuple(self.nu_range), tuple(self.field_range), tuple(self.grid), self.method, cfg)
        cusps = found["cusps"]
        estimates = [
            estimate_at_ep3(c["report"], c["nu"], c["field"], c["frequencies"], c["branch"], c["gamma_pooled"])
            for c in cusps
        ]
        self.cusps_ = cusps
        self.estimates_ = estimates
        self.omega_s_ = float(np.mean([e.omega_s for e in estimates]))
        self.mu_ = float(np.mean([e.mu for e in estimates]))
        self.gamma_rate_ = float(np.mean([e.gamma_rate for e in estimates]))
        first = estimates[0]
        diag = {
            "cusps": len(estimates),
            "omega_s_spread": float(np.ptp([e.omega_s for e in estimates])),
            "mu_spread": float(np.ptp([e.mu for e in estimates])),
            "gamma_spread": float(np.ptp([e.gamma_rate for e in estimates])),
            "trace_residue": max(abs(e.diagnostics["trace_residue"]) for e in estimates),
            "converged": all(c["report"].converged for c in cusps),
            "gamma_sweep": found["gamma_sweep"],
        }
        self.params_ = PhysicalParams(self.omega_s_, self.mu_, self.gamma_rate_, first.nu, first.field, diag)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=float)
        if X.shape[1] != 2:
            raise ValueError("X must have columns (nu, field)")
        return np.array([eigenvalues_closed_form(self.params_.controls(v, f)).frequencies for v, f in X])
