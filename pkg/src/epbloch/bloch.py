"""Rotating-frame Bloch generator, its closed-form spectrum and the analytic EP conditions.

The reduced generator is

    M = [[-G/2,  D,   0],
         [ -D, -G/2,  e],
         [  0,  -e,  -G]]

with G the general relaxation coefficient, D the detuning and e the drive
amplitude.  Eigenvalues ``m`` of ``M`` relate to complex frequencies through
``m = -1j * omega`` (so ``omega = 1j * m``), which is the convention used for the
characteristic cubic coefficients ``(r, s, t)`` as well.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

__all__ = [
    "ControlParams",
    "RateParams",
    "SpectrumTriple",
    "EPAuxiliaries",
    "build_matrix",
    "general_relaxation",
    "rates_to_controls",
    "auxiliaries",
    "eigenvalues_closed_form",
    "classify_region",
    "region_discriminant",
    "char_coeffs",
    "discriminant_pq",
    "ep3_locus",
    "solve_real_cubic",
    "pq_from_coeffs",
]

Region = Literal["all-real", "complex-pair", "degenerate"]

SQRT_1_108 = math.sqrt(1.0 / 108.0)
SQRT_8_108 = math.sqrt(8.0 / 108.0)

# normalized |W^2| below this counts as degenerate
REGION_TOL = 1e-12
# at unit scale, the largest roundoff split of a double root (about sqrt(eps))
DOUBLE_ROOT_SPLIT = 1e-7
# |W + G X| below CARDANO_FLOOR * scale^3 falls back to the real-cubic solver
CARDANO_FLOOR = 1e-14


@dataclass(frozen=True)
class ControlParams:
    """The three parameters of the generator: relaxation ``gamma_rate``, ``detuning``, ``drive``."""

    gamma_rate: float
    detuning: float
    drive: float

    def __post_init__(self):
        for name in ("gamma_rate", "detuning", "drive"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        if self.gamma_rate < 0:
            raise ValueError(f"gamma_rate must be >= 0, got {self.gamma_rate}")

    @property
    def rabi(self) -> float:
        """Rabi frequency sqrt(D^2 + e^2)."""
        return math.hypot(self.detuning, self.drive)

    @property
    def scale(self) -> float:
        return math.hypot(self.gamma_rate, self.detuning, self.drive)

    def scaled(self, c: float) -> "ControlParams":
        return ControlParams(c * self.gamma_rate, c * self.detuning, c * self.drive)

    def normalized(self) -> "ControlParams":
        """Same direction with unit :attr:`scale` (division, so subnormal inputs are fine)."""
        s = self.scale
        return ControlParams(self.gamma_rate / s, self.detuning / s, self.drive / s)


@dataclass(frozen=True)
class RateParams:
    """Kinetic coefficients of the two-level master equation.

    ``kappa_down`` drives relaxation to the ground state, ``kappa_up`` excitation,
    and ``dephasing`` is the pure dephasing rate.
    """

    kappa_down: float
    kappa_up: float = 0.0
    dephasing: float = 0.0

    def __post_init__(self):
        for name in ("kappa_down", "kappa_up", "dephasing"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
            object.__setattr__(self, name, value)

    @property
    def t1(self) -> float:
        total = self.kappa_up + self.kappa_down
        return math.inf if total == 0 else 1.0 / total

    @property
    def t2(self) -> float:
        rate = self.dephasing + 0.5 * (self.kappa_up + self.kappa_down)
        return math.inf if rate == 0 else 1.0 / rate

    @property
    def sz_eq(self) -> float:
        """Detailed-balance equilibrium polarization (spin-1/2 normalization)."""
        total = self.kappa_up + self.kappa_down
        if total == 0:
            return 0.0
        return 0.5 * (self.kappa_up - self.kappa_down) / total


@dataclass(frozen=True)
class SpectrumTriple:
    """Eigenvalues of M in canonical order.

    ``eigenvalues[0]`` is the isolated eigenvalue; ``eigenvalues[1:]`` is the closest
    pair (the one that coalesces at an EP2), with the non-negative imaginary part first.
    """

    eigenvalues: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        return 1j * self.eigenvalues


@dataclass(frozen=True)
class EPAuxiliaries:
    X: float
    Y: float
    W: complex
    ep2_poly: float

    @property
    def w_squared(self) -> float:
        """G^2 X^2 + Y^3, which equals ``108 * ep2_poly``."""
        return self.W.real**2 - self.W.imag**2


def build_matrix(p: ControlParams) -> np.ndarray:
    g, d, e = p.gamma_rate, p.detuning, p.drive
    return np.array(
        [
            [-0.5 * g, d, 0.0],
            [-d, -0.5 * g, e],
            [0.0, -e, -g],
        ]
    )


def general_relaxation(r: RateParams) -> float:
    """G = kappa_down + kappa_up - dephasing (may be negative for dephasing-dominated baths)."""
    return r.kappa_down + r.kappa_up - r.dephasing


def rates_to_controls(r: RateParams, detuning: float, drive: float) -> ControlParams:
    """Map master-equation rates plus field parameters onto the generator parameters.

    Raises ``ValueError`` when the rates give a negative relaxation coefficient,
    since the EP analysis is defined for ``gamma_rate >= 0``.
    """
    gamma = general_relaxation(r)
    if r.t1 < math.inf:
        # same quantity through T1, T2: 3/(2 T1) - 1/T2
        via_times = 1.5 / r.t1 - (0.0 if r.t2 == math.inf else 1.0 / r.t2)
        if not math.isclose(via_times, gamma, rel_tol=1e-12, abs_tol=1e-15):
            raise ArithmeticError(f"inconsistent relaxation coefficient {via_times} != {gamma}")
    if gamma < 0:
        raise ValueError(f"rates give negative relaxation coefficient {gamma}")
    return ControlParams(gamma, detuning, drive)


def auxiliaries(p: ControlParams) -> EPAuxiliaries:
    g, d2, e2 = p.gamma_rate, p.detuning**2, p.drive**2
    X = -36.0 * d2 + 18.0 * e2 - g * g
    Y = 12.0 * d2 + 12.0 * e2 - g * g
    ep2 = g**4 * d2 + 16.0 * (d2 + e2) ** 3 + g * g * (8.0 * d2 * d2 - 20.0 * d2 * e2 - e2 * e2)
    W = cmath.sqrt(g * g * X * X + Y**3)
    return EPAuxiliaries(X=X, Y=Y, W=W, ep2_poly=ep2)


def region_discriminant(p: ControlParams) -> float:
    """Scale-free G^2 X^2 + Y^3, normalized by (G^2 + D^2 + e^2)^3.

    Evaluated from the expanded EP2 polynomial, which does not suffer the
    cancellation between G^2 X^2 and Y^3 near the EP3.
    """
    scale = p.scale
    if scale == 0:
        return 0.0
    return 108.0 * auxiliaries(p.normalized()).ep2_poly


def classify_region(p: ControlParams, tol: float = REGION_TOL) -> Region:
    """Negative W^2 means three distinct real eigenvalues (inside the EP2 'triangle')."""
    value = region_discriminant(p)
    if value < -tol:
        return "all-real"
    if value > tol:
        return "complex-pair"
    return "degenerate"


def _m_poly(p: ControlParams) -> tuple[float, float, float]:
    """Monic characteristic polynomial of M: m^3 + a m^2 + b m + c."""
    g, d2, e2 = p.gamma_rate, p.detuning**2, p.drive**2
    a = 2.0 * g
    b = 1.25 * g * g + d2 + e2
    c = 0.25 * g**3 + g * d2 + 0.5 * g * e2
    return a, b, c


def solve_real_cubic(a: float, b: float, c: float) -> np.ndarray:
    """Roots of x^3 + a x^2 + b x + c with real coefficients.

    Trigonometric form for three real roots, real-radical Cardano otherwise,
    with an explicit triple-root branch.  Each root gets two Newton polishing steps.
    """
    shift = a / 3.0
    p = b - a * a / 3.0
    q = 2.0 * a**3 / 27.0 - a * b / 3.0 + c
    scale = max(abs(a), math.sqrt(abs(b)), abs(c) ** (1.0 / 3.0), 1e-300)
    pn, qn = p / scale**2, q / scale**3
    if abs(pn) < 1e-15 and abs(qn) < 1e-15:
        roots = np.full(3, -shift, dtype=complex)
    else:
        disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
        if disc < 0:
            rho = 2.0 * math.sqrt(-p / 3.0)
            arg = max(-1.0, min(1.0, 3.0 * q / (p * rho)))
            phi = math.acos(arg) / 3.0
            t = rho * np.cos(phi - 2.0 * np.pi * np.arange(3) / 3.0)
            roots = (t - shift).astype(complex)
        else:
            sq = math.sqrt(disc)
            # avoid cancellation: pick the larger-magnitude radicand
            u3 = -q / 2.0 - sq if q > 0 else -q / 2.0 + sq
            u = np.cbrt(u3)
            v = -p / (3.0 * u) if u != 0 else 0.0
            t1 = u + v
            re = -0.5 * t1
            im = 0.5 * math.sqrt(3.0) * (u - v)
            roots = np.array([t1, re + 1j * im, re - 1j * im]) - shift
    coeffs = np.array([1.0, a, b, c])
    deriv = np.array([3.0, 2.0 * a, b])
    for _ in range(2):
        f = np.polyval(coeffs, roots)
        fp = np.polyval(deriv, roots)
        ok = np.abs(fp) > 1e-8 * scale**2
        roots = np.where(ok, roots - f / np.where(ok, fp, 1.0), roots)
    return roots


def _canonical(m: np.ndarray, region: Region) -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if region != "complex-pair":
        m = m.real.astype(complex)
    else:
        i_real = int(np.argmin(np.abs(m.imag)))
        others = [k for k in range(3) if k != i_real]
        a, b = m[others]
        re = 0.5 * (a.real + b.real)
        im = 0.5 * abs(a.imag - b.imag)
        m = np.array([m[i_real].real, re + 1j * im, re - 1j * im])
        return m
    # isolated eigenvalue first, then the closest pair
    gaps = [abs(m[1] - m[2]), abs(m[0] - m[2]), abs(m[0] - m[1])]
    iso = int(np.argmin(gaps))
    rest = sorted((k for k in range(3) if k != iso), key=lambda k: -m[k].real)
    m = m[[iso, *rest]]
    if region == "degenerate" and abs(m[1] - m[2]) < DOUBLE_ROOT_SPLIT:
        # a double root split only by roundoff: make it exact so gap-based measures see it
        m[1] = m[2] = 0.5 * (m[1] + m[2])
    return m


def eigenvalues_closed_form(p: ControlParams) -> SpectrumTriple:
    """Eigenvalues of M from the Cardano-type closed form.

    The principal cube root of ``W + G X`` is used; the resulting root set does
    not depend on that choice.  Where ``W + G X`` is numerically zero (the
    removable 0/0 at the EP3 and the G = 0 free-precession family) the real cubic
    solver takes over.
    """
    scale = p.scale
    if scale == 0:
        return SpectrumTriple(np.zeros(3, dtype=complex))
    # the spectrum is homogeneous of degree one; solving at unit scale keeps the
    # absolute thresholds below meaningful and the cubes clear of under/overflow
    return SpectrumTriple(scale * _unit_spectrum(p.normalized()))


def _unit_spectrum(p: ControlParams) -> np.ndarray:
    g = p.gamma_rate
    aux = auxiliaries(p)
    region = classify_region(p)
    a_, b_, c_ = _m_poly(p)
    A = aux.W + g * aux.X
    if abs(A) < CARDANO_FLOOR:
        m = solve_real_cubic(a_, b_, c_)
    else:
        C = A ** (1.0 / 3.0)
        Y = aux.Y
        w1 = cmath.exp(2j * math.pi / 3.0)
        w2 = cmath.exp(1j * math.pi / 3.0)
        u = np.array(
            [
                C - Y / C,
                w1 * C + w2 * Y / C,
                w1.conjugate() * C + w2.conjugate() * Y / C,
            ]
        )
        m = -2.0 * g / 3.0 + u / 6.0
        resid = np.abs(((m + a_) * m + b_) * m + c_)
        if np.max(resid) > 1e-10:
            m = solve_real_cubic(a_, b_, c_)
    return _canonical(m, region)


def char_coeffs(p: ControlParams) -> tuple[complex, complex, complex]:
    """Coefficients (r, s, t) of the monic cubic in omega with roots omega_k = 1j * m_k."""
    a, b, c = _m_poly(p)
    # m = -1j w:  i w^3 - a w^2 - 1j b w + c = 0, divided by 1j
    return 1j * a, complex(-b), -1j * c


def discriminant_pq(p: ControlParams) -> tuple[complex, complex]:
    """Depressed-cubic coefficients; both vanish only at a triple root."""
    r, s, t = char_coeffs(p)
    return pq_from_coeffs(r, s, t)


def pq_from_coeffs(r: complex, s: complex, t: complex) -> tuple[complex, complex]:
    p_val = s - r * r / 3.0
    q_val = 2.0 * r**3 / 27.0 - r * s / 3.0 + t
    return p_val, q_val


def ep3_locus(gamma_rate: float) -> tuple[ControlParams, ControlParams]:
    """The two third-order EPs, (+D, e) first."""
    if not gamma_rate > 0:
        raise ValueError(f"gamma_rate must be > 0, got {gamma_rate}")
    d = SQRT_1_108 * gamma_rate
    e = SQRT_8_108 * gamma_rate
    return ControlParams(gamma_rate, d, e), ControlParams(gamma_rate, -d, e)
