"""Exact propagation of the rotating-frame Bloch equation and synthetic signal models."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import expm

from .bloch import ControlParams, RateParams, build_matrix

__all__ = [
    "BlochState",
    "TimeSeries",
    "Mode",
    "ModeSet",
    "expm_apply",
    "bloch_generator",
    "default_sampling",
    "trajectory",
    "simulate",
    "synthesize",
    "add_noise",
    "average",
]

DEFAULT_SAMPLES = 2000


@dataclass(frozen=True)
class BlochState:
    """Rotating-frame polarization (sx, sy, sz) and the equilibrium value sz_eq.

    ``sz_eq=None`` means "take it from the rates" (detailed balance), or 0 when
    no rates are given.
    """

    sx: float = 0.0
    sy: float = 0.0
    sz: float = -0.5
    sz_eq: Optional[float] = None

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.sx, self.sy, self.sz], dtype=float)


GROUND = BlochState()


@dataclass
class TimeSeries:
    """Uniformly sampled real signal ``samples[k] = S(t0 + k * dt)``."""

    t0: float
    dt: float
    samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if not self.dt > 0 or not math.isfinite(self.dt):
            raise ValueError(f"dt must be a positive finite number, got {self.dt}")
        if self.samples.size == 0:
            raise ValueError("a time series needs at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("time series contains non-finite values")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.size)


@dataclass
class Mode:
    """One (possibly confluent) term ``sum_a amplitudes[a] * t**a * exp(-1j * omega * t)``."""

    omega: complex
    amplitudes: np.ndarray

    def __post_init__(self):
        self.omega = complex(self.omega)
        self.amplitudes = np.atleast_1d(np.asarray(self.amplitudes, dtype=complex))
        if self.amplitudes.size < 1:
            raise ValueError("a mode needs at least one amplitude coefficient")

    @property
    def multiplicity(self) -> int:
        return self.amplitudes.size

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        poly = np.polyval(self.amplitudes[::-1], t)
        return poly * np.exp(-1j * self.omega * t)


@dataclass
class ModeSet:
    modes: list

    @property
    def order(self) -> int:
        return sum(m.multiplicity for m in self.modes)

    @property
    def frequencies(self) -> np.ndarray:
        """Frequencies repeated by multiplicity."""
        return np.array([m.omega for m in self.modes for _ in range(m.multiplicity)], dtype=complex)

    def evaluate(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for m in self.modes:
            out += m.evaluate(t)
        return out


def expm_apply(M: np.ndarray, t: float, v: np.ndarray) -> np.ndarray:
    """``exp(M t) @ v`` by scaling and squaring with a Pade approximant.

    Stays accurate when ``M`` is defective, which an eigendecomposition does not.
    """
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return expm(np.asarray(M, dtype=float) * t) @ np.asarray(v, dtype=float)


def bloch_generator(p: ControlParams, rates: Optional[RateParams] = None) -> np.ndarray:
    """Homogeneous part of the rotating-frame Bloch equation.

    Without rates this is the reduced matrix M itself (T1 = 1/G, T2 = 2/G).  With
    rates the diagonal is (-1/T2, -1/T2, -1/T1) from the kinetic coefficients.
    """
    if rates is None:
        return build_matrix(p)
    inv_t1 = rates.kappa_up + rates.kappa_down
    inv_t2 = rates.dephasing + 0.5 * inv_t1
    d, e = p.detuning, p.drive
    return np.array([[-inv_t2, d, 0.0], [-d, -inv_t2, e], [0.0, -e, -inv_t1]])


def default_sampling(p: ControlParams) -> tuple[float, int]:
    """dt = 0.1 / max(G, Rabi) and 2000 samples."""
    rate = max(p.gamma_rate, p.rabi)
    if rate == 0:
        raise ValueError("cannot choose a default time step for a zero generator")
    return 0.1 / rate, DEFAULT_SAMPLES


def _powers_apply(P: np.ndarray, v: np.ndarray, n: int) -> np.ndarray:
    """Rows ``P^k v`` for k < n, built by doubling (log2(n) matrix products)."""
    out = np.empty((n, 3))
    out[0] = v
    filled = 1
    Pk = P.copy()
    while filled < n:
        take = min(filled, n - filled)
        out[filled : filled + take] = out[:take] @ Pk.T
        filled += take
        Pk = Pk @ Pk
    return out


def trajectory(
    p: ControlParams,
    rates: Optional[RateParams] = None,
    x0: BlochState = GROUND,
    n: Optional[int] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
) -> tuple[np.ndarray, float]:
    """Full (n, 3) trajectory sampled at t0 + k dt; returns (states, dt).

    ``x0`` is the state at ``t0``.
    """
    if dt is None or n is None:
        d_dt, d_n = default_sampling(p)
        dt = d_dt if dt is None else dt
        n = d_n if n is None else n
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if rates is not None and not math.isclose(
        rates.kappa_down + rates.kappa_up - rates.dephasing, p.gamma_rate, rel_tol=1e-9, abs_tol=1e-15
    ):
        raise ValueError("rates and gamma_rate disagree")
    G = bloch_generator(p, rates)
    sz_eq = x0.sz_eq
    if sz_eq is None:
        sz_eq = rates.sz_eq if rates is not None else 0.0
    inv_t1 = -G[2, 2]
    b = np.array([0.0, 0.0, inv_t1 * sz_eq])
    if np.any(b) and abs(np.linalg.det(G)) > 1e-300:
        s_eq = np.linalg.solve(G, -b)
    else:
        # singular generator (no relaxation): homogeneous flow only
        s_eq = np.zeros(3)
    P = expm(G * dt)
    states = _powers_apply(P, x0.vector - s_eq, int(n)) + s_eq
    return states, float(dt)


def simulate(
    p: ControlParams,
    rates: Optional[RateParams] = None,
    x0: BlochState = GROUND,
    n: Optional[int] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
) -> TimeSeries:
    """Polarization S_z sampled from the exact solution; starts in the ground state by default."""
    states, dt = trajectory(p, rates, x0, n, dt, t0)
    meta = {"gamma": p.gamma_rate, "delta": p.detuning, "eps": p.drive}
    return TimeSeries(t0=t0, dt=dt, samples=states[:, 2], meta=meta)


def synthesize(modes: ModeSet, t0: float, dt: float, n: int, imag_tol: float = 1e-12) -> TimeSeries:
    """Evaluate a mode set on a uniform grid; the sum must be real."""
    t = t0 + dt * np.arange(n)
    values = modes.evaluate(t)
    scale = max(1.0, float(np.max(np.abs(values.real))))
    if np.max(np.abs(values.imag)) > imag_tol * scale:
        raise ValueError("modes are not conjugate-paired: synthesized signal is complex")
    return TimeSeries(t0=t0, dt=dt, samples=values.real)


def add_noise(s: TimeSeries, sigma: float, seed: Union[int, Sequence[int]]) -> TimeSeries:
    """Add i.i.d. Gaussian noise from a counter-based (Philox) stream.

    ``seed`` is an int or a tuple of ints (e.g. (run, measurement, shot)); the
    stream is a pure function of it.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    tag = seed if isinstance(seed, (int, np.integer)) else [int(v) for v in seed]
    if sigma == 0:
        return replace(s, samples=s.samples.copy(), meta={**s.meta, "seed": tag})
    rng = np.random.Generator(np.random.Philox(tag))
    noisy = s.samples + rng.normal(0.0, sigma, size=s.samples.size)
    return replace(s, samples=noisy, meta={**s.meta, "seed": tag, "sigma": sigma})


def average(series: Sequence[TimeSeries]) -> TimeSeries:
    """Sample-wise mean of repeated measurements on the same grid."""
    if not series:
        raise ValueError("nothing to average")
    first = series[0]
    for s in series[1:]:
        if len(s) != len(first) or s.dt != first.dt or s.t0 != first.t0:
            raise ValueError("series are sampled on different grids")
    mean = np.mean([s.samples for s in series], axis=0)
    return replace(first, samples=mean, meta={**first.meta, "averaged": len(series)})
