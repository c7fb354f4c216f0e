"""Harmonic inversion of uniformly sampled real signals.

Frequencies come from a Hankel matrix pencil, amplitudes from a linear least
squares fit on the (possibly confluent) exponential basis.  The extended
variant merges clusters of nearly coincident frequencies into single modes with
polynomial amplitudes, which keeps the amplitudes bounded at exceptional points
where the simple-mode fit diverges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm, hankel, qr
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .propagator import Mode, ModeSet, TimeSeries

__all__ = [
    "InversionConfig",
    "InversionReport",
    "SignalTooShort",
    "pencil_frequencies",
    "refine_poles",
    "fit_amplitudes",
    "cluster_frequencies",
    "standard_invert",
    "extended_invert",
    "frequency_gap_scan",
    "HarmonicInversion",
]

MAX_PENCIL_DEPTH = 100
# confluent refit may be this much worse than the simple fit and still be accepted
MERGE_SLACK = 2.0
# log of the largest growth across the record accepted for a fitted pole
GROWTH_LIMIT = 50.0


class SignalTooShort(ValueError):
    pass


@dataclass(frozen=True)
class InversionConfig:
    """Inversion settings.

    ``refine=True`` polishes the pencil estimate by nonlinear least squares on
    the full signal (see :func:`refine_poles`); the pencil then runs on every
    ``decimate``-th sample (default: enough to keep about 400 samples), where
    it is better conditioned for densely sampled noisy data.

    ``degeneracy_tol`` is the relative gap (times the dominant |omega|) below which
    two frequencies are treated as confluent.  A cluster of ``m`` frequencies is
    confluent when its spread is below ``degeneracy_tol ** (2 / m)`` of the
    dominant |omega|, i.e. when it is within the same characteristic-polynomial
    perturbation of an exact m-fold root.
    """

    model_order: int = 3
    degeneracy_tol: float = 1e-6
    rank_tol: float = 1e-10
    offset: bool = False
    pencil_depth: Optional[int] = None
    refine: bool = False
    decimate: Optional[int] = None

    def __post_init__(self):
        if self.model_order < 1:
            raise ValueError("model_order must be >= 1")
        if self.decimate is not None and self.decimate < 1:
            raise ValueError("decimate must be >= 1")
        if not (self.degeneracy_tol > 0 and self.rank_tol > 0):
            raise ValueError("tolerances must be > 0")


@dataclass
class InversionReport:
    modes: ModeSet
    residual_rms: float
    min_gap: float
    amp_norm: float
    subspace_rank: int
    raw_frequencies: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=complex))
    offset: float = 0.0
    coefficients: Optional[np.ndarray] = None

    @property
    def frequencies(self) -> np.ndarray:
        """Fitted frequencies of the decaying modes, repeated by multiplicity."""
        return self.modes.frequencies

    @property
    def multiplicities(self) -> list:
        return [m.multiplicity for m in self.modes.modes]


def _min_gap(freqs: np.ndarray) -> float:
    if freqs.size < 2:
        return 0.0
    return float(min(abs(a - b) for a, b in combinations(freqs, 2)))


def _check_length(n: int, cfg: InversionConfig) -> None:
    need = 2 * cfg.model_order + 1 + (1 if cfg.offset else 0)
    if n < need:
        raise SignalTooShort(f"signal has {n} samples, need at least {need} for order {cfg.model_order}")


def pencil_frequencies(
    x: np.ndarray, dt: float, order: int, depth: Optional[int] = None, rank_tol: float = 1e-10
) -> tuple[np.ndarray, int, np.ndarray]:
    """Matrix-pencil estimate of ``order`` complex frequencies.

    Returns ``(omega, subspace_rank, char_coeffs)`` where ``char_coeffs`` are the
    coefficients of the monic polynomial in the pencil eigenvalues ``z = exp(-1j omega dt)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    L = depth or min(max(n // 3, order + 1), MAX_PENCIL_DEPTH)
    L = max(order + 1, min(L, n - order - 1))
    Y = hankel(x[: n - L], x[n - L - 1 :])
    # the right singular vectors of Y are those of its R factor, which is much smaller
    _, s, Vh = np.linalg.svd(qr(Y, mode="r", check_finite=False)[0], full_matrices=False)
    rank = int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0
    V = Vh[:order].T
    A = np.linalg.lstsq(V[:-1], V[1:], rcond=None)[0]
    z = np.linalg.eigvals(A)
    # symmetric functions of z are well conditioned even when roots coalesce
    coeffs = np.poly(A)
    omega = 1j * np.log(z.astype(complex)) / dt
    return omega, rank, coeffs


def _basis(times: np.ndarray, spec: Sequence[tuple[complex, int]]) -> np.ndarray:
    cols = []
    for omega, mult in spec:
        e = np.exp(-1j * omega * times)
        for a in range(mult):
            cols.append(times**a * e)
    return np.column_stack(cols)


def _pair_index(omegas: Sequence[complex], tol: float) -> list:
    """Index of the partner -conj(omega) of each frequency (itself for pure decays)."""
    out = []
    for w in omegas:
        target = -np.conj(w)
        dist = [abs(target - v) for v in omegas]
        j = int(np.argmin(dist))
        out.append(j if dist[j] <= tol else None)
    return out


def fit_amplitudes(
    s: TimeSeries, spec: Sequence[tuple[complex, int]], offset: bool = False
) -> tuple[list, float, float]:
    """Least-squares amplitudes for modes ``spec = [(omega, multiplicity), ...]``.

    Returns (modes, offset_value, residual_rms).  Columns are normalized before
    the solve; conjugate partners get conjugate amplitudes.
    """
    t = s.times
    with np.errstate(over="ignore", invalid="ignore"):
        B = _basis(t, spec)
    if not np.all(np.isfinite(B)):
        raise ValueError("a mode grows beyond floating-point range over the record; not a decaying signal")
    if offset:
        B = np.column_stack([B, np.ones_like(t)])
    norms = np.linalg.norm(B, axis=0)
    norms[norms == 0] = 1.0
    coef = np.linalg.lstsq(B / norms, s.samples.astype(complex), rcond=None)[0] / norms
    recon = B @ coef
    resid = float(np.sqrt(np.mean((recon.real - s.samples) ** 2)))
    const = float(coef[-1].real) if offset else 0.0
    blocks = []
    k = 0
    for omega, mult in spec:
        blocks.append(coef[k : k + mult])
        k += mult
    omegas = [w for w, _ in spec]
    scale = max((abs(w) for w in omegas), default=1.0) or 1.0
    partners = _pair_index(omegas, 1e-9 * scale)
    modes = []
    for i, (omega, mult) in enumerate(spec):
        amp = blocks[i]
        j = partners[i]
        if j is not None and spec[j][1] == mult:
            amp = 0.5 * (amp + np.conj(blocks[j]))
        modes.append(Mode(omega, amp))
    return modes, const, resid


def _solution_basis(rate_coeffs: np.ndarray, dt: float, n: int) -> np.ndarray:
    """(n, k) fundamental solutions of the linear ODE with characteristic polynomial
    ``m^k + c_1 m^(k-1) + ... + c_k``, sampled at k * dt.

    Built from powers of the companion matrix exponential, so it stays well
    conditioned when roots coalesce.
    """
    k = rate_coeffs.size
    C = np.zeros((k, k))
    C[:-1, 1:] = np.eye(k - 1)
    C[-1] = -rate_coeffs[::-1]
    out = np.empty((n, k))
    out[0] = np.eye(k)[0]
    P = expm(C * dt).T
    filled = 1
    while filled < n:
        take = min(filled, n - filled)
        out[filled : filled + take] = out[:take] @ P
        filled += take
        P = P @ P
    return out


def refine_poles(s: TimeSeries, rate_coeffs: np.ndarray, offset: bool = False) -> tuple[np.ndarray, float]:
    """Least-squares polish of the characteristic polynomial of a real signal.

    ``rate_coeffs`` are the real coefficients (c_1, ..., c_k) of the monic
    polynomial whose roots m are the decay rates (omega = 1j m).  The linear
    amplitudes are projected out (variable projection); returns the refined
    coefficients and the residual RMS.
    """
    x0 = np.asarray(rate_coeffs, dtype=float)
    y = s.samples
    n = y.size
    bad = np.full(n, 1e3 * (np.max(np.abs(y)) + 1.0))

    def residual(c):
        if np.any(np.roots(np.r_[1.0, c]).real * s.dt * n > GROWTH_LIMIT):
            return bad
        B = _solution_basis(c, s.dt, n)
        if offset:
            B = np.column_stack([B, np.ones(n)])
        if not np.all(np.isfinite(B)):
            return bad
        coef = np.linalg.lstsq(B, y, rcond=None)[0]
        return B @ coef - y

    scale = np.abs(x0) + 1e-12 * (np.max(np.abs(x0)) + 1e-300)
    res = least_squares(residual, x0, x_scale=scale, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    r0 = residual(x0)
    if not np.all(np.isfinite(res.x)) or np.sum(res.fun**2) > np.sum(r0**2):
        return x0, float(np.sqrt(np.mean(r0**2)))
    return res.x, float(np.sqrt(np.mean(res.fun**2)))


def _standard_from(s: TimeSeries, cfg: InversionConfig):
    _check_length(len(s), cfg)
    x = s.samples
    if cfg.offset:
        # differencing removes the constant and keeps the decaying poles
        x = np.diff(x)
    step = 1
    if cfg.refine:
        step = cfg.decimate or max(1, x.size // 400)
        step = max(1, min(step, x.size // (2 * cfg.model_order + 2)))
    omega, rank, coeffs = pencil_frequencies(x[::step], s.dt * step, cfg.model_order, cfg.pencil_depth, cfg.rank_tol)
    if cfg.refine:
        m = -1j * omega
        # a growing pole from noise would make the polish diverge; start from its decaying mirror
        m = np.where(m.real > 0, -np.conj(m), m)
        rates = np.poly(m).real[1:]
        rates, _ = refine_poles(s, rates, cfg.offset)
        m = np.roots(np.r_[1.0, rates]).astype(complex)
        omega = 1j * m
        coeffs = np.poly(np.exp(m * s.dt))
    span = s.dt * len(s)
    runaway = omega.imag * span > GROWTH_LIMIT
    if np.any(runaway):
        # a bounded record cannot hold a mode that grows by e^50 across it: mirror such noise poles
        omega = np.where(runaway, np.conj(omega), omega)
        coeffs = np.poly(np.exp(-1j * omega * s.dt))
    return omega, rank, coeffs


def _report(s, cfg, omega_raw, rank, coeffs, spec):
    modes, const, resid = fit_amplitudes(s, spec, cfg.offset)
    amp_norm = float(sum(np.sum(np.abs(m.amplitudes)) for m in modes))
    expanded = np.array([w for w, mult in spec for _ in range(mult)], dtype=complex)
    return InversionReport(
        modes=ModeSet(modes),
        residual_rms=resid,
        min_gap=_min_gap(expanded),
        amp_norm=amp_norm,
        subspace_rank=rank,
        raw_frequencies=omega_raw,
        offset=const,
        coefficients=coeffs,
    )


def standard_invert(s: TimeSeries, cfg: InversionConfig = InversionConfig()) -> InversionReport:
    """Fit ``model_order`` simple exponential modes.

    A rank collapse of the Hankel matrix below the model order is not an
    error; it shows up in ``subspace_rank`` and is the EP signature.
    """
    omega, rank, coeffs = _standard_from(s, cfg)
    return _report(s, cfg, omega, rank, coeffs, [(w, 1) for w in omega])


def cluster_frequencies(omega: np.ndarray, rel_tol: float) -> list:
    """Group frequencies into confluent clusters (lists of indices).

    Single linkage at the loosest threshold for the largest possible cluster,
    then every cluster of size m must have spread <= rel_tol**(2/m) * max|omega|;
    clusters that fail are split again at the next-tighter level.
    """
    omega = np.asarray(omega, dtype=complex)
    scale = float(np.max(np.abs(omega))) if omega.size else 0.0
    if scale == 0:
        return [[i] for i in range(omega.size)] if omega.size else []

    def linkage(idx: list, thr: float) -> list:
        groups = [[i] for i in idx]
        merged = True
        while merged:
            merged = False
            for a, b in combinations(range(len(groups)), 2):
                if min(abs(omega[i] - omega[j]) for i in groups[a] for j in groups[b]) <= thr:
                    groups[a] = groups[a] + groups[b]
                    del groups[b]
                    merged = True
                    break
        return groups

    def spread(group: list) -> float:
        return max((abs(omega[i] - omega[j]) for i, j in combinations(group, 2)), default=0.0)

    def split(idx: list, m: int) -> list:
        if m < 2 or len(idx) < 2:
            return [[i] for i in idx]
        out = []
        for g in linkage(idx, scale * rel_tol ** (2.0 / m)):
            if len(g) == 1:
                out.append(g)
            elif len(g) <= m and spread(g) <= scale * rel_tol ** (2.0 / len(g)):
                out.append(sorted(g))
            else:
                out.extend(split(g, min(m, len(g)) - 1))
        return out

    return sorted(split(list(range(omega.size)), omega.size), key=lambda g: g[0])


def _centre(omega: np.ndarray, group: list, tol: float) -> complex:
    centre = complex(np.mean(omega[group]))
    if abs(centre.real) <= tol * max(abs(centre), 1e-300):
        # a self-conjugate cluster stays a pure decay
        centre = 1j * centre.imag
    return centre


def extended_invert(s: TimeSeries, cfg: InversionConfig = InversionConfig()) -> InversionReport:
    """Confluent fit: merge clusters of near-coincident frequencies into polynomial modes.

    Clusters inside ``degeneracy_tol`` are always merged.  Looser candidate clusters
    (spread within ``sqrt(degeneracy_tol) ** (2 / m)``) are merged when the confluent
    refit is as good as the simple-mode fit, i.e. when the data cannot tell the two
    models apart.
    """
    omega, rank, coeffs = _standard_from(s, cfg)
    strict = cluster_frequencies(omega, cfg.degeneracy_tol)
    groups = [g for g in strict]
    simple = None
    for cand in cluster_frequencies(omega, math.sqrt(cfg.degeneracy_tol)):
        if len(cand) < 2 or cand in groups:
            continue
        if simple is None:
            simple = fit_amplitudes(s, [(w, 1) for w in omega], cfg.offset)[2]
        trial = [g for g in groups if not set(g) & set(cand)] + [cand]
        spec = [(_centre(omega, g, cfg.degeneracy_tol), len(g)) for g in sorted(trial)]
        resid = fit_amplitudes(s, spec, cfg.offset)[2]
        floor = cfg.rank_tol * float(np.max(np.abs(s.samples)))
        if resid <= max(MERGE_SLACK * simple, floor):
            groups = trial
    spec = [(_centre(omega, g, cfg.degeneracy_tol), len(g)) for g in sorted(groups)]
    return _report(s, cfg, omega, rank, coeffs, spec)


def frequency_gap_scan(
    reports: Sequence[InversionReport], parameters: Sequence[float]
) -> list[tuple[float, float, float]]:
    """Rows (parameter, min_gap, amp_norm) for thresholding or plotting a 1-D scan."""
    if not reports:
        raise ValueError("no reports to tabulate")
    if len(reports) != len(parameters):
        raise ValueError("one parameter value per report is required")
    return [(float(p), r.min_gap, r.amp_norm) for p, r in zip(parameters, reports)]


def _as_series(X, dt: float, t0: float) -> TimeSeries:
    if isinstance(X, TimeSeries):
        return X
    x = np.asarray(X, dtype=float)
    if x.ndim == 2 and 1 in x.shape:
        x = x.ravel()
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    return TimeSeries(t0=t0, dt=dt, samples=x)


class HarmonicInversion(BaseEstimator):
    """Estimator wrapper: ``fit`` a sampled signal, ``predict`` it at arbitrary times.

    Parameters mirror :class:`InversionConfig`; ``extended=True`` selects the
    confluent fit.  ``dt`` and ``t0`` are only used when ``fit`` gets a bare array.

    >>> est = HarmonicInversion(model_order=1, dt=0.5).fit(np.exp(-0.1 * 0.5 * np.arange(50)))
    >>> round(est.frequencies_[0].imag, 12)
    -0.1
    """

    def __init__(
        self,
        model_order: int = 3,
        extended: bool = False,
        degeneracy_tol: float = 1e-6,
        rank_tol: float = 1e-10,
        offset: bool = False,
        pencil_depth: Optional[int] = None,
        dt: float = 1.0,
        t0: float = 0.0,
    ):
        self.model_order = model_order
        self.extended = extended
        self.degeneracy_tol = degeneracy_tol
        self.rank_tol = rank_tol
        self.offset = offset
        self.pencil_depth = pencil_depth
        self.dt = dt
        self.t0 = t0

    def _config(self) -> InversionConfig:
        return InversionConfig(
            model_order=self.model_order,
            degeneracy_tol=self.degeneracy_tol,
            rank_tol=self.rank_tol,
            offset=self.offset,
            pencil_depth=self.pencil_depth,
        )

    def fit(self, X, y=None):
        series = _as_series(X, self.dt, self.t0)
        invert = extended_invert if self.extended else standard_invert
        self.report_ = invert(series, self._config())
        self.modes_ = self.report_.modes
        self.frequencies_ = self.report_.frequencies
        self.residual_rms_ = self.report_.residual_rms
        return self

    def predict(self, X) -> np.ndarray:
        """Reconstructed (real) signal at times ``X``."""
        check_is_fitted(self, "report_")
        t = np.asarray(X, dtype=float).ravel()
        return self.modes_.evaluate(t).real + self.report_.offset

    def score(self, X, y=None) -> float:
        """Negative RMS reconstruction error on a signal."""
        check_is_fitted(self, "report_")
        series = _as_series(X, self.dt, self.t0)
        return -float(math.sqrt(np.mean((self.predict(series.times) - series.samples) ** 2)))
