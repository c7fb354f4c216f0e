"""Exceptional points of the driven, damped Bloch equations.

The three-level rate generator of the Bloch vector has second and third order
exceptional points in the (detuning, drive) plane.  This package simulates the
polarization signal, extracts its complex frequencies by harmonic inversion,
locates the exceptional points from those frequencies and turns the third order
point into estimates of the transition frequency, dipole strength and
relaxation rate.
"""
from .bloch import (
    ControlParams,
    EPAuxiliaries,
    RateParams,
    SpectrumTriple,
    build_matrix,
    char_coeffs,
    classify_region,
    discriminant_pq,
    eigenvalues_closed_form,
    ep3_locus,
    rates_to_controls,
    region_discriminant,
)
from .estimator import (
    BlochParameterEstimator,
    LabExperiment,
    PhysicalParams,
    branch_probe,
    estimate_at_ep3,
    gamma_from_frequencies,
)
from .harminv import (
    HarmonicInversion,
    InversionConfig,
    InversionReport,
    SignalTooShort,
    extended_invert,
    frequency_gap_scan,
    standard_invert,
)
from .locate import (
    EPReport,
    Objective,
    ValleyConfig,
    evaluate_F,
    map_grid,
    root_search_pq,
    scan_ep2,
    seed_interior,
    surface_root_search,
    valley_ascend,
)
from .propagator import BlochState, Mode, ModeSet, TimeSeries, add_noise, average, simulate, synthesize, trajectory

__version__ = "0.1.0"
