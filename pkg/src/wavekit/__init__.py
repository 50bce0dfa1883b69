"""wavekit: free relativistic wave packets.

Models for Gaussian (frame-dependent and boost-invariant) and tabulated
isotropic momentum envelopes, their exact spacetime fields and conserved
currents, the dispersion law sigma_x^2(t) = sigma_x^2 + sigma_v^2 t^2, and
the inverse-square far-field behavior of time-integrated flux and
probability densities. Natural units throughout: eV and 1/eV.
"""

__version__ = "0.1.0"

from .core import (
    NARROW_WIDTH_LIMIT,
    UNITS,
    Kinematics,
    SpacetimePoint,
    UnitSystem,
    boost_from_rest,
    boost_momentum,
    boost_to_rest,
    convert,
    kinematics_from,
)
from .errors import (
    ConvergenceError,
    DivergentNorm,
    FrameMismatch,
    GridTooCoarse,
    MaxSubdivisions,
    MethodUnavailable,
    NegativeAmplitude,
    NonFiniteIntegrand,
    NonMonotoneGrid,
    NonPositiveMass,
    NonPositiveWidth,
    NotNormalized,
    NotRestFrame,
    TailNotConverged,
    TooFewSamples,
    UnsupportedUnitPair,
    ValidationError,
    WavekitError,
)
from .models import (
    PacketModel,
    gaussian_cov_model,
    gaussian_noncov_model,
    load_envelope_csv,
    model_from_table,
    normalize,
    phi_gaussian_cov,
    phi_gaussian_noncov,
    spatial_variance_integral,
)
from .quadrature import (
    QuadResult,
    expectation,
    integrate_adaptive,
    integrate_oscillatory_sin,
)
from .observables import (
    DispersionCurve,
    FluxDensity4,
    MomentsReport,
    dispersion_curve,
    dump_fields_csv,
    flux4,
    measured_density_moments,
    moments,
    psi,
    trajectory,
)
from .asymptotics import (
    AsymptoteRow,
    DispersionTimeRow,
    asymptote_rows,
    continuity_residual,
    continuity_residual_from_fields,
    dispersion_times_table,
    sphere_flux_balance,
    time_integrated_flux,
    time_integrated_flux_spectral,
    time_integrated_probability,
    write_asymptote_csv,
    write_dispersion_times_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
