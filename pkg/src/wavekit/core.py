"""Kinematic state, Lorentz boosts, and natural-unit conversions.

Everything inside the package runs in natural units (hbar = c = 1):
energies, momenta and masses in eV, lengths and times in 1/eV. SI values
appear only at the boundary, through :func:`convert`.

A :class:`Kinematics` bundles the mass, mean momentum and momentum width of
a packet together with the derived quantities every other module needs:

    E_p   = sqrt(p^2 + m^2)         mean on-shell energy
    gamma = E_p / m                 Lorentz factor of the mean momentum
    v     = p / E_p                 group velocity of the carrier
    sigma_x^2 = 1 / (4 sigma_p^2)   per-axis spatial width at t = 0
    tau   = 2 sigma_x^2 m           rest-frame spreading time
    tau_L = gamma^3 tau             longitudinal time, frame-dependent model
    tau_T = gamma tau               transverse time, frame-dependent model
    tau_p = gamma tau               common time, boost-invariant model

All types are immutable after construction and safe to share across
threads; the functions below are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FrameMismatch, NonPositiveMass, NonPositiveWidth, UnsupportedUnitPair

__all__ = [
    "NARROW_WIDTH_LIMIT",
    "UNITS",
    "UnitSystem",
    "Kinematics",
    "SpacetimePoint",
    "kinematics_from",
    "boost_to_rest",
    "boost_from_rest",
    "boost_momentum",
    "convert",
]

# Width-to-mass ratio above which the quadratic energy expansion behind the
# closed-form Gaussian evaluators stops being trustworthy.
NARROW_WIDTH_LIMIT = 0.2

_SPEED_OF_LIGHT_M_S = 299792458.0  # exact
_ELEMENTARY_CHARGE_C = 1.602176634e-19  # exact
JULIAN_YEAR_S = 365.25 * 86400.0


@dataclass(frozen=True)
class UnitSystem:
    """Fixed conversion constants between natural units and SI."""

    hbar_eV_s: float = 6.582119569e-16  # hbar in eV s (CODATA)
    hbar_c_eV_m: float = 1.97326980e-7  # hbar c in eV m

    @property
    def eV_per_gram(self) -> float:
        # m c^2 / e, for one gram
        return _SPEED_OF_LIGHT_M_S**2 * 1e-3 / _ELEMENTARY_CHARGE_C


UNITS = UnitSystem()


def convert(value: float, from_unit: str, to_unit: str, units: UnitSystem = UNITS) -> float:
    """Convert between the supported natural-unit/SI pairs.

    Supported pairs (both directions): ``eV^-1 <-> s``, ``eV^-1 <-> m`` and
    ``eV <-> g`` (the last via m c^2). Anything else raises
    :class:`UnsupportedUnitPair`.
    """
    factors = {
        ("eV^-1", "s"): units.hbar_eV_s,
        ("eV^-1", "m"): units.hbar_c_eV_m,
        ("eV", "g"): 1.0 / units.eV_per_gram,
    }
    if (from_unit, to_unit) in factors:
        return value * factors[(from_unit, to_unit)]
    if (to_unit, from_unit) in factors:
        return value / factors[(to_unit, from_unit)]
    raise UnsupportedUnitPair(f"no conversion from {from_unit!r} to {to_unit!r}")


@dataclass(frozen=True, eq=False)
class Kinematics:
    """Mass, mean momentum and width of a packet plus derived scales (eV powers)."""

    m: float
    p: np.ndarray
    sigma_p: float
    E_p: float
    gamma: float
    v: np.ndarray
    sigma_x2: float
    tau: float
    tau_L: float
    tau_T: float
    tau_p: float
    axis: np.ndarray  # longitudinal unit vector (v-hat, or caller-supplied at rest)

    @property
    def p_mag(self) -> float:
        return float(np.linalg.norm(self.p))

    @property
    def v_mag(self) -> float:
        return float(np.linalg.norm(self.v))

    @property
    def sigma_x(self) -> float:
        return math.sqrt(self.sigma_x2)

    @property
    def at_rest(self) -> bool:
        return self.p_mag == 0.0

    @property
    def width_ratio(self) -> float:
        return self.sigma_p / self.m


def kinematics_from(m: float, p=(0.0, 0.0, 0.0), sigma_p: float = 1.0, axis=None) -> Kinematics:
    """Build a :class:`Kinematics` from mass, mean momentum and width.

    ``axis`` fixes the longitudinal direction when ``p = 0`` (the
    longitudinal/transverse split degenerates at rest); it defaults to z-hat
    and is ignored for moving packets, where v-hat wins.
    """
    if not (m > 0.0) or not math.isfinite(m):
        raise NonPositiveMass(f"mass must be positive and finite, got {m!r}")
    if not (sigma_p > 0.0) or not math.isfinite(sigma_p):
        raise NonPositiveWidth(f"sigma_p must be positive and finite, got {sigma_p!r}")
    p = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"momentum components must be finite, got {p!r}")

    E_p = math.hypot(float(np.linalg.norm(p)), m)
    gamma = E_p / m
    v = p / E_p
    sigma_x2 = 1.0 / (4.0 * sigma_p**2)
    tau = 2.0 * sigma_x2 * m
    if np.linalg.norm(v) > 0.0:
        ax = p / np.linalg.norm(p)
    else:
        ax = np.array([0.0, 0.0, 1.0]) if axis is None else np.asarray(axis, dtype=float).reshape(3)
        n = np.linalg.norm(ax)
        if n == 0.0:
            raise ValueError("axis must be a non-zero vector")
        ax = ax / n
    return Kinematics(
        m=float(m),
        p=p,
        sigma_p=float(sigma_p),
        E_p=E_p,
        gamma=gamma,
        v=v,
        sigma_x2=sigma_x2,
        tau=tau,
        tau_L=gamma**3 * tau,
        tau_T=gamma * tau,
        tau_p=gamma * tau,
        axis=ax,
    )


@dataclass(frozen=True, eq=False)
class SpacetimePoint:
    """One event: time t (1/eV), position x (3-vector, 1/eV), frame tag."""

    t: float
    x: np.ndarray
    frame: str = "lab"

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float).reshape(3))
        if not (math.isfinite(self.t) and np.all(np.isfinite(self.x))):
            raise ValueError("spacetime components must be finite")
        if self.frame not in ("lab", "rest"):
            raise ValueError(f"frame must be 'lab' or 'rest', got {self.frame!r}")

    @property
    def interval(self) -> float:
        return self.t**2 - float(self.x @ self.x)


def _boost(t: float, x: np.ndarray, w: np.ndarray):
    """Coordinates of (t, x) seen from a frame moving with velocity w."""
    w2 = float(w @ w)
    if w2 == 0.0:
        return t, x.copy()
    g = 1.0 / math.sqrt(1.0 - w2)
    wx = float(w @ x)
    t2 = g * (t - wx)
    x2 = x + ((g - 1.0) * wx / w2 - g * t) * w
    return t2, x2


def boost_to_rest(pt: SpacetimePoint, kin: Kinematics) -> SpacetimePoint:
    """Boost a lab-frame event into the rest frame of the packet."""
    if pt.frame != "lab":
        raise FrameMismatch(f"expected a lab-frame point, got frame={pt.frame!r}")
    t2, x2 = _boost(pt.t, pt.x, kin.v)
    return SpacetimePoint(t=t2, x=x2, frame="rest")


def boost_from_rest(pt: SpacetimePoint, kin: Kinematics) -> SpacetimePoint:
    """Inverse of :func:`boost_to_rest`."""
    if pt.frame != "rest":
        raise FrameMismatch(f"expected a rest-frame point, got frame={pt.frame!r}")
    t2, x2 = _boost(pt.t, pt.x, -kin.v)
    return SpacetimePoint(t=t2, x=x2, frame="lab")


def boost_momentum(k: np.ndarray, kin: Kinematics, to_lab: bool = True) -> np.ndarray:
    """Boost on-shell momentum vectors (mass from ``kin``) between frames.

    ``k`` has shape (..., 3). ``to_lab=True`` maps rest-frame momenta k* to
    lab momenta via k_L = gamma (k*_L + v E*), k_T = k*_T.
    """
    k = np.asarray(k, dtype=float)
    v = kin.v_mag
    if v == 0.0:
        return k.copy()
    sign = 1.0 if to_lab else -1.0
    ax = kin.axis
    kL = k @ ax
    E = np.sqrt(np.sum(k * k, axis=-1) + kin.m**2)
    kL_new = kin.gamma * (kL + sign * v * E)
    return k + (kL_new - kL)[..., None] * ax
