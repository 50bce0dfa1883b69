"""Far-field behavior of the packet: time-integrated flux and probability.

A dispersing packet sweeps past any fixed point exactly once, so the flux
integrated over all time reproduces the classical inverse-square law

    Phi(x) = int_0^inf j(t, x) dt  ->  x / (4 pi |x|^3)

far from the origin (in the rest frame), and the time-integrated density
picks up the mean inverse speed:

    P(x) = int_0^inf rho(t, x) dt  ->  <1/|v|> / (4 pi |x|^2).

Each quantity has two independent routes that must agree:

* time-domain -- brute-force quadrature of j or rho over t, with an audited
  power-law tail estimate beyond the integration window;
* spectral -- the singularity-free double-spectral form of the time
  integral, where the would-be principal-value poles at E_k = E_q are
  cancelled by the sin((k -/+ q)|x|) numerators.

The module also carries the continuity-equation residual, the initial
probability / integrated-flux sphere balance, and the dispersion-time table
(rest/longitudinal/transverse spreading times in seconds for a list of
masses and energies).

All results here are rest-frame quantities; moving packets raise
:class:`NotRestFrame`. Rows of table/asymptote computations are independent
and safe to compute in parallel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .core import JULIAN_YEAR_S, UNITS, SpacetimePoint, UnitSystem
from .errors import NotRestFrame, TailNotConverged, ValidationError
from .models import PacketModel
from .observables import (
    RestFieldProfile,
    _closed_flux_arrays,
    _closed_form_available,
    _resolve_method,
    _simpson,
    flux4,
    moments,
)
from .quadrature import integrate_adaptive, integrate_oscillatory_cos

__all__ = [
    "AsymptoteRow",
    "DispersionTimeRow",
    "time_integrated_flux",
    "time_integrated_flux_spectral",
    "time_integrated_probability",
    "continuity_residual",
    "continuity_residual_from_fields",
    "sphere_flux_balance",
    "dispersion_times_table",
    "asymptote_rows",
    "write_asymptote_csv",
    "write_dispersion_times_csv",
]


@dataclass(frozen=True, eq=False)
class AsymptoteRow:
    """Normalized far-field quantities at one radius: both tend to 1."""

    r: float
    flux_norm: float
    prob_norm: float
    method: str
    t_max: float
    err: float


@dataclass(frozen=True, eq=False)
class DispersionTimeRow:
    """Spreading times in seconds for one (mass, gamma) and one model family."""

    mass_eV: float
    gamma: float
    model: str
    tau_L_s: float | None
    tau_T_s: float | None
    tau_p_s: float | None


def _require_rest(model: PacketModel) -> None:
    if not model.kin.at_rest:
        raise NotRestFrame("time-integrated asymptotics are defined in the packet rest frame")


# ---------------------------------------------------------------------------
# time-domain route


def _tail_fit(f, T: float):
    """Fit |f| ~ A t^-beta on [T/2, T]; return (remainder past T, beta)."""
    ts = T * np.geomspace(0.5, 1.0, 24)
    ys = np.abs(f(ts))
    good = ys > 0.0
    if good.sum() < 8:
        return 0.0, np.inf  # tail already underflowed
    coef = np.polyfit(np.log(ts[good]), np.log(ys[good]), 1)
    beta = -coef[0]
    if beta <= 1.2:
        return math.inf, beta
    f_T = float(np.abs(f(np.array([T]))[0]))
    return f_T * T / (beta - 1.0), beta


def _integrate_time_with_tail(make_f, T0: float, tol: float, max_doublings: int = 6):
    """int_0^inf f dt: adaptive on [0, T] plus an audited power-law remainder.

    ``make_f(T)`` returns the integrand valid out to T (fixed-node field
    evaluators are rebuilt when the window grows). T is extended until the
    fitted remainder is below 0.1% of the accumulated integral; the
    remainder is then added and counted toward the error.
    """
    T = T0
    remainder = math.inf
    for _ in range(max_doublings):
        f = make_f(T)
        res = integrate_adaptive(f, 0.0, T, tol)
        body = float(np.real(res.value))
        remainder, _beta = _tail_fit(f, T)
        if math.isfinite(remainder) and remainder <= 1e-3 * max(abs(body), 1e-300):
            return body + remainder, res.error_estimate + 0.5 * remainder, T
        T *= 2.0
    raise TailNotConverged(f"time integral tail still {remainder:.3g} past T={T:.3g}")


def _time_domain_flux(model: PacketModel, r: float, t_max, field_method: str, rtol: float):
    """(magnitude, err, T_used) of int j_r dt at radius r."""
    kin = model.kin
    if field_method == "closed-form" or (field_method == "auto" and _closed_form_available(model)):
        # the closed-form current integrates in closed form: a regularized
        # lower incomplete gamma of r^2 / 2 sigma_x^2
        a = r * r / (2.0 * kin.sigma_x2)
        mag = model.scale**2 * float(gammainc(1.5, a)) / (4.0 * np.pi * r * r)
        err = mag * (4.0 * kin.width_ratio**2 + 1e-12)
        return mag, err, math.inf

    mom = moments(model)
    v_typ = math.sqrt(max(mom.mean_v2, 1e-300))
    T0 = 20.0 * r / v_typ if t_max == "auto" else float(t_max)

    def make_jr(T):
        prof = RestFieldProfile(model, r, T)

        def jr(t):
            _, out = prof.rho_j_t(np.asarray(t, dtype=float), r)
            return out

        return jr

    # the integral itself is ~ 1/(4 pi r^2); anchor the tolerance to that
    val, err, T = _integrate_time_with_tail(make_jr, T0, rtol / (4.0 * np.pi * r * r))
    return val, err, T


def time_integrated_flux(model: PacketModel, x, t_max="auto", *, field_method: str = "auto",
                         rtol: float = 1e-6) -> np.ndarray:
    """Phi(x) = int_0^inf j(t, x) dt for a rest-frame packet (radial by symmetry)."""
    _require_rest(model)
    x = np.asarray(x, dtype=float).reshape(3)
    r = float(np.linalg.norm(x))
    if r <= 0.0:
        raise ValidationError("need |x| > 0")
    mag, _err, _T = _time_domain_flux(model, r, t_max, field_method, rtol)
    return mag * x / r


def _sin_over(z_num_r, dk):
    """sin(dk * r) / dk with the removable point handled by its series."""
    out = np.empty_like(dk)
    small = np.abs(dk) * z_num_r < 1e-4
    big = ~small
    out[big] = np.sin(dk[big] * z_num_r) / dk[big]
    z = dk[small] * z_num_r
    z2 = z * z
    out[small] = z_num_r * (1.0 - z2 / 6.0 * (1.0 - z2 / 20.0 * (1.0 - z2 / 42.0 * (1.0 - z2 / 72.0))))
    return out


def time_integrated_flux_spectral(model: PacketModel, r: float, rtol: float = 1e-6) -> float:
    """Radial magnitude of Phi via the double-spectral form of the time integral.

    The kernel [sin((k+q)r)/(k+q) - sin((k-q)r)/(k-q)] is regular on the
    diagonal, so no principal-value machinery is needed.
    """
    mag, _err = _flux_spectral(model, r, rtol)
    return mag


def _flux_spectral(model: PacketModel, r: float, rtol: float):
    _require_rest(model)
    if r <= 0.0:
        raise ValidationError("need r > 0")
    lo, hi = model.radial_support()
    m = model.kin.m
    # the limit value of the double integral is -8 pi^3 for a unit-norm packet
    expected = 8.0 * np.pi**3
    inner_tol = rtol * expected * 0.3 / max(hi - lo, 1e-300)
    outer_tol = rtol * expected * 0.5

    def outer(ks):
        ks = np.asarray(ks)
        out = np.empty(ks.shape)
        for i, k in enumerate(ks):
            E_k = math.hypot(k, m)

            def inner(q):
                E_q = np.sqrt(q * q + m * m)
                w = q * model.phi_rest_radial(q) * (E_k + E_q) / E_q
                bracket = _sin_over(r, k + q) - _sin_over(r, k - q)
                return w * bracket

            out[i] = integrate_adaptive(inner, lo, hi, inner_tol).value
        return out * ks * model.phi_rest_radial(ks) / np.sqrt(ks * ks + m * m)

    res = integrate_adaptive(outer, lo, hi, outer_tol)
    mag = -float(np.real(res.value)) / (32.0 * np.pi**4 * r * r)
    err = (res.error_estimate + inner_tol * (hi - lo)) / (32.0 * np.pi**4 * r * r)
    return mag, err


def time_integrated_probability(model: PacketModel, r: float, method: str = "spectral",
                                t_max="auto", rtol: float = 1e-6):
    """P(x) = int_0^inf rho(t, x) dt at radius r (rest frame).

    The spectral route integrates k phi^2 sin^2(k r) directly, with the
    sin^2 split as (1 - cos 2kr)/2 and the oscillatory part handled by the
    cosine Filon rule.
    """
    _require_rest(model)
    if r <= 0.0:
        raise ValidationError("need r > 0")
    lo, hi = model.radial_support()

    if method == "spectral":
        def g(k):
            return k * model.phi_rest_radial(k) ** 2

        flat = integrate_adaptive(g, lo, hi, rtol)
        osc = integrate_oscillatory_cos(g, 2.0 * r, lo, hi, rtol * abs(flat.value))
        pref = 1.0 / (2.0 * (2.0 * np.pi) ** 3 * r * r)
        return pref * float(np.real(flat.value) - np.real(osc.value))

    if method == "time-domain":
        mom = moments(model)
        v_typ = math.sqrt(max(mom.mean_v2, 1e-300))
        T0 = 20.0 * r / v_typ if t_max == "auto" else float(t_max)

        def make_rho(T):
            prof = RestFieldProfile(model, r, T)

            def rho_t(t):
                out, _ = prof.rho_j_t(np.asarray(t, dtype=float), r)
                return out

            return rho_t

        tol = rtol * mom.mean_inv_speed / (4.0 * np.pi * r * r)
        val, _err, _T = _integrate_time_with_tail(make_rho, T0, tol)
        return val

    raise ValidationError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# continuity and sphere balance


def continuity_residual_from_fields(rho_fn, j_fn, pt: SpacetimePoint, h_t: float, h_x: float) -> float:
    """|d rho/dt + div j| / (|d rho/dt| + |div j| + floor) by 5-point stencils.

    ``rho_fn(t, x)`` and ``j_fn(t, x)`` are arbitrary field callables; the
    floor keeps the ratio defined where both terms vanish.
    """
    t, x = pt.t, pt.x

    def d5(vals, h):
        return (-vals[3] + 8.0 * vals[2] - 8.0 * vals[1] + vals[0]) / (12.0 * h)

    rho_sten = [rho_fn(t + s * h_t, x) for s in (-2.0, -1.0, 1.0, 2.0)]
    drho_dt = d5(rho_sten, h_t)
    div_j = 0.0
    j_mag = 0.0
    for i in range(3):
        e = np.zeros(3)
        e[i] = h_x
        sten = [j_fn(t, x + s * e) for s in (-2.0, -1.0, 1.0, 2.0)]
        div_j += d5([s[i] for s in sten], h_x)
        j_mag = max(j_mag, max(float(np.max(np.abs(s))) for s in sten))
    floor = 1e-12 * (max(abs(v) for v in rho_sten) / h_t + j_mag / h_x + 1e-300)
    return abs(drho_dt + div_j) / (abs(drho_dt) + abs(div_j) + floor)


def continuity_residual(model: PacketModel, pt: SpacetimePoint, h_t: float | None = None,
                        h_x: float | None = None, method: str = "auto",
                        rtol: float | None = None) -> float:
    """Relative violation of d rho/dt + div j = 0 at one event.

    The direct superposition solves the wave equation exactly, so its
    residual is pure finite-difference noise; the closed forms satisfy the
    equation to the order of their narrow-width expansion.
    """
    kin = model.kin
    how = _resolve_method(model, method)
    mom = moments(model)
    sig_t = math.sqrt(mom.sigma_x2 + mom.sigma_v2 * pt.t**2)
    if h_x is None:
        h_x = 5e-3 * sig_t
    if h_t is None:
        h_t = 5e-3 * min(kin.tau_T, kin.tau_p)
    if rtol is None:
        rtol = 1e-11 if how == "quadrature" else 1e-8

    def rho_fn(t, x):
        return flux4(model, SpacetimePoint(t=t, x=x), method=how, rtol=rtol).rho

    def j_fn(t, x):
        return flux4(model, SpacetimePoint(t=t, x=x), method=how, rtol=rtol).j

    return continuity_residual_from_fields(rho_fn, j_fn, pt, h_t, h_x)


def sphere_flux_balance(model: PacketModel, r: float, t_max="auto", *, rtol: float = 1e-6):
    """(P(t=0, r), 4 pi r^2 |Phi(r)|): both approach 1 once r contains the packet."""
    _require_rest(model)
    if r <= 0.0:
        raise ValidationError("need r > 0")
    how = _resolve_method(model, "auto")
    n_r = 2001
    rr = np.linspace(0.0, r, n_r)
    if how == "closed-form":
        rho, _, _ = _closed_flux_arrays(model, 0.0, rr[:, None] * model.kin.axis[None, :])
    else:
        prof = RestFieldProfile(model, r, 0.0)
        p, dt, _ = prof.fields_r(0.0, rr)
        rho = -2.0 * np.imag(np.conj(p) * dt)
    lhs = _simpson(4.0 * np.pi * rr * rr * rho, rr)
    mag, _err = _flux_spectral(model, r, rtol)
    rhs = 4.0 * np.pi * r * r * abs(mag)
    return lhs, rhs


# ---------------------------------------------------------------------------
# dispersion-time table


def dispersion_times_table(entries, units: UnitSystem = UNITS) -> list[DispersionTimeRow]:
    """Spreading times for (mass_eV, energy_eV, sigma_x_m) triples.

    Emits one frame-dependent row (tau_L = gamma^3 tau, tau_T = gamma tau)
    and one boost-invariant row (tau_p = gamma tau) per entry, in seconds.
    """
    rows = []
    for mass_eV, energy_eV, sigma_x_m in entries:
        if mass_eV <= 0.0 or energy_eV < mass_eV or sigma_x_m <= 0.0:
            raise ValidationError(f"bad table entry ({mass_eV!r}, {energy_eV!r}, {sigma_x_m!r})")
        gamma = energy_eV / mass_eV
        sigma_x_nat = sigma_x_m / units.hbar_c_eV_m
        tau_s = 2.0 * sigma_x_nat**2 * mass_eV * units.hbar_eV_s
        rows.append(DispersionTimeRow(mass_eV=mass_eV, gamma=gamma, model="non-covariant",
                                      tau_L_s=gamma**3 * tau_s, tau_T_s=gamma * tau_s, tau_p_s=None))
        rows.append(DispersionTimeRow(mass_eV=mass_eV, gamma=gamma, model="covariant",
                                      tau_L_s=None, tau_T_s=None, tau_p_s=gamma * tau_s))
    return rows


def seconds_to_years(t_s: float) -> float:
    return t_s / JULIAN_YEAR_S


# ---------------------------------------------------------------------------
# row assembly and CSV output


def asymptote_rows(model: PacketModel, radii, methods=("time-domain", "spectral"), *,
                   t_max="auto", field_method: str = "auto", rtol: float = 1e-6) -> list[AsymptoteRow]:
    """Normalized flux and probability asymptotes at each radius and method."""
    _require_rest(model)
    mom = moments(model)
    rows = []
    for r in radii:
        r = float(r)
        for method in methods:
            if method == "time-domain":
                mag, err, T = _time_domain_flux(model, r, t_max, field_method, rtol)
                p_val = time_integrated_probability(model, r, "time-domain", t_max, rtol)
                t_used = T
            elif method == "spectral":
                mag, err = _flux_spectral(model, r, rtol)
                p_val = time_integrated_probability(model, r, "spectral", rtol=rtol)
                t_used = math.inf
            else:
                raise ValidationError(f"unknown method {method!r}")
            rows.append(AsymptoteRow(
                r=r,
                flux_norm=4.0 * np.pi * r * r * abs(mag),
                prob_norm=4.0 * np.pi * r * r * p_val / mom.mean_inv_speed,
                method=method,
                t_max=t_used,
                err=4.0 * np.pi * r * r * err,
            ))
    return rows


def write_asymptote_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r", "flux_norm", "prob_norm", "method", "err"])
        for row in rows:
            w.writerow([f"{row.r:.17g}", f"{row.flux_norm:.17g}", f"{row.prob_norm:.17g}",
                        row.method, f"{row.err:.17g}"])


def write_dispersion_times_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mass_eV", "gamma", "model", "tau_L_s", "tau_T_s", "tau_p_s"])
        for row in rows:
            w.writerow([
                f"{row.mass_eV:.17g}",
                f"{row.gamma:.17g}",
                row.model,
                "" if row.tau_L_s is None else f"{row.tau_L_s:.17g}",
                "" if row.tau_T_s is None else f"{row.tau_T_s:.17g}",
                "" if row.tau_p_s is None else f"{row.tau_p_s:.17g}",
            ])
