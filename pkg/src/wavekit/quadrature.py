"""Numerical integration engine.

Three layers:

* :func:`integrate_adaptive` -- globally adaptive Gauss-Kronrod 15(7) with
  bisection. Integrands must accept ndarrays (panels are evaluated in
  batches, which is where all the speed comes from); complex values are
  fine. An infinite upper limit is handled by the map k = a + u/(1-u).
* :func:`integrate_oscillatory_sin` -- composite Filon rule for
  ``int g(k) sin(omega k) dk`` with a smooth, slowly varying ``g``. Below
  ``omega (b - a) < 20`` it simply defers to the adaptive rule, which is
  cheaper there.
* :func:`expectation` -- momentum-space averages
  ``int d3k phi^2(k) F(k) / ((2 pi)^3 2 E_k)`` over a packet model, reduced
  to a 1D radial integral for isotropic rest-frame envelopes and to a
  radial x angular product grid otherwise.

Subdivision order is fixed, so results are bit-reproducible regardless of
how the caller schedules work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MaxSubdivisions, NonFiniteIntegrand, NotNormalized, ValidationError

__all__ = [
    "QuadResult",
    "integrate_adaptive",
    "integrate_oscillatory_sin",
    "expectation",
]

# Gauss-Kronrod 15(7) nodes and weights on [-1, 1].
_XGK = np.array([
    -0.991455371120813, -0.949107912342759, -0.864864423359769,
    -0.741531185599394, -0.586087235467691, -0.405845151377397,
    -0.207784955007898, 0.0,
    0.207784955007898, 0.405845151377397, 0.586087235467691,
    0.741531185599394, 0.864864423359769, 0.949107912342759,
    0.991455371120813,
])
_WGK = np.array([
    0.022935322010529, 0.063092092629979, 0.104790010322250,
    0.140653259715525, 0.169004726639267, 0.190350578064785,
    0.204432940075298, 0.209482141084728,
    0.204432940075298, 0.190350578064785, 0.169004726639267,
    0.140653259715525, 0.104790010322250, 0.063092092629979,
    0.022935322010529,
])
_GAUSS_IDX = np.array([1, 3, 5, 7, 9, 11, 13])
_WG = np.array([
    0.129484966168870, 0.279705391489277, 0.381830050505119,
    0.417959183673469,
    0.381830050505119, 0.279705391489277, 0.129484966168870,
])

_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class QuadResult:
    """Value, error estimate, evaluation count and convergence flag."""

    value: complex | float
    error_estimate: float
    evaluations: int
    converged: bool


def _gk15_panels(f, lo, hi):
    """Evaluate GK15 on a batch of panels [lo_i, hi_i]; returns per-panel data."""
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    nodes = c[:, None] + h[:, None] * _XGK[None, :]
    fx = np.asarray(f(nodes.reshape(-1)))
    if fx.shape != (nodes.size,):
        raise ValidationError(
            f"integrand must return one value per node; got shape {fx.shape} for {nodes.size} nodes"
        )
    if not np.all(np.isfinite(fx.real)) or (np.iscomplexobj(fx) and not np.all(np.isfinite(fx.imag))):
        raise NonFiniteIntegrand("integrand returned a non-finite value")
    fx = fx.reshape(nodes.shape)
    resk = (fx * _WGK).sum(axis=1) * h
    resg = (fx[:, _GAUSS_IDX] * _WG).sum(axis=1) * h
    resabs = (np.abs(fx) * _WGK).sum(axis=1) * h
    mean = resk / (hi - lo)
    resasc = (np.abs(fx - mean[:, None]) * _WGK).sum(axis=1) * h
    raw = np.abs(resk - resg)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(resasc > 0.0, resasc * np.minimum(1.0, (200.0 * raw / np.where(resasc > 0, resasc, 1.0)) ** 1.5), raw)
    err = np.maximum(scaled, 50.0 * _EPS * resabs)
    return resk, err, resabs, nodes.size


def integrate_adaptive(f, a: float, b: float, tol: float = 1e-10, *, rtol: float = 0.0,
                       args=(), max_panels: int = 4096) -> QuadResult:
    """Adaptive GK15 quadrature of ``f`` on [a, b].

    Converges when the error estimate drops below ``tol`` absolute or
    ``rtol`` times the running value, whichever is larger. ``b`` may be
    ``np.inf`` (mapped to [0, 1)). ``f`` must accept an ndarray of abscissae
    and return an ndarray of values, real or complex.
    """
    if not (math.isfinite(a) and a < b):
        raise ValidationError(f"need finite a < b, got a={a!r}, b={b!r}")
    if args:
        inner_f = f
        f = lambda x: inner_f(x, *args)
    if math.isinf(b):
        base = f
        shift = a

        def f(u):  # noqa: E731 - mapped integrand
            u = np.asarray(u)
            return base(shift + u / (1.0 - u)) / (1.0 - u) ** 2

        a, b = 0.0, 1.0

    lo = np.array([a], dtype=float)
    hi = np.array([b], dtype=float)
    val, err, resabs, nev = _gk15_panels(f, lo, hi)
    evaluations = nev

    while True:
        total_err = float(err.sum())
        floor = 50.0 * _EPS * float(resabs.sum())
        target = max(tol, rtol * abs(val.sum()), floor)
        if total_err <= target:
            return QuadResult(value=complex(val.sum()) if np.iscomplexobj(val) else float(val.sum().real),
                              error_estimate=total_err, evaluations=evaluations, converged=True)
        if len(lo) >= max_panels:
            raise MaxSubdivisions(
                f"no convergence with {len(lo)} panels (err={total_err:.3e}, target={target:.3e})"
            )
        # split every panel carrying more than its share of the budget
        budget = target / (2.0 * len(lo))
        mask = err > budget
        if not mask.any():
            mask[np.argmax(err)] = True
        mid = 0.5 * (lo[mask] + hi[mask])
        new_lo = np.concatenate([lo[mask], mid])
        new_hi = np.concatenate([mid, hi[mask]])
        nval, nerr, nabs, nev = _gk15_panels(f, new_lo, new_hi)
        evaluations += nev
        keep = ~mask
        lo = np.concatenate([lo[keep], new_lo])
        hi = np.concatenate([hi[keep], new_hi])
        val = np.concatenate([val[keep], nval])
        err = np.concatenate([err[keep], nerr])
        resabs = np.concatenate([resabs[keep], nabs])


def _filon_coeffs(theta: float):
    """Filon alpha/beta/gamma; power series below the cancellation threshold."""
    if abs(theta) < 0.1:
        t2 = theta * theta
        alpha = theta * t2 * (2.0 / 45.0 - t2 * (2.0 / 315.0 - t2 * (2.0 / 4725.0)))
        beta = 2.0 / 3.0 + t2 * (2.0 / 15.0 - t2 * (4.0 / 105.0 - t2 * (2.0 / 567.0)))
        gamma = 4.0 / 3.0 - t2 * (2.0 / 15.0 - t2 * (1.0 / 210.0 - t2 * (1.0 / 11340.0)))
        return alpha, beta, gamma
    s, c = math.sin(theta), math.cos(theta)
    t3 = theta**3
    alpha = (theta * theta + theta * s * c - 2.0 * s * s) / t3
    beta = 2.0 * (theta * (1.0 + c * c) - 2.0 * s * c) / t3
    gamma = 4.0 * (s - theta * c) / t3
    return alpha, beta, gamma


def _filon_pass(g, omega, a, b, m, kind):
    """One composite Filon evaluation with 2m subintervals."""
    x = np.linspace(a, b, 2 * m + 1)
    fx = np.asarray(g(x))
    if not np.all(np.isfinite(fx.real)) or (np.iscomplexobj(fx) and not np.all(np.isfinite(fx.imag))):
        raise NonFiniteIntegrand("oscillatory integrand returned a non-finite value")
    h = (b - a) / (2 * m)
    alpha, beta, gamma = _filon_coeffs(omega * h)
    if kind == "sin":
        w = np.sin(omega * x)
        s_even = (fx[::2] * w[::2]).sum() - 0.5 * (fx[0] * w[0] + fx[-1] * w[-1])
        s_odd = (fx[1::2] * w[1::2]).sum()
        edge = fx[0] * math.cos(omega * a) - fx[-1] * math.cos(omega * b)
        val = h * (alpha * edge + beta * s_even + gamma * s_odd)
    else:
        w = np.cos(omega * x)
        c_even = (fx[::2] * w[::2]).sum() - 0.5 * (fx[0] * w[0] + fx[-1] * w[-1])
        c_odd = (fx[1::2] * w[1::2]).sum()
        edge = fx[-1] * math.sin(omega * b) - fx[0] * math.sin(omega * a)
        val = h * (alpha * edge + beta * c_even + gamma * c_odd)
    return val, x.size


def _oscillatory(g, omega, a, b, tol, kind, threshold, max_doublings):
    if omega < 0.0:
        raise ValidationError(f"omega must be >= 0, got {omega!r}")
    if not (math.isfinite(a) and math.isfinite(b) and a < b):
        raise ValidationError(f"need finite a < b, got a={a!r}, b={b!r}")
    if omega == 0.0 and kind == "sin":
        return QuadResult(0.0, 0.0, 0, True)
    if omega * (b - a) < threshold:
        trig = np.sin if kind == "sin" else np.cos
        return integrate_adaptive(lambda k: g(k) * trig(omega * k), a, b, tol)

    m = 16
    prev = None
    evaluations = 0
    for _ in range(max_doublings):
        val, nev = _filon_pass(g, omega, a, b, m, kind)
        evaluations += nev
        if prev is not None:
            diff = abs(val - prev)
            scale = 50.0 * _EPS * max(abs(val), 1.0)
            if diff <= max(tol, scale):
                return QuadResult(val, diff, evaluations, True)
        prev = val
        m *= 2
    raise MaxSubdivisions(f"Filon rule did not converge after {max_doublings} refinements")


def integrate_oscillatory_sin(g, omega: float, a: float, b: float, tol: float = 1e-9, *,
                              threshold: float = 20.0, max_doublings: int = 16) -> QuadResult:
    """``int_a^b g(k) sin(omega k) dk`` for smooth ``g``.

    Uses a composite Filon rule with interval doubling when
    ``omega (b - a) >= threshold``; otherwise the plain adaptive rule on the
    product, which is cheaper in the non-oscillatory regime.
    """
    return _oscillatory(g, omega, a, b, tol, "sin", threshold, max_doublings)


def integrate_oscillatory_cos(g, omega: float, a: float, b: float, tol: float = 1e-9, *,
                              threshold: float = 20.0, max_doublings: int = 16) -> QuadResult:
    """Companion cosine rule; same contract as :func:`integrate_oscillatory_sin`."""
    return _oscillatory(g, omega, a, b, tol, "cos", threshold, max_doublings)


# ---------------------------------------------------------------------------
# momentum-space expectations


def _angular_grid(axis: np.ndarray, n_theta: int, n_phi: int):
    """Product grid over the unit sphere: Gauss-Legendre in cos(theta) about
    ``axis``, trapezoid in azimuth. Exact for polynomials in cos(theta)."""
    u, wu = np.polynomial.legendre.leggauss(n_theta)
    phis = 2.0 * np.pi * np.arange(n_phi) / n_phi
    # orthonormal frame completing the axis
    trial = np.array([1.0, 0.0, 0.0])
    if abs(trial @ axis) > 0.9:
        trial = np.array([0.0, 1.0, 0.0])
    e1 = trial - (trial @ axis) * axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    st = np.sqrt(1.0 - u**2)
    dirs = (u[:, None, None] * axis[None, None, :]
            + st[:, None, None] * (np.cos(phis)[None, :, None] * e1[None, None, :]
                                   + np.sin(phis)[None, :, None] * e2[None, None, :]))
    weights = np.repeat(wu[:, None], n_phi, axis=1) * (2.0 * np.pi / n_phi)
    return dirs.reshape(-1, 3), weights.reshape(-1)


def _energy(k2, m):
    return np.sqrt(k2 + m * m)


def weighted_integral(model, F=None, tol: float = 1e-10, *, rtol: float = 0.0,
                      isotropic: bool = False, n_theta: int = 48, n_phi: int = 24,
                      weight=None, support=None) -> QuadResult:
    """``int d3k W(k) F(k) / ((2 pi)^3 2 E_k)`` with ``W = phi^2`` by default.

    Does not require the model to be normalized (this is what the
    normalization pass itself uses). ``weight`` overrides the default
    ``phi^2`` with an arbitrary callable of the momentum vectors, which the
    spatial-variance integral needs for its ``phi * laplacian(phi)`` kernel.
    ``isotropic=True`` asserts that F depends on |k| only and takes the much
    cheaper radial path; it requires a rest-frame envelope.
    """
    kin = model.kin
    lo, hi = model.radial_support() if support is None else support

    if isotropic or (F is None and weight is None and model.has_rest_profile):
        if not model.has_rest_profile:
            raise ValidationError("radial path requires a rest-frame radial profile")

        def radial(k):
            k = np.asarray(k)
            E = _energy(k * k, kin.m)
            w = model.phi_rest_radial(k) ** 2 if weight is None else weight(k)
            out = k * k * w / E
            if F is not None:
                out = out * F(k)
            return out / (4.0 * np.pi**2)

        return integrate_adaptive(radial, lo, hi, tol, rtol=rtol)

    dirs, w_ang = _angular_grid(kin.axis, n_theta, n_phi)

    if model.frame_strategy == "boosted":
        # substitute k = boost(k*); the measure d3k / 2E is invariant
        from .core import boost_momentum

        def radial(q):
            q = np.asarray(q)
            kstar = q[:, None, None] * dirs[None, :, :]
            k = boost_momentum(kstar, kin, to_lab=True)
            Estar = _energy(q * q, kin.m)
            w = model.phi_rest_radial(q) ** 2 if weight is None else None
            if weight is not None:
                vals = weight(k.reshape(-1, 3)).reshape(q.size, -1)
            else:
                vals = np.broadcast_to(w[:, None], (q.size, dirs.shape[0])).copy()
            if F is not None:
                vals = vals * F(k.reshape(-1, 3)).reshape(q.size, -1)
            return q * q / (2.0 * Estar) * (vals * w_ang).sum(axis=1) / (2.0 * np.pi) ** 3

        return integrate_adaptive(radial, lo, hi, tol, rtol=rtol)

    # "shifted": integrate over q = k - p on a ball around the envelope peak
    center = kin.p

    def radial(q):
        q = np.asarray(q)
        k = center[None, None, :] + q[:, None, None] * dirs[None, :, :]
        kf = k.reshape(-1, 3)
        E = _energy(np.sum(kf * kf, axis=-1), kin.m).reshape(q.size, -1)
        vals = (model.phi(kf) ** 2 if weight is None else weight(kf)).reshape(q.size, -1)
        if F is not None:
            vals = vals * F(kf).reshape(q.size, -1)
        return q * q * ((vals / (2.0 * E)) * w_ang).sum(axis=1) / (2.0 * np.pi) ** 3

    qmax = model.shifted_support()
    return integrate_adaptive(radial, 0.0, qmax, tol, rtol=rtol)


def expectation(model, F, tol: float = 1e-10, *, isotropic: bool = False,
                n_theta: int = 48, n_phi: int = 24) -> QuadResult:
    """Expectation value of ``F`` over a normalized packet model.

    ``F`` receives |k| (1D array) when ``isotropic=True`` and full momentum
    vectors of shape (N, 3) otherwise.
    """
    if model.norm_residual is None:
        raise NotNormalized("normalize the model before taking expectation values")
    return weighted_integral(model, F, tol, isotropic=isotropic, n_theta=n_theta, n_phi=n_phi)
