"""Membership in the critical levels C_m, constructive search, and projection.

A Dirichlet function u lies in C_m exactly when its m-argument reaches m*pi
at t = pi.  The search builds two ramped near-constants whose end angles
bracket m*pi and bisects the straight segment between them.  The projector
corrects a nearby function back onto the level along a chosen direction with
a safeguarded one-dimensional Newton iteration, the slope coming from the
integral formula for the angle derivative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .funcspace import GridFunction, bump_beta, norm, ramp_constant, segment
from .nonlinearity import Nonlinearity, TamenessReport, critical_abscissa
from .prufer import d_omega, omega_m, shoot

__all__ = [
    "MembershipResult",
    "BracketError",
    "ZeroSlopeError",
    "residual",
    "membership",
    "find_in_cm",
    "project",
]

TOL_ANGLE = 1e-8
TOL_V = 1e-6
FIND_TOL = 1e-10
PROJECT_TOL = 1e-10


class BracketError(RuntimeError):
    """No sign bracket for the residual within the allowed search region."""


class ZeroSlopeError(RuntimeError):
    """The directional derivative of the residual vanishes."""


@dataclass
class MembershipResult:
    residual: float
    member: bool
    v_end: float
    m: int
    n: int
    tol_angle: float

    def to_json(self) -> str:
        return json.dumps({
            "residual": self.residual,
            "member": self.member,
            "v_end": self.v_end,
            "m": self.m,
            "n": self.n,
            "tol_angle": self.tol_angle,
        }, indent=2)


def residual(f: Nonlinearity, u: GridFunction, m: int) -> float:
    """omega_m(u, pi) - m*pi; zero on C_m."""
    return omega_m(f, u, m).end - m * math.pi


def membership(f: Nonlinearity, u: GridFunction, m: int,
               tol_angle: float = TOL_ANGLE, tol_v: float = TOL_V) -> MembershipResult:
    res = residual(f, u, m)
    sol = shoot(f, u)
    scale = max(float(np.max(np.abs(sol.v))), 1e-300)
    member = abs(res) <= tol_angle and abs(sol.v_end) <= tol_v * scale
    return MembershipResult(res, member, sol.v_end, m, u.n, tol_angle)


def _bracket_abscissas(f: Nonlinearity, m: int, x_m: float):
    """x_minus / x_plus near x_m with f' + m^2 positive resp. negative."""
    msq = float(m * m)
    d = 0.5
    for _ in range(60):
        ga = f.d1(x_m - d) + msq
        gb = f.d1(x_m + d) + msq
        if ga * gb < 0.0:
            if ga > 0.0:
                return x_m - d, x_m + d
            return x_m + d, x_m - d
        d *= 0.5
    raise BracketError(f"could not bracket f' = -{m}^2 around x_m = {x_m}")


def find_in_cm(f: Nonlinearity, m: int, report: TamenessReport,
               n: int = 2048) -> GridFunction:
    """Constructive element of C_m: ramped near-constants, then bisection.

    The ramp width delta shrinks geometrically from pi/8 until the two end
    residuals have opposite signs, after which the straight segment between
    the ramps is bisected to |residual| <= 1e-10.
    """
    if m not in report.sigma:
        raise BracketError(
            f"m = {m} is not in sigma = {report.sigma}: -{m}^2 is not in the "
            "interior of the sampled range of f'")
    x_m = critical_abscissa(f, m, report)
    x_minus, x_plus = _bracket_abscissas(f, m, x_m)

    delta = math.pi / 8.0
    last = None
    for _ in range(20):
        u_minus = ramp_constant(x_minus, delta, n)
        u_plus = ramp_constant(x_plus, delta, n)
        r_minus = residual(f, u_minus, m)
        r_plus = residual(f, u_plus, m)
        last = (r_minus, r_plus)
        if r_minus * r_plus < 0.0:
            break
        delta *= 0.5
    else:
        raise BracketError(
            f"no residual sign bracket after 20 ramp shrinkages; "
            f"last residuals {last[0]:.3e}, {last[1]:.3e}")

    s_lo, s_hi = 0.0, 1.0
    r_lo = r_minus
    u = u_minus
    for _ in range(200):
        s_mid = 0.5 * (s_lo + s_hi)
        u = segment(u_minus, u_plus, s_mid)
        r_mid = residual(f, u, m)
        if abs(r_mid) <= FIND_TOL:
            return u
        if (r_mid < 0.0) == (r_lo < 0.0):
            s_lo, r_lo = s_mid, r_mid
        else:
            s_hi = s_mid
        if s_lo == s_hi:
            break
    if abs(residual(f, u, m)) <= FIND_TOL:
        return u
    raise BracketError("bisection stalled before reaching the residual tolerance")


def default_direction(f: Nonlinearity, u: GridFunction,
                      delta0: float = math.pi / 16.0) -> GridFunction:
    """The corrector direction -beta_{delta0}(t) f''(u(t))."""
    vals = -bump_beta(delta0, u.n).values * f.d2_array(u.values)
    return GridFunction(u.n, vals)


def project(f: Nonlinearity, u: GridFunction, m: int,
            phi_dir: GridFunction | None = None,
            tol: float = PROJECT_TOL) -> GridFunction:
    """Solve residual(u + tau * phi_dir) = 0 for the scalar tau.

    Safeguarded Newton: steps use the angle-derivative formula, a sign
    bracket (once found) confines them, and |tau| is capped at 1.  Returns u
    itself when it is already on the level (tau = 0 fast path).
    """
    r0 = residual(f, u, m)
    if abs(r0) >= 0.5:
        raise BracketError(
            f"|residual| = {abs(r0):.3f} >= 0.5: outside the corrector basin")
    if abs(r0) <= tol:
        return u
    phi = phi_dir if phi_dir is not None else default_direction(f, u)
    u._check_compatible(phi)

    tau, r = 0.0, r0
    lo = hi = None         # bracket endpoints (tau, residual), once seen
    for _ in range(80):
        if r < 0.0:
            lo = (tau, r)
        else:
            hi = (tau, r)
        slope = d_omega(f, GridFunction(u.n, u.values + tau * phi.values,
                                        u.dirichlet), m, phi, math.pi)
        if abs(slope) < 1e-12:
            raise ZeroSlopeError(
                f"directional derivative {slope:.3e} below 1e-12 along phi_dir")
        tau_new = tau - r / slope
        if lo is not None and hi is not None:
            a, b = sorted((lo[0], hi[0]))
            if not a < tau_new < b:
                tau_new = 0.5 * (a + b)
        if abs(tau_new) > 1.0:
            raise BracketError(
                f"no sign bracket for the corrector within |tau| <= 1 "
                f"(residual {r:.3e} at tau = {tau:.3f})")
        tau = tau_new
        r = residual(f, GridFunction(u.n, u.values + tau * phi.values,
                                     u.dirichlet), m)
        if abs(r) <= tol:
            return GridFunction(u.n, u.values + tau * phi.values, u.dirichlet)
    raise BracketError("corrector did not converge in 80 iterations")
