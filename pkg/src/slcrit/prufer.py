"""Shooting solutions and Prüfer m-arguments for the linearized operator.

Everything integrates with classical fixed-step RK4 at h = pi/n.  The
potential f'(u(t)) is sampled at nodes and, for internal stages, at midpoints
via linear interpolation of u.  The m-argument solves the scalar equation

    w' = m - ((m^2 + f'(u(t))) / m) * sin(w)^2

as a genuine scalar ODE; the angle is never reduced mod pi, so multiples of
pi in w count zeros of the shooting solution directly.

Scalar trajectories run through a plain-float loop; 2D stacks of potentials
share one vectorized loop (used heavily by the contraction machinery).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .funcspace import GridFunction, grid_nodes, trapezoid
from .nonlinearity import Nonlinearity

__all__ = [
    "ShootingSolution",
    "AngleTrajectory",
    "ShootOverflowError",
    "shoot",
    "omega_m",
    "omega_local",
    "d_omega",
    "zero_count",
]

_BLOWUP = 1e150


class ShootOverflowError(ArithmeticError):
    def __init__(self, t_blowup: float):
        super().__init__(
            f"shooting solution blew up near t = {t_blowup:.6f} "
            "(potential too large for this grid)")
        self.t_blowup = t_blowup


@dataclass(frozen=True)
class ShootingSolution:
    n: int
    v: np.ndarray
    vp: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return grid_nodes(self.n)

    @property
    def v_end(self) -> float:
        return float(self.v[-1])


@dataclass(frozen=True)
class AngleTrajectory:
    m: int
    omega: np.ndarray
    t0: float = 0.0
    theta0: float = 0.0

    @property
    def n(self) -> int:
        return len(self.omega) - 1

    @property
    def t(self) -> np.ndarray:
        return grid_nodes(self.n)

    @property
    def end(self) -> float:
        return float(self.omega[-1])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write("t,omega\n")
            for t, w in zip(self.t, self.omega):
                fh.write(f"{t:.17g},{w:.17g}\n")


# ---------------------------------------------------------------------------
# potential sampling


def q_profile(f: Nonlinearity, values: np.ndarray):
    """f'(u) at nodes and at linearly interpolated midpoints.

    values may be (n+1,) or batched (B, n+1); outputs match.
    """
    values = np.asarray(values, dtype=float)
    mids = 0.5 * (values[..., :-1] + values[..., 1:])
    return f.d1_array(values), f.d1_array(mids)


# ---------------------------------------------------------------------------
# scalar fast paths (plain floats, math.sin)


def _march_omega_scalar(qn, qm, m, h, i0, theta0, forward=True):
    """RK4 on the angle equation; returns the full node array with NaN
    outside the traversed range."""
    n = len(qn) - 1
    an = [(m * m + q) / m for q in qn]
    am = [(m * m + q) / m for q in qm]
    out = [math.nan] * (n + 1)
    w = float(theta0)
    out[i0] = w
    sin = math.sin
    if forward:
        step, first, last = h, i0, n
    else:
        step, first, last = -h, i0, 0
    i = first
    while i != last:
        j = i if forward else i - 1
        aa, amid, ab = an[i], am[j], an[i + 1 if forward else i - 1]
        s = sin(w)
        k1 = m - aa * s * s
        s = sin(w + 0.5 * step * k1)
        k2 = m - amid * s * s
        s = sin(w + 0.5 * step * k2)
        k3 = m - amid * s * s
        s = sin(w + step * k3)
        k4 = m - ab * s * s
        w = w + (step / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
        i = i + 1 if forward else i - 1
        out[i] = w
    return np.array(out)


def _march_shoot_scalar(qn, qm, h):
    n = len(qn) - 1
    v_out = [0.0] * (n + 1)
    p_out = [0.0] * (n + 1)
    v, p = 0.0, 1.0
    p_out[0] = 1.0
    for i in range(n):
        qa, qmid, qb = qn[i], qm[i], qn[i + 1]
        k1v, k1p = p, qa * v
        v2, p2 = v + 0.5 * h * k1v, p + 0.5 * h * k1p
        k2v, k2p = p2, qmid * v2
        v3, p3 = v + 0.5 * h * k2v, p + 0.5 * h * k2p
        k3v, k3p = p3, qmid * v3
        v4, p4 = v + h * k3v, p + h * k3p
        k4v, k4p = p4, qb * v4
        v = v + (h / 6.0) * (k1v + 2.0 * (k2v + k3v) + k4v)
        p = p + (h / 6.0) * (k1p + 2.0 * (k2p + k3p) + k4p)
        if not (-_BLOWUP < v < _BLOWUP and -_BLOWUP < p < _BLOWUP):
            raise ShootOverflowError((i + 1) * h)
        v_out[i + 1] = v
        p_out[i + 1] = p
    return np.array(v_out), np.array(p_out)


# ---------------------------------------------------------------------------
# batched paths (2D stacks of potentials)


def _march_omega_batch(qn, qm, m, h, theta0):
    """Forward RK4 from t = 0 for a (B, n+1) stack; returns (B, n+1) angles."""
    qn = np.asarray(qn, dtype=float)
    B, n1 = qn.shape
    n = n1 - 1
    an = (m * m + qn) / m
    am = (m * m + np.asarray(qm, dtype=float)) / m
    out = np.empty((B, n + 1))
    w = np.full(B, float(theta0)) if np.isscalar(theta0) else np.array(theta0, dtype=float)
    out[:, 0] = w
    sixth = h / 6.0
    for i in range(n):
        aa, amid, ab = an[:, i], am[:, i], an[:, i + 1]
        s = np.sin(w)
        k1 = m - aa * s * s
        s = np.sin(w + 0.5 * h * k1)
        k2 = m - amid * s * s
        s = np.sin(w + 0.5 * h * k2)
        k3 = m - amid * s * s
        s = np.sin(w + h * k3)
        k4 = m - ab * s * s
        w = w + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        out[:, i + 1] = w
    return out


def _march_shoot_batch(qn, qm, h):
    qn = np.asarray(qn, dtype=float)
    B, n1 = qn.shape
    n = n1 - 1
    qm = np.asarray(qm, dtype=float)
    v_out = np.zeros((B, n + 1))
    p_out = np.zeros((B, n + 1))
    v = np.zeros(B)
    p = np.ones(B)
    p_out[:, 0] = 1.0
    sixth = h / 6.0
    for i in range(n):
        qa, qmid, qb = qn[:, i], qm[:, i], qn[:, i + 1]
        k1v, k1p = p, qa * v
        v2, p2 = v + 0.5 * h * k1v, p + 0.5 * h * k1p
        k2v, k2p = p2, qmid * v2
        v3, p3 = v + 0.5 * h * k2v, p + 0.5 * h * k2p
        k3v, k3p = p3, qmid * v3
        v4, p4 = v + h * k3v, p + h * k3p
        k4v, k4p = p4, qb * v4
        v = v + sixth * (k1v + 2.0 * (k2v + k3v) + k4v)
        p = p + sixth * (k1p + 2.0 * (k2p + k3p) + k4p)
        v_out[:, i + 1] = v
        p_out[:, i + 1] = p
    if not (np.all(np.isfinite(v_out)) and np.all(np.isfinite(p_out))):
        bad = np.nonzero(~np.isfinite(v_out) | ~np.isfinite(p_out))
        raise ShootOverflowError(float(bad[1][0]) * h)
    return v_out, p_out


# ---------------------------------------------------------------------------
# public operations


def shoot(f: Nonlinearity, u: GridFunction) -> ShootingSolution:
    """Integrate -v'' + f'(u) v = 0 with v(0) = 0, v'(0) = 1."""
    qn, qm = q_profile(f, u.values)
    v, vp = _march_shoot_scalar(qn.tolist(), qm.tolist(), np.pi / u.n)
    return ShootingSolution(u.n, v, vp)


def omega_m(f: Nonlinearity, u: GridFunction, m: int) -> AngleTrajectory:
    """The global m-argument trajectory from (0, 0)."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    qn, qm = q_profile(f, u.values)
    w = _march_omega_scalar(qn.tolist(), qm.tolist(), m, np.pi / u.n, 0, 0.0)
    return AngleTrajectory(m, w)


def omega_local(f: Nonlinearity, u: GridFunction, m: int, t0: float,
                theta0: float, direction: str = "forward") -> AngleTrajectory:
    """Local m-argument from (t0, theta0), integrated in the given direction.

    Nodes on the far side of t0 are NaN in the returned trajectory.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    h = np.pi / u.n
    i0 = int(round(t0 / h))
    if not (0 <= i0 <= u.n) or abs(t0 - i0 * h) > 1e-9:
        raise ValueError(f"t0 = {t0} is not a grid node")
    qn, qm = q_profile(f, u.values)
    w = _march_omega_scalar(qn.tolist(), qm.tolist(), m, h, i0, theta0,
                            forward=direction == "forward")
    return AngleTrajectory(m, w, t0=float(i0 * h), theta0=float(theta0))


def d_omega(f: Nonlinearity, u: GridFunction, m: int, phi: GridFunction,
            t: float) -> float:
    """Directional derivative of the m-argument at abscissa t along phi:

        -m / ((m v(t))^2 + v'(t)^2) * integral_0^t f''(u) phi v^2
    """
    u._check_compatible(phi)
    h = np.pi / u.n
    i_t = int(round(t / h))
    if not (0 <= i_t <= u.n) or abs(t - i_t * h) > 1e-9:
        raise ValueError(f"t = {t} is not a grid node")
    sol = shoot(f, u)
    f2 = f.d2_array(u.values[: i_t + 1])
    integrand = f2 * phi.values[: i_t + 1] * sol.v[: i_t + 1] ** 2
    integral = trapezoid(integrand, dx=h)
    vt, pt = sol.v[i_t], sol.vp[i_t]
    return float(-m * integral / ((m * vt) ** 2 + pt ** 2))


def _d_omega_end_batch(f: Nonlinearity, values: np.ndarray, m: int,
                       phis: np.ndarray) -> np.ndarray:
    """Batched derivative of the end angle along per-sample directions."""
    qn, qm = q_profile(f, values)
    h = np.pi / (values.shape[-1] - 1)
    v, vp = _march_shoot_batch(qn, qm, h)
    f2 = f.d2_array(values)
    integral = trapezoid(f2 * phis * v * v, dx=h, axis=-1)
    return -m * integral / ((m * v[:, -1]) ** 2 + vp[:, -1] ** 2)


def zero_count(traj: AngleTrajectory) -> int:
    """Zeros of the shooting solution in (0, pi], read off the end angle."""
    if traj.t0 != 0.0:
        raise ValueError("zero_count requires the global trajectory (t0 = 0)")
    return int(math.floor(traj.end / math.pi + 1e-9))
