"""Invert angle profiles back to potentials and build solder segments.

Given a target local m-argument profile w on a window [t0, t1] with
sin(m t) bounded away from zero, a potential segment u is recovered by
solving, node by node, for the value that makes the discrete angle step
land exactly on w at the next node.  Each node solve is a safeguarded
Newton iteration staying on the monotone branch of f' through the anchor
value.  Inverting the discrete flow (rather than the pointwise relation
f'(u) = -m^2 + m (m - w') / sin^2(w)) makes the roundtrip with the angle
integrator exact to solver tolerance on the integration grid; the pointwise
relation is recovered in the limit of fine grids and is used to seed and to
handle steps whose angle sensitivity degenerates.

The solder segment for endpoint offsets (h0, h1) uses the profile

    w(t) = m t + h0 + (h1 - h0) * xi(t)

where xi is a quintic smoothstep in node index with short exact plateaus at
each end of the window, so the segment equals the critical abscissa x_m
exactly at (and near) both endpoints.  When h0 = h1 the construction
short-circuits to the constant x_m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .funcspace import grid_nodes, smoothstep
from .nonlinearity import Nonlinearity

__all__ = [
    "SolderSpec",
    "SolderSpecError",
    "SolderError",
    "SolderRangeError",
    "SolderFoldError",
    "sin_margin",
    "solder_eps",
    "solder_spec",
    "profile_w",
    "reconstruct_u",
    "xi_solder",
]

SIN_MARGIN = 1e-3
NODE_TOL = 1e-13
_PAD_CELLS = 2
_FOLD_TOL = 1e-10


class SolderSpecError(ValueError):
    pass


class SolderError(RuntimeError):
    """The inversion could not stay on the monotone branch of f'."""


class SolderRangeError(SolderError):
    """The required potential leaves the range of f' on the branch."""


class SolderFoldError(SolderError):
    """|f''| vanished at an iterate: a fold of f' blocks the inversion."""


def sin_margin(m: int, a: float, b: float) -> float:
    """min |sin(m t)| over the whole interval [a, b] (0 if a zero is inside)."""
    ka = math.ceil(m * a / math.pi)
    kb = math.floor(m * b / math.pi)
    if ka <= kb:
        return 0.0
    return min(abs(math.sin(m * a)), abs(math.sin(m * b)))


@dataclass(frozen=True)
class SolderSpec:
    m: int
    x_m: float
    t0: float
    t1: float
    i0: int
    i1: int
    h0: float
    h1: float
    eps: float
    n: int


def _node_index(t: float, n: int, name: str) -> int:
    h = math.pi / n
    i = int(round(t / h))
    if not (0 <= i <= n) or abs(t - i * h) > 1e-9:
        raise SolderSpecError(f"{name} = {t} is not a grid node")
    return i


# ---------------------------------------------------------------------------
# discrete angle step shared with the verification integrator
# (must match the RK4 scheme in prufer: k1 at the node, k2/k3 at the
#  linearly interpolated midpoint, k4 at the next node)


def _step_and_slope(w, qa, qm, qb, f2m, f2b, m, h):
    """One RK4 angle step and its derivative with respect to the next node
    value (entering through the midpoint and endpoint potentials)."""
    aa = (m * m + qa) / m
    am = (m * m + qm) / m
    ab = (m * m + qb) / m
    dam = 0.5 * f2m / m
    dab = f2b / m

    s1 = np.sin(w)
    k1 = m - aa * s1 * s1
    w2 = w + 0.5 * h * k1
    s2 = np.sin(w2)
    k2 = m - am * s2 * s2
    dk2 = -s2 * s2 * dam
    w3 = w + 0.5 * h * k2
    dw3 = 0.5 * h * dk2
    s3 = np.sin(w3)
    k3 = m - am * s3 * s3
    dk3 = -s3 * s3 * dam - am * np.sin(2.0 * w3) * dw3
    w4 = w + h * k3
    dw4 = h * dk3
    s4 = np.sin(w4)
    k4 = m - ab * s4 * s4
    dk4 = -s4 * s4 * dab - ab * np.sin(2.0 * w4) * dw4

    step = w + (h / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)
    slope = (h / 6.0) * (2.0 * dk2 + 2.0 * dk3 + dk4)
    return step, slope


def _solve_branch_root(f: Nonlinearity, target: float, seed: float,
                       f2_sign: float) -> float:
    # u on the branch with f'(u) = target
    u = seed
    for _ in range(60):
        j = f.jet(u)
        if abs(j.d2) < _FOLD_TOL:
            raise SolderFoldError(f"|f''({u:.6g})| < 1e-10 while inverting f'")
        if j.d2 * f2_sign < 0.0:
            raise SolderRangeError(
                f"left the monotone branch of f' while solving f'(u) = {target:.6g}")
        g = j.d1 - target
        if abs(g) < 1e-13 * (1.0 + abs(target)):
            return u
        u = u - g / j.d2
        if abs(u) > 1e8:
            raise SolderRangeError(
                f"f'(u) = {target:.6g} is unreachable on this branch")
    return u


def _solve_node_scalar(f, m, h, w_i, w_target, u_i, f2_sign):
    """Safeguarded Newton for the next node value of the discrete inversion."""
    qa = f.d1(u_i)
    u = u_i
    for it in range(60):
        mid = 0.5 * (u_i + u)
        jm = f.jets(np.array([mid, u]))
        qm, qb = float(jm.d1[0]), float(jm.d1[1])
        f2m, f2b = float(jm.d2[0]), float(jm.d2[1])
        if min(abs(f2m), abs(f2b)) < _FOLD_TOL:
            raise SolderFoldError(
                f"|f''| < 1e-10 at an iterate near u = {u:.6g} (fold in f')")
        if f2m * f2_sign < 0.0 or f2b * f2_sign < 0.0:
            raise SolderRangeError("iterate left the monotone branch of f'")
        step, slope = _step_and_slope(w_i, qa, qm, qb, f2m, f2b, m, h)
        g = step - w_target
        if abs(g) < NODE_TOL * (1.0 + abs(w_target)):
            return u
        if abs(slope) < 1e-5 * h * max(abs(f2b), _FOLD_TOL):
            # angle step insensitive to u (sin^2 ~ 0 through the whole step):
            # take the limiting branch point f'(u) = -m^2
            return _solve_branch_root(f, -float(m * m), u, f2_sign)
        u = u - g / slope
        if abs(u) > 1e8:
            raise SolderRangeError(
                "required potential is unreachable on this branch "
                f"(target angle step {w_target - w_i:.6g} over h = {h:.3g})")
    raise SolderRangeError("node inversion did not converge in 60 iterations")


def reconstruct_u(f: Nonlinearity, m: int, w: np.ndarray, i0: int,
                  anchor_x: float, n: int,
                  anchor_end: float | None = None) -> np.ndarray:
    """Potential segment whose local m-argument reproduces w on its window.

    w holds the angle at nodes i0 .. i0+len(w)-1; the first node value is the
    anchor, each later node solves the discrete step equation seeded from its
    predecessor.  With anchor_end given, the march runs from both ends toward
    the middle instead: this pins both endpoint values exactly (the one-way
    march carries a neutral alternating error mode across flat stretches of
    the profile), at the cost of an O(h^5)-per-step forward/backward scheme
    mismatch in the interior, far below the solver tolerance in aggregate.
    """
    w = np.asarray(w, dtype=float)
    if len(w) < 2:
        raise SolderSpecError("angle profile needs at least two nodes")
    if i0 < 0 or i0 + len(w) - 1 > n:
        raise SolderSpecError("profile window exceeds the grid")
    f2a = f.d2(anchor_x)
    if abs(f2a) < _FOLD_TOL:
        raise SolderFoldError(f"f''(anchor) = {f2a:.3e}: anchor sits on a fold of f'")
    sign = 1.0 if f2a > 0.0 else -1.0
    h = math.pi / n
    out = np.empty(len(w))
    out[0] = anchor_x
    mid = (len(w) - 1) // 2 if anchor_end is not None else len(w) - 1
    for k in range(mid):
        out[k + 1] = _solve_node_scalar(f, m, h, float(w[k]), float(w[k + 1]),
                                        float(out[k]), sign)
    if anchor_end is not None:
        out[-1] = anchor_end
        for j in range(len(w) - 1, mid + 1, -1):
            out[j - 1] = _solve_node_scalar(f, m, -h, float(w[j]), float(w[j - 1]),
                                            float(out[j]), sign)
    return out


def _solve_node_batch(f, m, h, w_i, w_target, u_i, sign):
    """Vectorized node solve with scalar fallback for stuck samples."""
    B = len(u_i)
    qa = f.d1_array(u_i)
    u = u_i.copy()
    ok = None
    for _ in range(40):
        jm = f.jets(0.5 * (u_i + u))
        jb = f.jets(u)
        bad = (np.minimum(np.abs(jm.d2), np.abs(jb.d2)) < _FOLD_TOL) \
            | (jm.d2 * sign < 0.0) | (jb.d2 * sign < 0.0) | (np.abs(u) > 1e8)
        if np.any(bad):
            ok = ~bad
            break
        step, slope = _step_and_slope(w_i, qa, jm.d1, jb.d1, jm.d2, jb.d2, m, h)
        g = step - w_target
        conv = np.abs(g) < NODE_TOL * (1.0 + np.abs(w_target))
        if np.all(conv):
            ok = np.ones(B, dtype=bool)
            break
        degen = np.abs(slope) < 1e-5 * abs(h) * np.maximum(np.abs(jb.d2), _FOLD_TOL)
        if np.any(degen & ~conv):
            ok = ~(degen & ~conv)
            break
        u = np.where(conv, u, u - g / np.where(slope == 0.0, 1.0, slope))
    else:
        ok = np.zeros(B, dtype=bool)
    if ok is not None and not np.all(ok):
        for b in np.nonzero(~ok)[0]:
            u[b] = _solve_node_scalar(f, m, h, float(w_i[b]), float(w_target[b]),
                                      float(u_i[b]), float(sign[b]))
    return u


def _reconstruct_batch(f: Nonlinearity, m: int, w2: np.ndarray, i0: int,
                       anchors: np.ndarray, n: int,
                       anchors_end: np.ndarray | None = None) -> np.ndarray:
    """Vectorized inversion across a stack of profiles sharing one window."""
    w2 = np.asarray(w2, dtype=float)
    B, W = w2.shape
    f2a = f.d2_array(np.asarray(anchors, dtype=float))
    if np.any(np.abs(f2a) < _FOLD_TOL):
        raise SolderFoldError("an anchor sits on a fold of f'")
    sign = np.sign(f2a)
    h = math.pi / n
    out = np.empty((B, W))
    out[:, 0] = anchors
    mid = (W - 1) // 2 if anchors_end is not None else W - 1
    for k in range(mid):
        out[:, k + 1] = _solve_node_batch(f, m, h, w2[:, k], w2[:, k + 1],
                                          out[:, k], sign)
    if anchors_end is not None:
        out[:, -1] = anchors_end
        for j in range(W - 1, mid + 1, -1):
            out[:, j - 1] = _solve_node_batch(f, m, -h, w2[:, j], w2[:, j - 1],
                                              out[:, j], sign)
    return out


# ---------------------------------------------------------------------------
# solder profiles and specs


def _xi_indexspace(count: int) -> np.ndarray:
    """Smoothstep in node index with exact plateaus of _PAD_CELLS each end."""
    j = np.arange(count, dtype=float)
    lo = float(_PAD_CELLS)
    hi = float(count - 1 - _PAD_CELLS)
    return np.asarray(smoothstep((j - lo) / (hi - lo)))


def profile_w(spec: SolderSpec) -> np.ndarray:
    """w(t) = m t + h0 + (h1 - h0) xi(t) on the window nodes."""
    t = grid_nodes(spec.n)[spec.i0: spec.i1 + 1]
    xi = _xi_indexspace(spec.i1 - spec.i0 + 1)
    return spec.m * t + spec.h0 + (spec.h1 - spec.h0) * xi


def solder_eps(f: Nonlinearity, m: int, x_m: float, t0: float, t1: float,
               n: int, ladder_top: float = 0.2) -> float:
    """Largest eps from {0.2, 0.1, 0.05, ...} keeping the sin(mt) margin over
    the widened window and the inversion on its branch at the corner offsets."""
    i0 = _node_index(t0, n, "t0")
    i1 = _node_index(t1, n, "t1")
    if i1 - i0 < 2 * _PAD_CELLS + 4:
        raise SolderSpecError(
            f"window [{t0:.4f}, {t1:.4f}] too short: {i1 - i0} cells")
    eps = ladder_top
    for _ in range(12):
        if sin_margin(m, t0 - eps / m, t1 + eps / m) > SIN_MARGIN:
            try:
                for h0, h1 in ((-eps, eps), (eps, -eps)):
                    probe = replace(_bare_spec(m, x_m, t0, t1, i0, i1, n),
                                    h0=h0, h1=h1, eps=eps)
                    reconstruct_u(f, m, profile_w(probe), i0, x_m, n,
                                  anchor_end=x_m)
                return eps
            except (SolderRangeError, SolderFoldError):
                pass
        eps *= 0.5
    raise SolderSpecError(
        f"no admissible eps found for window [{t0:.4f}, {t1:.4f}], m = {m}")


def _bare_spec(m, x_m, t0, t1, i0, i1, n) -> SolderSpec:
    return SolderSpec(m, x_m, t0, t1, i0, i1, 0.0, 0.0, 1.0, n)


def solder_spec(f: Nonlinearity, m: int, x_m: float, t0: float, t1: float,
                h0: float, h1: float, n: int, eps: float | None = None) -> SolderSpec:
    """Validated solder description; eps comes off the ladder when not given."""
    if not 0.0 < t0 < t1 < math.pi:
        raise SolderSpecError(f"need 0 < t0 < t1 < pi, got [{t0}, {t1}]")
    i0 = _node_index(t0, n, "t0")
    i1 = _node_index(t1, n, "t1")
    if eps is None:
        eps = solder_eps(f, m, x_m, t0, t1, n)
    if sin_margin(m, t0 - eps / m, t1 + eps / m) <= SIN_MARGIN:
        raise SolderSpecError(
            f"sin(mt) margin violated on [{t0 - eps / m:.4f}, {t1 + eps / m:.4f}]")
    if not (abs(h0) < eps and abs(h1) < eps):
        raise SolderSpecError(
            f"offsets |h0| = {abs(h0):.4g}, |h1| = {abs(h1):.4g} exceed eps = {eps:.4g}")
    return SolderSpec(m, x_m, t0, t1, i0, i1, float(h0), float(h1), float(eps), n)


def _integrate_window(f: Nonlinearity, m: int, useg: np.ndarray, theta0,
                      n: int):
    """End angle of the local m-argument through a window segment.

    useg may be (W,) or (B, W); theta0 scalar or (B,)."""
    useg = np.asarray(useg, dtype=float)
    qn = f.d1_array(useg)
    qm = f.d1_array(0.5 * (useg[..., :-1] + useg[..., 1:]))
    h = math.pi / n
    w = np.asarray(theta0, dtype=float) + np.zeros(useg.shape[:-1])
    zero = np.zeros(useg.shape[:-1])
    for k in range(useg.shape[-1] - 1):
        w, _ = _step_and_slope(w, qn[..., k], qm[..., k], qn[..., k + 1],
                               zero, zero, m, h)
    return w


def xi_solder(f: Nonlinearity, spec: SolderSpec) -> np.ndarray:
    """Solder segment on the window nodes: equals x_m at both ends, and the
    local m-argument started at m t0 + h0 reaches m t1 + h1.

    Built by inverting the discrete angle flow from both endpoint anchors;
    the small seam defect of the two-sided march is absorbed by one secant
    correction of the profile's end offset.
    """
    if spec.h0 == spec.h1:
        return np.full(spec.i1 - spec.i0 + 1, spec.x_m)
    target = spec.m * spec.t1 + spec.h1
    h1_eff = spec.h1
    useg = None
    for _ in range(3):
        prof = replace(spec, h1=h1_eff)
        useg = reconstruct_u(f, spec.m, profile_w(prof), spec.i0, spec.x_m,
                             spec.n, anchor_end=spec.x_m)
        defect = float(_integrate_window(f, spec.m, useg,
                                         spec.m * spec.t0 + spec.h0, spec.n)) - target
        if abs(defect) < 5e-12:
            break
        h1_eff -= defect
    return useg


def _xi_solder_batch(f: Nonlinearity, m: int, x_m: float, i0: int, i1: int,
                     h0: np.ndarray, h1: np.ndarray, n: int) -> np.ndarray:
    """Stack of solder segments for per-sample offsets on one shared window."""
    h0 = np.atleast_1d(np.asarray(h0, dtype=float))
    h1 = np.atleast_1d(np.asarray(h1, dtype=float))
    B = max(len(h0), len(h1))
    h0 = np.broadcast_to(h0, (B,)).copy()
    h1 = np.broadcast_to(h1, (B,)).copy()
    W = i1 - i0 + 1
    out = np.full((B, W), x_m)
    live = h0 != h1
    if not np.any(live):
        return out
    t = grid_nodes(n)[i0: i1 + 1]
    xi = _xi_indexspace(W)
    k = int(np.sum(live))
    anchors = np.full(k, x_m)
    target = m * t[-1] + h1[live]
    h1_eff = h1[live].copy()
    segs = None
    for _ in range(3):
        w2 = m * t + h0[live, None] + (h1_eff - h0[live])[:, None] * xi
        segs = _reconstruct_batch(f, m, w2, i0, anchors, n, anchors_end=anchors)
        defect = _integrate_window(f, m, segs, m * t[0] + h0[live], n) - target
        if np.max(np.abs(defect)) < 5e-12:
            break
        # adjust only unconverged rows so each row's output is independent
        # of its batch-mates (theta-permutation determinism)
        h1_eff = np.where(np.abs(defect) < 5e-12, h1_eff, h1_eff - defect)
    out[live] = segs
    return out
