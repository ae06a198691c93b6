"""The five-stage contraction of a loop inside C_m to a single anchor.

A loop (or a two-sample pair) of members of C_m is deformed in five stages,
keeping every intermediate sample on the level omega_m(u, pi) = m*pi:

1. flatten: blend each sample toward the constant x_m on bands near both
   endpoints, restoring membership after every substep with a scalar
   corrector along a fixed bump direction;
2. anchor the ends: replace five transition windows by solder segments whose
   endpoint angle offsets interpolate toward zero on the left and toward a
   small surviving offset eta at pi - delta0' on the right, making the ends
   theta-independent;
3. polynomialize: blend the central window toward a per-sample polynomial
   fit; the offset arriving at pi - delta1' (kept inside (eta/2, 3 eta/2))
   is absorbed exactly by re-soldering a fixed right window;
4. squeeze: walls m*t +- (4-s)*m*pi close onto the line m*t; nodes whose
   stage-3 angle offset sits inside the walls keep their stage-3 values,
   nodes beyond the walls by more than tol_wall become x_m, the thin
   transition bands in between are filled by linear interpolation in t, and
   the right window is re-soldered;
5. collapse: straight-line blend onto the anchor u_star, re-soldered.

Stages 1, 3 and 5 maintain membership by corrector projection, stages 2 and
4 by the exactness of the solder segments.  Membership residuals, squeeze
gap measures and correction sizes are recorded for every (s, theta).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from .funcspace import GridFunction, bump_beta, grid_nodes, trapezoid, write_csv
from .nonlinearity import Nonlinearity, TamenessReport, analyze, critical_abscissa
from .prufer import _d_omega_end_batch, _march_omega_batch, q_profile
from .critical import project, residual
from .solder import _xi_solder_batch, solder_eps

__all__ = [
    "LoopFamily",
    "ContractionParams",
    "HomotopyTrace",
    "StageError",
    "default_params",
    "build_loop",
    "build_pair",
    "build_anchor",
    "step1_flatten",
    "step2_anchor_ends",
    "step3_polynomialize",
    "step4_squeeze",
    "step5_collapse",
    "contract",
]

_RESOLDER_FLOOR = 1e-12
# The stage-2 solder windows amplify end-angle differences by up to
# ~ m * xi'_max / (sin^2 * |f''|) ~ 1e3, so the flattened family is handed
# off with far tighter residuals than the per-substep stage tolerance to
# keep the anchored ends theta-independent below 1e-9.
_HANDOFF_TOL = 2e-13

GAMMA_NOTE = ("Gamma(r theta)(t) = U(5, theta, t) for r <= 1/2, "
              "U(10 (1 - r), theta, t) for r >= 1/2; bookkeeping only, "
              "never re-sampled")


class StageError(RuntimeError):
    def __init__(self, stage: int, message: str, theta_index: int | None = None):
        where = f"stage {stage}"
        if theta_index is not None:
            where += f", sample {theta_index}"
        super().__init__(f"{where}: {message}")
        self.stage = stage
        self.theta_index = theta_index
        self.partial_trace = None


# ---------------------------------------------------------------------------
# loop families


@dataclass
class LoopFamily:
    m: int
    n: int
    thetas: np.ndarray
    samples: np.ndarray          # (B, n+1)
    resolution: float = math.inf  # max consecutive C0 distance at construction

    def __post_init__(self):
        self.thetas = np.asarray(self.thetas, dtype=float)
        self.samples = np.asarray(self.samples, dtype=float)
        B = len(self.thetas)
        if self.samples.shape != (B, self.n + 1):
            raise ValueError(f"samples shape {self.samples.shape} does not match "
                             f"{B} angles on an n = {self.n} grid")
        if B < 2:
            raise ValueError("a family needs at least two samples")
        if np.any(np.diff(self.thetas) < 0.0):
            raise ValueError("thetas must be sorted")
        if not (np.all(self.samples[:, 0] == 0.0) and np.all(self.samples[:, -1] == 0.0)):
            raise ValueError("samples must satisfy the Dirichlet conditions exactly")

    @property
    def closed(self) -> bool:
        return len(self.thetas) >= 3 and bool(
            np.array_equal(self.samples[0], self.samples[-1]))

    def sample(self, j: int) -> GridFunction:
        return GridFunction(self.n, self.samples[j])

    def residuals(self, f: Nonlinearity) -> np.ndarray:
        return _residuals_batch(f, self.samples, self.m, self.n)

    def to_json(self) -> str:
        return json.dumps({
            "m": self.m,
            "n": self.n,
            "thetas": self.thetas.tolist(),
            "samples": self.samples.tolist(),
        })

    @staticmethod
    def from_json(text: str) -> "LoopFamily":
        obj = json.loads(text)
        fam = LoopFamily(int(obj["m"]), int(obj["n"]),
                         np.array(obj["thetas"], dtype=float),
                         np.array(obj["samples"], dtype=float))
        d = np.max(np.abs(np.diff(fam.samples, axis=0)), axis=1)
        fam.resolution = float(np.max(d)) if len(d) else math.inf
        return fam


def _perturbation_pair(n: int, seed: int):
    """Two fixed smooth Dirichlet directions drawn from the seed."""
    rng = np.random.default_rng(seed)
    t = grid_nodes(n)
    out = []
    for _ in range(2):
        c = rng.normal(size=4)
        p = sum(ck * np.sin((k + 2) * t) for k, ck in enumerate(c))
        p /= np.max(np.abs(p))
        p[0] = p[-1] = 0.0
        out.append(p)
    return out


def build_loop(f: Nonlinearity, m: int, base: GridFunction, amplitude: float,
               count: int, seed: int = 0) -> LoopFamily:
    """Closed loop in C_m: base plus a*(cos(theta) p1 + sin(theta) p2),
    re-projected sample by sample; the closing sample repeats the first."""
    if count < 2:
        raise ValueError("a loop needs at least 2 samples")
    n = base.n
    p1, p2 = _perturbation_pair(n, seed)
    thetas = np.linspace(0.0, 2.0 * math.pi, count + 1)
    samples = np.empty((count + 1, n + 1))
    for j in range(count):
        th = thetas[j]
        pert = amplitude * (math.cos(th) * p1 + math.sin(th) * p2)
        u = GridFunction(n, base.values + pert, base.dirichlet)
        samples[j] = project(f, u, m).values
    samples[count] = samples[0]
    fam = LoopFamily(m, n, thetas, samples)
    fam.resolution = float(np.max(np.max(np.abs(np.diff(samples, axis=0)), axis=1)))
    return fam


def build_pair(f: Nonlinearity, m: int, base: GridFunction, amplitude: float,
               seed: int = 0) -> LoopFamily:
    """Degenerate two-sample family (sphere of dimension zero)."""
    n = base.n
    p1, p2 = _perturbation_pair(n, seed)
    samples = np.empty((2, n + 1))
    for j, pert in enumerate((amplitude * p1, -amplitude * p2)):
        u = GridFunction(n, base.values + pert, base.dirichlet)
        samples[j] = project(f, u, m).values
    fam = LoopFamily(m, n, np.array([0.0, math.pi]), samples)
    fam.resolution = float(np.max(np.abs(samples[1] - samples[0])))
    return fam


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class ContractionParams:
    m: int
    n: int
    x_m: float
    delta1: float
    delta2: float
    delta0: float
    eta: float
    tol_wall: float = 0.05
    s_steps: int = 32
    poly_degree: int = 10
    tol_angle: float = 1e-6
    stage_tol: float = 1e-8
    final_tol: float = 1e-6
    eps_windows: dict = field(default_factory=dict)

    def __post_init__(self):
        h = math.pi / self.n
        k1 = int(round(self.delta1 / h))
        if k1 % 8 != 0 or abs(self.delta1 - k1 * h) > 1e-12:
            raise ValueError("delta1 must span a multiple of 8 grid cells")
        if k1 < 64:
            raise ValueError(f"delta1 = {self.delta1:.4f} spans only {k1} cells; "
                             "need >= 64 (raise n)")
        if not 0.0 < self.delta2 < self.delta1 / 4.0:
            raise ValueError("need 0 < delta2 < delta1/4")
        if not self.delta1 < math.pi / self.m:
            raise ValueError("need delta1 < pi/m")
        if not self.delta1 <= self.delta0:
            raise ValueError("need delta0 >= delta1 (probe bump clear of the bands)")
        if self.eta <= 0.0 or self.tol_wall <= 0.0:
            raise ValueError("eta and tol_wall must be positive")
        if self.s_steps < 1 or self.poly_degree < 2:
            raise ValueError("need s_steps >= 1 and poly_degree >= 2")

    @property
    def h(self) -> float:
        return math.pi / self.n

    @property
    def k1(self) -> int:
        return int(round(self.delta1 / self.h))

    @property
    def d2p(self) -> float:
        return self.delta1 / 2.0

    @property
    def d1p(self) -> float:
        return 3.0 * self.delta1 / 4.0

    @property
    def d0p(self) -> float:
        return 7.0 * self.delta1 / 8.0

    @property
    def i_q(self) -> int:
        return self.k1 // 4

    @property
    def i_d2p(self) -> int:
        return self.k1 // 2

    @property
    def i_d1p(self) -> int:
        return 3 * self.k1 // 4

    @property
    def i_d0p(self) -> int:
        return 7 * self.k1 // 8

    def windows(self) -> dict:
        n, k1 = self.n, self.k1
        return {
            "W1": (self.i_q, self.i_d2p),
            "W2": (self.i_d1p, k1),
            "W3": (n - k1, n - self.i_d0p),
            "W4": (n - self.i_d0p, n - self.i_d1p),
            "W5": (n - self.i_d2p, n - self.i_q),
            "WR": (n - self.i_d1p, n - self.i_d2p),
        }

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "m", "n", "x_m", "delta1", "delta2", "delta0", "eta", "tol_wall",
            "s_steps", "poly_degree", "tol_angle", "stage_tol", "final_tol")}
        d["derived"] = {"d2p": self.d2p, "d1p": self.d1p, "d0p": self.d0p}
        d["eps_windows"] = dict(self.eps_windows)
        return d


def default_params(f: Nonlinearity, m: int, n: int = 2048,
                   report: TamenessReport | None = None,
                   **overrides) -> ContractionParams:
    """Defaults: delta1 = min(pi/(4m), 0.4) snapped to 8 grid cells,
    delta2 = delta1/8, delta0 = min(2.5 delta1, 0.98 pi/4), eta = 0.05 times
    the smallest solder eps over the six windows."""
    h = math.pi / n
    if report is None:
        span = 3.0 * m * m + 10.0
        report = analyze(f, -span, span, m)
    x_m = critical_abscissa(f, m, report)

    if "delta1" in overrides:
        k1 = int(round(overrides.pop("delta1") / (8.0 * h))) * 8
    else:
        k1 = int(round(min(math.pi / (4.0 * m), 0.4) / (8.0 * h))) * 8
    k1 = max(k1, 64)
    while k1 * h >= math.pi / m and k1 > 64:
        k1 -= 8
    delta1 = k1 * h
    delta2 = overrides.pop("delta2", delta1 / 8.0)
    # bump_beta needs delta0 < pi/4; the 2.5*delta1 probe radius exceeds it
    # for m = 1, so cap (any delta0 >= delta1 keeps the bands untouched)
    delta0 = overrides.pop("delta0", min(2.5 * delta1, 0.98 * math.pi / 4.0))
    eta_over = overrides.pop("eta", None)

    probe = ContractionParams(m, n, x_m, delta1, delta2, delta0, eta=1e-3,
                              **overrides)
    eps_windows = {}
    for name, (i0, i1) in probe.windows().items():
        eps_windows[name] = solder_eps(f, m, x_m, i0 * h, i1 * h, n)
    eta = eta_over if eta_over is not None else 0.05 * min(eps_windows.values())
    return ContractionParams(m, n, x_m, delta1, delta2, delta0, eta,
                             eps_windows=eps_windows, **overrides)


# ---------------------------------------------------------------------------
# batched membership helpers


def _omega_batch(f, samples, m, n):
    qn, qm = q_profile(f, samples)
    return _march_omega_batch(qn, qm, m, math.pi / n, 0.0)


def _residuals_batch(f, samples, m, n):
    return _omega_batch(f, samples, m, n)[:, -1] - m * math.pi


def _project_batch(f, samples, m, n, phis, tol, stage):
    """Correct each row of samples along its row of phis until the end
    residual is within tol; returns (corrected, taus, residuals)."""
    B = samples.shape[0]
    tau = np.zeros(B)
    cur = samples.copy()
    r = _residuals_batch(f, cur, m, n)
    lo_t = np.full(B, np.nan)
    hi_t = np.full(B, np.nan)
    for _ in range(60):
        neg = r < 0.0
        lo_t = np.where(neg, tau, lo_t)
        hi_t = np.where(~neg, tau, hi_t)
        active = np.abs(r) > tol
        if not np.any(active):
            return cur, tau, r
        slopes = _d_omega_end_batch(f, cur, m, phis)
        tiny = active & (np.abs(slopes) < 1e-12)
        if np.any(tiny):
            raise StageError(stage, "corrector derivative below 1e-12",
                             int(np.nonzero(tiny)[0][0]))
        tau_new = tau - np.where(active, r / slopes, 0.0)
        bracketed = ~np.isnan(lo_t) & ~np.isnan(hi_t)
        a = np.fmin(lo_t, hi_t)
        b = np.fmax(lo_t, hi_t)
        outside = bracketed & ((tau_new <= a) | (tau_new >= b))
        tau_new = np.where(outside, 0.5 * (a + b), tau_new)
        escaped = active & (np.abs(tau_new) > 1.0)
        if np.any(escaped):
            raise StageError(stage, "no corrector bracket within |tau| <= 1",
                             int(np.nonzero(escaped)[0][0]))
        tau = np.where(active, tau_new, tau)
        cur = samples + tau[:, None] * phis
        r = _residuals_batch(f, cur, m, n)
    raise StageError(stage, "corrector did not converge in 60 iterations")


def _polish(f, cur, m, n, params, res, stage, t):
    """Projection polish along -beta_{delta1} f''(u) for rows above the
    stage tolerance; a no-op (correction 0) when all rows already pass."""
    corr = np.zeros(cur.shape[0])
    if np.max(np.abs(res)) <= params.stage_tol:
        return cur, res, corr
    phis = -bump_beta(params.delta1, n).values * f.d2_array(cur)
    cur2, tau, res2 = _project_batch(f, cur, m, n, phis, params.stage_tol, stage)
    return cur2, res2, np.abs(tau) * np.max(np.abs(phis), axis=1)


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageResult:
    samples: np.ndarray
    records: list
    info: dict


def _record(records, stage, s, thetas, res, mu_at=None, corr=None):
    B = len(thetas)
    mu = mu_at if mu_at is not None else [math.nan] * B
    co = corr if corr is not None else [math.nan] * B
    for j in range(B):
        records.append((stage, float(s), float(thetas[j]), float(res[j]),
                        float(mu[j]), float(co[j])))


def _check_residuals(stage, res, tol):
    if np.max(np.abs(res)) > tol:
        bad = int(np.argmax(np.abs(res)))
        raise StageError(stage, f"membership violated: |residual| = "
                                f"{abs(res[bad]):.3e} > {tol:.1e}", bad)


def step1_flatten(f: Nonlinearity, family: LoopFamily,
                  params: ContractionParams) -> StageResult:
    """Stage 1: blend toward the x_m bands near the ends, corrector-projected
    along phi(theta, t) = -beta_{delta0}(t) f''(U(0, theta, t))."""
    p = params
    t = grid_nodes(p.n)
    U0 = family.samples
    B = U0.shape[0]
    b1 = bump_beta(p.delta1, p.n).values
    bh = bump_beta(p.delta2 / 2.0, p.n).values
    phis = -bump_beta(p.delta0, p.n).values * f.d2_array(U0)

    slopes = _d_omega_end_batch(f, U0, p.m, phis)
    eps_probe = float(np.min(slopes))
    if eps_probe <= 1e-10:
        raise StageError(1, f"corrector derivative probe min = {eps_probe:.3e} "
                            "is not positive", int(np.argmin(slopes)))

    records = []
    info = {"eps_probe": eps_probe, "max_step": []}
    xi = np.zeros(B)
    prev = U0
    phi_c0 = np.max(np.abs(phis), axis=1)
    cur = U0
    for k in range(1, p.s_steps + 1):
        s = k / p.s_steps
        tol = p.stage_tol if k < p.s_steps else _HANDOFF_TOL
        base = (1.0 - s + s * b1) * U0 + s * (bh - b1) * p.x_m
        pre = base + xi[:, None] * phis
        cur, dtau, res = _project_batch(f, pre, p.m, p.n, phis, tol, 1)
        xi += dtau
        _record(records, 1, s, family.thetas, res, corr=np.abs(dtau) * phi_c0)
        _check_residuals(1, res, p.tol_angle)
        info["max_step"].append(float(np.max(np.abs(cur - prev))))
        prev = cur

    i_d2 = int(math.floor(p.delta2 / p.h + 1e-9))
    band = np.r_[np.arange(int(math.ceil(p.delta2 / p.h - 1e-9)), p.k1 + 1),
                 np.arange(p.n - p.k1, p.n - i_d2 + 1)]
    if not np.all(cur[:, band] == p.x_m):
        raise StageError(1, "flatten bands are not exactly x_m")
    ends = np.r_[np.arange(0, i_d2 + 1), np.arange(p.n - i_d2, p.n + 1)]
    spread = float(np.max(np.abs(cur[:, ends] - cur[0, ends]))) if B > 1 else 0.0
    if spread > 1e-9:
        raise StageError(1, f"end windows are theta-dependent (spread {spread:.2e})")
    if np.max(np.abs(cur[:, ends])) > abs(p.x_m) + 1e-12:
        raise StageError(1, "|U| exceeds |x_m| on the end windows")
    info["end_spread"] = spread
    return StageResult(cur, records, info)


def step2_anchor_ends(f: Nonlinearity, family: LoopFamily,
                      params: ContractionParams) -> StageResult:
    """Stage 2: solder the five transition windows; the offsets h_-/h_+ of
    the flattened family interpolate toward (0, eta, 0) as s runs to 2."""
    p = params
    U1 = family.samples
    B = U1.shape[0]
    W = p.windows()

    w1 = _omega_batch(f, U1, p.m, p.n)
    h_minus = w1[:, p.i_q] - p.m * p.i_q * p.h
    h_plus = w1[:, p.n - p.i_q] - p.m * (p.n - p.i_q) * p.h

    for name, bound in (("W1", np.abs(h_minus)), ("W2", np.abs(h_minus)),
                        ("W3", np.maximum(np.abs(h_plus), p.eta)),
                        ("W4", np.maximum(np.abs(h_plus), p.eta)),
                        ("W5", np.abs(h_plus))):
        eps = p.eps_windows.get(name, math.inf)
        if np.any(bound >= eps):
            bad = int(np.argmax(bound))
            raise StageError(2, f"offset {float(bound[bad]):.3e} exceeds the "
                                f"solder eps {eps:.3e} on {name} "
                                "(shrink delta2 and rerun stage 1)", bad)

    records = []
    info = {"h_minus": h_minus.tolist(), "h_plus": h_plus.tolist(), "max_step": []}
    prev = U1
    cur = U1
    for k in range(1, p.s_steps + 1):
        s = 1.0 + k / p.s_steps
        hm_s = (2.0 - s) * h_minus
        h0p = p.eta + (2.0 - s) * (h_plus - p.eta)
        h1p = (2.0 - s) * h_plus
        plan = {
            "W1": (h_minus, hm_s),
            "W2": (hm_s, h_minus),
            "W3": (h_plus, h0p),
            "W4": (h0p, h1p),
            "W5": (h1p, h_plus),
        }
        cur = U1.copy()
        for name, (h0v, h1v) in plan.items():
            a, b = W[name]
            cur[:, a:b + 1] = _xi_solder_batch(f, p.m, p.x_m, a, b, h0v, h1v, p.n)
        if k == p.s_steps:
            # the contracted end windows are theta-independent up to the
            # residual-driven offset noise (< 1e-9); snap them to the
            # per-node median (invariant under sample reordering) so the
            # pinning from here on is exact (residual shift is orders below
            # the stage tolerance)
            cur[:, : p.i_d1p + 1] = np.median(cur[:, : p.i_d1p + 1], axis=0)
            cur[:, p.n - p.i_d0p:] = np.median(cur[:, p.n - p.i_d0p:], axis=0)
        res = _residuals_batch(f, cur, p.m, p.n)
        _record(records, 2, s, family.thetas, res)
        _check_residuals(2, res, p.tol_angle)
        info["max_step"].append(float(np.max(np.abs(cur - prev))))
        prev = cur

    wf = _omega_batch(f, cur, p.m, p.n)
    mt = p.m * grid_nodes(p.n)
    bands = np.r_[np.arange(p.i_d2p, p.i_d1p + 1),
                  np.arange(p.n - p.i_d1p, p.n - p.i_d2p + 1)]
    slope_err = float(np.max(np.abs(wf[:, bands] - mt[bands])))
    eta_err = float(np.max(np.abs(wf[:, p.n - p.i_d0p]
                                  - (mt[p.n - p.i_d0p] + p.eta))))
    endw = np.r_[np.arange(0, p.i_d1p + 1), np.arange(p.n - p.i_d0p, p.n + 1)]
    spread = float(np.max(np.abs(cur[:, endw] - cur[0, endw]))) if B > 1 else 0.0
    info.update(slope_err=slope_err, eta_err=eta_err, end_spread=spread)
    if slope_err > p.stage_tol:
        raise StageError(2, f"omega != m t on the anchored bands ({slope_err:.2e})")
    if eta_err > p.stage_tol:
        raise StageError(2, f"eta offset missed at pi - d0' ({eta_err:.2e})")
    if spread > 1e-9:
        raise StageError(2, f"ends remained theta-dependent (spread {spread:.2e})")
    return StageResult(cur, records, info)


def build_anchor(f: Nonlinearity, m: int, params: ContractionParams,
                 stage2_sample) -> GridFunction:
    """The anchor u_star: a stage-2 sample near the ends, x_m across the
    middle (which value of theta supplies the ends is immaterial)."""
    p = params
    vals = np.asarray(stage2_sample.values if isinstance(stage2_sample, GridFunction)
                      else stage2_sample, dtype=float).copy()
    vals[p.i_d2p: p.n - p.i_d2p + 1] = p.x_m
    u_star = GridFunction(p.n, vals)
    r = residual(f, u_star, m)
    if abs(r) > p.stage_tol:
        raise StageError(2, f"anchor residual {r:.3e} exceeds {p.stage_tol:.1e}")
    return u_star


def _resolder(f, cur, params, h_vec):
    """Replace the fixed right window by solder segments absorbing h_vec."""
    p = params
    a, b = p.windows()["WR"]
    h0 = np.where(np.abs(h_vec) < _RESOLDER_FLOOR, 0.0, h_vec)
    eps = p.eps_windows.get("WR", math.inf)
    if np.any(np.abs(h0) >= eps):
        bad = int(np.argmax(np.abs(h0)))
        raise StageError(4, f"re-solder offset {float(h0[bad]):.3e} exceeds "
                            f"eps {eps:.3e} (reduce tol_wall)", bad)
    cur[:, a:b + 1] = _xi_solder_batch(f, p.m, p.x_m, a, b, h0,
                                       np.zeros_like(h0), p.n)
    return cur


def _chebyshev_design(t, degree):
    ta, tb = t[0], t[-1]
    tau = (2.0 * t - (ta + tb)) / (tb - ta)
    weight = (t - ta) * (tb - t)
    cols = np.polynomial.chebyshev.chebvander(tau, degree - 2)
    return weight[:, None] * cols


def _fit_rows(A, target, threads=None):
    """Per-sample least squares: one independent solve per row of target,
    optionally through a worker pool (results are placed by index, so the
    outcome is identical for any ordering or worker count)."""
    def solve(row):
        coef, *_ = np.linalg.lstsq(A, row, rcond=None)
        return A @ coef

    rows = list(target)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            fitted = list(ex.map(solve, rows))
    else:
        fitted = [solve(row) for row in rows]
    return np.vstack(fitted)


def step3_polynomialize(f: Nonlinearity, family: LoopFamily,
                        params: ContractionParams, u_star: GridFunction,
                        threads: int | None = None) -> StageResult:
    """Stage 3: least-squares polynomial blend on the central window with
    exact x_m interpolation at the window ends, re-soldered on the right.

    The fit degree escalates by 2 up to twice poly_degree whenever the
    arriving offset would leave (eta/2, 3 eta/2)."""
    p = params
    U2 = family.samples
    t = grid_nodes(p.n)
    a, b = p.i_d1p, p.n - p.i_d0p
    frame = np.tile(u_star.values, (U2.shape[0], 1))
    twin = t[a: b + 1]

    target = U2[:, a:b + 1] - p.x_m
    chosen = None
    for degree in range(p.poly_degree, 2 * p.poly_degree + 1, 2):
        A = _chebyshev_design(twin, degree)
        Pvals = p.x_m + _fit_rows(A, target, threads)
        Pvals[:, 0] = p.x_m
        Pvals[:, -1] = p.x_m
        cand = frame.copy()
        cand[:, a:b + 1] = Pvals
        h_end = (_omega_batch(f, cand, p.m, p.n)[:, p.n - p.i_d1p]
                 - p.m * (p.n - p.i_d1p) * p.h)
        if np.all((h_end > 0.55 * p.eta) & (h_end < 1.45 * p.eta)):
            chosen = (degree, Pvals,
                      float(np.max(np.abs(Pvals - U2[:, a:b + 1]))))
            break
    if chosen is None:
        raise StageError(3, f"arriving offset exits (eta/2, 3 eta/2) even at "
                            f"degree {2 * p.poly_degree}")
    degree, Pvals, fit_err = chosen

    records = []
    info = {"degree": degree, "fit_err": fit_err, "max_step": [],
            "h_range": None}
    node_r = p.n - p.i_d1p
    prev = U2
    cur = U2
    h_seen = []
    for k in range(1, p.s_steps + 1):
        sigma = k / p.s_steps
        cur = frame.copy()
        cur[:, a:b + 1] = (1.0 - sigma) * U2[:, a:b + 1] + sigma * Pvals
        h_vec = (_omega_batch(f, cur, p.m, p.n)[:, node_r]
                 - p.m * node_r * p.h)
        if np.any((h_vec <= 0.5 * p.eta) | (h_vec >= 1.5 * p.eta)):
            bad = int(np.argmax(np.abs(h_vec - p.eta)))
            raise StageError(3, f"offset h = {float(h_vec[bad]):.4e} left "
                                f"(eta/2, 3 eta/2), eta = {p.eta:.4e}", bad)
        h_seen.append((float(np.min(h_vec)), float(np.max(h_vec))))
        cur = _resolder(f, cur, p, h_vec)
        res = _residuals_batch(f, cur, p.m, p.n)
        cur, res, corr = _polish(f, cur, p.m, p.n, p, res, 3, t)
        _record(records, 3, 2.0 + sigma, family.thetas, res, corr=corr)
        _check_residuals(3, res, p.tol_angle)
        info["max_step"].append(float(np.max(np.abs(cur - prev))))
        prev = cur
    info["h_range"] = (min(lo for lo, _ in h_seen), max(hi for _, hi in h_seen))
    return StageResult(cur, records, info)


def step4_squeeze(f: Nonlinearity, family: LoopFamily,
                  params: ContractionParams, u_star: GridFunction,
                  record_frames: bool = False) -> StageResult:
    """Stage 4: squeeze the stage-3 angle graph between closing walls.

    Classification runs against the fixed stage-3 offsets g = omega - m t:
    inside the walls keeps stage-3 values, beyond the walls by tol_wall or
    more becomes x_m, the thin bands between are linearly interpolated."""
    p = params
    U3 = family.samples
    B = U3.shape[0]
    t = grid_nodes(p.n)
    g = _omega_batch(f, U3, p.m, p.n) - p.m * t
    c_bound = float(np.max(np.abs(U3)))
    a4, b4 = p.i_d1p, p.n - p.i_d1p
    gwin = g[:, a4:b4 + 1]
    u3win = U3[:, a4:b4 + 1]
    Mw = b4 - a4 + 1
    frame = np.tile(u_star.values, (B, 1))
    node_r = p.n - p.i_d1p

    records = []
    frames = []
    info = {"c_bound": c_bound, "max_step": [], "mu_at_final": None,
            "final_gap": None}
    prev = U3
    cur = U3
    for k in range(1, p.s_steps + 1):
        sigma = k / p.s_steps
        wall = (1.0 - sigma) * p.m * math.pi
        absg = np.abs(gwin)
        is_I = absg <= wall
        is_S = absg >= wall + p.tol_wall
        is_T = ~is_I & ~is_S
        vals = np.where(is_I, u3win, p.x_m)
        for j in range(B):
            tpos = np.nonzero(is_T[j])[0]
            if len(tpos) == 0:
                continue
            known = ~is_T[j].copy()
            kv = vals[j].copy()
            for edge in (0, Mw - 1):
                if not known[edge]:
                    known[edge] = True
                    kv[edge] = p.x_m
            idx = np.nonzero(known)[0]
            fill = np.nonzero(~known)[0]
            vals[j, fill] = np.interp(fill, idx, kv[idx])
        mu_at = is_T.sum(axis=1) * p.h
        cur = frame.copy()
        cur[:, a4:b4 + 1] = vals
        h_vec = (_omega_batch(f, cur, p.m, p.n)[:, node_r]
                 - p.m * node_r * p.h)
        cur = _resolder(f, cur, p, h_vec)
        res = _residuals_batch(f, cur, p.m, p.n)
        _record(records, 4, 3.0 + sigma, family.thetas, res, mu_at=mu_at)
        _check_residuals(4, res, p.tol_angle)
        info["max_step"].append(float(np.max(np.abs(cur - prev))))
        prev = cur
        if record_frames:
            om = _omega_batch(f, cur[:1], p.m, p.n)[0]
            frames.append({"s": 3.0 + sigma, "wall": wall,
                           "u": cur[0].copy(), "omega": om})
        if k == p.s_steps:
            info["mu_at_final"] = (is_T.sum(axis=1) * p.h).tolist()
            info["final_gap"] = ((is_T | is_I).sum(axis=1) * p.h).tolist()
    info["frames"] = frames
    return StageResult(cur, records, info)


def step5_collapse(f: Nonlinearity, family: LoopFamily,
                   params: ContractionParams, u_star: GridFunction,
                   c_bound: float | None = None,
                   gap_measure=None) -> StageResult:
    """Stage 5: straight-line blend onto u_star, re-soldered on the right.

    Premises recorded per sample: C0 distance below 2C + 1 and L1 distance
    below (2C + 1) * gap + the re-solder window width."""
    p = params
    U4 = family.samples
    B = U4.shape[0]
    t = grid_nodes(p.n)
    if c_bound is None:
        c_bound = float(np.max(np.abs(U4)))
    dif = U4 - u_star.values
    c0 = np.max(np.abs(dif), axis=1)
    l1 = trapezoid(np.abs(dif), t, axis=1)
    bound_c0 = 2.0 * c_bound + 1.0
    if np.any(c0 >= bound_c0):
        raise StageError(5, f"C0 premise violated: {float(np.max(c0)):.3e} "
                            f">= {bound_c0:.3e}", int(np.argmax(c0)))
    if gap_measure is not None:
        gap = np.asarray(gap_measure, dtype=float)
        l1_bound = bound_c0 * gap + (p.d1p - p.d2p)
        if np.any(l1 >= l1_bound):
            raise StageError(5, "L1 premise violated against the recorded "
                                "gap diagnostics", int(np.argmax(l1 - l1_bound)))
    else:
        l1_bound = np.full(B, math.nan)

    records = []
    info = {"c0_premise": c0.tolist(), "l1_premise": l1.tolist(),
            "l1_bound": (l1_bound.tolist() if gap_measure is not None else None),
            "max_step": []}
    a4 = p.i_d1p
    node_r = p.n - p.i_d1p
    prev = U4
    cur = U4
    for k in range(1, p.s_steps + 1):
        sigma = k / p.s_steps
        cur = (1.0 - sigma) * U4 + sigma * u_star.values
        cur[:, :a4 + 1] = u_star.values[:a4 + 1]
        cur[:, p.n - p.i_d2p:] = u_star.values[p.n - p.i_d2p:]
        h_vec = (_omega_batch(f, cur, p.m, p.n)[:, node_r]
                 - p.m * node_r * p.h)
        cur = _resolder(f, cur, p, h_vec)
        res = _residuals_batch(f, cur, p.m, p.n)
        cur, res, corr = _polish(f, cur, p.m, p.n, p, res, 5, t)
        _record(records, 5, 4.0 + sigma, family.thetas, res, corr=corr)
        _check_residuals(5, res, p.tol_angle)
        info["max_step"].append(float(np.max(np.abs(cur - prev))))
        prev = cur

    spread = float(np.max(np.abs(cur - u_star.values)))
    info["final_spread"] = spread
    if spread > p.final_tol:
        raise StageError(5, f"final spread {spread:.3e} exceeds "
                            f"final_tol = {p.final_tol:.1e}")
    return StageResult(cur, records, info)


# ---------------------------------------------------------------------------
# the full homotopy


@dataclass
class HomotopyTrace:
    params: ContractionParams
    thetas: np.ndarray
    stages: list            # six (B, n+1) arrays: input and stage ends
    u_star: GridFunction
    records: list           # (stage, s, theta, residual, mu_AT, correction)
    diagnostics: dict
    certified: dict
    frames: list = field(default_factory=list)

    def max_residual(self) -> float:
        return max(abs(r[3]) for r in self.records)

    def write_dir(self, out_dir, threads: int | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        p = self.params
        with open(out / "params.json", "w") as fh:
            json.dump({"params": p.to_dict(),
                       "diagnostics": _jsonable(self.diagnostics),
                       "certified": _jsonable(self.certified),
                       "gamma": GAMMA_NOTE}, fh, indent=2)
        write_csv(self.u_star, out / "ustar.csv")
        jobs = []
        for k, samples in enumerate(self.stages):
            stage_dir = out / f"stage{k}"
            stage_dir.mkdir(exist_ok=True)
            for j in range(samples.shape[0]):
                jobs.append((GridFunction(p.n, samples[j]),
                             stage_dir / f"theta{j}.csv"))
        workers = threads or os.cpu_count() or 1
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as ex:
                list(ex.map(lambda uw: write_csv(*uw), jobs))
        else:
            for u, path in jobs:
                write_csv(u, path)
        with open(out / "residuals.csv", "w", newline="\n") as fh:
            fh.write("stage,s,theta,residual,mu_AT,correction_norm\n")
            for stage, s, theta, res, mu, corr in self.records:
                fh.write(f"{stage},{s:.17g},{theta:.17g},{res:.17g},"
                         f"{mu:.17g},{corr:.17g}\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items() if k != "frames"}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def contract(f: Nonlinearity, m: int, family: LoopFamily,
             params: ContractionParams | None = None,
             threads: int | None = None,
             record_frames: bool = False) -> HomotopyTrace:
    """Run stages 1-5, building u_star after stage 2, and certify the trace.

    When a stage-2 offset exceeds its solder eps, delta2 is halved and stage
    1 rerun (at most four attempts).  Any stage abort re-raises with the
    partial trace attached for diagnosis.
    """
    if family.m != m:
        raise ValueError(f"family was built for m = {family.m}, not {m}")
    if params is None:
        params = default_params(f, m, family.n)
    if params.n != family.n:
        raise ValueError("params and family disagree on the grid size")

    res0 = family.residuals(f)
    if np.max(np.abs(res0)) > params.tol_angle:
        bad = int(np.argmax(np.abs(res0)))
        err = StageError(0, f"input sample {bad} is not a member: "
                            f"|residual| = {abs(res0[bad]):.3e}", bad)
        raise err

    records = []
    _record(records, 0, 0.0, family.thetas, res0)
    stages = [family.samples.copy()]
    diagnostics = {"attempts": 1, "gamma": GAMMA_NOTE,
                   "resolution": family.resolution}

    def _fail(err: StageError, partial_stages):
        err.partial_trace = HomotopyTrace(
            params, family.thetas, partial_stages, u_star_holder[0],
            records, diagnostics, {"aborted": str(err)})
        raise err

    u_star_holder = [GridFunction(family.n, np.zeros(family.n + 1))]
    try:
        r1 = r2 = None
        for attempt in range(4):
            r1 = step1_flatten(f, family, params)
            fam1 = LoopFamily(m, family.n, family.thetas, r1.samples)
            try:
                r2 = step2_anchor_ends(f, fam1, params)
                break
            except StageError as e:
                if "shrink delta2" not in str(e) or attempt == 3:
                    records.extend(r1.records)
                    _fail(e, stages + [r1.samples])
                params = dc_replace(params, delta2=params.delta2 / 2.0)
                diagnostics["attempts"] = attempt + 2
        records.extend(r1.records)
        records.extend(r2.records)
        stages.append(r1.samples)
        stages.append(r2.samples)
        diagnostics["stage1"] = r1.info
        diagnostics["stage2"] = r2.info

        u_star = build_anchor(f, m, params, r2.samples[0])
        u_star_holder[0] = u_star

        fam2 = LoopFamily(m, family.n, family.thetas, r2.samples)
        r3 = step3_polynomialize(f, fam2, params, u_star, threads=threads)
        records.extend(r3.records)
        stages.append(r3.samples)
        diagnostics["stage3"] = r3.info

        fam3 = LoopFamily(m, family.n, family.thetas, r3.samples)
        r4 = step4_squeeze(f, fam3, params, u_star, record_frames=record_frames)
        records.extend(r4.records)
        stages.append(r4.samples)
        frames = r4.info.pop("frames", [])
        diagnostics["stage4"] = r4.info

        fam4 = LoopFamily(m, family.n, family.thetas, r4.samples)
        r5 = step5_collapse(f, fam4, params, u_star,
                            c_bound=r4.info["c_bound"],
                            gap_measure=r4.info["final_gap"])
        records.extend(r5.records)
        stages.append(r5.samples)
        diagnostics["stage5"] = r5.info
    except StageError as e:
        if e.partial_trace is None:
            _fail(e, stages)
        raise

    # certification -------------------------------------------------------
    p = params
    pin = np.r_[np.arange(0, p.i_d2p + 1), np.arange(p.n - p.i_d2p, p.n + 1)]
    pinning = all(np.array_equal(stages[k][:, pin],
                                 np.tile(u_star.values[pin], (len(family.thetas), 1)))
                  for k in (2, 3, 4, 5))
    certified = {
        "stage0_equals_input": bool(np.array_equal(stages[0], family.samples)),
        "max_abs_residual": max(abs(r[3]) for r in records),
        "tol_angle": p.tol_angle,
        "final_spread": diagnostics["stage5"]["final_spread"],
        "final_tol": p.final_tol,
        "endpoint_pinning_exact": bool(pinning),
        "theta_samples": len(family.thetas),
        "closed_loop": family.closed,
    }
    certified["pass"] = (certified["stage0_equals_input"]
                         and certified["max_abs_residual"] <= p.tol_angle
                         and certified["final_spread"] <= p.final_tol
                         and certified["endpoint_pinning_exact"])
    return HomotopyTrace(params, family.thetas, stages, u_star, records,
                         diagnostics, certified, frames)
