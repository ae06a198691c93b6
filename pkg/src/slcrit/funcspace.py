"""Functions on the uniform grid of [0, pi]: norms, bumps, ramps, segments.

Grid functions are piecewise linear between nodes t_i = i*pi/n; L1/L2 norms
use trapezoid quadrature accordingly.  Transition profiles use the quintic
smoothstep, which is C^2 and exactly 0/1 outside its window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridFunction",
    "GridError",
    "uniform_grid",
    "grid_nodes",
    "norm",
    "bump_beta",
    "bump_beta_at",
    "smoothstep",
    "segment",
    "ramp_constant",
    "c0_distance",
    "write_csv",
    "read_csv",
]


class GridError(ValueError):
    pass


# numpy renamed trapz; support both
trapezoid = getattr(np, "trapezoid", None) or np.trapz


def grid_nodes(n: int) -> np.ndarray:
    """Canonical node array t_i = i*pi/n, i = 0..n (no validation)."""
    return np.linspace(0.0, np.pi, n + 1)


def uniform_grid(n: int) -> np.ndarray:
    if n < 16:
        raise GridError(f"grid too coarse: n = {n} < 16")
    if n % 2 != 0:
        raise GridError(f"grid size must be even, got n = {n}")
    return grid_nodes(n)


@dataclass(frozen=True)
class GridFunction:
    n: int
    values: np.ndarray
    dirichlet: bool = True

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        uniform_grid(self.n)
        if v.shape != (self.n + 1,):
            raise GridError(f"expected {self.n + 1} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GridError("non-finite values")
        if self.dirichlet and not (v[0] == 0.0 and v[-1] == 0.0):
            raise GridError("dirichlet function must vanish exactly at the endpoints")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def t(self) -> np.ndarray:
        return grid_nodes(self.n)

    def _check_compatible(self, other: "GridFunction") -> None:
        if self.n != other.n:
            raise GridError(f"grid mismatch: n = {self.n} vs {other.n}")

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return GridFunction(self.n, self.values + other.values,
                            self.dirichlet and other.dirichlet)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        return GridFunction(self.n, self.values - other.values,
                            self.dirichlet and other.dirichlet)

    def __rmul__(self, c: float) -> "GridFunction":
        return GridFunction(self.n, float(c) * self.values, self.dirichlet)


def norm(u: GridFunction, kind: str) -> float:
    if kind == "C0":
        return float(np.max(np.abs(u.values)))
    if kind == "L1":
        return float(trapezoid(np.abs(u.values), u.t))
    if kind == "L2":
        return float(np.sqrt(trapezoid(u.values * u.values, u.t)))
    raise ValueError(f"unknown norm kind {kind!r}; expected C0, L1 or L2")


def c0_distance(u: GridFunction, w: GridFunction) -> float:
    u._check_compatible(w)
    return float(np.max(np.abs(u.values - w.values)))


def smoothstep(y):
    """Quintic smoothstep: exactly 0 for y <= 0 and 1 for y >= 1, C^2 across.

    For y within 1e-6 of 1 the true value rounds to 1.0 in double precision,
    so it is returned as exactly 1.0 (the raw polynomial otherwise carries
    rounding noise above 1)."""
    y = np.asarray(y, dtype=float)
    yc = np.clip(y, 0.0, 1.0)
    s = yc * yc * yc * (10.0 + yc * (-15.0 + 6.0 * yc))
    s = np.where(y <= 0.0, 0.0,
                 np.where(y >= 1.0 - 1e-6, 1.0, np.minimum(s, 1.0)))
    return s if s.ndim else float(s)


def _check_delta(delta: float) -> None:
    if not 0.0 < delta < np.pi / 4.0:
        raise GridError(f"delta = {delta} out of range (0, pi/4)")


def bump_beta_at(delta: float, t) -> np.ndarray:
    """The bump profile: 0 on [0, delta], 1 on [2 delta, pi - 2 delta], mirrored."""
    _check_delta(delta)
    t = np.asarray(t, dtype=float)
    return smoothstep((t - delta) / delta) * smoothstep((np.pi - delta - t) / delta)


def bump_beta(delta: float, n: int) -> GridFunction:
    """Node samples of the bump; the distance to the nearer endpoint is taken
    in index space, making mirrored nodes exactly equal."""
    _check_delta(delta)
    i = np.arange(n + 1)
    s = np.minimum(i, n - i) * (np.pi / n)
    return GridFunction(n, np.asarray(smoothstep((s - delta) / delta)))


def segment(u0: GridFunction, u1: GridFunction, s: float) -> GridFunction:
    """Pointwise straight-line blend (1-s) u0 + s u1."""
    u0._check_compatible(u1)
    if u0.dirichlet != u1.dirichlet:
        raise GridError("incompatible dirichlet flags")
    return GridFunction(u0.n, (1.0 - s) * u0.values + s * u1.values, u0.dirichlet)


def ramp_constant(x: float, delta: float, n: int) -> GridFunction:
    """Dirichlet function equal to x on [delta, pi - delta], smoothstep ramps to 0."""
    _check_delta(delta)
    t = grid_nodes(n)
    vals = x * smoothstep(t / delta) * smoothstep((np.pi - t) / delta)
    return GridFunction(n, vals)


# ---------------------------------------------------------------------------
# CSV interchange: header "t,u", one row per node, 17 significant digits


def write_csv(u: GridFunction, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("t,u\n")
        for t, v in zip(u.t, u.values):
            fh.write(f"{t:.17g},{v:.17g}\n")


def read_csv(path) -> GridFunction:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "t,u":
        raise GridError(f"{path}: expected header 't,u'")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 2:
            raise GridError(f"{path}: malformed row {ln!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise GridError(f"{path}: {e}") from e
    n = len(rows) - 1
    if n < 16:
        raise GridError(f"{path}: too few rows ({len(rows)})")
    t = np.array([r[0] for r in rows])
    if not np.allclose(t, grid_nodes(n), rtol=0.0, atol=1e-12):
        raise GridError(f"{path}: node column is not the uniform grid of [0, pi]")
    vals = np.array([r[1] for r in rows])
    dirichlet = vals[0] == 0.0 and vals[-1] == 0.0
    return GridFunction(n, vals, dirichlet)
