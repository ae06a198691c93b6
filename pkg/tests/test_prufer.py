import math

import numpy as np
import pytest

from slcrit.funcspace import GridFunction, grid_nodes, norm, ramp_constant
from slcrit.nonlinearity import parse
from slcrit.prufer import (
    ShootOverflowError,
    d_omega,
    omega_local,
    omega_m,
    q_profile,
    shoot,
    zero_count,
)
from slcrit.critical import find_in_cm

N = 2048


def zero_u(n=N):
    return GridFunction(n, np.zeros(n + 1))


def smooth_phi(n, coeffs):
    t = grid_nodes(n)
    p = sum(c * np.sin((k + 1) * t) for k, c in enumerate(coeffs))
    p[0] = p[-1] = 0.0
    return GridFunction(n, p)


def rhs_omega(f, u, traj):
    """Right-hand side of the angle equation evaluated on a trajectory."""
    q = f.d1_array(u.values)
    m = traj.m
    return m - ((m * m + q) / m) * np.sin(traj.omega) ** 2


class TestShoot:
    def test_free_potential_gives_identity(self, f_zero):
        sol = shoot(f_zero, zero_u())
        assert np.max(np.abs(sol.v - grid_nodes(N))) < 1e-10
        assert np.max(np.abs(sol.vp - 1.0)) < 1e-10

    def test_constant_potential_sine(self, f_cubic4):
        # f'(0) = -4, so v = sin(2t)/2
        sol = shoot(f_cubic4, zero_u())
        t = grid_nodes(N)
        assert np.max(np.abs(sol.v - np.sin(2 * t) / 2)) < 1e-9
        assert abs(sol.v_end) < 1e-9

    def test_step_halving_oracle(self, f_quad):
        # the delta = 0.1 ramp has u'' ~ 6 x_m / delta^2, so the midpoint
        # interpolation contributes an O(h^2) term; at n = 4096 the halved
        # step agrees within 1e-8
        v_ends = []
        for n in (2 * N, 4 * N):
            sol = shoot(f_quad, ramp_constant(-1.0, 0.1, n))
            v_ends.append(sol.v_end)
        assert abs(v_ends[0] - v_ends[1]) < 1e-8

    def test_overflow_reports_abscissa(self):
        f = parse("1000000*x")  # f' = 1e6: v ~ sinh(1000 t)/1000
        with pytest.raises(ShootOverflowError) as ei:
            shoot(f, GridFunction(N, np.ones(N + 1), dirichlet=False))
        assert 0.2 < ei.value.t_blowup < 0.6


class TestOmega:
    def test_arctan_law(self, f_zero):
        for m in (1, 2, 3):
            traj = omega_m(f_zero, zero_u(), m)
            err = np.max(np.abs(traj.omega - np.arctan(m * grid_nodes(N))))
            assert err < 1e-8

    def test_slope_m_on_constant_window(self, f_quad):
        # f'(x_m) = -m^2 makes the angle linear of slope m there
        for m in (1, 2):
            u = ramp_constant(-float(m * m), 0.3, N)
            traj = omega_m(f_quad, u, m)
            h = math.pi / N
            i0 = int(math.ceil(0.3 / h)) + 1
            i1 = int(math.floor((math.pi - 0.3) / h)) - 1
            seg = traj.omega[i0:i1 + 1]
            lin = seg[0] + m * (grid_nodes(N)[i0:i1 + 1] - grid_nodes(N)[i0])
            assert np.max(np.abs(seg - lin)) < 1e-9

    def test_constant_potential_reaches_level(self, f_cubic4):
        traj = omega_m(f_cubic4, zero_u(), 2)
        assert abs(traj.end - 2 * math.pi) < 1e-8

    def test_rejects_bad_m(self, f_zero):
        with pytest.raises(ValueError):
            omega_m(f_zero, zero_u(), 0)

    def test_tan_identity_consistency(self, f_quad, member1):
        for u in (zero_u(), member1, ramp_constant(-0.7, 0.2, N)):
            traj = omega_m(f_quad, u, 1)
            sol = shoot(f_quad, u)
            mask = np.abs(sol.vp) > 1e-8
            lhs = np.tan(traj.omega[mask]) * sol.vp[mask] - sol.v[mask]
            bound = 1e-6 * (1 + np.abs(sol.v[mask]) + np.abs(sol.vp[mask]))
            assert np.all(np.abs(lhs) <= bound)

    def test_crossing_monotonicity(self, f_quad, member2):
        for u in (member2, ramp_constant(-3.0, 0.2, N)):
            traj = omega_m(f_quad, u, 2)
            floors = np.floor(traj.omega / math.pi + 1e-12)
            assert np.all(np.diff(floors) >= 0)

    def test_positive_after_zero(self, f_quad, member1):
        traj = omega_m(f_quad, member1, 1)
        assert np.all(traj.omega[1:] > 0.0)


class TestOmegaLocal:
    def test_forward_from_origin_matches_global(self, f_quad, member1):
        g = omega_m(f_quad, member1, 1)
        l = omega_local(f_quad, member1, 1, 0.0, 0.0, "forward")
        assert np.array_equal(g.omega, l.omega)

    def test_slope_window_with_offset(self, f_quad):
        # constant potential at x_m: local argument from m t0 + h keeps slope m
        m = 1
        u = ramp_constant(-1.0, 0.3, N)
        h_step = math.pi / N
        i0 = int(math.ceil(0.35 / h_step))
        i1 = int(math.floor((math.pi - 0.35) / h_step))
        t0 = i0 * h_step
        for off in (0.0, 0.05):
            traj = omega_local(f_quad, u, m, t0, m * t0 + off, "forward")
            t = grid_nodes(N)[i0:i1 + 1]
            assert np.max(np.abs(traj.omega[i0:i1 + 1] - (m * t + off))) < 1e-9

    def test_backward_consistency(self, f_quad, member1):
        g = omega_m(f_quad, member1, 1)
        b = omega_local(f_quad, member1, 1, math.pi, g.end, "backward")
        assert np.nanmax(np.abs(b.omega - g.omega)) < 1e-7

    def test_nan_outside_range(self, f_quad, member1):
        h_step = math.pi / N
        l = omega_local(f_quad, member1, 1, 512 * h_step, 0.5, "forward")
        assert np.all(np.isnan(l.omega[:512]))
        assert np.all(np.isfinite(l.omega[512:]))

    def test_t0_not_a_node(self, f_quad, member1):
        with pytest.raises(ValueError, match="node"):
            omega_local(f_quad, member1, 1, 0.1234, 0.0, "forward")
        with pytest.raises(ValueError, match="direction"):
            omega_local(f_quad, member1, 1, 0.0, 0.0, "up")


class TestDOmega:
    def test_closed_form_quadrature(self, f_quad):
        # u = 0, v = t: the trapezoid sum of s^2 has the closed form
        # pi^3/3 + pi^3/(6 n^2)
        phi = GridFunction(N, np.ones(N + 1), dirichlet=False)
        got = d_omega(f_quad, zero_u(), 1, phi, math.pi)
        integral = math.pi ** 3 / 3 + math.pi ** 3 / (6 * N * N)
        expected = -integral / (math.pi ** 2 + 1)
        assert got == pytest.approx(expected, abs=1e-8)
        # and the pure integral value up to the h^2 quadrature gap
        assert got == pytest.approx(-(math.pi ** 3 / 3) / (math.pi ** 2 + 1),
                                    abs=1e-5)

    def test_zero_direction(self, f_quad, member1):
        phi = GridFunction(N, np.zeros(N + 1))
        assert d_omega(f_quad, member1, 1, phi, math.pi) == 0.0

    def test_linear_f_gives_zero(self, rng):
        f = parse("-4*x")
        for _ in range(3):
            phi = smooth_phi(N, rng.normal(size=3))
            assert d_omega(f, zero_u(), 2, phi, math.pi) == 0.0

    def test_against_central_differences(self, f_quad, rng):
        eps = 1e-5
        for _ in range(10):
            phi = smooth_phi(N, rng.normal(size=4))
            base = zero_u()
            got = d_omega(f_quad, base, 1, phi, math.pi)
            up = GridFunction(N, base.values + eps * phi.values)
            dn = GridFunction(N, base.values - eps * phi.values)
            fd = (omega_m(f_quad, up, 1).end - omega_m(f_quad, dn, 1).end) / (2 * eps)
            assert got == pytest.approx(fd, rel=1e-5)

    def test_t_must_be_node(self, f_quad, member1):
        phi = GridFunction(N, np.zeros(N + 1))
        with pytest.raises(ValueError, match="node"):
            d_omega(f_quad, member1, 1, phi, 1.2345)


class TestZeroCount:
    def test_constant_potential(self, f_cubic4):
        assert zero_count(omega_m(f_cubic4, zero_u(), 2)) == 2

    def test_free(self, f_zero):
        assert zero_count(omega_m(f_zero, zero_u(), 1)) == 0

    def test_member_counts_match_sign_changes(self, f_quad, report_quad):
        u = find_in_cm(f_quad, 3, report_quad)
        traj = omega_m(f_quad, u, 3)
        assert zero_count(traj) == 3
        v = shoot(f_quad, u).v
        interior = v[1:-1]
        changes = int(np.sum(interior[:-1] * interior[1:] < 0))
        # v(pi) = 0 is the third zero; interior sign changes count the others
        assert changes == 2

    def test_requires_global_trajectory(self, f_quad, member1):
        l = omega_local(f_quad, member1, 1, math.pi / 2, 1.0, "forward")
        with pytest.raises(ValueError):
            zero_count(l)


class TestAngleLemmas:
    def test_slope_equals_m_cases(self, f_quad, member1):
        # where sin(omega) ~ 0 or f'(u) ~ -m^2, the RHS is within 1e-5 of m
        for u, m in ((member1, 1), (ramp_constant(-1.0, 0.3, N), 1)):
            traj = omega_m(f_quad, u, m)
            rhs = rhs_omega(f_quad, u, traj)
            q = f_quad.d1_array(u.values)
            mask = (np.abs(np.sin(traj.omega)) < 1e-6) | (np.abs(q + m * m) < 1e-6)
            assert np.all(np.abs(rhs[mask] - m) < 1e-5)

    def test_comparison_with_m(self, f_quad, rng):
        m = 2
        vals = rng.normal(scale=2.0, size=N + 1)
        vals[0] = vals[-1] = 0.0
        u = GridFunction(N, vals)
        traj = omega_m(f_quad, u, m)
        rhs = rhs_omega(f_quad, u, traj)
        q = f_quad.d1_array(u.values)
        assert np.all(rhs[q < -m * m] >= m)
        assert np.all(rhs[q > -m * m] <= m)

    def test_l1_lipschitz_proxy(self, f_quad):
        # a single constant L fitted on 20 random pairs in a C0 ball of
        # radius 2 covers 10 fresh pairs with no crossings beyond 5%
        m = 1
        rng = np.random.default_rng(20240817)

        def draw():
            vals = sum(c * np.sin((k + 1) * grid_nodes(N))
                       for k, c in enumerate(rng.normal(size=5)))
            vals *= 2.0 / max(1.0, np.max(np.abs(vals)))
            vals[0] = vals[-1] = 0.0
            return GridFunction(N, vals)

        def ratio():
            u, w = draw(), draw()
            dist = norm(GridFunction(N, u.values - w.values), "L1")
            dw = abs(omega_m(f_quad, u, m).end - omega_m(f_quad, w, m).end)
            return dw / dist

        fitted = max(ratio() for _ in range(20))
        assert all(ratio() <= 1.05 * fitted for _ in range(10))


class TestBatchInternals:
    def test_batch_matches_scalar(self, f_quad, member1, member2):
        from slcrit.prufer import _march_omega_batch, _march_shoot_batch
        stack = np.vstack([member1.values, member2.values])
        qn, qm = q_profile(f_quad, stack)
        h = math.pi / N
        wb = _march_omega_batch(qn, qm, 1, h, 0.0)
        assert np.array_equal(wb[0], omega_m(f_quad, member1, 1).omega)
        vb, pb = _march_shoot_batch(qn, qm, h)
        sol = shoot(f_quad, member2)
        assert np.array_equal(vb[1], sol.v)
        assert np.array_equal(pb[1], sol.vp)
