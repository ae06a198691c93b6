import math
from dataclasses import replace

import numpy as np
import pytest

from slcrit.funcspace import GridFunction, bump_beta, grid_nodes, smoothstep
from slcrit.nonlinearity import parse
from slcrit.prufer import omega_m
from slcrit.critical import find_in_cm, project, residual
from slcrit.solder import solder_spec, xi_solder
from slcrit.contraction import (
    ContractionParams,
    LoopFamily,
    StageError,
    build_anchor,
    build_loop,
    build_pair,
    contract,
    default_params,
    step1_flatten,
    step2_anchor_ends,
    step3_polynomialize,
    step4_squeeze,
    step5_collapse,
    _chebyshev_design,
)

N = 512  # the contraction unit tests run on a coarse grid for speed
M = 1


@pytest.fixture(scope="module")
def base(f_quad, report_quad):
    return find_in_cm(f_quad, M, report_quad, n=N)


@pytest.fixture(scope="module")
def params(f_quad, report_quad):
    return default_params(f_quad, M, N, report=report_quad, s_steps=8)


@pytest.fixture(scope="module")
def loop(f_quad, base):
    return build_loop(f_quad, M, base, 1e-2, 6, seed=11)


@pytest.fixture(scope="module")
def trace(f_quad, loop, params):
    return contract(f_quad, M, loop, params)


@pytest.fixture(scope="module")
def stage_families(f_quad, loop, params, trace):
    return [LoopFamily(M, N, loop.thetas, s) for s in trace.stages]


class TestParams:
    def test_defaults(self, params):
        p = params
        assert p.k1 % 8 == 0
        assert 0 < p.delta2 < p.delta1 / 4
        assert p.delta1 < math.pi / M
        assert p.d2p == p.delta1 / 2
        assert p.d1p == 3 * p.delta1 / 4
        assert p.d0p == 7 * p.delta1 / 8
        assert p.eta == pytest.approx(0.05 * min(p.eps_windows.values()))

    def test_window_nodes(self, params):
        for a, b in params.windows().values():
            assert 0 < a < b < params.n

    def test_validation(self, params):
        with pytest.raises(ValueError, match="delta2"):
            replace(params, delta2=params.delta1 / 2)
        with pytest.raises(ValueError, match="eta"):
            replace(params, eta=0.0)
        with pytest.raises(ValueError, match="multiple of 8"):
            replace(params, delta1=params.delta1 + params.h)
        with pytest.raises(ValueError, match="pi/m"):
            ContractionParams(8, N, -64.0, params.delta1, params.delta2,
                              params.delta0, 0.01)


class TestLoopFamily:
    def test_zero_amplitude_constant(self, f_quad, base):
        fam = build_loop(f_quad, M, base, 0.0, 4, seed=0)
        assert np.all(fam.samples == base.values)
        assert fam.closed

    def test_loop_members(self, f_quad, loop):
        res = loop.residuals(f_quad)
        assert np.max(np.abs(res)) < 1e-8
        assert loop.closed
        assert len(loop.thetas) == 7  # 6 samples plus the closing repeat

    def test_pair(self, f_quad, base):
        fam = build_pair(f_quad, M, base, 1e-2, seed=1)
        assert len(fam.thetas) == 2
        assert not fam.closed
        assert np.max(np.abs(fam.residuals(f_quad))) < 1e-8

    def test_json_roundtrip(self, f_quad, loop):
        back = LoopFamily.from_json(loop.to_json())
        assert back.m == loop.m and back.n == loop.n
        assert np.array_equal(back.samples, loop.samples)
        assert np.array_equal(back.thetas, loop.thetas)

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            LoopFamily(1, N, np.array([0.0, 1.0]), np.zeros((3, N + 1)))
        bad = np.zeros((2, N + 1))
        bad[0, 0] = 0.5
        with pytest.raises(ValueError, match="Dirichlet"):
            LoopFamily(1, N, np.array([0.0, 1.0]), bad)


class TestStage1:
    def test_postconditions(self, f_quad, loop, params, trace):
        p = params
        U1 = trace.stages[1]
        i_d2 = int(round(p.delta2 / p.h))
        band = np.r_[np.arange(i_d2, p.k1 + 1),
                     np.arange(N - p.k1, N - i_d2 + 1)]
        assert np.all(U1[:, band] == p.x_m)
        ends = np.r_[np.arange(0, i_d2 + 1), np.arange(N - i_d2, N + 1)]
        assert np.max(np.abs(U1[:, ends])) <= abs(p.x_m) + 1e-12
        assert np.max(np.abs(U1[:, ends] - U1[0, ends])) < 1e-9
        assert trace.diagnostics["stage1"]["eps_probe"] > 0

    def test_fixed_point_family_unchanged(self, f_quad, report_quad, params):
        # a member that is exactly invariant under the flattening blend:
        # beta-ramped x_m out to 2*delta1 at both ends, the membership made
        # up by a solder segment across the middle, corrected only inside it
        p = params
        t = grid_nodes(N)
        bh = bump_beta(p.delta2 / 2.0, N).values
        vals = bh * p.x_m
        ia, ib = 2 * p.k1, N - 2 * p.k1
        w = omega_m(f_quad, GridFunction(N, vals), M).omega
        off = float(w[ia] - M * t[ia])
        spec = solder_spec(f_quad, M, p.x_m, ia * p.h, ib * p.h, off, -off, N)
        vals = vals.copy()
        vals[ia: ib + 1] = xi_solder(f_quad, spec)
        mid = (smoothstep((t - (ia + 1) * p.h) / 0.1)
               * smoothstep(((ib - 1) * p.h - t) / 0.1))
        phi = GridFunction(N, -mid * f_quad.d2_array(vals))
        u_fix = project(f_quad, GridFunction(N, vals), M, phi_dir=phi,
                        tol=1e-13)
        fam = LoopFamily(M, N, np.array([0.0, math.pi]),
                         np.vstack([u_fix.values, u_fix.values]))
        out = step1_flatten(f_quad, fam, params)
        assert np.max(np.abs(out.samples - u_fix.values)) <= 1e-12

    def test_rejects_nonmember(self, f_quad, loop, params):
        bad = loop.samples.copy()
        bad[2] += 1e-3 * np.sin(2 * grid_nodes(N)) * \
            (grid_nodes(N) * (math.pi - grid_nodes(N)) > 0)
        bad[2, 0] = bad[2, -1] = 0.0
        fam = LoopFamily(M, N, loop.thetas, bad)
        with pytest.raises(StageError) as ei:
            contract(f_quad, M, fam, params)
        assert ei.value.stage == 0
        assert ei.value.theta_index == 2


class TestStage2:
    def test_contracts(self, trace, params):
        d = trace.diagnostics["stage2"]
        assert d["slope_err"] <= 1e-8
        assert d["eta_err"] <= 1e-8
        assert d["end_spread"] < 1e-9

    def test_angle_linear_on_bands(self, f_quad, stage_families, params):
        p = params
        U2 = stage_families[2].samples
        w = omega_m(f_quad, GridFunction(N, U2[1]), M).omega
        mt = M * grid_nodes(N)
        bands = np.r_[np.arange(p.i_d2p, p.i_d1p + 1),
                      np.arange(N - p.i_d1p, N - p.i_d2p + 1)]
        assert np.max(np.abs(w[bands] - mt[bands])) < 1e-8

    def test_eta_offset_realized(self, f_quad, stage_families, params):
        p = params
        w = omega_m(f_quad, stage_families[2].sample(0), M).omega
        node = N - p.i_d0p
        assert abs(w[node] - (M * node * p.h + p.eta)) < 1e-8


class TestAnchor:
    def test_anchor_properties(self, f_quad, trace, params):
        u = trace.u_star
        p = params
        assert u.values[N // 2] == p.x_m
        assert u.values[0] == 0.0 and u.values[-1] == 0.0
        assert abs(residual(f_quad, u, M)) <= 1e-8

    def test_build_anchor_matches_trace(self, f_quad, stage_families, params, trace):
        u = build_anchor(f_quad, M, params, stage_families[2].sample(0))
        assert np.array_equal(u.values, trace.u_star.values)


class TestStage3:
    def test_polynomial_window_is_fixed(self, f_quad, stage_families, params,
                                        trace):
        # substituting the window by its own fit makes the stage an identity
        # away from the slide and re-solder windows
        p = params
        fam2 = stage_families[2]
        a, b = p.i_d1p, N - p.i_d0p
        t = grid_nodes(N)[a: b + 1]
        A = _chebyshev_design(t, p.poly_degree)
        target = fam2.samples[:, a:b + 1] - p.x_m
        coef, *_ = np.linalg.lstsq(A, target.T, rcond=None)
        sub = fam2.samples.copy()
        sub[:, a:b + 1] = p.x_m + (A @ coef).T
        sub[:, a] = p.x_m
        sub[:, b] = p.x_m
        fam_sub = LoopFamily(M, N, fam2.thetas, sub)
        out = step3_polynomialize(f_quad, fam_sub, params, trace.u_star)
        assert out.info["fit_err"] < 1e-9
        same = np.max(np.abs(out.samples[:, : N - p.i_d0p + 1]
                             - sub[:, : N - p.i_d0p + 1]))
        assert same < 1e-12
        res = np.array([r[3] for r in out.records])
        assert np.max(np.abs(res)) <= 1e-8

    def test_fit_error_decreases_with_degree(self, f_quad, stage_families,
                                             params):
        p = params
        fam2 = stage_families[2]
        a, b = p.i_d1p, N - p.i_d0p
        t = grid_nodes(N)[a: b + 1]
        target = fam2.samples[:, a:b + 1] - p.x_m
        errs = []
        for degree in (6, 8, 10, 12, 14):
            A = _chebyshev_design(t, degree)
            coef, *_ = np.linalg.lstsq(A, target.T, rcond=None)
            errs.append(float(np.max(np.abs(A @ coef - target.T))))
        assert errs[-1] < errs[0]
        for lo, hi in zip(errs[1:], errs[:-1]):
            assert lo <= 1.05 * hi

    def test_endpoint_interpolation_exact(self, f_quad, trace, params):
        p = params
        U3 = trace.stages[3]
        assert np.all(U3[:, p.i_d1p] == p.x_m)
        assert np.all(U3[:, N - p.i_d0p] == p.x_m)

    def test_offsets_stay_in_band(self, trace, params):
        lo, hi = trace.diagnostics["stage3"]["h_range"]
        assert params.eta / 2 < lo <= hi < 1.5 * params.eta


class TestStage4:
    def test_first_substep_is_noop(self, trace):
        assert trace.diagnostics["stage4"]["max_step"][0] < 1e-9

    def test_final_partition(self, f_quad, stage_families, params):
        # at s = 4 the walls sit on the line: away from the transition band
        # every squeeze-window node is x_m or has offset exactly zero
        p = params
        fam3 = stage_families[3]
        out = step4_squeeze(f_quad, fam3, params, build_anchor(
            f_quad, M, params, stage_families[2].sample(0)))
        g = omega_m(f_quad, fam3.sample(0), M).omega - M * grid_nodes(N)
        a4, b4 = p.i_d1p, N - p.i_d1p
        win = slice(a4, N - p.i_d1p + 1)
        gw = g[a4: b4 + 1]
        vals = out.samples[0, a4: b4 + 1]
        not_t = ~((np.abs(gw) > 0) & (np.abs(gw) < p.tol_wall))
        assert np.all((vals[not_t] == p.x_m) | (np.abs(gw[not_t]) == 0.0))

    def test_mu_at_monotone_in_tol_wall(self, f_quad, stage_families, params,
                                        trace):
        fam3 = stage_families[3]
        mus = []
        for tol in (0.2, 0.1, 0.05, 0.025):
            p2 = replace(params, tol_wall=tol)
            out = step4_squeeze(f_quad, fam3, p2, trace.u_star)
            mus.append(max(out.info["mu_at_final"]))
        assert all(a >= b for a, b in zip(mus, mus[1:]))

    def test_records_mu(self, trace):
        stage4 = [r for r in trace.records if r[0] == 4]
        assert all(np.isfinite(r[4]) for r in stage4)


class TestStage5:
    def test_identity_on_anchor_family(self, f_quad, trace, params):
        u = trace.u_star
        fam = LoopFamily(M, N, np.array([0.0, math.pi]),
                         np.vstack([u.values, u.values]))
        out = step5_collapse(f_quad, fam, params, u)
        assert np.max(np.abs(out.samples - u.values)) <= 1e-12

    def test_premises_recorded(self, trace):
        d = trace.diagnostics["stage5"]
        assert max(d["c0_premise"]) < 2 * trace.diagnostics["stage4"]["c_bound"] + 1
        assert d["l1_bound"] is not None
        assert all(l1 < b for l1, b in zip(d["l1_premise"], d["l1_bound"]))


class TestContract:
    def test_certification(self, trace, params):
        c = trace.certified
        assert c["pass"]
        assert c["stage0_equals_input"]
        assert c["max_abs_residual"] <= params.tol_angle
        assert c["final_spread"] <= params.final_tol
        assert c["endpoint_pinning_exact"]

    def test_global_membership_records(self, trace):
        assert max(abs(r[3]) for r in trace.records) <= 1e-6

    def test_pair_contracts_to_anchor(self, f_quad, base, params):
        fam = build_pair(f_quad, M, base, 1e-2, seed=2)
        tr = contract(f_quad, M, fam, params)
        assert tr.certified["pass"]
        assert np.max(np.abs(tr.stages[5] - tr.u_star.values)) <= 1e-6

    def test_theta_permutation_invariance(self, f_quad, loop, params):
        # reversing the sample order must reproduce the same per-sample
        # trajectories bit for bit
        rev = LoopFamily(M, N, loop.thetas,
                         loop.samples[::-1].copy())
        # thetas must stay sorted: relabel
        rev.thetas = loop.thetas
        a = contract(f_quad, M, loop, params)
        b = contract(f_quad, M, rev, params)
        for k in range(6):
            assert np.array_equal(a.stages[k], b.stages[k][::-1])

    def test_s_continuity_halving(self, f_quad, base, report_quad):
        # interior substeps shrink by half when s_steps doubles; the first
        # substep of a stage (reconfiguration) and the last of stage 4 (the
        # terminal collapse onto the line, not resolvable in s on a grid)
        # are excluded
        fam = build_loop(f_quad, M, base, 1e-2, 4, seed=5)
        maxima = {}
        for ss in (16, 32):
            p = default_params(f_quad, M, N, report=report_quad,
                               s_steps=ss, tol_wall=0.2)
            tr = contract(f_quad, M, fam, p)
            maxima[ss] = {k: tr.diagnostics[f"stage{k}"]["max_step"][1:-1]
                          for k in range(1, 6)}
        for k in range(1, 6):
            hi = max(maxima[16][k], default=0.0)
            lo = max(maxima[32][k], default=0.0)
            if hi > 1e-6:
                assert 0.4 <= lo / hi <= 0.6, f"stage {k}: {lo / hi}"

    def test_write_dir(self, trace, tmp_path):
        out = tmp_path / "trace"
        trace.write_dir(out, threads=2)
        assert (out / "params.json").exists()
        assert (out / "ustar.csv").exists()
        for k in range(6):
            assert (out / f"stage{k}" / "theta0.csv").exists()
        lines = (out / "residuals.csv").read_text().splitlines()
        assert lines[0] == "stage,s,theta,residual,mu_AT,correction_norm"
        assert len(lines) > 1
