"""Command line surface.

Subcommands: analyze, omega, find, project, loop, contract.  Exit codes are
a stable contract: 0 success, 2 expression syntax error, 3 analysis error,
4 malformed input file, 5 no bracket / zero corrector derivative, 6 loop
projection failure, 7 contraction stage abort (partial trace preserved).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import svgplot
from .funcspace import GridFunction, GridError, read_csv, write_csv
from .nonlinearity import EvalDomainError, ParseError, analyze, parse
from .prufer import omega_m, zero_count
from .critical import BracketError, ZeroSlopeError, find_in_cm, membership, project, residual
from .contraction import LoopFamily, StageError, build_loop, contract, default_params

EXIT_OK = 0
EXIT_SYNTAX = 2
EXIT_ANALYSIS = 3
EXIT_BADFILE = 4
EXIT_NOBRACKET = 5
EXIT_LOOP = 6
EXIT_STAGE = 7


def _threads(args) -> int | None:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SLCRIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return None


def _parse_f(args):
    return parse(args.f)


def _report(f, args):
    lo, hi = args.range
    return analyze(f, lo, hi, args.mmax)


def cmd_analyze(args) -> int:
    f = _parse_f(args)
    rep = _report(f, args)
    print(rep.to_json())
    return EXIT_OK


def cmd_omega(args) -> int:
    f = _parse_f(args)
    u = read_csv(args.u_csv)
    traj = omega_m(f, u, args.m)
    out = Path(args.out or "omega.csv")
    traj.write_csv(out)
    print(f"wrote {out} (omega end = {traj.end:.12g}, "
          f"zero count = {zero_count(traj)})")
    if args.plot:
        svg = out.with_suffix(".svg")
        svg.write_text(svgplot.omega_chart(u.t, u.values, traj.omega, args.m))
        print(f"wrote {svg}")
    return EXIT_OK


def cmd_find(args) -> int:
    f = _parse_f(args)
    rep = _report(f, args)
    u = find_in_cm(f, args.m, rep, n=args.n)
    out = Path(args.out or "member.csv")
    write_csv(u, out)
    mr = membership(f, u, args.m)
    print(f"wrote {out}")
    print(mr.to_json())
    return EXIT_OK


def cmd_project(args) -> int:
    f = _parse_f(args)
    u = read_csv(args.u_csv)
    proj = project(f, u, args.m)
    out = Path(args.out or "projected.csv")
    write_csv(proj, out)
    print(f"wrote {out} (residual {residual(f, proj, args.m):.3e})")
    return EXIT_OK


def cmd_loop(args) -> int:
    f = _parse_f(args)
    rep = _report(f, args)
    base = find_in_cm(f, args.m, rep, n=args.n)
    try:
        fam = build_loop(f, args.m, base, args.amplitude, args.samples,
                         seed=args.seed)
    except (BracketError, ZeroSlopeError) as e:
        print(f"loop projection failed: {e}", file=sys.stderr)
        return EXIT_LOOP
    out = Path(args.out or "loop.json")
    out.write_text(fam.to_json())
    res = fam.residuals(f)
    print(f"wrote {out} ({args.samples} samples, max |residual| = "
          f"{float(np.max(np.abs(res))):.3e})")
    return EXIT_OK


def cmd_contract(args) -> int:
    f = _parse_f(args)
    try:
        fam = LoopFamily.from_json(Path(args.loop_json).read_text())
    except (OSError, ValueError, KeyError) as e:
        print(f"bad loop file: {e}", file=sys.stderr)
        return EXIT_BADFILE
    overrides = {}
    for name, key in (("tol_angle", "tol_angle"), ("tol_wall", "tol_wall"),
                      ("s_steps", "s_steps"), ("poly_degree", "poly_degree"),
                      ("delta1", "delta1"), ("delta2", "delta2"), ("eta", "eta")):
        val = getattr(args, name)
        if val is not None:
            overrides[key] = val
    params = default_params(f, args.m, fam.n, **overrides)
    out = Path(args.out or "trace")
    threads = _threads(args)
    try:
        trace = contract(f, args.m, fam, params, threads=threads,
                         record_frames=args.frames)
    except StageError as e:
        print(f"aborted: {e}", file=sys.stderr)
        if e.partial_trace is not None:
            e.partial_trace.write_dir(out, threads=threads)
            print(f"partial trace preserved in {out}", file=sys.stderr)
        return EXIT_STAGE
    trace.write_dir(out, threads=threads)
    if args.frames:
        fdir = out / "frames"
        fdir.mkdir(exist_ok=True)
        t = trace.u_star.t
        for i, fr in enumerate(trace.frames):
            (fdir / f"stage4_{i:03d}.svg").write_text(
                svgplot.wall_chart(t, fr["u"], fr["omega"], args.m,
                                   fr["s"], fr["wall"]))
    c = trace.certified
    print(f"wrote trace to {out}")
    print("certification:")
    for key in ("stage0_equals_input", "max_abs_residual", "tol_angle",
                "final_spread", "final_tol", "endpoint_pinning_exact",
                "theta_samples", "closed_loop", "pass"):
        print(f"  {key} = {c[key]}")
    return EXIT_OK if c["pass"] else EXIT_STAGE


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="slcrit",
        description="critical sets of -u'' + f(u) on [0, pi]: Prüfer angles, "
                    "level-set search and staged contraction")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_m=True):
        p.add_argument("--f", required=True, help="nonlinearity f(x)")
        if needs_m:
            p.add_argument("--m", type=int, required=True)
        p.add_argument("--n", type=int, default=2048, help="grid cells")
        p.add_argument("--range", type=float, nargs=2, default=(-30.0, 30.0),
                       metavar=("LO", "HI"), help="scan window for f'")
        p.add_argument("--mmax", type=int, default=None)
        p.add_argument("--out", default=None)

    p = sub.add_parser("analyze", help="classify f (sigma, tameness)")
    common(p, needs_m=False)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("omega", help="m-argument trajectory of a grid function")
    common(p)
    p.add_argument("u_csv")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_omega)

    p = sub.add_parser("find", help="construct a member of C_m")
    common(p)
    p.set_defaults(func=cmd_find)

    p = sub.add_parser("project", help="project a nearby function onto C_m")
    common(p)
    p.add_argument("u_csv")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("loop", help="build a certified loop inside C_m")
    common(p)
    p.add_argument("--amplitude", type=float, default=1e-2)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_loop)

    p = sub.add_parser("contract", help="run the five-stage contraction")
    common(p)
    p.add_argument("loop_json")
    p.add_argument("--frames", action="store_true",
                   help="emit stage-4 wall renderings")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol-angle", dest="tol_angle", type=float, default=None)
    p.add_argument("--tol-wall", dest="tol_wall", type=float, default=None)
    p.add_argument("--s-steps", dest="s_steps", type=int, default=None)
    p.add_argument("--poly-degree", dest="poly_degree", type=int, default=None)
    p.add_argument("--delta1", type=float, default=None)
    p.add_argument("--delta2", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.set_defaults(func=cmd_contract)
    return ap


def main(argv=None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "mmax", None) is None:
        args.mmax = max(getattr(args, "m", 1) or 1, 1)
    try:
        return args.func(args)
    except ParseError as e:
        print(f"syntax error: {e}", file=sys.stderr)
        return EXIT_SYNTAX
    except (BracketError, ZeroSlopeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOBRACKET
    except (GridError,) as e:
        print(f"bad input file: {e}", file=sys.stderr)
        return EXIT_BADFILE
    except (EvalDomainError, ValueError) as e:
        print(f"analysis error: {e}", file=sys.stderr)
        return EXIT_ANALYSIS
    except StageError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
