"""slcrit: critical sets of u -> -u'' + f(u) on [0, pi] with Dirichlet ends.

Prüfer-angle machinery for the linearization, constructive search and
projection onto the critical levels C_m, angle-profile soldering, and the
five-stage contraction of loops inside C_m to a single anchor function.
"""

from .nonlinearity import Jet2, Nonlinearity, TamenessReport, analyze, critical_abscissa, eval_jet2, parse
from .funcspace import GridFunction, bump_beta, norm, ramp_constant, segment, uniform_grid
from .prufer import AngleTrajectory, ShootingSolution, d_omega, omega_local, omega_m, shoot, zero_count
from .critical import MembershipResult, find_in_cm, membership, project, residual
from .solder import SolderSpec, reconstruct_u, solder_spec, xi_solder
from .contraction import ContractionParams, HomotopyTrace, LoopFamily, build_anchor, build_loop, build_pair, contract, default_params

__version__ = "0.1.0"
