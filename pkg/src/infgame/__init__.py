"""Infinity-Laplacian boundary value problems through two-player games:
Tug-of-War value iteration, bounded Bellman-Isaacs operators and Monte Carlo
simulation of the continuous-time differential game.
"""
from .errors import (CoarseGridError, DegenerateGradientError, DomainError, InfGameError, InvalidSpecError,
                     NearBoundaryError, NonConvergenceError, OutsideDomainError)
from .geometry import Domain, Grid, GridFunction, build_grid, make_domain
from .isaacs import ControlAtom, IsaacsQuery, isaacs_diagnostics, lambda_bounded, lambda_inf, phi
from .sdg import (ControlPair, PayoffEstimate, StrategySpec, Trajectory, exit_forcing_control, mc_value,
                  near_optimal_feedback, payoff, simulate_path)
from .tugofwar import TowProblem, TowSolution, apply_dpp, dpp_residual, dpp_update, solve_tow
from .verify import ExactSolution, exact_solution, fd_derivatives, infinity_laplacian, viscosity_residual

__version__ = "0.1.0"
