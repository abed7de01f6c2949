"""Discrete Tug-of-War on a lattice: the epsilon-step dynamic programming
fixed point ``V = (eps^2/4) h + (max_ball V + min_ball V) / 2``.

Two move sets are available.  ``lattice`` lets the players move to any grid
node in the closed eps-ball.  ``sphere`` uses a fixed, antipodally symmetric
set of directions on the eps-sphere (plus staying put) and evaluates the
landing points by multilinear interpolation; landing points whose cell is not
fully inside the grid end the game with ``g`` at their boundary projection.
Both move sets give a monotone map that commutes with adding constants.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from functools import cached_property
from numbers import Real

import numba
import numpy as np

from .errors import DomainError, InvalidSpecError, NonConvergenceError
from .geometry import Domain, Grid, GridFunction, lattice_ball_offsets
from .isaacs import fibonacci_sphere

STENCILS = ("lattice", "sphere")
MOVE_INTERP, MOVE_TERMINAL, MOVE_SKIP = 0, 1, 2


def as_field(f):
    """Wrap a constant as a vectorised field ``(n, m) -> (n,)``."""
    if isinstance(f, Real):
        value = float(f)
        return lambda x: np.full(np.shape(x)[:-1], value)
    return f


def sphere_directions(dim, n):
    """Antipodally symmetric unit directions, ``+v`` and ``-v`` both present."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if n % 2:
        raise InvalidSpecError("number of sphere directions must be even")
    if dim == 2:
        # ordered by angle so that neighbouring indices are neighbouring directions
        th = 2 * math.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    if dim == 3:
        half = fibonacci_sphere(n)[: n // 2]
    else:
        raise InvalidSpecError("sphere stencil supports dimension <= 3")
    return np.concatenate([half, -half])


@dataclass(frozen=True)
class Stencil:
    """Moves in lattice-index units.

    Move ``j`` lands at ``offsets[j]``; its value is ``sum_c weights[j, c] *
    V[base[j] + corners[c]]`` (one corner with weight 1 for lattice moves,
    the ``2^m`` cell corners for interpolated moves).
    """

    offsets: np.ndarray
    base: np.ndarray
    corners: np.ndarray
    weights: np.ndarray
    pad: int


def make_stencil(kind, dim, eps_cells, n_directions=None) -> Stencil:
    if kind == "lattice":
        offs = lattice_ball_offsets(dim, eps_cells)
        return Stencil(offs.astype(float), offs, np.zeros((1, dim), dtype=np.int64),
                       np.ones((len(offs), 1)), int(math.ceil(eps_cells)) + 1)
    if kind != "sphere":
        raise InvalidSpecError(f"unknown stencil {kind!r}; expected one of {STENCILS}")
    if n_directions is None:
        n_directions = {1: 2, 2: 32, 3: 64}.get(dim, 64)
    offs = np.vstack([np.zeros((1, dim)), eps_cells * sphere_directions(dim, n_directions)])
    snapped = np.where(np.abs(offs - np.rint(offs)) < 1e-9, np.rint(offs), offs)
    base = np.floor(snapped)
    frac = snapped - base
    corners = np.array(list(itertools.product((0, 1), repeat=dim)), dtype=np.int64)
    weights = np.prod(np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
    return Stencil(offs, base.astype(np.int64), corners, weights, int(math.ceil(eps_cells)) + 2)


@numba.njit(cache=True)
def _extremes(D, row, pos, base, rel, weights, special, mode, term):
    """Max and min over the moves of interior row ``row``; ``D`` is the dense value array."""
    mx = -np.inf
    mn = np.inf
    check = special[row]
    for j in range(base.shape[0]):
        if check:
            md = mode[row, j]
            if md == 2:
                continue
            if md == 1:
                v = term[row, j]
                mx = max(mx, v)
                mn = min(mn, v)
                continue
        b = pos + base[j]
        v = 0.0
        for c in range(rel.shape[0]):
            v += weights[j, c] * D[b + rel[c]]
        mx = max(mx, v)
        mn = min(mn, v)
    return mx, mn


@numba.njit(cache=True)
def _sweep(D, ipos, run, base, rel, weights, special, mode, term, relax):
    change = 0.0
    for row in range(ipos.shape[0]):
        k = ipos[row]
        mx, mn = _extremes(D, row, k, base, rel, weights, special, mode, term)
        new = run[row] + 0.5 * (mx + mn)
        if relax != 1.0:
            new = D[k] + relax * (new - D[k])
        change = max(change, abs(new - D[k]))
        D[k] = new
    return change


@numba.njit(cache=True)
def _residual(D, ipos, run, base, rel, weights, special, mode, term):
    worst = 0.0
    for row in range(ipos.shape[0]):
        k = ipos[row]
        mx, mn = _extremes(D, row, k, base, rel, weights, special, mode, term)
        worst = max(worst, abs(D[k] - (run[row] + 0.5 * (mx + mn))))
    return worst


@dataclass(eq=False)
class TowProblem:
    """Tug-of-War instance on a grid.

    ``h_field`` and ``g_field`` are constants or vectorised callables.  ``h``
    must be bounded away from zero with a single sign; a negative ``h`` is
    solved through the negation symmetry of the scheme.
    """

    domain: Domain
    grid: Grid
    eps: float
    h_field: object
    g_field: object
    stencil: str = "lattice"
    n_directions: int | None = None
    h_nodes: np.ndarray = field(init=False, repr=False)
    g_nodes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.grid.domain is not self.domain and self.grid.domain != self.domain:
            raise InvalidSpecError("grid was built on a different domain")
        if self.eps < self.grid.spacing * (1 - 1e-12):
            raise DomainError(f"eps={self.eps:g} must be >= grid spacing {self.grid.spacing:g}")
        if self.stencil not in STENCILS:
            raise InvalidSpecError(f"unknown stencil {self.stencil!r}; expected one of {STENCILS}")
        self.h_field = as_field(self.h_field)
        self.g_field = as_field(self.g_field)
        self.h_nodes = np.asarray(self.h_field(self.grid.coords), dtype=float)
        self.g_nodes = np.asarray(self.g_field(self.grid.boundary_points), dtype=float)
        if not (np.all(np.isfinite(self.h_nodes)) and np.all(np.isfinite(self.g_nodes))):
            raise InvalidSpecError("h and g must be finite on every node")
        if np.all(self.h_nodes > 0):
            self.sign = 1.0
        elif np.all(self.h_nodes < 0):
            self.sign = -1.0
        else:
            raise InvalidSpecError("h must be bounded away from zero with one sign on the grid")

    @property
    def h_min(self):
        """Smallest ``|h|`` over the nodes."""
        return float(np.min(np.abs(self.h_nodes)))

    @cached_property
    def _tables(self):
        g = self.grid
        st = make_stencil(self.stencil, g.dim, self.eps / g.spacing, self.n_directions)
        table, strides, pos = g.dense_index(st.pad)
        base = st.base @ strides
        rel = st.corners @ strides
        interior = g.interior
        ipos = pos[interior]
        n_moves = len(base)
        mode = np.zeros((len(interior), n_moves), dtype=np.uint8)
        term = np.zeros((len(interior), n_moves))
        for j in range(n_moves):
            used = rel[st.weights[j] > 0]
            missing = np.any(table[ipos[:, None] + base[j] + used[None, :]] < 0, axis=1)
            if not np.any(missing):
                continue
            if self.stencil == "lattice":
                mode[missing, j] = MOVE_SKIP
            else:
                mode[missing, j] = MOVE_TERMINAL
                land = g.coords[interior[missing]] + g.spacing * st.offsets[j]
                term[missing, j] = self.g_field(g.domain.project(land))
        return {"size": len(table), "pos": pos, "ipos": ipos.astype(np.int64),
                "run": 0.25 * self.eps**2 * self.h_nodes[interior],
                "base": base.astype(np.int64), "rel": rel.astype(np.int64),
                "weights": np.ascontiguousarray(st.weights, dtype=float),
                "special": np.any(mode != MOVE_INTERP, axis=1),
                "mode": mode, "term": term, "rows": {int(n): r for r, n in enumerate(interior)}}

    def _kernel_args(self, sign=1.0):
        t = self._tables
        return (t["ipos"], sign * t["run"], t["base"], t["rel"], t["weights"],
                t["special"], t["mode"], sign * t["term"])

    def _dense(self, values):
        t = self._tables
        D = np.zeros(t["size"])
        D[t["pos"]] = values
        return D

    def initial_values(self):
        """g on the boundary layer, mean boundary g inside."""
        v = self.g_nodes.copy()
        b = self.grid.is_boundary
        v[~b] = self.g_nodes[b].mean()
        return v


@dataclass
class TowSolution:
    values: GridFunction
    sweeps: int
    final_residual: float
    eps: float
    wall_time: float = 0.0


def dpp_update(V, node, prob: TowProblem) -> float:
    """One dynamic-programming step at an interior node."""
    values = V.values if isinstance(V, GridFunction) else np.asarray(V, dtype=float)
    t = prob._tables
    try:
        row = t["rows"][int(node)]
    except KeyError:
        raise DomainError(f"node {node} is not an interior node") from None
    args = prob._kernel_args()
    mx, mn = _extremes(prob._dense(values), row, t["ipos"][row], *args[2:])
    return float(t["run"][row] + 0.5 * (mx + mn))


def apply_dpp(V, prob: TowProblem) -> np.ndarray:
    """The DPP map applied at every interior node to the same input (Jacobi form)."""
    values = V.values if isinstance(V, GridFunction) else np.asarray(V, dtype=float)
    out = values.copy()
    D = prob._dense(values)
    t = prob._tables
    args = prob._kernel_args()
    for row, node in enumerate(prob.grid.interior):
        mx, mn = _extremes(D, row, t["ipos"][row], *args[2:])
        out[node] = t["run"][row] + 0.5 * (mx + mn)
    return out


def solve_tow(prob: TowProblem, tol=1e-10, max_sweeps=1_000_000, relax=1.0) -> TowSolution:
    """Gauss-Seidel value iteration in lexicographic node order.

    Sweeps stop once the sup-norm change of a plain sweep is at most ``tol``.
    With ``relax > 1`` over-relaxed sweeps run first; they only supply the
    starting point of the plain sweeps, which alone decide convergence.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not 1.0 <= relax < 2.0:
        raise ValueError("relax must lie in [1, 2)")
    start = time.perf_counter()
    s = prob.sign
    args = prob._kernel_args(s)
    D = prob._dense(s * prob.initial_values())
    sweeps = 0
    if relax > 1.0:
        while sweeps < max_sweeps:
            sweeps += 1
            if _sweep(D, *args, relax) <= tol:
                break
    change = math.inf
    while sweeps < max_sweeps:
        change = _sweep(D, *args, 1.0)
        sweeps += 1
        if change <= tol:
            break
    if not change <= tol:
        raise NonConvergenceError(sweeps, change, tol)
    return TowSolution(GridFunction(prob.grid, s * D[prob._tables["pos"]]), sweeps, float(change), prob.eps,
                       time.perf_counter() - start)


def dpp_residual(sol, prob: TowProblem) -> float:
    """Max over interior nodes of ``|V - dpp_update(V)|``."""
    values = sol.values.values if isinstance(sol, TowSolution) else (
        sol.values if isinstance(sol, GridFunction) else np.asarray(sol, dtype=float))
    if len(values) != prob.grid.n_nodes:
        raise ValueError("solution and problem do not share a grid")
    return float(_residual(prob._dense(values), *prob._kernel_args()))
