"""Controlled diffusion game: Euler-Maruyama paths, payoffs, Monte Carlo
values and the two constructive strategies (near-optimal feedback and
boundary exit forcing).

State equation, maximizer holding ``(A, C)`` and minimizer ``(B, D)``::

    dX = (A - B) dW + gamma dW~ + (C + D)(A + B) dt

with ``W`` scalar and ``W~`` m-dimensional.  Paths are run in vectorised
batches; the noise of path ``i`` at step ``k`` depends only on
``(seed, i, k)``, so results do not depend on batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .errors import DegenerateGradientError, DomainError, InvalidSpecError, NearBoundaryError
from .geometry import Domain, GridFunction
from .isaacs import TOL_GRAD, ControlAtom
from .rng import RngStream, normals
from .verify import fd_derivatives

STRATEGY_KINDS = ("constant", "near_optimal_max", "near_optimal_min", "exit_forcing", "custom")
EXIT_LEVEL_TOL = 1e-9
RELIABLE_EXIT_FRACTION = 0.99
DEFAULT_CHUNK = 1 << 17


@dataclass(frozen=True)
class ControlPair:
    maximizer: ControlAtom
    minimizer: ControlAtom


def default_c0(domain: Domain) -> float:
    """Smallest integer-margin intensity above ``8 (2 * curvature + 1)``."""
    return 8.0 * (2.0 * domain.curvature_bound + 1.0) + 1.0


def validity_radius(domain: Domain) -> float:
    """Boundary layer where the exit-forcing construction is meant to be used."""
    return min(0.125, 0.25 / (1.0 + domain.curvature_bound))


@dataclass(frozen=True, eq=False)
class StrategySpec:
    """A state-feedback strategy ``(t, x) -> ControlAtom``.

    Use the constructors :meth:`constant`, :meth:`near_optimal`,
    :meth:`exit_forcing` and :meth:`custom`.
    """

    kind: str
    bound: float
    atom: ControlAtom | None = None
    u_field: object = None
    anchor: np.ndarray | None = None
    domain: Domain | None = None
    c0: float | None = None
    feedback: Callable | None = None
    tol_grad: float = TOL_GRAD
    fd_step: float | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidSpecError(f"unknown strategy kind {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if not self.bound >= 0:
            raise InvalidSpecError("strategy bound must be >= 0")

    @classmethod
    def constant(cls, atom: ControlAtom, bound=None):
        bound = atom.c if bound is None else float(bound)
        if atom.c > bound:
            raise InvalidSpecError(f"constant intensity {atom.c} exceeds bound {bound}")
        return cls("constant", bound, atom=atom)

    @classmethod
    def near_optimal(cls, u_field, role, bound=1.0, tol_grad=TOL_GRAD, fd_step=None):
        """Feedback built from a value function for ``role`` in {"max", "min"}."""
        if role not in ("max", "min"):
            raise InvalidSpecError("role must be 'max' or 'min'")
        if not bound > 0:
            raise InvalidSpecError("near-optimal play needs a positive intensity bound")
        return cls(f"near_optimal_{role}", float(bound), u_field=u_field, tol_grad=tol_grad, fd_step=fd_step)

    @classmethod
    def exit_forcing(cls, anchor, domain: Domain, c0=None):
        c0 = default_c0(domain) if c0 is None else float(c0)
        if c0 < default_c0(domain):
            raise InvalidSpecError(f"c0={c0} is below the required {default_c0(domain)}")
        anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
        return cls("exit_forcing", c0, anchor=anchor, domain=domain, c0=c0)

    @classmethod
    def custom(cls, feedback, bound):
        return cls("custom", float(bound), feedback=feedback)


# -- strategy evaluation -----------------------------------------------------------

def _derivatives(u_field, X, step):
    if hasattr(u_field, "grad") and hasattr(u_field, "hess"):
        return np.atleast_2d(u_field.grad(X)), np.asarray(u_field.hess(X)).reshape(len(X), X.shape[1], X.shape[1])
    if step is None:
        step = 4.0 * u_field.grid.spacing if isinstance(u_field, GridFunction) else 1e-4
    return fd_derivatives(u_field, X, step)


def _feedback_terms(grad, hess):
    g2 = np.einsum("ni,ni->n", grad, grad)
    Hg = np.einsum("nij,nj->ni", hess, grad)
    lap = np.einsum("ni,ni->n", grad, Hg) / g2
    p = grad / np.sqrt(g2)[:, None]
    q = (Hg - lap[:, None] * grad) / g2[:, None]
    return p, q


def near_optimal_feedback(u_field, x, tol_grad=TOL_GRAD, step=None):
    """``p = Du/|Du|`` and ``q = (D^2u Du - Delta_inf u Du)/|Du|^2`` at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad, hess = _derivatives(u_field, x[None, :], step)
    if not np.linalg.norm(grad[0]) > tol_grad:
        raise DegenerateGradientError(f"|Du|={np.linalg.norm(grad[0]):.3g} <= tol_grad")
    p, q = _feedback_terms(grad, 0.5 * (hess + np.swapaxes(hess, 1, 2)))
    return p[0], q[0]


def _psi_grad(X, anchor, domain):
    return domain.level_grad(X) + 2.0 * (X - anchor)


def exit_forcing_control(x, anchor, domain: Domain, c0=None) -> ControlAtom:
    """Push along ``-D psi / |D psi|`` with ``psi = level + |x - anchor|^2`` at intensity ``c0``."""
    c0 = default_c0(domain) if c0 is None else float(c0)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not domain.contains(x):
        raise DomainError("x lies outside the closed domain")
    d = _psi_grad(x[None, :], np.atleast_1d(np.asarray(anchor, dtype=float)), domain)[0]
    n = np.linalg.norm(d)
    if n < 0.5:
        raise DomainError(f"|D psi|={n:.3g} < 1/2: outside the region where the construction is valid")
    return ControlAtom(-d / n, c0)


class _Player:
    """Per-batch evaluation state of one strategy (keeps the fallback direction)."""

    def __init__(self, spec: StrategySpec, n, dim, sign):
        self.spec = spec
        self.sign = sign
        self.prev = np.zeros((n, dim))
        self.prev[:, 0] = sign

    def keep(self, mask):
        self.prev = self.prev[mask]

    def __call__(self, t, X, cache=None):
        s = self.spec
        n, m = X.shape
        if s.kind == "constant":
            return np.broadcast_to(s.atom.a, (n, m)), np.full(n, s.atom.c)
        if s.kind == "exit_forcing":
            d = _psi_grad(X, s.anchor, s.domain)
            norm = np.linalg.norm(d, axis=1)
            ok = norm >= 0.5
            self.prev[ok] = -d[ok] / norm[ok, None]
            return self.prev.copy(), np.full(n, s.c0)
        if s.kind == "custom":
            dirs = np.empty((n, m))
            c = np.empty(n)
            for i in range(n):
                atom = s.feedback(t, X[i])
                if not isinstance(atom, ControlAtom):
                    atom = ControlAtom(*atom)
                if atom.c > s.bound * (1 + 1e-12):
                    raise DomainError(f"custom strategy emitted intensity {atom.c} above its bound {s.bound}")
                dirs[i], c[i] = atom.a, atom.c
            return dirs, c
        return self._near_optimal(X, cache)

    def _near_optimal(self, X, cache=None):
        s = self.spec
        n = len(X)
        c = np.zeros(n)
        ok = np.ones(n, dtype=bool)
        if s.fd_step is not None or not hasattr(s.u_field, "grad"):
            dom = s.u_field.grid.domain if isinstance(s.u_field, GridFunction) else getattr(s.u_field, "domain", None)
            step = s.fd_step if s.fd_step is not None else (
                4.0 * s.u_field.grid.spacing if isinstance(s.u_field, GridFunction) else 1e-4)
            if dom is not None:
                ok &= dom.level(X) > step * (1 + 1e-9)
        if np.any(ok):
            # both players usually read the same field: evaluate it once per step
            key = (id(s.u_field), s.fd_step)
            if cache is not None and key in cache:
                grad, hess = cache[key]
            else:
                grad, hess = _derivatives(s.u_field, X[ok], s.fd_step)
                grad = np.ascontiguousarray(grad, dtype=float)
                hess = np.ascontiguousarray(hess, dtype=float)
                if cache is not None:
                    cache[key] = (grad, hess)
            idx = np.flatnonzero(ok)
            _near_optimal_kernel(grad, hess, idx, self.sign, s.bound, s.tol_grad, self.prev, c)
        return self.prev.copy(), c


@njit(cache=True)
def _near_optimal_kernel(grad, hess, idx, sign, bound, tol_grad, prev, c):
    # maximizer alpha p + beta qhat, minimizer -alpha p + beta qhat:
    # diffusion 2 alpha p, drift (C + D) 2 beta qhat = 2 q
    m = grad.shape[1]
    Hg = np.empty(m)
    v = np.empty(m)
    for j in range(len(idx)):
        g2 = 0.0
        for a in range(m):
            g2 += grad[j, a] * grad[j, a]
        gn = math.sqrt(g2)
        if not gn > tol_grad:
            continue
        lap = 0.0
        for a in range(m):
            t = 0.0
            for b in range(m):
                t += 0.5 * (hess[j, a, b] + hess[j, b, a]) * grad[j, b]
            Hg[a] = t
            lap += grad[j, a] * t
        lap /= g2
        qn2 = 0.0
        for a in range(m):
            v[a] = (Hg[a] - lap * grad[j, a]) / g2
            qn2 += v[a] * v[a]
        qn = math.sqrt(qn2)
        beta = min(1.0, qn / (2.0 * bound))
        alpha = math.sqrt(1.0 - beta * beta)
        vn2 = 0.0
        for a in range(m):
            qhat = v[a] / qn if qn > 0 else 0.0
            v[a] = sign * alpha * grad[j, a] / gn + beta * qhat
            vn2 += v[a] * v[a]
        vn = math.sqrt(vn2)
        i = idx[j]
        for a in range(m):
            prev[i, a] = v[a] / vn
        c[i] = bound


# -- simulation -----------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    exited: bool
    exit_time: float
    exit_point: np.ndarray | None
    running_integral: float
    max_sq_displacement: float = 0.0


@dataclass
class PayoffEstimate:
    mean: float
    std_error: float
    n_paths: int
    exit_fraction: float
    mean_exit_time: float
    reliable: bool = True
    seed: int | None = None
    exit_times: np.ndarray | None = field(default=None, repr=False)
    payoffs: np.ndarray | None = field(default=None, repr=False)
    censored: np.ndarray | None = field(default=None, repr=False)
    max_sq_displacement: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self):
        return {"mean": self.mean, "std_error": self.std_error, "exit_fraction": self.exit_fraction,
                "mean_exit_time": self.mean_exit_time, "n_paths": self.n_paths, "seed": self.seed,
                "reliable": self.reliable}


def _h_values(h_field, X):
    if h_field is None:
        return np.zeros(len(X))
    if callable(h_field):
        return np.broadcast_to(np.asarray(h_field(X), dtype=float), (len(X),))
    return np.full(len(X), float(h_field))


def _check_args(domain, x0, dt, gamma, t_max):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (domain.dim,):
        raise DomainError(f"x0 must have dimension {domain.dim}")
    if not domain.contains(x0):
        raise DomainError(f"x0={x0.tolist()} lies outside the closed domain")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    return x0


def _run_batch(domain, x0, smax, smin, dt, gamma, t_max, seed, path_ids, h_field, record=False):
    """Simulate the paths ``path_ids`` from ``x0``.

    Returns per-path arrays ``exit_time`` (inf when censored), ``exit_point``,
    ``integral`` and ``max_sq``; with ``record`` also the states of path 0.
    """
    n, m = len(path_ids), domain.dim
    exit_time = np.full(n, np.inf)
    exit_point = np.full((n, m), np.nan)
    integral = np.zeros(n)
    max_sq = np.zeros(n)
    times, states = [0.0], [x0.copy()]
    lev0 = float(domain.level(x0))
    if lev0 <= 0:
        exit_time[:] = 0.0
        exit_point[:] = x0
        return exit_time, exit_point, integral, max_sq, np.array(times), np.array(states)

    pmax, pmin = _Player(smax, n, m, 1.0), _Player(smin, n, m, -1.0)
    live = np.arange(n)
    X = np.tile(x0, (n, 1))
    lev = np.full(n, lev0)
    acc = np.zeros(n)
    msq = np.zeros(n)
    ids = np.asarray(path_ids, dtype=np.int64)
    n_steps = int(math.ceil(t_max / dt * (1 - 1e-12)))
    for k in range(n_steps):
        t = k * dt
        h_step = min(dt, t_max - t)
        cache = {}
        A, C = pmax(t, X, cache)
        B, D = pmin(t, X, cache)
        Z = normals(seed, ids, k, m + 1)
        sq = math.sqrt(h_step)
        Xn = X + (A - B) * (Z[:, :1] * sq) + ((C + D)[:, None] * h_step) * (A + B)
        if gamma:
            Xn += (gamma * sq) * Z[:, 1:]
        hx = _h_values(h_field, X)
        lev_n = domain.level(Xn)
        out = lev_n <= 0
        frac = np.ones(len(X))
        if np.any(out):
            theta = lev[out] / (lev[out] - lev_n[out])
            frac[out] = theta
            Xn[out] = domain.project(X[out] + theta[:, None] * (Xn[out] - X[out]))
        acc += hx * (frac * h_step)
        msq = np.maximum(msq, np.einsum("ni,ni->n", Xn - x0, Xn - x0))
        if record:
            times.append(t + (frac[0] if out[0] else 1.0) * h_step)
            states.append(Xn[0].copy())
        if np.any(out):
            rows = live[out]
            exit_time[rows] = t + frac[out] * h_step
            exit_point[rows] = Xn[out]
            integral[rows] = acc[out]
            max_sq[rows] = msq[out]
            keep = ~out
            live, X, lev, acc, msq, ids = live[keep], Xn[keep], lev_n[keep], acc[keep], msq[keep], ids[keep]
            pmax.keep(keep)
            pmin.keep(keep)
            if not len(live):
                break
        else:
            X, lev = Xn, lev_n
    integral[live] = acc
    max_sq[live] = msq
    if record and len(live):
        exit_point[live] = X
    return exit_time, exit_point, integral, max_sq, np.array(times), np.array(states)


def simulate_path(x0, strat_max: StrategySpec, strat_min: StrategySpec, dt, gamma, t_max,
                  rng_stream: RngStream, domain: Domain, h_field=None) -> Trajectory:
    """One Euler-Maruyama path until the first boundary crossing or ``t_max``."""
    if t_max is None:
        t_max = default_t_max(domain)
    x0 = _check_args(domain, x0, dt, gamma, t_max)
    et, ep, integ, msq, times, states = _run_batch(domain, x0, strat_max, strat_min, dt, gamma, t_max,
                                                   rng_stream.seed, [rng_stream.path], h_field, record=True)
    exited = bool(np.isfinite(et[0]))
    return Trajectory(times, states, exited, float(et[0]), ep[0] if exited else None, float(integ[0]), float(msq[0]))


def payoff(traj: Trajectory, h_field=None, g_field=None):
    """Running cost plus terminal value; ``None`` marks a censored path.

    The running integral is accumulated during simulation with ``h_field``;
    passing ``h_field`` here is only a consistency hint and is ignored.
    """
    if not traj.exited:
        return None
    g = 0.0 if g_field is None else (
        float(np.asarray(g_field(traj.exit_point[None, :])).reshape(-1)[0]) if callable(g_field) else float(g_field))
    return traj.running_integral + g


def _g_values(g_field, P):
    if g_field is None:
        return np.zeros(len(P))
    if callable(g_field):
        return np.broadcast_to(np.asarray(g_field(P), dtype=float), (len(P),))
    return np.full(len(P), float(g_field))


def mc_value(x0, strat_max: StrategySpec, strat_min: StrategySpec, n_paths, dt, gamma, t_max, seed,
             domain: Domain, h_field=None, g_field=None, chunk=DEFAULT_CHUNK) -> PayoffEstimate:
    """Monte Carlo payoff of a fixed strategy pair.

    Censored paths are left out of the mean and reported through
    ``exit_fraction``; below 99% exits the estimate is flagged unreliable.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if t_max is None:
        t_max = default_t_max(domain)
    x0 = _check_args(domain, x0, dt, gamma, t_max)
    et = np.empty(n_paths)
    ep = np.empty((n_paths, domain.dim))
    integ = np.empty(n_paths)
    msq = np.empty(n_paths)
    for lo in range(0, n_paths, chunk):
        ids = np.arange(lo, min(lo + chunk, n_paths))
        r = _run_batch(domain, x0, strat_max, strat_min, dt, gamma, t_max, seed, ids, h_field)
        et[ids], ep[ids], integ[ids], msq[ids] = r[:4]
    done = np.isfinite(et)
    pay = np.full(n_paths, np.nan)
    pay[done] = integ[done] + _g_values(g_field, ep[done])
    n_done = int(done.sum())
    frac = n_done / n_paths
    if n_done:
        mean = float(np.mean(pay[done]))
        se = float(np.std(pay[done], ddof=1) / math.sqrt(n_done)) if n_done > 1 else 0.0
        mean_t = float(np.mean(et[done]))
    else:
        mean = se = mean_t = math.nan
    return PayoffEstimate(mean, se, int(n_paths), frac, mean_t, frac >= RELIABLE_EXIT_FRACTION, int(seed),
                          et, pay, ~done, msq)


def default_t_max(domain: Domain) -> float:
    return 50.0 * domain.diameter**2
