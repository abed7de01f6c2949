"""Game Hamiltonians: the one-step payoff rate, the limit operator and the
bounded-action max-min / min-max operators.

Players choose unit directions and nonnegative drift intensities.  With the
maximizer holding ``(a, c)`` and the minimizer ``(b, d)`` the generator applied
to a test function with gradient ``p`` and Hessian ``S`` has the sign-flipped
form implemented by :func:`phi`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import DomainError, OutsideDomainError

UNIT_TOL = 1e-12
TOL_GRAD = 1e-8
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def default_tol_iso(S):
    return 1e-8 * (1.0 + np.linalg.norm(S))


@dataclass(frozen=True)
class ControlAtom:
    """One player's action: a unit direction and a drift intensity."""

    a: np.ndarray
    c: float

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=float))
        if abs(np.linalg.norm(a) - 1.0) > UNIT_TOL:
            raise DomainError(f"direction must be a unit vector, |a|={np.linalg.norm(a)!r}")
        if not self.c >= 0:
            raise DomainError(f"intensity must be nonnegative, got {self.c}")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "c", float(self.c))


@dataclass(frozen=True)
class IsaacsQuery:
    p: np.ndarray
    S: np.ndarray
    k: float
    l: float

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        S = np.asarray(self.S, dtype=float).reshape(len(p), len(p))
        if not (self.k >= 0 and self.l >= 0 and math.isfinite(self.k) and math.isfinite(self.l)):
            raise DomainError(f"drift bounds must be finite and >= 0, got k={self.k}, l={self.l}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "S", 0.5 * (S + S.T))
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "l", float(self.l))

    @property
    def dim(self):
        return len(self.p)


def _check_unit(v, name):
    n = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise DomainError(f"{name} must be a unit vector")


def phi(a, b, c, d, p, S):
    """Payoff rate ``-1/2 (a-b)'S(a-b) - (c+d)(a+b).p``.

    Broadcasts over leading axes of ``a`` and ``b``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_unit(a, "a")
    _check_unit(b, "b")
    if np.any(np.asarray(c) < 0) or np.any(np.asarray(d) < 0):
        raise DomainError("intensities must be nonnegative")
    return _phi(a, b, c, d, np.asarray(p, float), np.asarray(S, float))


def _phi(a, b, c, d, p, S):
    diff = a - b
    quad = np.einsum("...i,ij,...j->...", diff, S, diff)
    return -0.5 * quad - (c + d) * ((a + b) @ p)


def lambda_inf(p, S, tol_grad=TOL_GRAD, tol_iso=None):
    """Limit operator: ``-2 p'Sp/|p|^2`` for p != 0, ``-2 tr(S)/m`` for isotropic S at p = 0."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    S = np.asarray(S, dtype=float).reshape(len(p), len(p))
    S = 0.5 * (S + S.T)
    norm = np.linalg.norm(p)
    if norm > tol_grad:
        return float(-2.0 * (p @ S @ p) / norm**2)
    m = len(p)
    lam = np.trace(S) / m
    if tol_iso is None:
        tol_iso = default_tol_iso(S)
    if np.linalg.norm(S - lam * np.eye(m)) > tol_iso:
        raise OutsideDomainError(
            f"|p|={norm:.3g} <= tol_grad and S is not a multiple of the identity"
        )
    return float(-2.0 * lam)


# --- sphere parametrisations ------------------------------------------------

def _circle(theta):
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def fibonacci_sphere(n):
    """``n`` nearly uniform unit vectors in R^3."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi_ = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi_), r * np.sin(phi_), z], axis=-1)


def _tangent_basis(u):
    """Orthonormal basis of the plane orthogonal to unit vector ``u``."""
    m = len(u)
    q, _ = np.linalg.qr(np.column_stack([u, np.eye(m)]))
    return q[:, 1:m]


def _sphere_chart(center):
    basis = _tangent_basis(center)

    def to_sphere(t):
        v = center + basis @ np.asarray(t)
        return v / np.linalg.norm(v)

    return to_sphere


def _golden_min(f, lo, hi, width):
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > width:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + GOLDEN * (hi - lo)
            f2 = f(x2)
    return (x1, f1) if f1 <= f2 else (x2, f2)


@dataclass
class SaddleResult:
    """Outcome of a nested direction search.

    ``outer``/``inner`` are the optimal atoms of the outer and inner player
    (for side ``plus`` the outer player is the minimizer ``(b, d)``).
    ``width`` is the final refinement interval (angle or simplex size).
    """

    value: float
    outer: ControlAtom
    inner: ControlAtom
    width: float


class _SaddleSearch:
    """Nested max-min (or min-max) over directions with analytic intensities.

    ``phi`` is unchanged when (a, c) and (b, d) swap roles, so both sides are
    handled as an outer player ``u`` against an inner best response ``v``.
    The outer player minimizes ``outer_sign * value``.
    """

    def __init__(self, q: IsaacsQuery, side, n_grid=None, width=1e-6):
        if side not in ("plus", "minus"):
            raise ValueError(f"side must be 'plus' or 'minus', got {side!r}")
        self.q = q
        self.side = side
        self.width = width
        m = q.dim
        if n_grid is None:
            n_grid = {1: 2, 2: 720}.get(m, 2000)
        if m == 1:
            self.grid = np.array([[-1.0], [1.0]])
        elif m == 2:
            self.grid = _circle(2 * math.pi * np.arange(n_grid) / n_grid)
            self.dtheta = 2 * math.pi / n_grid
        else:
            self.grid = fibonacci_sphere(n_grid) if m == 3 else _random_sphere(m, n_grid)
            self.dtheta = math.sqrt(4 * math.pi / n_grid)
        if side == "minus":
            # min over (a, c) of max over (b, d)
            self.outer_bound, self.inner_bound = q.k, q.l
            self.outer_sign = 1.0   # outer minimizes
        else:
            # max over (b, d) of min over (a, c)
            self.outer_bound, self.inner_bound = q.l, q.k
            self.outer_sign = -1.0  # outer maximizes
        self.outer_ints = np.unique([0.0, self.outer_bound])
        self.inner_ints = np.unique([0.0, self.inner_bound])

    def _inner_vals(self, u, cu, V):
        """Inner player's best response value over grid directions ``V``; vector over V."""
        q = self.q
        best = None
        for cv in self.inner_ints:
            vals = _phi(u, V, cu, cv, q.p, q.S)
            if best is None:
                best = vals
            else:
                best = np.maximum(best, vals) if self.outer_sign > 0 else np.minimum(best, vals)
        return best

    def _inner_value_at(self, u, cu, v):
        vals = [_phi(u, v, cu, cv, self.q.p, self.q.S) for cv in self.inner_ints]
        return max(vals) if self.outer_sign > 0 else min(vals)

    def inner_opt(self, u, cu):
        """Inner player's optimal value against outer action ``(u, cu)``.

        Returns ``(value, direction, intensity)``.
        """
        vals = self._inner_vals(u, cu, self.grid)
        s = self.outer_sign  # inner maximizes when s > 0
        j = int(np.argmax(s * vals))
        v0 = self.grid[j]
        m = self.q.dim
        if m == 1:
            v = v0
        elif m == 2:
            th0 = math.atan2(v0[1], v0[0])
            th, _ = _golden_min(lambda t: -s * self._inner_value_at(u, cu, _circle(t)),
                                th0 - self.dtheta, th0 + self.dtheta, self.width)
            v = _circle(th)
            if s * self._inner_value_at(u, cu, v) < s * vals[j]:
                v = v0
        else:
            chart = _sphere_chart(v0)
            res = minimize(lambda t: -s * self._inner_value_at(u, cu, chart(t)), np.zeros(m - 1),
                           method="Nelder-Mead",
                           options={"initial_simplex": _simplex(m - 1, self.dtheta),
                                    "xatol": self.width, "fatol": 1e-13})
            v = chart(res.x)
            if s * self._inner_value_at(u, cu, v) < s * vals[j]:
                v = v0
        per_int = [_phi(u, v, cu, cv, self.q.p, self.q.S) for cv in self.inner_ints]
        k = int(np.argmax(s * np.asarray(per_int)))
        return float(per_int[k]), v, float(self.inner_ints[k])

    def outer_objective(self, u, cu):
        return self.outer_sign * self.inner_opt(u, cu)[0]

    def run(self) -> SaddleResult:
        m = self.q.dim
        best = None
        for cu in self.outer_ints:
            # coarse scan: inner optimum over the grid for every outer grid direction
            coarse = self._coarse_inner(cu)
            i = int(np.argmin(self.outer_sign * coarse))
            u0 = self.grid[i]
            if m == 1:
                u, width = u0, 0.0
            elif m == 2:
                th0 = math.atan2(u0[1], u0[0])
                th, _ = _golden_min(lambda t: self.outer_objective(_circle(t), cu),
                                    th0 - self.dtheta, th0 + self.dtheta, self.width)
                u, width = _circle(th), self.width
            else:
                chart = _sphere_chart(u0)
                res = minimize(lambda t: self.outer_objective(chart(t), cu), np.zeros(m - 1),
                               method="Nelder-Mead",
                               options={"initial_simplex": _simplex(m - 1, self.dtheta),
                                        "xatol": self.width, "fatol": 1e-13})
                u, width = chart(res.x), self.width
            val, v, cv = self.inner_opt(u, cu)
            val0, v0_, cv0 = self.inner_opt(u0, cu)
            if self.outer_sign * val0 < self.outer_sign * val:
                val, v, cv, u = val0, v0_, cv0, u0
            if best is None or self.outer_sign * val < self.outer_sign * best[0]:
                best = (val, u, cu, v, cv, width)
        val, u, cu, v, cv, width = best
        return SaddleResult(float(val), ControlAtom(u, cu), ControlAtom(v, cv), width)

    def _coarse_inner(self, cu):
        """Inner optimum for every outer grid direction, inner restricted to the grid."""
        G, q = self.grid, self.q
        quad = np.einsum("ij,jk,ik->i", G, q.S, G)
        cross = G @ q.S @ G.T
        proj = G @ q.p
        base = -0.5 * (quad[:, None] - 2.0 * cross + quad[None, :])
        drift = proj[:, None] + proj[None, :]
        best = None
        for cv in self.inner_ints:
            vals = base - (cu + cv) * drift
            red = vals.max(axis=1) if self.outer_sign > 0 else vals.min(axis=1)
            best = red if best is None else (np.maximum(best, red) if self.outer_sign > 0 else np.minimum(best, red))
        return best


def _simplex(n, size):
    return np.vstack([np.zeros(n), size * np.eye(n)])


def _random_sphere(m, n):
    v = np.random.default_rng(12345).standard_normal((n, m))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def saddle_search(q: IsaacsQuery, side, n_grid=None, width=1e-6) -> SaddleResult:
    """Numerical saddle value of the bounded max-min (``plus``) or min-max (``minus``) problem."""
    return _SaddleSearch(q, side, n_grid=n_grid, width=width).run()


def lambda_bounded(q: IsaacsQuery, side, n_grid=None, width=1e-6) -> float:
    """``plus``: max over (b, d<=l) of min over (a, c<=k) of phi; ``minus``: the reverse order."""
    return saddle_search(q, side, n_grid=n_grid, width=width).value


def isaacs_diagnostics(p, S, n_max, ns=None, diag_tol=None, tol_grad=TOL_GRAD, tol_iso=None, n_grid=None):
    """Bounded operators along the schedule ``k_n = l_n = n`` next to the limit value.

    Returns a list of dict rows with keys ``n, lambda_plus, lambda_minus,
    lambda_limit, gap_plus, gap_minus``.  ``ns`` restricts the rows to a
    subset of ``1..n_max``.  When ``diag_tol`` is given the final row must be
    within it or a ``ValueError`` is raised.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    limit = lambda_inf(p, S, tol_grad=tol_grad, tol_iso=tol_iso)
    ns = range(1, n_max + 1) if ns is None else sorted(int(n) for n in ns if 1 <= n <= n_max)
    rows = []
    for n in ns:
        q = IsaacsQuery(p, S, n, n)
        lp = lambda_bounded(q, "plus", n_grid=n_grid)
        lm = lambda_bounded(q, "minus", n_grid=n_grid)
        rows.append({"n": n, "lambda_plus": lp, "lambda_minus": lm, "lambda_limit": limit,
                     "gap_plus": abs(lp - limit), "gap_minus": abs(lm - limit)})
    if diag_tol is not None and rows:
        last = rows[-1]
        if max(last["gap_plus"], last["gap_minus"]) > diag_tol:
            raise ValueError(f"final row gaps {last['gap_plus']:.3g}/{last['gap_minus']:.3g} exceed {diag_tol}")
    return rows
