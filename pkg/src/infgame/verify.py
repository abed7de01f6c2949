"""Finite-difference operators, infinity-Laplacian residuals and closed-form
solutions of ``-2 Delta_inf u = h`` used as test oracles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from .errors import InvalidSpecError, NearBoundaryError, OutsideDomainError
from .geometry import Domain, GridFunction, make_domain
from .isaacs import TOL_GRAD, default_tol_iso

SELF_CHECK_TOL = 1e-10
SELF_CHECK_POINTS = 64


def _field_domain(field_):
    return field_.grid.domain if isinstance(field_, GridFunction) else getattr(field_, "domain", None)


def fd_derivatives(field_, x, step, domain: Domain | None = None):
    """Central-difference gradient and symmetrised Hessian.

    ``field_`` maps an ``(n, m)`` array to ``(n,)`` values (a GridFunction
    qualifies).  ``x`` may be one point or a batch ``(n, m)``; the result is
    ``(grad, hess)`` with matching leading shape.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    n, m = X.shape
    domain = domain if domain is not None else _field_domain(field_)
    if domain is not None and np.any(domain.level(X) <= step * (1 + 1e-12)):
        raise NearBoundaryError(f"stencil of step {step:g} leaves the domain")
    E = step * np.eye(m)
    # points: centre, +-e_i, and the four diagonal combinations for i < j
    pts = [X]
    for i in range(m):
        pts += [X + E[i], X - E[i]]
    pairs = [(i, j) for i in range(m) for j in range(i + 1, m)]
    for i, j in pairs:
        pts += [X + E[i] + E[j], X + E[i] - E[j], X - E[i] + E[j], X - E[i] - E[j]]
    vals = np.asarray(field_(np.concatenate(pts)), dtype=float).reshape(len(pts), n)
    f0 = vals[0]
    grad = np.empty((n, m))
    hess = np.empty((n, m, m))
    for i in range(m):
        fp, fm = vals[1 + 2 * i], vals[2 + 2 * i]
        grad[:, i] = (fp - fm) / (2 * step)
        hess[:, i, i] = (fp - 2 * f0 + fm) / step**2
    for k, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = vals[1 + 2 * m + 4 * k: 5 + 2 * m + 4 * k]
        hess[:, i, j] = hess[:, j, i] = (pp - pm - mp + mm) / (4 * step**2)
    if single:
        return grad[0], hess[0]
    return grad, hess


def infinity_laplacian(grad, hess, tol_grad=TOL_GRAD, tol_iso=None) -> float:
    """``g'Hg/|g|^2`` off critical points; ``tr(H)/m`` at a critical point with isotropic H."""
    g = np.atleast_1d(np.asarray(grad, dtype=float))
    m = len(g)
    H = np.asarray(hess, dtype=float).reshape(m, m)
    H = 0.5 * (H + H.T)
    norm = np.linalg.norm(g)
    if norm > tol_grad:
        return float(g @ H @ g / norm**2)
    lam = np.trace(H) / m
    if tol_iso is None:
        tol_iso = default_tol_iso(H)
    if np.linalg.norm(H - lam * np.eye(m)) > tol_iso:
        raise OutsideDomainError(f"|grad|={norm:.3g} <= tol_grad and the Hessian is not isotropic")
    return float(lam)


def _inf_lap_batch(grad, hess):
    n2 = np.einsum("ni,ni->n", grad, grad)
    return np.einsum("ni,nij,nj->n", grad, hess, grad) / n2


@dataclass
class ResidualStats:
    max_residual: float
    mean_abs_residual: float
    skipped: int
    step: float
    evaluated: int = 0
    vacuous: int = 0

    def to_dict(self):
        return {"max_residual": self.max_residual, "mean_abs_residual": self.mean_abs_residual,
                "skipped": self.skipped, "step": self.step}


def viscosity_residual(u_field, h_field, domain: Domain, step, sample_nodes,
                       tol_grad=TOL_GRAD, tol_iso=None, skipped_as="unverifiable") -> ResidualStats:
    """Pointwise residual ``-2 Delta_inf u - h`` at smooth sample points.

    Points whose FD derivatives fall outside the operator's domain (critical
    point with a non-isotropic Hessian) are skipped.  ``skipped_as`` decides
    how they are reported: ``"unverifiable"`` counts them in ``skipped``;
    ``"vacuous"`` treats them as satisfied (residual 0, counted in
    ``vacuous`` but not in ``skipped``).
    """
    if skipped_as not in ("unverifiable", "vacuous"):
        raise ValueError("skipped_as must be 'unverifiable' or 'vacuous'")
    X = np.atleast_2d(np.asarray(sample_nodes, dtype=float))
    if X.size == 0:
        return ResidualStats(0.0, 0.0, 0, float(step))
    grad, hess = fd_derivatives(u_field, X, step, domain)
    h = np.broadcast_to(np.asarray(h_field(X) if callable(h_field) else h_field, dtype=float), (len(X),))
    res = []
    skipped = vacuous = 0
    for g, H, hx in zip(grad, hess, h):
        try:
            lap = infinity_laplacian(g, H, tol_grad, tol_iso)
        except OutsideDomainError:
            if skipped_as == "vacuous":
                vacuous += 1
                res.append(0.0)
            else:
                skipped += 1
            continue
        res.append(-2.0 * lap - hx)
    r = np.abs(np.asarray(res))
    if r.size == 0:
        return ResidualStats(math.nan, math.nan, skipped, float(step), 0, vacuous)
    return ResidualStats(float(r.max()), float(r.mean()), skipped, float(step), len(r), vacuous)


# -- closed-form oracles -------------------------------------------------------

@dataclass(eq=False)
class ExactSolution:
    """A smooth solution of ``-2 Delta_inf u = h`` with ``u = g`` on the boundary.

    ``kind`` is ``one_dim`` (``u'' = -h/2`` on an interval, h polynomial) or
    ``radial`` (quadratic profile in ``r`` on an annulus, h constant).
    """

    kind: str
    domain: Domain
    params: dict
    _profile: Polynomial = field(repr=False)

    def __post_init__(self):
        self._d1 = self._profile.deriv()
        self._d2 = self._profile.deriv(2)

    def _radius(self, x):
        rel = np.atleast_2d(x) - self.domain.center
        r = np.sqrt(np.einsum("ni,ni->n", rel, rel))
        return rel, r

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "one_dim":
            s = x[..., 0] if x.ndim and x.shape[-1] == 1 else x
            return self._profile(s)
        r = np.linalg.norm(x - self.domain.center, axis=-1)
        return self._profile(r)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        X = x.reshape(-1, self.domain.dim)
        d1 = self._d1
        if self.kind == "one_dim":
            out = d1(X[:, 0])[:, None]
        else:
            rel, r = self._radius(X)
            out = d1(r)[:, None] * rel / r[:, None]
        return out[0] if single else out

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim <= 1
        X = x.reshape(-1, self.domain.dim)
        d1, d2 = self._d1, self._d2
        if self.kind == "one_dim":
            out = d2(X[:, 0])[:, None, None]
        else:
            rel, r = self._radius(X)
            e = rel / r[:, None]
            tang = d1(r) / r
            out = ((d2(r) - tang)[:, None, None] * e[:, :, None]) * e[:, None, :]
            out += tang[:, None, None] * np.eye(self.domain.dim)
        return out[0] if single else out

    def h(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "one_dim":
            s = x[..., 0] if x.ndim and x.shape[-1] == 1 else x
            return Polynomial(self.params["h"])(s)
        return np.full(np.shape(x)[:-1], float(self.params["h"]))

    def g(self, x):
        return self(x)

    def self_check(self, n=SELF_CHECK_POINTS, seed=0):
        """Max of ``|-2 Delta_inf u - h|`` at ``n`` random interior points."""
        rng = np.random.default_rng(seed)
        lo, hi = self.domain.bounds
        pts = []
        while len(pts) < n:
            cand = rng.uniform(lo, hi, size=(4 * n, self.domain.dim))
            pts.extend(cand[self.domain.level(cand) > 0])
        X = np.asarray(pts[:n])
        lap = np.array([infinity_laplacian(g, H) for g, H in zip(self.grad(X), self.hess(X))])
        worst = float(np.max(np.abs(-2.0 * lap - self.h(X))))
        if not worst <= SELF_CHECK_TOL:
            raise InvalidSpecError(f"oracle self-check failed: residual {worst:.3g}")
        return worst


def _poly_min(poly: Polynomial, lo, hi):
    crit = [r.real for r in poly.deriv().roots() if abs(r.imag) < 1e-12 and lo <= r.real <= hi]
    return min(float(poly(t)) for t in [lo, hi, *crit])


def exact_solution(spec: dict) -> ExactSolution:
    """Build an oracle from a dict.

    ``{"kind": "one_dim", "h": [c0, c1, ...], "g0": .., "g1": .., "interval": [lo, hi]}``
    with ``h(x) = sum c_k x^k``; or ``{"kind": "radial", "r_in": .., "r_out": ..,
    "h": const, "g_in": .., "g_out": .., "center": [..]}``.
    """
    kind = spec.get("kind")
    if kind == "one_dim":
        coeffs = np.atleast_1d(np.asarray(spec.get("h", [2.0]), dtype=float))
        lo, hi = (float(v) for v in spec.get("interval", (0.0, 1.0)))
        g0, g1 = float(spec.get("g0", 0.0)), float(spec.get("g1", 0.0))
        dom = make_domain("interval", lo=lo, hi=hi)
        h = Polynomial(coeffs)
        if not _poly_min(h, lo, hi) > 0:
            raise InvalidSpecError("h must be positive on the interval")
        base = (-0.5 * h).integ(2)
        # add a line so the boundary values are met
        slope = (g1 - g0 - base(hi) + base(lo)) / (hi - lo)
        profile = base + Polynomial([g0 - base(lo) - slope * lo, slope])
        params = {"h": coeffs.tolist(), "g0": g0, "g1": g1, "interval": [lo, hi]}
    elif kind == "radial":
        r_in, r_out = float(spec.get("r_in", 1.0)), float(spec.get("r_out", 2.0))
        hc = float(spec.get("h", 2.0))
        g_in, g_out = float(spec.get("g_in", 0.0)), float(spec.get("g_out", 1.5))
        center = spec.get("center")
        dom = make_domain("annulus", r_in=r_in, r_out=r_out,
                          **({"center": center} if center is not None else {"dim": int(spec.get("dim", 2))}))
        if not hc > 0:
            raise InvalidSpecError("h must be a positive constant")
        a = -hc / 4.0
        b = (g_out - g_in - a * (r_out**2 - r_in**2)) / (r_out - r_in)
        profile = Polynomial([g_in - a * r_in**2 - b * r_in, b, a])
        r_crit = -b / (2 * a)
        if r_in <= r_crit <= r_out:
            raise InvalidSpecError(f"radial profile is critical at r={r_crit:.6g} inside the annulus")
        params = {"r_in": r_in, "r_out": r_out, "h": hc, "g_in": g_in, "g_out": g_out,
                  "center": list(dom.center)}
    else:
        raise InvalidSpecError(f"unknown oracle kind {kind!r}; expected 'one_dim' or 'radial'")
    sol = ExactSolution(kind, dom, params, profile)
    sol.self_check()
    return sol
