"""Implicit domains, lattices over them and epsilon-ball neighbourhoods.

A domain is described by a level field that is positive inside, zero on the
boundary and negative outside.  For the four supported shapes the level field
is the signed distance to the boundary (up to corners of boxes), so it is
1-Lipschitz and has an analytic gradient away from its ridge.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CoarseGridError, DomainError, InvalidSpecError, NearBoundaryError

KINDS = ("interval", "box", "ball", "annulus")
BALL_TOL = 1e-12
LEVEL_TOL = 1e-12


def _as_points(x, dim):
    x = np.asarray(x, dtype=float)
    if dim == 1 and x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != dim:
        raise DomainError(f"expected points of dimension {dim}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class Domain:
    """Bounded implicit domain ``{x : level(x) > 0}``.

    ``params`` holds the shape parameters as plain floats/tuples so the object
    can be echoed into run records.
    """

    kind: str
    params: dict
    dim: int
    curvature_bound: float

    # -- geometry -----------------------------------------------------------
    @property
    def center(self):
        return np.asarray(self.params["center"], dtype=float)

    @property
    def bounds(self):
        p = self.params
        if self.kind in ("interval", "box"):
            return np.atleast_1d(np.asarray(p["lo"], float)), np.atleast_1d(np.asarray(p["hi"], float))
        r = p["radius"] if self.kind == "ball" else p["r_out"]
        return self.center - r, self.center + r

    @property
    def thinnest(self):
        """Width of the thinnest part of the shape."""
        p = self.params
        if self.kind in ("interval", "box"):
            lo, hi = self.bounds
            return float(np.min(hi - lo))
        if self.kind == "ball":
            return 2.0 * p["radius"]
        return p["r_out"] - p["r_in"]

    @property
    def diameter(self):
        lo, hi = self.bounds
        if self.kind in ("ball", "annulus"):
            return float(hi[0] - lo[0])
        return float(np.linalg.norm(hi - lo))

    def level(self, x):
        """Signed distance-like level field; accepts a point or an ``(..., m)`` array."""
        x = _as_points(x, self.dim)
        p = self.params
        if self.kind in ("interval", "box"):
            lo, hi = self.bounds
            return np.minimum(x - lo, hi - x).min(axis=-1)
        r = np.linalg.norm(x - self.center, axis=-1)
        if self.kind == "ball":
            return p["radius"] - r
        return np.minimum(r - p["r_in"], p["r_out"] - r)

    def level_grad(self, x):
        """Gradient of the level field (one-sided choice on its ridge)."""
        x = _as_points(x, self.dim)
        p = self.params
        if self.kind in ("interval", "box"):
            lo, hi = self.bounds
            d = np.concatenate([x - lo, hi - x], axis=-1)
            k = np.argmin(d, axis=-1)
            axis = k % self.dim
            sign = np.where(k < self.dim, 1.0, -1.0)
            g = np.zeros(x.shape)
            np.put_along_axis(g, axis[..., None], sign[..., None], axis=-1)
            return g
        rel = x - self.center
        r = np.linalg.norm(rel, axis=-1, keepdims=True)
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        radial = np.where(r > 0, rel / np.where(r > 0, r, 1.0), e1)
        if self.kind == "ball":
            return -radial
        inner = (r[..., 0] - p["r_in"]) <= (p["r_out"] - r[..., 0])
        return np.where(inner[..., None], radial, -radial)

    def project(self, x):
        """Nearest boundary point (the nearer face/wall on ties)."""
        x = _as_points(x, self.dim)
        p = self.params
        if self.kind in ("interval", "box"):
            lo, hi = self.bounds
            inside = np.clip(x, lo, hi)
            d = np.concatenate([inside - lo, hi - inside], axis=-1)
            k = np.argmin(d, axis=-1)
            axis = k % self.dim
            face = np.where(k < self.dim, lo[axis], hi[axis])
            out = inside.copy()
            np.put_along_axis(out, axis[..., None], face[..., None], axis=-1)
            return out
        rel = x - self.center
        r = np.linalg.norm(rel, axis=-1, keepdims=True)
        e1 = np.zeros(self.dim)
        e1[0] = 1.0
        radial = np.where(r > 0, rel / np.where(r > 0, r, 1.0), e1)
        if self.kind == "ball":
            radius = p["radius"]
        else:
            inner = (r[..., 0] - p["r_in"]) <= (p["r_out"] - r[..., 0])
            radius = np.where(inner, p["r_in"], p["r_out"])[..., None]
        return self.center + radius * radial

    def contains(self, x, closed=True):
        lev = self.level(x)
        return lev >= -LEVEL_TOL if closed else lev > 0

    def to_dict(self):
        return {"kind": self.kind, **{k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}}


def make_domain(kind, **params) -> Domain:
    """Build a :class:`Domain`.

    interval: ``lo``, ``hi``; box: ``lo``, ``hi`` sequences; ball: ``radius``
    and ``center`` (or ``dim`` for a centred ball); annulus: ``r_in``,
    ``r_out`` and ``center``/``dim``.
    """
    if kind not in KINDS:
        raise InvalidSpecError(f"unknown domain kind {kind!r}; expected one of {KINDS}")
    try:
        if kind == "interval":
            lo, hi = float(params["lo"]), float(params["hi"])
            if not hi > lo:
                raise InvalidSpecError(f"interval needs lo < hi, got ({lo}, {hi})")
            return Domain(kind, {"lo": lo, "hi": hi}, 1, 0.0)
        if kind == "box":
            lo = tuple(float(v) for v in params["lo"])
            hi = tuple(float(v) for v in params["hi"])
            if len(lo) != len(hi) or not lo:
                raise InvalidSpecError("box lo/hi must be nonempty and of equal length")
            if any(h <= l for l, h in zip(lo, hi)):
                raise InvalidSpecError(f"box has zero volume: lo={lo}, hi={hi}")
            return Domain(kind, {"lo": lo, "hi": hi}, len(lo), 0.0)
        center = params.get("center")
        if center is None:
            center = (0.0,) * int(params.get("dim", 2))
        center = tuple(float(v) for v in np.atleast_1d(center))
        if kind == "ball":
            r = float(params["radius"])
            if not r > 0:
                raise InvalidSpecError(f"ball radius must be positive, got {r}")
            return Domain(kind, {"center": center, "radius": r}, len(center), 1.0 / r)
        r_in, r_out = float(params["r_in"]), float(params["r_out"])
        if not 0 < r_in < r_out:
            raise InvalidSpecError(f"annulus needs 0 < r_in < r_out, got ({r_in}, {r_out})")
        if len(center) < 2:
            raise InvalidSpecError("annulus needs dimension >= 2")
        return Domain(kind, {"center": center, "r_in": r_in, "r_out": r_out}, len(center), 1.0 / r_in)
    except KeyError as exc:
        raise InvalidSpecError(f"{kind} domain is missing parameter {exc.args[0]!r}") from None


def domain_from_dict(spec: dict) -> Domain:
    spec = dict(spec)
    try:
        kind = spec.pop("kind")
    except KeyError:
        raise InvalidSpecError("domain spec needs a 'kind'") from None
    return make_domain(kind, **spec)


@dataclass(frozen=True, eq=False)
class Grid:
    """Lattice nodes of the closed domain.

    Nodes are ordered lexicographically by their integer multi-index.  Nodes
    whose level is below ``spacing`` form the absorbing boundary layer.
    """

    domain: Domain
    spacing: float
    origin: np.ndarray
    shape: tuple
    multi: np.ndarray  # (n, m) integer lattice indices
    is_boundary: np.ndarray

    @cached_property
    def coords(self):
        return self.origin + self.spacing * self.multi

    @property
    def dim(self):
        return self.domain.dim

    @property
    def n_nodes(self):
        return len(self.multi)

    @cached_property
    def interior(self):
        return np.flatnonzero(~self.is_boundary)

    @cached_property
    def boundary(self):
        return np.flatnonzero(self.is_boundary)

    @cached_property
    def boundary_points(self):
        """Boundary projection of every node (used for g on the boundary layer)."""
        return self.domain.project(self.coords)

    def dense_index(self, pad=0):
        """Padded dense lookup table ``lattice position -> node index`` (-1 if absent).

        Returns the flat table, its strides and the flat position of every node.
        """
        pad = int(pad)
        shape = tuple(s + 2 * pad for s in self.shape)
        strides = np.ones(self.dim, dtype=np.int64)
        for d in range(self.dim - 2, -1, -1):
            strides[d] = strides[d + 1] * shape[d + 1]
        table = np.full(int(np.prod(shape)), -1, dtype=np.int64)
        pos = (self.multi + pad) @ strides
        table[pos] = np.arange(self.n_nodes)
        return table, strides, pos

    def node_of(self, multi):
        """Node index of an integer lattice index, or -1."""
        multi = np.asarray(multi, dtype=np.int64)
        if np.any(multi < 0) or np.any(multi >= np.asarray(self.shape)):
            return -1
        table, strides, _ = self._dense0
        return int(table[multi @ strides])

    @cached_property
    def _dense0(self):
        return self.dense_index(0)

    def nearest_node(self, x):
        multi = np.rint((np.asarray(x, float) - self.origin) / self.spacing).astype(np.int64)
        return self.node_of(multi)


def build_grid(domain: Domain, spacing: float) -> Grid:
    """Lattice anchored at the lower corner of the bounding box; no snapping."""
    spacing = float(spacing)
    max_spacing = domain.thinnest / 2.0
    if not spacing > 0 or spacing > max_spacing * (1 + 1e-12):
        raise CoarseGridError(spacing, max_spacing)
    lo, hi = domain.bounds
    shape = tuple(int(math.floor((h - l) / spacing + 1e-9)) + 1 for l, h in zip(lo, hi))
    multi = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    multi = multi.reshape(-1, domain.dim)
    lev = domain.level(lo + spacing * multi)
    keep = lev >= -LEVEL_TOL
    multi = multi[keep]
    is_boundary = lev[keep] < spacing - LEVEL_TOL
    grid = Grid(domain, spacing, lo.copy(), shape, multi.astype(np.int64), is_boundary)
    if len(grid.interior) == 0:
        raise CoarseGridError(spacing, spacing / 2)
    return grid


def lattice_ball_offsets(dim, radius_cells):
    """Integer offsets ``v`` with ``|v| <= radius_cells`` (inclusive), zero first."""
    k = int(math.floor(radius_cells + 1e-9))
    rng = range(-k, k + 1)
    offs = [o for o in itertools.product(rng, repeat=dim)
            if math.sqrt(sum(c * c for c in o)) <= radius_cells + BALL_TOL]
    offs.sort(key=lambda o: (any(o), o))
    return np.array(offs, dtype=np.int64).reshape(-1, dim)


def ball_neighbors(grid: Grid, node: int, eps: float) -> np.ndarray:
    """Grid nodes within the closed eps-ball of ``node`` (the node included)."""
    if eps < grid.spacing * (1 - 1e-12):
        raise DomainError(f"eps={eps:g} below spacing {grid.spacing:g}: empty move set")
    offs = lattice_ball_offsets(grid.dim, eps / grid.spacing)
    table, strides, pos = grid.dense_index(pad=int(math.ceil(eps / grid.spacing)) + 1)
    found = table[pos[node] + offs @ strides]
    return np.sort(found[found >= 0])


@dataclass(frozen=True, eq=False)
class GridFunction:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_nodes,):
            raise ValueError(f"need {self.grid.n_nodes} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        object.__setattr__(self, "values", v)

    def __call__(self, x):
        return self.interpolate(x)

    def interpolate(self, x):
        """Multilinear interpolation at points ``x`` (shape ``(m,)`` or ``(n, m)``)."""
        g = self.grid
        x = _as_points(x, g.dim)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        t = (x - g.origin) / g.spacing
        base = np.floor(t + 1e-12).astype(np.int64)
        frac = np.clip(t - base, 0.0, 1.0)
        table, strides, _ = g._dense0
        out = np.zeros(len(x))
        shape = np.asarray(g.shape)
        for bits in itertools.product((0, 1), repeat=g.dim):
            b = np.asarray(bits)
            w = np.prod(np.where(b == 1, frac, 1.0 - frac), axis=1)
            corner = base + b
            inb = np.all((corner >= 0) & (corner < shape), axis=1)
            idx = np.full(len(x), -1, dtype=np.int64)
            idx[inb] = table[corner[inb] @ strides]
            need = w > 1e-14
            if np.any(need & (idx < 0)):
                raise NearBoundaryError("interpolation cell leaves the grid")
            out += np.where(need, w * self.values[np.maximum(idx, 0)], 0.0)
        return out[0] if single else out

    def to_csv(self, path):
        write_grid_csv(path, self.grid, self.values)


def write_grid_csv(path, grid: Grid, values=None):
    """One row per node: ``x1..xm, is_boundary, value`` at 17 significant digits."""
    cols = [f"x{i + 1}" for i in range(grid.dim)] + ["is_boundary", "value"]
    vals = np.zeros(grid.n_nodes) if values is None else np.asarray(values)
    if hasattr(path, "write"):
        _write_rows(path, cols, grid, vals)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(fh, cols, grid, vals)


def _write_rows(fh, cols, grid, vals):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(cols)
    for xs, b, v in zip(grid.coords, grid.is_boundary, vals):
        w.writerow([f"{c:.17g}" for c in xs] + [int(b), f"{v:.17g}"])


def read_grid_csv(path):
    """Return ``(coords, is_boundary, values)`` arrays from a grid CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    m = sum(1 for h in header if h.startswith("x"))
    if header != [f"x{i + 1}" for i in range(m)] + ["is_boundary", "value"]:
        raise InvalidSpecError(f"{path}: unexpected CSV header {header}")
    data = np.array(body, dtype=float).reshape(-1, m + 2)
    return data[:, :m], data[:, m].astype(bool), data[:, m + 1]


def grid_function_from_csv(path, grid: Grid) -> GridFunction:
    coords, is_b, values = read_grid_csv(path)
    if coords.shape != grid.coords.shape or not np.allclose(coords, grid.coords, rtol=0, atol=1e-12 * (1 + grid.domain.diameter)):
        raise InvalidSpecError(f"{path}: node coordinates do not match the configured grid")
    if np.any(is_b != grid.is_boundary):
        raise InvalidSpecError(f"{path}: boundary flags do not match the configured grid")
    return GridFunction(grid, values)
