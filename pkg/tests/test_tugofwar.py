import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infgame.errors import DomainError, InvalidSpecError, NonConvergenceError
from infgame.geometry import GridFunction, build_grid, make_domain
from infgame.tugofwar import (TowProblem, apply_dpp, dpp_residual, dpp_update, make_stencil, solve_tow,
                              sphere_directions)

UNIT = make_domain("interval", lo=0, hi=1)


def _prob(spacing, eps=None, h=2.0, g=0.0, domain=UNIT, **kw):
    grid = build_grid(domain, spacing)
    return TowProblem(domain, grid, spacing if eps is None else eps, h, g, **kw)


def test_dpp_update_analytic_fixed_point():
    prob = _prob(1 / 8)
    x = prob.grid.coords[:, 0]
    V = GridFunction(prob.grid, x * (1 - x) / 2)
    node = prob.grid.nearest_node([0.25])
    assert dpp_update(V, node, prob) == pytest.approx(0.09375, abs=1e-15)


def test_dpp_update_constant():
    d = make_domain("interval", lo=0, hi=4)
    prob = _prob(1.0, eps=1.0, h=4.0, g=0.0, domain=d)
    V = np.full(prob.grid.n_nodes, 3.0)
    assert dpp_update(V, prob.grid.nearest_node([2.0]), prob) == pytest.approx(4.0)


def test_dpp_update_next_to_boundary():
    d = make_domain("interval", lo=0, hi=2)
    prob = _prob(0.5, eps=0.5, h=4.0, g=0.0, domain=d)
    V = np.zeros(prob.grid.n_nodes)
    assert dpp_update(V, prob.grid.nearest_node([0.5]), prob) == pytest.approx(0.25)


def test_dpp_update_rejects_boundary_node():
    prob = _prob(1 / 8)
    with pytest.raises(DomainError):
        dpp_update(np.zeros(prob.grid.n_nodes), 0, prob)


def test_constant_g_lower_bound():
    prob = _prob(1 / 16, h=0.5, g=3.0)
    sol = solve_tow(prob)
    assert np.all(sol.values.values >= 3.0)
    assert np.array_equal(sol.values.values[prob.grid.boundary], np.full(len(prob.grid.boundary), 3.0))


def test_residual_after_solve_and_perturbation():
    prob = _prob(1 / 32)
    sol = solve_tow(prob, tol=1e-10)
    assert sol.final_residual <= 1e-10
    assert dpp_residual(sol, prob) <= 1e-9
    bumped = sol.values.values.copy()
    bumped[prob.grid.nearest_node([0.3])] += 1.0
    assert dpp_residual(bumped, prob) >= 0.5


def test_exact_quadratic_residual_at_peak():
    # the analytic field is a fixed point except where the max sits on the node itself
    prob = _prob(1 / 16)
    x = prob.grid.coords[:, 0]
    V = x * (1 - x) / 2
    new = apply_dpp(V, prob)
    diff = np.abs(new - V)
    peak = prob.grid.nearest_node([0.5])
    assert diff[peak] == pytest.approx((1 / 16) ** 2 / 4, rel=1e-12)
    others = np.delete(diff, peak)
    assert np.max(others) <= 1e-15


def test_mixed_sign_h_rejected():
    with pytest.raises(InvalidSpecError):
        _prob(1 / 8, h=lambda X: X[:, 0] - 0.5)


def test_eps_below_spacing_rejected():
    with pytest.raises(DomainError):
        _prob(1 / 8, eps=1 / 16)


def test_non_convergence():
    with pytest.raises(NonConvergenceError) as exc:
        solve_tow(_prob(1 / 64), tol=1e-12, max_sweeps=5)
    assert exc.value.sweeps == 5 and exc.value.residual > 1e-12


def test_negative_h_negation():
    g = lambda X: X[:, 0] ** 2 - 0.3
    pos = solve_tow(_prob(1 / 32, h=2.0, g=g))
    neg = solve_tow(_prob(1 / 32, h=-2.0, g=lambda X: -g(X)))
    assert np.array_equal(neg.values.values, -pos.values.values)


def test_convergence_in_eps():
    errs = []
    for n in (32, 128):
        prob = _prob(1 / n)
        x = prob.grid.coords[:, 0]
        errs.append(np.max(np.abs(solve_tow(prob).values.values - x * (1 - x) / 2)))
    assert errs[1] <= errs[0]


def test_one_dim_error_is_quarter_eps():
    # the closed ball lets the maximizer stand still at the peak: error eps/4 there
    for n in (16, 64):
        prob = _prob(1 / n)
        x = prob.grid.coords[:, 0]
        err = np.max(np.abs(solve_tow(prob).values.values - x * (1 - x) / 2))
        assert err == pytest.approx(0.25 / n, rel=1e-3)


def test_sphere_directions_antipodal():
    for dim, n in ((2, 32), (3, 64)):
        v = sphere_directions(dim, n)
        assert np.allclose(np.linalg.norm(v, axis=1), 1)
        assert all(np.min(np.linalg.norm(v + u, axis=1)) < 1e-12 for u in v)
    with pytest.raises(InvalidSpecError):
        sphere_directions(2, 7)


def test_sphere_stencil_weights():
    st_ = make_stencil("sphere", 2, 2.0, 16)
    assert np.allclose(st_.weights.sum(axis=1), 1.0)
    assert np.all(st_.weights >= 0)
    landed = st_.base[:, None, :] + st_.corners[None, :, :]
    assert np.allclose(np.einsum("jc,jcm->jm", st_.weights, landed), st_.offsets)


@pytest.mark.slow
def test_annulus_lattice_default_eps_equals_spacing():
    # eps = spacing = 1/64 on the lattice move set
    dom = make_domain("annulus", r_in=1, r_out=2, dim=2)
    g = lambda X: np.where(np.linalg.norm(X, axis=1) < 1.5, 0.0, 1.5)
    prob = _prob(1 / 64, h=2.0, g=g, domain=dom)
    sol = solve_tow(prob, tol=1e-8)
    r = np.linalg.norm(prob.grid.coords, axis=1)
    err = np.max(np.abs(sol.values.values - (-r**2 / 2 + 3 * r - 2.5)))
    print(f"annulus lattice eps=spacing=1/64: sup error {err:.4g}")
    assert err <= 2e-2


def test_annulus_sphere_refines():
    dom = make_domain("annulus", r_in=1, r_out=2, dim=2)
    g = lambda X: np.where(np.linalg.norm(X, axis=1) < 1.5, 0.0, 1.5)
    errs = []
    for n in (16, 32):
        prob = _prob(1 / n, eps=2 / n, h=2.0, g=g, domain=dom, stencil="sphere")
        sol = solve_tow(prob, tol=1e-9)
        r = np.linalg.norm(prob.grid.coords, axis=1)
        errs.append(np.max(np.abs(sol.values.values - (-r**2 / 2 + 3 * r - 2.5))))
        assert dpp_residual(sol, prob) <= 1e-8
    assert errs[1] < 0.6 * errs[0]


def _random_instance(rng, dim):
    if dim == 1:
        dom = UNIT
        spacing = 1 / int(rng.integers(6, 20))
    else:
        dom = make_domain("box", lo=[0, 0], hi=[1, 1]) if rng.random() < 0.5 else make_domain("ball", radius=1, dim=2)
        spacing = 1 / int(rng.integers(4, 8))
    grid = build_grid(dom, spacing)
    eps = spacing * int(rng.integers(1, 3))
    h = rng.uniform(0.5, 3.0, grid.n_nodes)
    g = rng.uniform(-1, 1, grid.n_nodes)
    lookup = {tuple(np.round(c, 9)): i for i, c in enumerate(grid.coords)}
    return dom, grid, eps, h, g, lookup


def _node_field(values, grid, lookup):
    # field defined on node coordinates (h) or on their boundary projections (g)
    proj = {tuple(np.round(p, 9)): i for i, p in enumerate(grid.boundary_points)}

    def f(X):
        out = []
        for x in np.atleast_2d(X):
            key = tuple(np.round(x, 9))
            out.append(values[lookup[key]] if key in lookup else values[proj[key]])
        return np.array(out)

    return f


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]))
def test_dpp_map_properties(seed, dim):
    rng = np.random.default_rng(seed)
    dom, grid, eps, h, g, lookup = _random_instance(rng, dim)
    prob = TowProblem(dom, grid, eps, _node_field(h, grid, lookup), _node_field(g, grid, lookup))
    V = rng.uniform(-2, 2, grid.n_nodes)
    W = V + rng.uniform(0, 1, grid.n_nodes)
    assert np.all(apply_dpp(V, prob) <= apply_dpp(W, prob))
    kappa = float(rng.uniform(-3, 3))
    assert np.allclose(apply_dpp(V + kappa, prob)[grid.interior], apply_dpp(V, prob)[grid.interior] + kappa,
                       atol=1e-12)
