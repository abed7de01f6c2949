"""Command line entry point: ``infgame {solve,isaacs,simulate,verify,converge} CONFIG``.

The config is a JSON document; ``--set a.b.c=value`` overrides scalar leaves
(values are parsed as JSON, falling back to plain strings).  Exit status is
0 on success, 2 on invalid input and 3 when a solver does not converge.
"""
from __future__ import annotations

import argparse
import ast
import copy
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial

from .errors import DomainError, InfGameError, InvalidSpecError, NonConvergenceError
from .geometry import build_grid, domain_from_dict, grid_function_from_csv, write_grid_csv
from .isaacs import ControlAtom, isaacs_diagnostics
from .sdg import StrategySpec, default_t_max, mc_value
from .tugofwar import TowProblem, solve_tow
from .verify import exact_solution, viscosity_residual

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3

DEFAULTS = {
    "problem": {"domain": None, "h": 2.0, "g": 0.0, "oracle": None},
    "solver": {"spacing": None, "eps": None, "tol": 1e-10, "max_sweeps": 1_000_000,
               "stencil": "lattice", "n_directions": None, "relax": 1.0},
    "simulate": {"x0": None, "dt": 1e-4, "gamma": 0.0, "n_paths": 1000, "seed": 0, "t_max": None,
                 "strategy_max": {"kind": "near_optimal_max", "u": "oracle", "bound": 1.0},
                 "strategy_min": {"kind": "near_optimal_min", "u": "oracle", "bound": 1.0},
                 "chunk": 1 << 17},
    "isaacs": {"p": None, "S": None, "k": None, "l": None, "n_max": 64, "ns": None},
    "verify": {"solution": None, "step": None, "sample_count": 200, "seed": 0, "skipped_as": "unverifiable"},
    "converge": {"eps": [0.0625, 0.03125, 0.015625, 0.0078125], "spacing_ratio": 1, "reference": "oracle"},
    "output": {"dir": ".", "solution_csv": "solution.csv", "run_json": "run.json", "isaacs_csv": "isaacs.csv",
               "estimate_json": "estimate.json", "paths_csv": None, "residual_json": "residual.json",
               "converge_csv": "converge.csv"},
}


class ConfigError(InvalidSpecError):
    pass


# -- config handling ----------------------------------------------------------------

def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set {assignment!r}: expected KEY=VALUE")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {} if node.get(p) is None else node[p]
            if not isinstance(node[p], dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
        node = node[p]
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigError(f"--set {key}: only scalar leaves can be overridden")
    node[parts[-1]] = _parse_scalar(value)
    return cfg


def load_config(path, overrides=()):
    """Read a JSON config, apply overrides and fill defaults."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    for ov in overrides:
        apply_override(user, ov)
    return _merge(DEFAULTS, user)


def _need(cfg, dotted):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or node.get(p) is None:
            raise ConfigError(f"config: missing required field {dotted}")
        node = node[p]
    return node


# -- fields ------------------------------------------------------------------------------

_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
                  "abs": np.abs, "tanh": np.tanh, "arctan2": np.arctan2, "minimum": np.minimum,
                  "maximum": np.maximum}
_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant,
                  ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod)


def expression_field(expr, dim):
    """Vectorised field from an arithmetic expression in ``x1..xm`` and ``r``."""
    tree = ast.parse(expr, mode="eval")
    names = {f"x{i + 1}" for i in range(dim)} | {"r", "pi"} | set(_ALLOWED_FUNCS)
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"expression {expr!r}: {type(node).__name__} not allowed")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"expression {expr!r}: unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _ALLOWED_FUNCS):
            raise ConfigError(f"expression {expr!r}: only {sorted(_ALLOWED_FUNCS)} may be called")
    code = compile(tree, "<expr>", "eval")

    def f(X):
        X = np.atleast_2d(X)
        env = {f"x{i + 1}": X[:, i] for i in range(dim)}
        env.update(_ALLOWED_FUNCS, r=np.linalg.norm(X, axis=1), pi=math.pi)
        return np.broadcast_to(eval(code, {"__builtins__": {}}, env), (len(X),)).astype(float)

    return f


def make_field(spec, domain, what):
    """Constant, ``{"poly": [c0, c1, ..]}`` in ``x1``, ``{"radial": {"r": [..], "value": [..]}}``
    or ``{"expr": "..."}``."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return float(spec)
    if isinstance(spec, dict) and len(spec) == 1:
        (kind, arg), = spec.items()
        if kind == "poly":
            poly = Polynomial(np.asarray(arg, dtype=float))
            return lambda X: poly(np.atleast_2d(X)[:, 0])
        if kind == "radial":
            r_tab = np.asarray(arg["r"], dtype=float)
            v_tab = np.asarray(arg["value"], dtype=float)
            if r_tab.shape != v_tab.shape or np.any(np.diff(r_tab) <= 0):
                raise ConfigError(f"problem.{what}.radial: need increasing r and matching values")
            c = domain.center
            return lambda X: np.interp(np.linalg.norm(np.atleast_2d(X) - c, axis=1), r_tab, v_tab)
        if kind == "expr":
            return expression_field(str(arg), domain.dim)
    raise ConfigError(f"problem.{what}: expected a number or one of poly/radial/expr, got {spec!r}")


class Problem:
    """Resolved problem section: domain, h, g and an optional oracle."""

    def __init__(self, cfg):
        pc = cfg["problem"]
        self.oracle = None
        if pc.get("oracle") is not None:
            self.oracle = exact_solution(pc["oracle"])
            self.domain = self.oracle.domain
            self.h = self.oracle.h
            self.g = self.oracle.g
        else:
            self.domain = domain_from_dict(_need(cfg, "problem.domain"))
            self.h = make_field(pc["h"], self.domain, "h")
            self.g = make_field(pc["g"], self.domain, "g")


def _spacing_eps(cfg, domain):
    sc = cfg["solver"]
    eps, spacing = sc.get("eps"), sc.get("spacing")
    if eps is None and spacing is None:
        raise ConfigError("config: solver.eps or solver.spacing is required")
    eps = float(spacing if eps is None else eps)
    spacing = float(eps if spacing is None else spacing)
    if not (eps > 0 and spacing > 0):
        raise ConfigError("config: solver.eps and solver.spacing must be positive")
    if eps < spacing * (1 - 1e-12):
        raise ConfigError(f"config: solver.eps={eps} must be >= solver.spacing={spacing}")
    return eps, spacing


def _solve(cfg, prob: Problem, eps, spacing):
    sc = cfg["solver"]
    grid = build_grid(prob.domain, spacing)
    tp = TowProblem(prob.domain, grid, eps, prob.h, prob.g, stencil=sc["stencil"],
                    n_directions=sc["n_directions"])
    sol = solve_tow(tp, tol=float(sc["tol"]), max_sweeps=int(sc["max_sweeps"]), relax=float(sc["relax"]))
    return grid, tp, sol


# -- output ------------------------------------------------------------------------------

def _out_path(cfg, key):
    name = cfg["output"].get(key)
    if name is None:
        return None
    return Path(cfg["output"]["dir"]) / name


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, record):
    atomic_write(path, json.dumps(record, indent=2, default=_json_default, allow_nan=True) + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write(path, buf.getvalue())


def write_solution_csv(path, grid, values):
    buf = io.StringIO()
    write_grid_csv(buf, grid, values)
    atomic_write(path, buf.getvalue())


# -- subcommands -----------------------------------------------------------------------

def cmd_solve(cfg):
    prob = Problem(cfg)
    eps, spacing = _spacing_eps(cfg, prob.domain)
    grid, tp, sol = _solve(cfg, prob, eps, spacing)
    write_solution_csv(_out_path(cfg, "solution_csv"), grid, sol.values.values)
    write_json(_out_path(cfg, "run_json"), {"eps": eps, "spacing": spacing, "sweeps": sol.sweeps,
                                            "residual": sol.final_residual, "wall_time": sol.wall_time,
                                            "config": cfg})
    return EXIT_OK


def cmd_isaacs(cfg):
    ic = cfg["isaacs"]
    p = np.asarray(_need(cfg, "isaacs.p"), dtype=float)
    S = np.asarray(_need(cfg, "isaacs.S"), dtype=float)
    if S.shape != (len(p), len(p)):
        raise ConfigError(f"config: isaacs.S must be {len(p)}x{len(p)}")
    n_max = int(ic["n_max"])
    ns = ic.get("ns")
    if ic.get("k") is not None or ic.get("l") is not None:
        from .isaacs import IsaacsQuery, lambda_bounded, lambda_inf
        q = IsaacsQuery(p, S, float(ic.get("k") or 0.0), float(ic.get("l") or 0.0))
        lim = lambda_inf(p, S)
        lp, lm = lambda_bounded(q, "plus"), lambda_bounded(q, "minus")
        rows = [{"n": 0, "lambda_plus": lp, "lambda_minus": lm, "lambda_limit": lim,
                 "gap_plus": abs(lp - lim), "gap_minus": abs(lm - lim)}]
    else:
        rows = isaacs_diagnostics(p, S, n_max, ns=ns)
    keys = ["n", "lambda_plus", "lambda_minus", "lambda_limit", "gap_plus", "gap_minus"]
    write_csv(_out_path(cfg, "isaacs_csv"), keys, [[r[k] for k in keys] for r in rows])
    return EXIT_OK


def _u_field(spec, cfg, prob: Problem):
    u = spec.get("u", "oracle")
    if u == "oracle":
        if prob.oracle is None:
            raise ConfigError("config: strategy uses u='oracle' but problem.oracle is not set")
        return prob.oracle
    if isinstance(u, dict) and "csv" in u:
        _, spacing = _spacing_eps(cfg, prob.domain)
        return grid_function_from_csv(u["csv"], build_grid(prob.domain, spacing))
    raise ConfigError(f"config: strategy field u must be 'oracle' or {{'csv': path}}, got {u!r}")


def make_strategy(spec, cfg, prob: Problem, x0):
    kind = spec.get("kind")
    if kind == "constant":
        atom = ControlAtom(np.asarray(spec["a"], dtype=float), float(spec.get("c", 0.0)))
        return StrategySpec.constant(atom, spec.get("bound"))
    if kind in ("near_optimal_max", "near_optimal_min"):
        return StrategySpec.near_optimal(_u_field(spec, cfg, prob), kind[-3:], bound=float(spec.get("bound", 1.0)),
                                         fd_step=spec.get("fd_step"))
    if kind == "exit_forcing":
        anchor = x0 if spec.get("anchor") is None else spec["anchor"]
        return StrategySpec.exit_forcing(anchor, prob.domain, spec.get("c0"))
    raise ConfigError(f"config: unknown strategy kind {kind!r}")


def cmd_simulate(cfg):
    prob = Problem(cfg)
    sc = cfg["simulate"]
    x0 = np.atleast_1d(np.asarray(_need(cfg, "simulate.x0"), dtype=float))
    smax = make_strategy(sc["strategy_max"], cfg, prob, x0)
    smin = make_strategy(sc["strategy_min"], cfg, prob, x0)
    t_max = default_t_max(prob.domain) if sc.get("t_max") is None else float(sc["t_max"])
    cfg["simulate"]["t_max"] = t_max
    start = time.perf_counter()
    est = mc_value(x0, smax, smin, int(sc["n_paths"]), float(sc["dt"]), float(sc["gamma"]), t_max,
                   int(sc["seed"]), prob.domain, prob.h, prob.g, chunk=int(sc["chunk"]))
    record = est.to_dict()
    record["wall_time"] = time.perf_counter() - start
    record["config"] = cfg
    write_json(_out_path(cfg, "estimate_json"), record)
    paths_csv = _out_path(cfg, "paths_csv")
    if paths_csv is not None:
        rows = zip(range(est.n_paths), est.exit_times, est.payoffs, est.censored)
        write_csv(paths_csv, ["path_id", "exit_time", "payoff", "censored"], rows)
    return EXIT_OK


def _sample_interior(domain, n, margin, seed):
    rng = np.random.default_rng(seed)
    lo, hi = domain.bounds
    out = []
    tries = 0
    while len(out) < n:
        cand = rng.uniform(lo, hi, size=(max(64, 4 * n), domain.dim))
        out.extend(cand[domain.level(cand) > margin * 1.01])
        tries += 1
        if tries > 1000:
            raise ConfigError("config: domain too thin for the requested verify.step")
    return np.asarray(out[:n])


def cmd_verify(cfg):
    prob = Problem(cfg)
    vc = cfg["verify"]
    src = vc.get("solution")
    if src is None or src == "oracle":
        if prob.oracle is None:
            raise ConfigError("config: verify.solution is required unless problem.oracle is set")
        u = prob.oracle
        step = float(vc["step"] or 1e-3)
    else:
        _, spacing = _spacing_eps(cfg, prob.domain)
        u = grid_function_from_csv(src, build_grid(prob.domain, spacing))
        step = float(vc["step"] or 4.0 * spacing)
    # keep the FD stencil and the interpolation cells clear of the boundary
    margin = step + (0.0 if u is prob.oracle else 2.0 * u.grid.spacing)
    X = _sample_interior(prob.domain, int(vc["sample_count"]), margin, int(vc["seed"]))
    stats = viscosity_residual(u, prob.h, prob.domain, step, X, skipped_as=vc["skipped_as"])
    record = stats.to_dict()
    record["config"] = cfg
    write_json(_out_path(cfg, "residual_json"), record)
    return EXIT_OK


def cmd_converge(cfg):
    prob = Problem(cfg)
    cc = cfg["converge"]
    eps_list = sorted((float(e) for e in cc["eps"]), reverse=True)
    ratio = int(cc["spacing_ratio"])
    if ratio < 1:
        raise ConfigError("config: converge.spacing_ratio must be >= 1")
    ref = cc["reference"]
    if ref == "oracle" and prob.oracle is None:
        raise ConfigError("config: converge.reference='oracle' needs problem.oracle")
    sols = []
    for eps in eps_list:
        grid, _, sol = _solve(cfg, prob, eps, eps / ratio)
        sols.append((eps, grid, sol))
    rows = []
    finest = sols[-1][2].values
    for eps, grid, sol in sols:
        if ref == "oracle":
            err = np.max(np.abs(sol.values.values - prob.oracle(grid.coords)))
        else:
            # compare on nodes where the finest solution can be interpolated
            pts = grid.coords[grid.interior]
            err = np.max(np.abs(sol.values.values[grid.interior] - finest.interpolate(pts)))
        rows.append([eps, grid.spacing, sol.sweeps, float(err)])
    write_csv(_out_path(cfg, "converge_csv"), ["eps", "spacing", "sweeps", "sup_error"], rows)
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "isaacs": cmd_isaacs, "simulate": cmd_simulate,
            "verify": cmd_verify, "converge": cmd_converge}


def build_parser():
    ap = argparse.ArgumentParser(prog="infgame", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("config", help="JSON experiment config")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a scalar config leaf, e.g. solver.eps=0.01 (repeatable)")
    ap.add_argument("--out", help="output directory (same as --set output.dir=...)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.out:
            overrides.append(f"output.dir={json.dumps(args.out)}")
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg)
    except NonConvergenceError as exc:
        print(f"infgame {args.command}: not converged: residual {exc.residual:.6e} after {exc.sweeps} sweeps "
              f"(tol {exc.tol:.3e})", file=sys.stderr)
        return EXIT_NONCONVERGED
    except OSError as exc:
        print(f"infgame {args.command}: invalid input: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_INVALID
    except (InfGameError, DomainError, ValueError, KeyError, TypeError) as exc:
        msg = f"missing key {exc.args[0]!r}" if isinstance(exc, KeyError) and exc.args else exc
        print(f"infgame {args.command}: invalid input: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
