"""Command-line entry point: ``gbsde <command> [options]``.

Every command writes a JSON report (stdout with ``--json``, ``report.json``
under ``--out``) and optionally a one-row-per-run CSV summary.  Exit codes:
0 all checks passed, 1 a check failed, 2 parse error, 3 configuration or
precondition error, 4 resource limit.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
from typing import Callable

import numpy as np

from . import __version__
from .bsde import (LinearBsdeSpec, check_truncated_bounds, compare_infinite, compare_solutions,
                   lemma_ey_bound, solve_infinite_horizon, solve_linear_direct, solve_linear_explicit,
                   solve_quadratic_fh, truncation_gap, uniform_bound)
from .config import ExperimentConfig
from .errors import GbsdeError, ParseError
from .extspace import (build_theta_tilde, d_tilde, index_tables, lambda_from_arrays, random_well_conditioned,
                       render_symbolic, girsanov_drift, verify_bijections, verify_drift_identity,
                       verify_product_structure)
from .gcore import (VolatilitySet, check_condition_HI, check_generator_symmetry, check_lipschitz,
                    check_ly_lower_bound, check_nondegenerate, sigma_bounds)
from .lattice import (PathFunctional, bmo_norm_estimate, build_extended_tree, build_tree,
                      check_tree_invariants, NODE_BUDGET_ENV)
from .linearize import linearize_pair, residual_scaling, verify_linearization
from .report import Report, to_plain

COMMANDS = ("verify-extspace", "verify-linearization", "verify-assumptions", "solve-fh", "solve-ih",
            "compare", "convergence")
CSV_FIXED = ["command", "dim", "steps", "dt", "Y0"]
CSV_TAIL = ["K_T_min", "bound", "margin", "runtime_ms"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParseError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML)")
    common.add_argument("--out", help="directory for report.json and summary.csv")
    common.add_argument("--json", action="store_true", help="print the JSON report to stdout")
    common.add_argument("--csv", action="store_true", help="print the CSV summary to stdout")
    common.add_argument("--seed", type=int, help="override the sample-plan seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads (recorded; the lattice sweeps are vectorised)")
    common.add_argument("--node-budget", type=int, help=f"lattice node limit (env {NODE_BUDGET_ENV})")
    common.add_argument("--steps", help="number of time steps (a comma list for convergence)")
    common.add_argument("--dt", type=float, help="time step (infinite horizon)")
    common.add_argument("--extended", action="store_true",
                        help="also evaluate the explicit linear solution on the extended lattice")
    common.add_argument("--dump-tree-stats", action="store_true", help="include lattice statistics")
    common.add_argument("--full", action="store_true", help="include per-node arrays")

    parser = _Parser(prog="gbsde", description="G-BSDE lattice toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("verify-extspace", parents=[common], help="index maps, block identity, drift identity")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--samples", type=int, default=100, help="random theta per dimension")
    p = sub.add_parser("verify-linearization", parents=[common], help="linearization identities and bounds")
    p.add_argument("--samples", type=int)
    p.add_argument("--eps", type=float)
    sub.add_parser("verify-assumptions", parents=[common], help="sampled generator assumptions")
    sub.add_parser("solve-fh", parents=[common], help="finite-horizon solve")
    p = sub.add_parser("solve-ih", parents=[common], help="infinite-horizon truncation scheme")
    p.add_argument("--tol", type=float)
    p.add_argument("--steps-per-horizon", type=int)
    p.add_argument("--horizons", help="comma list of truncation horizons")
    sub.add_parser("compare", parents=[common], help="comparison theorem check")
    sub.add_parser("convergence", parents=[common], help="step-halving study")
    return parser


def _int_list(raw: str | None) -> list[int] | None:
    if raw is None:
        return None
    try:
        return [int(x) for x in str(raw).split(",") if x.strip()]
    except ValueError as exc:
        raise ParseError(f"expected a comma separated list of integers, got {raw!r}") from exc


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ParseError(f"{args.command} needs --config FILE")
    cfg = ExperimentConfig.load(args.config)
    cfg.overrides["seed"] = args.seed
    cfg.overrides["node_budget"] = args.node_budget
    if getattr(args, "samples", None) is not None:
        cfg.overrides["samples"] = args.samples
    if getattr(args, "eps", None) is not None:
        cfg.overrides["eps"] = args.eps
    if getattr(args, "tol", None) is not None:
        cfg.overrides["tol"] = args.tol
    if args.dt is not None:
        cfg.overrides["dt"] = args.dt
    return cfg


def _single_steps(args, cfg) -> int:
    steps = _int_list(args.steps)
    if steps is None:
        return int(cfg.run("steps"))
    if len(steps) != 1:
        raise ParseError("--steps takes a single integer for this command")
    return steps[0]


def _budget(cfg):
    nb = cfg.run("node_budget")
    return None if nb is None else int(nb)


def _csv_row(command, dim, steps, dt, y0, z0, k_min, bound, margin, runtime_ms) -> dict:
    row = {"command": command, "dim": dim, "steps": steps, "dt": dt, "Y0": y0}
    z0 = [] if z0 is None else list(z0)
    for i in range(dim):
        row[f"Z0_{i + 1}"] = z0[i] if i < len(z0) else None
    row.update(K_T_min=k_min, bound=bound, margin=margin, runtime_ms=runtime_ms)
    return row


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def render_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    dim = max(int(r["dim"]) for r in rows)
    header = CSV_FIXED + [f"Z0_{i + 1}" for i in range(dim)] + CSV_TAIL
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(r.get(h)) for h in header])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands; each returns (checks, results, csv rows)


def cmd_verify_extspace(args, cfg):
    d = args.dim
    if d < 1:
        raise ParseError("--dim must be a positive integer")
    rng = np.random.default_rng(0 if args.seed is None else args.seed)
    checks = [
        Report("d_tilde", d_tilde(1) == 2 and d_tilde(2) == 8 and d_tilde(3) == 21,
               {"values": {str(k): d_tilde(k) for k in range(1, max(d, 3) + 1)}}),
        verify_bijections(d),
    ]
    worst = 0.0
    for _ in range(args.samples):
        worst = max(worst, verify_product_structure(random_well_conditioned(rng, d)).metrics["max_deviation"])
    checks.append(Report("product_structure_random", worst < 1e-10, {"samples": args.samples, "max_deviation": worst}))
    if d == 1:
        sigma = 0.5
        tt = build_theta_tilde([[sigma]])
        exact = np.array([[sigma ** 2, 1.0], [1.0, sigma ** -2 + 1.0]])
        checks.append(Report("product_structure_d1", bool(np.array_equal(tt @ tt.T, exact)),
                             {"sigma": sigma, "product": (tt @ tt.T).tolist()}))
    checks.append(verify_drift_identity(d))
    if d == 2:
        sym = rng.normal(size=(2, 2, 2))
        dc = sym + np.swapaxes(sym, 0, 1)
        b = rng.normal(size=2)
        lam = lambda_from_arrays(b, dc)
        expect = [dc[0, 0, 0], dc[1, 1, 1], b[0], b[1], dc[0, 0, 1], dc[1, 1, 0],
                  2 * dc[0, 1, 0] - dc[1, 1, 1], 2 * dc[0, 1, 1] - dc[0, 0, 0]]
        checks.append(Report("lambda_d2", bool(np.allclose(lam, expect, rtol=0, atol=1e-15)),
                             {"max_deviation": float(np.abs(lam - expect).max())}))
    results = {"dim": d, "d_tilde": d_tilde(d), "index_tables": index_tables(d),
               "drift": {str(m): render_symbolic(girsanov_drift(m, d)) for m in range(1, d + 1)}}
    return checks, results, []


def cmd_verify_linearization(args, cfg):
    gen = cfg.generator()
    theta = cfg.volatility()
    plan = cfg.sample_plan()
    eps = float(cfg.run("eps"))
    report = verify_linearization(gen, theta, plan, eps)
    scaling = residual_scaling(gen, theta, plan)
    results = {"eps": eps, "samples": plan.n, "seed": plan.seed}
    if cfg.has("terminal"):
        # informational BMO estimate of b^eps(Y', Z, Z') from two solves on one lattice
        tree = build_tree(theta, cfg.grid(_single_steps(args, cfg)), node_budget=_budget(cfg))
        other = cfg.terminal("terminal2") if cfg.has("terminal2") else PathFunctional.constant(0.0)
        s1 = solve_quadratic_fh(tree, gen, cfg.terminal())
        s2 = solve_quadratic_fh(tree, gen, other)
        lam = []
        for k in range(tree.steps):
            t = tree.grid.time(k)
            out = linearize_pair(gen, np.full(len(s1.Y[k]), t), s1.Y[k], s2.Y[k], s1.Z[k], s2.Z[k], eps, theta)
            lam.append(out.b_eps)
        results["bmo_estimate_b_eps"] = bmo_norm_estimate(tree, lam)
    return [report, scaling], results, []


def cmd_verify_assumptions(args, cfg):
    theta = cfg.volatility()
    plan = cfg.sample_plan()
    checks = [check_nondegenerate(theta, seed=plan.seed)]
    results = {"volatility": theta.to_dict(), "sigma_bars": to_plain(sigma_bounds(theta).__dict__)}
    for name in ("generator", "generator2"):
        if cfg.has(name):
            gen = cfg.generator(name)
            sub = [check_lipschitz(gen, plan), check_generator_symmetry(gen, plan), check_ly_lower_bound(gen, theta)]
            if gen.mu is not None:
                sub.append(check_condition_HI(gen, theta, plan))
            checks.append(Report.combine(name, sub))
    tree = build_tree(theta, cfg.grid(min(_single_steps(args, cfg), 8)), node_budget=_budget(cfg))
    checks.append(check_tree_invariants(tree))
    return checks, results, []


def _linear_spec(cfg, steps):
    lin = cfg.linear()
    spec = LinearBsdeSpec(lin["coeffs"], lin["terminal"], cfg.grid(steps), cfg.volatility(), lin["mu"],
                          bool(cfg.run("recombine")), _budget(cfg))
    return spec, lin


def _fh_bound(gen, theta, xi_sup, horizon):
    if gen.mu is None:
        return None
    total = sigma_bounds(theta).total
    return xi_sup * math.exp(-gen.mu * horizon) + (1 + total) * gen.M0 * -math.expm1(-gen.mu * horizon) / gen.mu


def cmd_solve_fh(args, cfg):
    steps = _single_steps(args, cfg)
    theta = cfg.volatility()
    checks, results, rows = [], {}, []
    if cfg.has("generator"):
        t0 = time.perf_counter()
        gen = cfg.generator()
        tree = build_tree(theta, cfg.grid(steps), bool(cfg.run("recombine")), _budget(cfg))
        sol = solve_quadratic_fh(tree, gen, cfg.terminal(), validate=True, sampling=cfg.sample_plan())
        ms = (time.perf_counter() - t0) * 1e3
        checks.append(sol.check_K())
        xi_sup = float(np.abs(sol.Y[-1]).max())
        bound = _fh_bound(gen, theta, xi_sup, tree.grid.horizon - tree.grid.t0)
        margin = None if bound is None else bound - abs(sol.root_Y)
        results["quadratic"] = dict(sol.summary(), bound=bound, margin=margin)
        if args.dump_tree_stats:
            results["tree_stats"] = tree.stats()
        if args.full:
            results["quadratic"]["nodes"] = {"Y": sol.Y, "Z": sol.Z, "control": sol.control}
        rows.append(_csv_row("solve-fh", theta.dim, steps, tree.grid.dt, sol.root_Y, sol.root_Z,
                             sol.K_T_min(), bound, margin, ms))
    if cfg.has("linear"):
        t0 = time.perf_counter()
        spec, lin = _linear_spec(cfg, steps)
        tree = spec.build_tree()
        direct = solve_linear_direct(spec, tree)
        weight = solve_linear_explicit(spec, "weight", tree=tree)
        shift = solve_linear_explicit(spec, "shift", tree=tree)
        ms = (time.perf_counter() - t0) * 1e3
        checks.append(direct.check_K())
        lres = {"direct": direct.summary(), "explicit_weight": weight.root_Y, "explicit_shift": shift.root_Y,
                "explicit_minus_direct": weight.root_Y - direct.root_Y,
                "weight_minus_shift": weight.root_Y - shift.root_Y}
        if args.extended:
            ext = build_extended_tree(spec.theta, spec.grid, node_budget=_budget(cfg))
            lres["explicit_extended_lattice"] = solve_linear_explicit(spec, "weight", tree=ext).root_Y
        bound = margin = None
        if lin["mu"] is not None and lin["rho"] is not None:
            rep = lemma_ey_bound(spec, float(lin["rho"]), direct)
            checks.append(rep)
            margin = rep.metrics["worst_margin"]
            total = sigma_bounds(spec.theta).total
            T = spec.grid.horizon - spec.grid.t0
            bound = (rep.metrics["xi_sup"] * math.exp(-lin["mu"] * T)
                     + (1 + total) * float(lin["rho"]) * -math.expm1(-lin["mu"] * T) / lin["mu"])
        results["linear"] = lres
        rows.append(_csv_row("solve-fh-linear", spec.theta.dim, steps, spec.grid.dt, direct.root_Y,
                             direct.root_Z, direct.K_T_min(), bound, margin, ms))
    if not results:
        raise ParseError(f"{cfg.source}: solve-fh needs a [generator] or [linear] section")
    return checks, results, rows


def cmd_solve_ih(args, cfg):
    gen = cfg.generator()
    theta = cfg.volatility()
    tol = float(cfg.run("tol"))
    horizons = _int_list(args.horizons) or cfg.run("horizons")
    sph = args.steps_per_horizon if args.steps_per_horizon is not None else cfg.run("steps_per_horizon")
    dt = cfg.run("dt")
    if sph is None and dt is None:
        raise ParseError("solve-ih needs --steps-per-horizon, --dt or [run] dt")
    t0 = time.perf_counter()
    res = solve_infinite_horizon(gen, theta, None if sph is not None else float(dt), tol, horizons,
                                 None if sph is None else int(sph), _budget(cfg), cfg.sample_plan(),
                                 keep_solutions=True)
    ms = (time.perf_counter() - t0) * 1e3
    checks = [check_truncated_bounds(res, gen, theta)]
    ns = sorted(res.solutions)
    if sph is None and len(ns) >= 2:
        checks.append(truncation_gap(res.solutions[ns[0]], res.solutions[ns[-1]], gen, theta, res.bound_constant))
    results = res.summary()
    if len(res.iterates) >= 3:
        results["decay_rate"] = res.decay_rate()
    last = res.solutions[res.n_used]
    bound = uniform_bound(gen, theta)
    checks.append(last.check_K())
    row = _csv_row("solve-ih", theta.dim, last.tree.steps, last.tree.grid.dt, res.y0, last.root_Z,
                   last.K_T_min(), bound, bound - abs(res.y0), ms)
    return checks, results, [row]


def cmd_compare(args, cfg):
    theta = cfg.volatility()
    steps = _single_steps(args, cfg)
    tree = build_tree(theta, cfg.grid(steps), bool(cfg.run("recombine")), _budget(cfg))
    g1, g2 = cfg.generator("generator"), cfg.generator("generator2")
    t1 = cfg.terminal("terminal")
    t2 = cfg.terminal("terminal2") if cfg.has("terminal2") else t1
    t0 = time.perf_counter()
    rep = compare_solutions(g1, g2, t1, t2, tree, cfg.sample_plan())
    ms = (time.perf_counter() - t0) * 1e3
    checks = [rep]
    if g1.mu is not None and g2.mu is not None and cfg.run("dt") is not None:
        checks.append(compare_infinite(g1, g2, theta, float(cfg.run("dt")), float(cfg.run("tol")),
                                       cfg.run("horizons"), _budget(cfg)))
    row = _csv_row("compare", theta.dim, steps, tree.grid.dt, rep.metrics["Y1_0"], None,
                   None, rep.metrics["Y2_0"], rep.metrics["Y2_0"] - rep.metrics["Y1_0"], ms)
    return checks, {"worst_gap": rep.metrics["worst_gap"], "violations": rep.metrics["violations"]}, [row]


def cmd_convergence(args, cfg):
    steps = _int_list(args.steps) or [8, 16, 32, 64]
    theta = cfg.volatility()
    checks, rows, results = [], [], {"steps": steps}
    if cfg.has("generator"):
        gen = cfg.generator()
        ys = []
        for n in steps:
            t0 = time.perf_counter()
            tree = build_tree(theta, cfg.grid(n), bool(cfg.run("recombine")), _budget(cfg))
            sol = solve_quadratic_fh(tree, gen, cfg.terminal())
            ms = (time.perf_counter() - t0) * 1e3
            ys.append(sol.root_Y)
            rows.append(_csv_row("convergence", theta.dim, n, tree.grid.dt, sol.root_Y, sol.root_Z,
                                 sol.K_T_min(), None, None, ms))
        diffs = [abs(b - a) for a, b in zip(ys, ys[1:])]
        results["quadratic"] = {"Y0": ys, "successive_differences": diffs,
                                "ratios": [a / b if b else math.inf for a, b in zip(diffs, diffs[1:])]}
    if cfg.has("linear"):
        gaps, shifts = [], []
        for n in steps:
            t0 = time.perf_counter()
            spec, _ = _linear_spec(cfg, n)
            tree = spec.build_tree()
            direct = solve_linear_direct(spec, tree)
            w = solve_linear_explicit(spec, "weight", tree=tree).root_Y
            s = solve_linear_explicit(spec, "shift", tree=tree).root_Y
            ms = (time.perf_counter() - t0) * 1e3
            gaps.append(abs(w - direct.root_Y))
            shifts.append(abs(w - s))
            rows.append(_csv_row("convergence-linear", theta.dim, n, spec.grid.dt, direct.root_Y,
                                 direct.root_Z, direct.K_T_min(), w, w - direct.root_Y, ms))
        checks.append(halving_report(steps, gaps))
        results["linear"] = {"explicit_minus_direct": gaps, "weight_minus_shift": shifts}
    if not rows:
        raise ParseError(f"{cfg.source}: convergence needs a [generator] or [linear] section")
    return checks, results, rows


ROUNDOFF = 1e-12


def halving_report(steps, gaps, factor: float = 1.5) -> Report:
    """Each doubling of the step count must shrink the gap by ``factor`` (gaps at round-off count as converged)."""
    ratios = []
    ok = True
    for a, b in zip(gaps, gaps[1:]):
        if b <= ROUNDOFF:
            ratios.append(math.inf)
            continue
        r = a / b
        ratios.append(r)
        ok &= r >= factor
    return Report("halving", bool(ok), {"steps": list(steps), "gaps": list(gaps), "ratios": ratios})


HANDLERS: dict[str, Callable] = {
    "verify-extspace": cmd_verify_extspace,
    "verify-linearization": cmd_verify_linearization,
    "verify-assumptions": cmd_verify_assumptions,
    "solve-fh": cmd_solve_fh,
    "solve-ih": cmd_solve_ih,
    "compare": cmd_compare,
    "convergence": cmd_convergence,
}


def run(argv: list[str] | None = None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    start = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        cfg = None if args.command == "verify-extspace" and not args.config else _load_config(args)
        checks, results, rows = HANDLERS[args.command](args, cfg)
    except GbsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)
    passed = all(bool(c) for c in checks)
    report = {
        "command": args.command,
        "config_hash": None if cfg is None else cfg.digest,
        "passed": passed,
        "checks": [c.to_dict() for c in checks],
        "results": to_plain(results),
        "threads": args.threads,
        "version": __version__,
        "wall_time_s": time.perf_counter() - start,
    }
    if cfg is not None:
        report["dim"] = cfg.dim
    text = json.dumps(report, sort_keys=True, indent=2, allow_nan=True)
    csv_text = render_csv(rows)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        if rows:
            with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as fh:
                fh.write(csv_text)
    if args.json or not (args.csv or args.out):
        print(text, file=stdout)
    if args.csv:
        print(csv_text, end="", file=stdout)
    return 0 if passed else 1


def main() -> None:
    sys.exit(run())
