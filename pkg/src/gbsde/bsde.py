"""G-BSDE solvers on scenario lattices.

The finite-horizon solver runs the explicit backward scheme

    Y_k = max_e [ Ybar_e + f(t_k, Ybar_e, Z_e) dt + sum_ij g^{ij}(t_k, Ybar_e, Z_e) (theta_e theta_e^T)_ij dt ]

where ``Ybar_e`` is the branch average of the children of the node under
extreme ``e`` and ``Z_e = theta_e^{-T} mean(Y_child xi) / sqrt(dt)`` is the
regression coefficient on that branch.  The slack ``candidate_e - Y_k <= 0``
is the increment of the nonincreasing process ``K`` on branch ``e``.

Linear equations are also solved through the explicit representation
``Y = X^{-1} E^Lambda[X_T xi + int m X ds + int n X d<B>]`` and compared with
the direct recursion.  The infinite-horizon driver solves on ``[0, n]`` with
zero terminal data for growing ``n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError, PreconditionError, ResourceError
from .extspace import LinearCoefficients
from .gcore import (ASSUMPTION_TOL, GeneratorSpec, SamplePlan, VolatilitySet, check_condition_HI,
                    check_generator_symmetry, check_lipschitz, eval_G, sigma_bounds)
from .lattice import (DPResult, PathFunctional, ScenarioTree, TimeGrid, backward, build_tree,
                      girsanov_setup)
from .report import Report

K_SLACK = 1e-10
K_EXPECTATION_TOL = 1e-8
COMPARE_TOL = 1e-8


@dataclass
class BsdeSolution:
    """Per-level arrays of the solved lattice.

    ``Y[k]`` (n_k,), ``Z[k]`` (n_k, d) from the chosen extreme ``control[k]``.
    ``dK[k]`` (n_k, E) is the increment of ``K`` on each extreme's branch and
    ``orth[k]`` (n_k, E, S) the part of the child values not spanned by
    ``Ybar + Z.dB`` (identically zero for d = 1).  On a recombining lattice
    ``K`` is path dependent, so it is summarised through path extrema and
    expectations rather than stored per node.
    """

    tree: ScenarioTree
    Y: list[np.ndarray]
    Z: list[np.ndarray]
    control: list[np.ndarray]
    dK: list[np.ndarray]
    Z_branch: list[np.ndarray] = field(repr=False)
    drift: list[np.ndarray] = field(repr=False)
    orth: list[np.ndarray] = field(repr=False)

    @property
    def root_Y(self) -> float:
        return float(self.Y[0][0])

    @property
    def root_Z(self) -> np.ndarray:
        return self.Z[0][0].copy()

    def max_abs_Z(self) -> list[float]:
        return [float(np.abs(z).max()) if z.size else 0.0 for z in self.Z]

    def K_T_min(self) -> float:
        """Smallest ``K_T`` over all root-to-leaf paths."""
        tree = self.tree
        V = np.zeros(tree.leaves.size)
        for k in range(tree.steps - 1, -1, -1):
            cont = V[tree.levels[k].children].min(axis=-1) + self.dK[k]
            V = cont.min(axis=-1)
        return float(V[0])

    def expected_K_T(self) -> float:
        """Upper expectation of ``K_T`` (zero for a G-martingale started at 0)."""
        return backward(self.tree, np.zeros(self.tree.leaves.size),
                        add=lambda k, lv: self.dK[k][:, :, None]).root

    def path_K(self) -> list[np.ndarray]:
        """``K`` at every node of a path tree (``K_0 = 0``)."""
        tree = self.tree
        if tree.recombining:
            raise InputError("per-node K needs a non-recombining tree")
        S = tree.n_signs
        K = [np.zeros(1)]
        for k in range(tree.steps):
            nxt = tree.levels[k + 1]
            e = nxt.branch // S
            K.append(K[-1][nxt.parent] + self.dK[k][nxt.parent, e])
        return K

    def dynamics_residual(self) -> float:
        """Max over all branches of ``Y_k - [Y_{k+1} + f dt + g:d<B> - Z.dB - orth - dK]``."""
        tree = self.tree
        worst = 0.0
        for k in range(tree.steps):
            dB, _ = tree.increments(k)
            Yc = self.Y[k + 1][tree.levels[k].children]
            zdb = np.einsum("ned,nesd->nes", self.Z_branch[k], dB)
            rhs = Yc + self.drift[k][:, :, None] - zdb - self.orth[k] - self.dK[k][:, :, None]
            worst = max(worst, float(np.abs(self.Y[k][:, None, None] - rhs).max()))
        return worst

    def check_K(self) -> Report:
        max_dK = max((float(x.max()) for x in self.dK), default=0.0)
        metrics = {"K_root": 0.0, "max_increment": max_dK, "K_T_min": self.K_T_min(),
                   "expected_K_T": self.expected_K_T()}
        if not self.tree.recombining:
            K = self.path_K()
            metrics["max_K"] = max(float(k.max()) for k in K)
        passed = max_dK <= K_SLACK and metrics["expected_K_T"] >= -K_EXPECTATION_TOL
        return Report("K_properties", bool(passed), metrics)

    def summary(self) -> dict:
        return {"Y0": self.root_Y, "Z0": self.root_Z.tolist(), "K_T_min": self.K_T_min(),
                "expected_K_T": self.expected_K_T(), "max_abs_Z": max(self.max_abs_Z()),
                "steps": self.tree.steps, "dt": self.tree.grid.dt, "nodes": self.tree.node_count}


def validate_generator(gen: GeneratorSpec, theta: VolatilitySet, sampling: SamplePlan | None = None) -> Report:
    """Sampled checks of the generator constants; raises when one fails."""
    if gen.dim != theta.dim:
        raise ConfigError(f"generator dimension {gen.dim} differs from volatility dimension {theta.dim}")
    report = Report.combine("assumptions", [check_lipschitz(gen, sampling), check_generator_symmetry(gen, sampling)])
    if not report:
        failed = [c.name for c in report.children if not c]
        raise PreconditionError(f"generator fails the assumption checks: {failed}", report.to_dict())
    return report


def _raise_nonfinite(values: np.ndarray, tree: ScenarioTree, k: int, what: str):
    bad = np.argwhere(~np.isfinite(values))[0]
    i = int(bad[0])
    raise NumericError(f"{what} is not finite at level {k} node {i} "
                       f"(t={tree.grid.time(k):.6g}, B={tree.levels[k].B[i].tolist()})")


def solve_quadratic_fh(tree: ScenarioTree, gen: GeneratorSpec, terminal: PathFunctional,
                       validate: bool = False, sampling: SamplePlan | None = None) -> BsdeSolution:
    """Explicit backward scheme for ``Y`` with generator ``(f, g)`` and terminal value ``terminal``."""
    if validate:
        validate_generator(gen, tree.theta, sampling)
    if gen.dim != tree.dim:
        raise ConfigError(f"generator dimension {gen.dim} differs from tree dimension {tree.dim}")
    if tree.drift is not None or tree.extended:
        raise InputError("the solver runs on an undrifted original-space tree")
    theta = tree.theta
    dt = tree.grid.dt
    sq = math.sqrt(dt)
    signs = tree.signs
    inv_t = np.linalg.inv(theta.extremes).transpose(0, 2, 1)        # theta^{-T}
    gam = theta.covariances
    vol = np.einsum("eij,sj->esi", theta.extremes, signs)           # theta_e xi_s

    V = terminal.evaluate(tree)
    Y, Z, control, dK, Zb, drift, orth = [V], [], [], [], [], [], []
    for k in range(tree.steps - 1, -1, -1):
        lv = tree.levels[k]
        n, E = lv.size, theta.count
        Vc = V[lv.children]                                            # (n, E, S)
        ybar = Vc.mean(axis=-1)
        proj = np.einsum("nes,sd->ned", Vc, signs) / len(signs)
        z = np.einsum("eij,nej->nei", inv_t, proj) / sq
        t = tree.grid.time(k)
        Bb = np.broadcast_to(lv.B[:, None, :], (n, E, tree.dim))
        Qb = np.broadcast_to(lv.Q[:, None, :, :], (n, E, tree.dim, tree.dim))
        fv = np.asarray(gen.f(t, ybar, z, Bb, Qb), dtype=float)
        gv = np.asarray(gen.g(t, ybar, z, Bb, Qb), dtype=float)
        step = fv * dt + dt * np.einsum("neij,eij->ne", gv, gam)
        cand = ybar + step
        if not np.all(np.isfinite(cand)):
            _raise_nonfinite(cand, tree, k, "generator value")
        ctrl = np.argmax(cand, axis=-1)
        V = cand[np.arange(n), ctrl]
        Y.append(V)
        Z.append(z[np.arange(n), ctrl])
        control.append(ctrl)
        dK.append(cand - V[:, None])
        Zb.append(z)
        drift.append(step)
        orth.append(Vc - ybar[..., None] - sq * np.einsum("ned,esd->nes", z, vol))
    rev = lambda xs: xs[::-1]
    return BsdeSolution(tree, rev(Y), rev(Z), rev(control), rev(dK), rev(Zb), rev(drift), rev(orth))


# ---------------------------------------------------------------------------
# linear equations


@dataclass(frozen=True)
class LinearBsdeSpec:
    """Linear equation ``f = aY + b.Z + m``, ``g^{ij} = c^{ij}Y + d^{ij}.Z + n^{ij}``."""

    coeffs: LinearCoefficients
    terminal: PathFunctional
    grid: TimeGrid
    theta: VolatilitySet
    mu: float | None = None
    recombine: bool = True
    node_budget: int | None = None

    def __post_init__(self):
        if self.coeffs.dim != self.theta.dim:
            raise ConfigError("coefficient and volatility dimensions differ")

    def build_tree(self, recombine: bool | None = None) -> ScenarioTree:
        rec = self.recombine if recombine is None else recombine
        rec = rec and self.terminal.level == "terminal"
        return build_tree(self.theta, self.grid, rec, self.node_budget)

    def generator(self) -> GeneratorSpec:
        return linear_generator(self.coeffs)


def linear_generator(coeffs: LinearCoefficients) -> GeneratorSpec:
    def f(t, y, z, B, Q):
        return coeffs.a(t, B, Q) * y + np.sum(coeffs.b(t, B, Q) * z, axis=-1) + coeffs.m(t, B, Q)

    def g(t, y, z, B, Q):
        return (coeffs.c(t, B, Q) * np.asarray(y)[..., None, None]
                + np.einsum("...ijk,...k->...ij", coeffs.dcoef(t, B, Q), z) + coeffs.n(t, B, Q))

    return GeneratorSpec(coeffs.dim, f, g, source={"f": "linear", "g": "linear"})


def solve_linear_direct(spec: LinearBsdeSpec, tree: ScenarioTree | None = None) -> BsdeSolution:
    tree = spec.build_tree() if tree is None else tree
    return solve_quadratic_fh(tree, spec.generator(), spec.terminal)


@dataclass
class ExplicitSolution:
    tree: ScenarioTree
    Y: list[np.ndarray]
    mode: str

    @property
    def root_Y(self) -> float:
        return float(self.Y[0][0])


def _step_terms(coeffs: LinearCoefficients, tree: ScenarioTree, k: int, lv):
    """Per-extreme ``X_{k+1}/X_k`` and running term ``m dt + n:d<B>``, shapes (n, E)."""
    dt = tree.grid.dt
    d = coeffs.dim
    # on an extended lattice the original coordinates come first
    gam = tree.theta.covariances[:, :d, :d]
    B, Q = lv.B[:, :d], lv.Q[:, :d, :d]
    t = tree.grid.time(k)
    a = np.asarray(coeffs.a(t, B, Q), dtype=float)
    c = np.asarray(coeffs.c(t, B, Q), dtype=float)
    m = np.asarray(coeffs.m(t, B, Q), dtype=float)
    nn = np.asarray(coeffs.n(t, B, Q), dtype=float)
    ratio = np.exp(a[:, None] * dt + dt * np.einsum("nij,eij->ne", c, gam))
    run = m[:, None] * dt + dt * np.einsum("nij,eij->ne", nn, gam)
    return ratio, run


def solve_linear_explicit(spec: LinearBsdeSpec, mode: str = "weight", literal: bool = False,
                          tree: ScenarioTree | None = None) -> ExplicitSolution:
    """Explicit representation through the Girsanov-transformed expectation.

    ``X`` is the discrete exponential ``exp(sum a dt + c:d<B>)``.  By default
    the recursion carries ``X_{k+1}/X_k`` per branch (``X_k > 0`` is known at
    the node and factors out of the conditional expectation).  ``literal=True``
    instead builds ``X`` along every path of a path tree, evaluates
    ``E^Lambda_k[X_T xi + sum_{j>=k} X_j (m dt + n:d<B>)]`` and divides by ``X_k``.
    """
    coeffs = spec.coeffs
    base = tree if tree is not None else spec.build_tree(recombine=False if literal else None)
    if base.extended and mode != "weight":
        raise InputError("an extended lattice supports the weight mode only")
    if literal and base.recombining:
        raise InputError("the literal representation needs a non-recombining tree")
    used, weight = girsanov_setup(base, coeffs, mode)
    terms = [_step_terms(coeffs, used, k, used.levels[k]) for k in range(used.steps)]
    xi = spec.terminal.evaluate(used)
    if not literal:
        result = backward(used, xi, add=lambda k, lv: terms[k][1][:, :, None],
                          ratio=lambda k, lv: terms[k][0][:, :, None], weight=weight)
        return ExplicitSolution(used, result.values, mode)
    X = [np.ones(1)]
    S = used.n_signs
    for k in range(used.steps):
        nxt = used.levels[k + 1]
        X.append(X[-1][nxt.parent] * terms[k][0][nxt.parent, nxt.branch // S])
    result = backward(used, X[-1] * xi, add=lambda k, lv: (X[k][:, None] * terms[k][1])[:, :, None],
                      weight=weight)
    return ExplicitSolution(used, [v / x for v, x in zip(result.values, X)], mode)


def _node_coefficients(coeffs: LinearCoefficients, tree: ScenarioTree):
    for k, lv in enumerate(tree.levels):
        yield k, coeffs.evaluate(tree.grid.time(k), lv.B, lv.Q)


def check_dissipative_linear(spec: LinearBsdeSpec, tree: ScenarioTree) -> Report:
    """``a + 2G(c) <= -mu`` on every lattice node."""
    if spec.mu is None:
        raise ConfigError("the linear bound needs a declared mu")
    worst = -math.inf
    for k, v in _node_coefficients(spec.coeffs, tree):
        val = v["a"] + 2.0 * eval_G(v["c"], spec.theta)
        worst = max(worst, float(np.max(val)))
    return Report("linear_dissipativity", worst <= -spec.mu + ASSUMPTION_TOL,
                  {"max_a_plus_2Gc": worst, "mu": spec.mu})


def lemma_ey_bound(spec: LinearBsdeSpec, rho_bound: float, solution: BsdeSolution,
                   scheme_constant: float = 1.0) -> Report:
    """Node-wise check of the a-priori bound for dissipative linear equations.

    ``|Y_t| <= |xi|_inf e^{-mu(T-t)} + (1 + sigma_sum^2) rho (1 - e^{-mu(T-t)}) / mu + tol``
    with the first-order allowance ``tol = scheme_constant * dt * (mu |xi|_inf + (1 + sigma_sum^2) rho)``.
    """
    tree = solution.tree
    diss = check_dissipative_linear(spec, tree)
    if not diss:
        raise PreconditionError("coefficients violate a + 2G(c) <= -mu", diss.to_dict())
    worst_mn = 0.0
    for k, v in _node_coefficients(spec.coeffs, tree):
        worst_mn = max(worst_mn, float(np.abs(v["m"]).max()), float(np.abs(v["n"]).max()))
    if worst_mn > rho_bound + ASSUMPTION_TOL:
        raise PreconditionError(f"|m|, |n| reach {worst_mn:.6g} above the declared bound {rho_bound}")
    mu = spec.mu
    xi_norm = float(np.abs(solution.Y[-1]).max())
    total = sigma_bounds(spec.theta).total
    dt = tree.grid.dt
    tol = scheme_constant * dt * (mu * xi_norm + (1.0 + total) * rho_bound)
    T = tree.grid.horizon
    margin = math.inf
    witness = None
    for k, Yk in enumerate(solution.Y):
        rem = T - tree.grid.time(k)
        bound = xi_norm * math.exp(-mu * rem) + (1.0 + total) * rho_bound * (-math.expm1(-mu * rem)) / mu
        gap = bound + tol - np.abs(Yk)
        i = int(np.argmin(gap))
        if gap[i] < margin:
            margin = float(gap[i])
            witness = {"level": k, "node": i, "Y": float(Yk[i]), "bound": bound}
    passed = margin >= 0.0
    return Report("lemma_bound", passed,
                  {"worst_margin": margin, "xi_sup": xi_norm, "rho": rho_bound, "scheme_tol": tol,
                   "sigma_sum_sq": total}, None if passed else witness)


# ---------------------------------------------------------------------------
# comparison


def check_generator_order(gen1: GeneratorSpec, gen2: GeneratorSpec, theta: VolatilitySet,
                          sampling: SamplePlan | None = None, tree: ScenarioTree | None = None) -> Report:
    """Sampled ``f1 <= f2`` and ``(g2 - g1):theta theta^T >= 0`` for every extreme.

    With a lattice given, the samples are placed at its node states so that
    state-dependent generators are compared where they are used.
    """
    sampling = sampling or SamplePlan()
    s = sampling.draw(gen1.dim)
    if tree is not None:
        rng = np.random.default_rng(sampling.seed + 1)
        k = rng.integers(0, tree.steps + 1, size=sampling.n)
        B = np.empty((sampling.n, tree.dim))
        Q = np.empty((sampling.n, tree.dim, tree.dim))
        for lvl in np.unique(k):
            sel = k == lvl
            idx = rng.integers(0, tree.levels[lvl].size, size=int(sel.sum()))
            B[sel], Q[sel] = tree.levels[lvl].B[idx], tree.levels[lvl].Q[idx]
        s["t"] = tree.grid.t0 + k * tree.grid.dt
        s["B"], s["Q"] = B, Q
    f1, g1 = gen1.evaluate(s["t"], s["y"], s["z"], s.get("B"), s.get("Q"))
    f2, g2 = gen2.evaluate(s["t"], s["y"], s["z"], s.get("B"), s.get("Q"))
    gap_f = f1 - f2
    gap_g = -np.einsum("nij,eij->ne", g2 - g1, theta.covariances).min(axis=1)
    gap = np.maximum(gap_f, gap_g)
    passed = bool(gap.max() <= ASSUMPTION_TOL)
    witness = None
    if not passed:
        i = int(np.argmax(gap))
        witness = {key: np.asarray(v)[i] for key, v in s.items()}
        witness["gap"] = float(gap[i])
    return Report("generator_order", passed, {"max_gap": float(gap.max())}, witness)


def compare_solutions(gen1: GeneratorSpec, gen2: GeneratorSpec, terminal1: PathFunctional,
                      terminal2: PathFunctional, tree: ScenarioTree,
                      sampling: SamplePlan | None = None) -> Report:
    """Solve both equations and check ``Y1 <= Y2 + 1e-8`` at every node."""
    order = check_generator_order(gen1, gen2, tree.theta, sampling, tree)
    if not order:
        raise PreconditionError("generators are not ordered on the sample plan", order.witness)
    xi1, xi2 = terminal1.evaluate(tree), terminal2.evaluate(tree)
    if np.any(xi1 > xi2 + ASSUMPTION_TOL):
        i = int(np.argmax(xi1 - xi2))
        raise PreconditionError("terminal values are not ordered",
                                {"leaf": i, "B": tree.leaves.B[i], "xi1": xi1[i], "xi2": xi2[i]})
    sol1 = solve_quadratic_fh(tree, gen1, terminal1)
    sol2 = solve_quadratic_fh(tree, gen2, terminal2)
    worst, witness, violations = -math.inf, None, 0
    for k, (a, b) in enumerate(zip(sol1.Y, sol2.Y)):
        gap = a - b
        violations += int(np.sum(gap > COMPARE_TOL))
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst, witness = float(gap[i]), {"level": k, "node": i, "Y1": float(a[i]), "Y2": float(b[i])}
    children = [order, sol1.check_K(), sol2.check_K()]
    return Report("comparison", violations == 0 and all(children),
                  {"worst_gap": worst, "violations": violations, "Y1_0": sol1.root_Y, "Y2_0": sol2.root_Y,
                   "max_abs_Z": max(max(sol1.max_abs_Z()), max(sol2.max_abs_Z()))},
                  witness if violations else None, children)


# ---------------------------------------------------------------------------
# infinite horizon


@dataclass
class InfiniteHorizonResult:
    y0: float
    n_used: int
    tail_bound: float
    iterates: list[tuple[int, float]]
    n_min: int
    bound_constant: float
    solutions: dict = field(default_factory=dict, repr=False)

    def decay_rate(self) -> float:
        return fit_decay_rate(self.iterates)

    def summary(self) -> dict:
        return {"y0": self.y0, "n_used": self.n_used, "n_min": self.n_min, "tail_bound": self.tail_bound,
                "iterates": [[n, y] for n, y in self.iterates], "bound_constant": self.bound_constant}


def uniform_bound(gen: GeneratorSpec, theta: VolatilitySet) -> float:
    """``(1 + sigma_sum^2) M0 / mu``."""
    return (1.0 + sigma_bounds(theta).total) * gen.M0 / gen.mu


def minimal_horizon(gen: GeneratorSpec, theta: VolatilitySet, tol: float) -> int:
    """Smallest integer ``n`` whose tail bound ``(1+sigma_sum^2) M0 e^{-mu n} / mu`` is at most ``tol``."""
    if not tol > 0:
        raise InputError(f"tol must be positive, got {tol}")
    ub = uniform_bound(gen, theta)
    if ub <= tol:
        return 1
    return max(1, math.ceil(math.log(ub / tol) / gen.mu))


def truncated_bound_excess(solution: BsdeSolution, gen: GeneratorSpec, theta: VolatilitySet) -> float:
    """Largest ``(|Y| - (1+sigma_sum^2) M0/mu (1 - e^{-mu(n-t)})) / dt`` over the nodes."""
    ub = uniform_bound(gen, theta)
    grid = solution.tree.grid
    worst = -math.inf
    for k, Yk in enumerate(solution.Y):
        bound = ub * -math.expm1(-gen.mu * (grid.horizon - grid.time(k)))
        worst = max(worst, float((np.abs(Yk) - bound).max()) / grid.dt)
    return worst


def _ih_grid(n: float, dt: float | None, steps_per_horizon: int | None) -> TimeGrid:
    if steps_per_horizon is not None:
        return TimeGrid(0.0, float(n), int(steps_per_horizon))
    if dt is None:
        raise InputError("give dt or steps_per_horizon")
    return TimeGrid.from_dt(float(n), dt)


def calibrate_bound_constant(gen: GeneratorSpec, theta: VolatilitySet, horizon: float = 1.0,
                             steps: int = 8, node_budget: int | None = None) -> float:
    """Scheme constant ``C`` for the truncated bound, measured once at ``steps`` steps."""
    tree = build_tree(theta, TimeGrid(0.0, horizon, steps), node_budget=node_budget)
    sol = solve_quadratic_fh(tree, gen, PathFunctional.constant(0.0))
    return max(0.0, truncated_bound_excess(sol, gen, theta))


def solve_infinite_horizon(gen: GeneratorSpec, theta: VolatilitySet, dt: float | None = None,
                           tol: float = 1e-2, horizons: Sequence[int] | None = None,
                           steps_per_horizon: int | None = None, node_budget: int | None = None,
                           sampling: SamplePlan | None = None, keep_solutions: bool = False,
                           bound_constant: float | None = None) -> InfiniteHorizonResult:
    """Truncation scheme: zero terminal data on ``[0, n]`` for increasing ``n``.

    ``dt`` fixes the step (matched dt across horizons, so first-order bias is
    shared); ``steps_per_horizon`` instead fixes the step count so the lattice
    size stays flat and ``dt = n / N`` grows with ``n``.
    """
    if gen.mu is None:
        raise ConfigError("the infinite-horizon driver needs a declared mu")
    if gen.dim != theta.dim:
        raise ConfigError("generator and volatility dimensions differ")
    diss = check_condition_HI(gen, theta, sampling)
    if not diss:
        raise PreconditionError("generator is not dissipative with the declared mu", diss.witness)
    n_min = minimal_horizon(gen, theta, tol)
    if horizons is None:
        horizons = sorted({max(1, n_min - 2), max(1, n_min - 1), n_min})
    horizons = sorted(int(n) for n in horizons)
    if bound_constant is None:
        bound_constant = calibrate_bound_constant(gen, theta, node_budget=node_budget)
    iterates, sols = [], {}
    for n in horizons:
        grid = _ih_grid(n, dt, steps_per_horizon)
        try:
            tree = build_tree(theta, grid, node_budget=node_budget)
        except ResourceError as exc:
            raise ResourceError(f"{exc}; horizon {n} with dt={grid.dt:.4g} is too fine, use a coarser dt "
                                "or fewer steps per horizon") from exc
        sol = solve_quadratic_fh(tree, gen, PathFunctional.constant(0.0))
        iterates.append((n, sol.root_Y))
        if keep_solutions:
            sols[n] = sol
    n_used = horizons[-1]
    tail = uniform_bound(gen, theta) * math.exp(-gen.mu * n_used)
    return InfiniteHorizonResult(iterates[-1][1], n_used, tail, iterates, n_min, bound_constant, sols)


def fit_decay_rate(iterates: Sequence[tuple[int, float]]) -> float:
    """Least-squares ``-slope`` of ``log|Y^{n_{i+1}} - Y^{n_i}|`` against ``n_i``."""
    ns = np.array([n for n, _ in iterates], dtype=float)
    ys = np.array([y for _, y in iterates], dtype=float)
    if len(ns) < 3:
        raise InputError("a rate fit needs at least three horizons")
    diffs = np.abs(np.diff(ys))
    if np.any(diffs == 0):
        return math.inf
    slope = np.polyfit(ns[:-1], np.log(diffs), 1)[0]
    return float(-slope)


def check_truncated_bounds(result: InfiniteHorizonResult, gen: GeneratorSpec, theta: VolatilitySet) -> Report:
    """Every stored truncated solution against ``(1+sigma_sum^2) M0/mu (1 - e^{-mu(n-t)}) + C dt``."""
    worst, witness = -math.inf, None
    for n, sol in result.solutions.items():
        excess = truncated_bound_excess(sol, gen, theta) - result.bound_constant
        if excess > worst:
            worst, witness = excess, {"horizon": n}
    passed = worst <= 1e-12
    return Report("truncated_bounds", passed, {"worst_excess_over_dt": worst,
                                               "bound_constant": result.bound_constant},
                  None if passed else witness)


def truncation_gap(sol_n: BsdeSolution, sol_m: BsdeSolution, gen: GeneratorSpec, theta: VolatilitySet,
                   bound_constant: float = 0.0) -> Report:
    """Compare truncations on ``[0, n]`` and ``[0, m]`` (``n < m``) at matched ``dt``.

    ``Y^n`` is extended by zero after ``n``; the gap at time ``t`` must stay
    below ``(1+sigma_sum^2) M0 e^{mu t}/mu (e^{-mu n} - e^{-mu m}) + C dt``.
    """
    gn, gm = sol_n.tree.grid, sol_m.tree.grid
    if abs(gn.dt - gm.dt) > 1e-12 or gn.horizon >= gm.horizon:
        raise InputError("truncation gaps need matched dt and n < m")
    ub = uniform_bound(gen, theta)
    n, m, mu = gn.horizon, gm.horizon, gen.mu
    worst, witness = -math.inf, None
    for k, Ym in enumerate(sol_m.Y):
        t = gm.time(k)
        if k <= gn.steps:
            if sol_n.Y[k].shape != Ym.shape:
                raise InputError("lattices on [0, n] and [0, m] do not share levels")
            gap = np.abs(Ym - sol_n.Y[k])
        else:
            gap = np.abs(Ym)
        bound = ub * (math.exp(-mu * (n - t)) - math.exp(-mu * (m - t))) + bound_constant * gm.dt
        excess = float(gap.max()) - bound
        if excess > worst:
            worst, witness = excess, {"level": k, "t": t}
    passed = worst <= 1e-12
    return Report("truncation_gap", passed, {"worst_excess": worst, "n": n, "m": m}, None if passed else witness)


def compare_infinite(gen1: GeneratorSpec, gen2: GeneratorSpec, theta: VolatilitySet, dt: float,
                     tol: float = 1e-2, horizons: Sequence[int] | None = None,
                     node_budget: int | None = None) -> Report:
    """Ordered generators give ordered truncation limits, up to both tail bounds."""
    order = check_generator_order(gen1, gen2, theta)
    if not order:
        raise PreconditionError("generators are not ordered on the sample plan", order.witness)
    r1 = solve_infinite_horizon(gen1, theta, dt, tol, horizons, node_budget=node_budget, bound_constant=0.0)
    r2 = solve_infinite_horizon(gen2, theta, dt, tol, horizons, node_budget=node_budget, bound_constant=0.0)
    gap = r1.y0 - r2.y0
    allowance = COMPARE_TOL + r1.tail_bound + r2.tail_bound
    return Report("infinite_comparison", gap <= allowance,
                  {"y1": r1.y0, "y2": r2.y0, "gap": gap, "allowance": allowance}, None, [order])
