"""Controlled scenario lattices for G-Brownian motion and backward dynamic programming.

Each step picks an extreme volatility ``theta_e`` at the node (before the
signs are drawn) and moves ``B`` by ``theta_e xi sqrt(dt)`` with
``xi in {-1, +1}^d`` equally weighted.  The quadratic variation moves by
``theta_e theta_e^T dt``.  Upper expectations are backward recursions
``V = max_e mean_xi V(child)``.

Two layouts share one representation:

* recombining (default): a node is identified by how many steps each extreme
  was used and the net sign count per extreme, which determines ``B`` and
  ``<B>`` exactly.  Node counts grow polynomially in the number of steps.
* path tree (``recombine=False``): one node per control/sign history, with
  parent links, for path-dependent functionals.

Both give identical values for functionals of ``(t, B, <B>)``.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, NumericError, ResourceError
from .expr import Expr, state_env, state_variables
from .extspace import ExtendedConstruction, LinearCoefficients, d_tilde, lambda_from_arrays
from .gcore import VolatilitySet, sigma_bounds
from .report import Report

DEFAULT_NODE_BUDGET = 2_000_000
NODE_BUDGET_ENV = "GBSDE_NODE_BUDGET"


def default_node_budget() -> int:
    raw = os.environ.get(NODE_BUDGET_ENV)
    if raw is None:
        return DEFAULT_NODE_BUDGET
    try:
        return int(raw)
    except ValueError as exc:
        raise InputError(f"{NODE_BUDGET_ENV} must be an integer, got {raw!r}") from exc


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    horizon: float
    steps: int

    def __post_init__(self):
        if self.t0 < 0:
            raise InputError(f"t0 must be nonnegative, got {self.t0}")
        if not self.horizon > self.t0:
            raise InputError(f"horizon {self.horizon} must exceed t0 {self.t0}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InputError(f"steps must be a positive integer, got {self.steps}")

    @classmethod
    def from_dt(cls, horizon: float, dt: float, t0: float = 0.0) -> "TimeGrid":
        steps = round((horizon - t0) / dt)
        if steps < 1 or abs(steps * dt - (horizon - t0)) > 1e-9 * max(1.0, horizon):
            raise InputError(f"dt={dt} does not divide [{t0}, {horizon}]")
        return cls(t0, horizon, steps)

    @property
    def dt(self) -> float:
        return (self.horizon - self.t0) / self.steps

    def time(self, k: int) -> float:
        return self.t0 + k * self.dt

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)


def sign_patterns(d: int) -> np.ndarray:
    """All ``xi in {-1,+1}^d`` as rows, in lexicographic order."""
    return np.array(list(itertools.product((-1.0, 1.0), repeat=d)))


@dataclass
class Level:
    """Nodes at one time step.

    ``children[i, e, s]`` indexes the next level; ``parent``/``branch`` are set
    on path trees only (``branch = e * S + s``).
    """

    B: np.ndarray
    Q: np.ndarray
    children: np.ndarray | None = None
    parent: np.ndarray | None = None
    branch: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.B.shape[0]


@dataclass
class ScenarioTree:
    grid: TimeGrid
    theta: VolatilitySet
    levels: list[Level]
    recombining: bool
    drift: np.ndarray | Callable | None = None
    node_budget: int = DEFAULT_NODE_BUDGET
    extended: bool = False
    signs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.signs = sign_patterns(self.dim)

    @property
    def dim(self) -> int:
        return self.theta.dim

    @property
    def n_extremes(self) -> int:
        return self.theta.count

    @property
    def n_signs(self) -> int:
        return 2 ** self.dim

    @property
    def steps(self) -> int:
        return self.grid.steps

    @property
    def node_count(self) -> int:
        return sum(level.size for level in self.levels)

    @property
    def leaves(self) -> Level:
        return self.levels[-1]

    def check_node(self, node) -> tuple[int, int]:
        try:
            k, i = (int(node[0]), int(node[1]))
        except (TypeError, ValueError, IndexError) as exc:
            raise InputError(f"node must be a (level, index) pair, got {node!r}") from exc
        if not 0 <= k <= self.steps or not 0 <= i < self.levels[k].size:
            raise InputError(f"node {node!r} is not in the tree")
        return k, i

    def path(self, node) -> list[int]:
        """Node indices from the root down to ``node`` (path trees only)."""
        if self.recombining:
            raise InputError("paths are only defined on non-recombining trees")
        k, i = self.check_node(node)
        out = [i]
        for j in range(k, 0, -1):
            out.append(int(self.levels[j].parent[out[-1]]))
        return out[::-1]

    def path_states(self, node) -> tuple[np.ndarray, np.ndarray]:
        idx = self.path(node)
        B = np.array([self.levels[k].B[i] for k, i in enumerate(idx)])
        Q = np.array([self.levels[k].Q[i] for k, i in enumerate(idx)])
        return B, Q

    def leaf_paths(self) -> tuple[np.ndarray, np.ndarray]:
        """B and <B> along every root-to-leaf path, shapes (leaves, N+1, d[, d])."""
        if self.recombining:
            raise InputError("paths are only defined on non-recombining trees")
        n = self.leaves.size
        Bs = np.empty((n, self.steps + 1, self.dim))
        Qs = np.empty((n, self.steps + 1, self.dim, self.dim))
        idx = np.arange(n)
        for k in range(self.steps, -1, -1):
            Bs[:, k] = self.levels[k].B[idx]
            Qs[:, k] = self.levels[k].Q[idx]
            if k:
                idx = self.levels[k].parent[idx]
        return Bs, Qs

    def increments(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-branch ``(dB, d<B>)`` from level ``k``: shapes (n,E,S,d), (n,E,S,d,d)."""
        lv, nxt = self.levels[k], self.levels[k + 1]
        dB = nxt.B[lv.children] - lv.B[:, None, None, :]
        dQ = nxt.Q[lv.children] - lv.Q[:, None, None, :, :]
        return dB, dQ

    def stats(self) -> dict:
        return {
            "dim": self.dim,
            "extremes": self.n_extremes,
            "sign_patterns": self.n_signs,
            "steps": self.steps,
            "dt": self.grid.dt,
            "recombining": self.recombining,
            "extended": self.extended,
            "nodes_per_level": [lv.size for lv in self.levels],
            "node_count": self.node_count,
            "node_budget": self.node_budget,
        }


def _drift_array(drift, E: int, d: int) -> np.ndarray | None:
    if drift is None or callable(drift):
        return None
    arr = np.asarray(drift, dtype=float)
    arr = np.broadcast_to(arr, (E, d)) if arr.ndim <= 1 else arr
    if arr.shape != (E, d):
        raise InputError(f"constant drift must have shape ({E}, {d}), got {arr.shape}")
    return arr


def build_tree(theta: VolatilitySet, grid: TimeGrid, recombine: bool = True,
               node_budget: int | None = None, drift=None, B0=None) -> ScenarioTree:
    """Build the controlled lattice.

    ``drift`` adds ``drift_e * dt`` to every step taken under extreme ``e``.
    It is either a constant (E, d) array or a rule ``(t, B, Q) -> (..., E, d)``
    evaluated at the parent node; a state-dependent rule needs a path tree.
    """
    budget = default_node_budget() if node_budget is None else int(node_budget)
    E, d = theta.count, theta.dim
    dt = grid.dt
    signs = sign_patterns(d)
    S = len(signs)
    const_drift = _drift_array(drift, E, d)
    if callable(drift) and recombine:
        raise InputError("a state-dependent drift requires recombine=False")
    B0 = np.zeros(d) if B0 is None else np.asarray(B0, dtype=float).reshape(d)
    gammas = theta.covariances
    # per-branch volatility increments, shape (E, S, d)
    vol_inc = np.sqrt(dt) * np.einsum("eij,sj->esi", theta.extremes, signs)

    levels = [Level(B0[None, :].copy(), np.zeros((1, d, d)))]
    total = 1
    if recombine:
        width = E * (1 + d)
        unit = np.zeros((E, S, width), dtype=np.int64)
        for e in range(E):
            unit[e, :, e * (1 + d)] = 1
            unit[e, :, e * (1 + d) + 1:(e + 1) * (1 + d)] = signs.astype(np.int64)
        keys = np.zeros((1, width), dtype=np.int64)
        drift_c = np.zeros((E, d)) if const_drift is None else const_drift
        for k in range(grid.steps):
            cand = (keys[:, None, None, :] + unit[None]).reshape(-1, width)
            keys, inverse = np.unique(cand, axis=0, return_inverse=True)
            total += keys.shape[0]
            if total > budget:
                raise ResourceError(f"lattice needs more than the node budget of {budget} nodes "
                                    f"(reached level {k + 1} of {grid.steps})")
            levels[-1].children = inverse.reshape(-1, E, S)
            blocks = keys.reshape(-1, E, 1 + d)
            counts = blocks[:, :, 0].astype(float)
            nets = blocks[:, :, 1:].astype(float)
            B = (B0 + np.sqrt(dt) * np.einsum("eij,nej->ni", theta.extremes, nets)
                 + dt * counts @ drift_c)
            Q = dt * np.einsum("ne,eij->nij", counts, gammas)
            levels.append(Level(B, Q))
    else:
        for k in range(grid.steps):
            prev = levels[-1]
            n = prev.size
            total += n * E * S
            if total > budget:
                raise ResourceError(f"path tree needs more than the node budget of {budget} nodes "
                                    f"(reached level {k + 1} of {grid.steps})")
            inc = np.broadcast_to(vol_inc, (n, E, S, d))
            if callable(drift):
                dr = np.asarray(drift(grid.time(k), prev.B, prev.Q), dtype=float)
                inc = inc + dt * np.broadcast_to(dr, (n, E, d))[:, :, None, :]
            elif const_drift is not None:
                inc = inc + dt * const_drift[None, :, None, :]
            B = (prev.B[:, None, None, :] + inc).reshape(-1, d)
            Q = np.broadcast_to(prev.Q[:, None, None] + dt * gammas[None, :, None],
                                (n, E, S, d, d)).reshape(-1, d, d)
            prev.children = np.arange(n * E * S).reshape(n, E, S)
            parent = np.repeat(np.arange(n), E * S)
            branch = np.tile(np.arange(E * S), n)
            levels.append(Level(B, Q, parent=parent, branch=branch))
    return ScenarioTree(grid, theta, levels, recombine, drift, budget)


def build_extended_tree(theta: VolatilitySet, grid: TimeGrid, recombine: bool = True,
                        node_budget: int | None = None) -> ScenarioTree:
    """Lattice of the ``d_tilde``-dimensional motion driven by ``theta_tilde``."""
    ext = ExtendedConstruction.from_volatility(theta)
    tree = build_tree(ext.volatility_set(), grid, recombine, node_budget)
    tree.extended = True
    return tree


def check_tree_invariants(tree: ScenarioTree, tol: float = 1e-12) -> Report:
    """Increment structure and the quadratic-variation bound on every node."""
    dt = tree.grid.dt
    worst_b = worst_q = 0.0
    for k in range(tree.steps):
        dB, dQ = tree.increments(k)
        expect = np.sqrt(dt) * np.einsum("eij,sj->esi", tree.theta.extremes, tree.signs)
        drift = dB - expect[None]
        if tree.drift is None:
            worst_b = max(worst_b, float(np.abs(drift).max()))
        else:
            # drift contributions are sign independent
            worst_b = max(worst_b, float(np.abs(drift - drift[:, :, :1]).max()))
        worst_q = max(worst_q, float(np.abs(dQ - dt * tree.theta.covariances[None, :, None]).max()))
    bars = sigma_bounds(tree.theta).entry_bounds
    excess = max(float((np.abs(lv.Q) - bars * tree.grid.time(k) + tree.grid.t0 * bars).max())
                 for k, lv in enumerate(tree.levels))
    ok = worst_b <= tol and worst_q <= tol and excess <= tol
    return Report("tree_invariants", ok, {"increment_deviation": worst_b, "qv_deviation": worst_q,
                                          "qv_bound_excess": excess})


# ---------------------------------------------------------------------------
# functionals


@dataclass(frozen=True)
class PathFunctional:
    """Payoff on the lattice.

    ``level == "terminal"``: ``rule(t, B, Q)`` vectorised over leaves.
    ``level == "path"``: ``rule(times, B_paths, Q_paths)`` with path arrays of
    shape (leaves, N+1, d[, d]); needs a path tree.
    """

    rule: Callable
    level: str = "terminal"
    source: str | None = None

    def __post_init__(self):
        if self.level not in ("terminal", "path"):
            raise InputError(f"unknown measurability level {self.level!r}")

    @classmethod
    def terminal(cls, rule: Callable, source: str | None = None) -> "PathFunctional":
        return cls(rule, "terminal", source)

    @classmethod
    def path(cls, rule: Callable, source: str | None = None) -> "PathFunctional":
        return cls(rule, "path", source)

    @classmethod
    def from_expression(cls, source: str, dim: int) -> "PathFunctional":
        expr = Expr(source, state_variables(dim))

        def rule(t, B, Q):
            return np.broadcast_to(expr(**state_env(t, B, Q)), np.shape(B)[:-1]).astype(float)

        return cls(rule, "terminal", expr.source)

    @classmethod
    def constant(cls, value: float) -> "PathFunctional":
        return cls(lambda t, B, Q: np.full(np.shape(B)[:-1], float(value)), "terminal", repr(value))

    def evaluate(self, tree: ScenarioTree) -> np.ndarray:
        if self.level == "terminal":
            leaves = tree.leaves
            out = self.rule(tree.grid.horizon, leaves.B, leaves.Q)
        else:
            Bs, Qs = tree.leaf_paths()
            out = self.rule(tree.grid.times, Bs, Qs)
        out = np.asarray(out, dtype=float).reshape(tree.leaves.size)
        if not np.all(np.isfinite(out)):
            bad = int(np.flatnonzero(~np.isfinite(out))[0])
            raise NumericError(f"payoff is not finite at leaf {bad} (B={tree.leaves.B[bad].tolist()})")
        return out

    def __neg__(self):
        return PathFunctional(lambda *a: -np.asarray(self.rule(*a)), self.level,
                              None if self.source is None else f"-({self.source})")


def coordinate(m: int, power: int = 1) -> PathFunctional:
    """``(B^m_T)^power`` for 1-based ``m``."""
    return PathFunctional.terminal(lambda t, B, Q: B[..., m - 1] ** power, f"B{m}**{power}")


# ---------------------------------------------------------------------------
# backward dynamic programming


@dataclass
class DPResult:
    values: list[np.ndarray]
    controls: list[np.ndarray]

    @property
    def root(self) -> float:
        return float(self.values[0][0])


Kernel = Callable[[int, Level], np.ndarray | float | None]


def _kernel_value(kernel, k, level):
    return None if kernel is None else np.asarray(kernel(k, level), dtype=float)


def backward(tree: ScenarioTree, leaf_values: np.ndarray, add: Kernel | None = None,
             ratio: Kernel | None = None, weight: Kernel | None = None,
             minimize: bool = False) -> DPResult:
    """``V_k = max_e mean_xi w * (add + ratio * V_child)``.

    Each kernel maps ``(k, level)`` to an array broadcastable to (n, E, S).
    Ties in the max go to the first extreme.
    """
    V = np.asarray(leaf_values, dtype=float)
    if V.shape != (tree.leaves.size,):
        raise InputError(f"leaf values must have shape ({tree.leaves.size},), got {V.shape}")
    values = [V]
    controls = []
    for k in range(tree.steps - 1, -1, -1):
        lv = tree.levels[k]
        cont = V[lv.children]
        r = _kernel_value(ratio, k, lv)
        if r is not None:
            cont = r * cont
        a = _kernel_value(add, k, lv)
        if a is not None:
            cont = cont + a
        w = _kernel_value(weight, k, lv)
        if w is not None:
            cont = w * cont
        branch = np.mean(cont, axis=-1)
        ctrl = np.argmin(branch, axis=-1) if minimize else np.argmax(branch, axis=-1)
        V = np.take_along_axis(branch, ctrl[:, None], axis=-1)[:, 0]
        values.append(V)
        controls.append(ctrl)
    return DPResult(values[::-1], controls[::-1])


def expectation_values(tree: ScenarioTree, payoff: PathFunctional) -> DPResult:
    return backward(tree, payoff.evaluate(tree))


def upper_expectation(tree: ScenarioTree, payoff: PathFunctional) -> float:
    return expectation_values(tree, payoff).root


def conditional_upper_expectation(tree: ScenarioTree, node, payoff: PathFunctional) -> float:
    k, i = tree.check_node(node)
    return float(expectation_values(tree, payoff).values[k][i])


# ---------------------------------------------------------------------------
# stochastic exponentials and Girsanov expectations


def stochastic_exponential(times: np.ndarray, B_path: np.ndarray, Q_path: np.ndarray,
                           lam: Callable) -> float:
    """``exp(sum_k lam_k . dB_k - 1/2 lam_k^T d<B>_k lam_k)`` with left-endpoint ``lam``."""
    B_path = np.asarray(B_path, dtype=float)
    Q_path = np.asarray(Q_path, dtype=float)
    times = np.asarray(times, dtype=float)
    lams = np.asarray(lam(times[:-1], B_path[:-1], Q_path[:-1]), dtype=float)
    lams = np.broadcast_to(lams, B_path[:-1].shape)
    dB = np.diff(B_path, axis=0)
    dQ = np.diff(Q_path, axis=0)
    log = np.sum(lams * dB) - 0.5 * np.einsum("ki,kij,kj->", lams, dQ, lams)
    return float(np.exp(log))


def constant_rule(value) -> Callable:
    value = np.asarray(value, dtype=float)

    def rule(t, B, Q):
        return np.broadcast_to(value, np.shape(B)[:-1] + value.shape)

    rule.constant = value
    return rule


def _as_rule(lam, dim_hint: int | None = None) -> Callable:
    if callable(lam):
        return lam
    return constant_rule(np.atleast_1d(np.asarray(lam, dtype=float)))


def _lambda_dim(rule: Callable, tree: ScenarioTree) -> int:
    lv = tree.levels[0]
    return int(np.asarray(rule(tree.grid.t0, lv.B, lv.Q)).shape[-1])


def girsanov_weight(tree: ScenarioTree, lam) -> Kernel:
    """Per-branch stochastic-exponential factor for ``lam`` on ``tree``.

    ``lam`` is a rule ``(t, B, Q) -> (..., m)`` evaluated at the parent node,
    with ``m`` either the tree dimension or ``d_tilde(d)`` on an original-space
    tree.  In the second case the extra coordinates are integrated out
    exactly: they enter only through independent signs, each contributing a
    ``cosh`` factor.
    """
    rule = _as_rule(lam)
    d = tree.dim
    m = _lambda_dim(rule, tree)
    dt = tree.grid.dt
    sq = np.sqrt(dt)
    if m == d:
        def kernel(k, lv):
            dB, dQ = tree.increments(k)
            L = np.asarray(rule(tree.grid.time(k), lv.B, lv.Q), dtype=float)[:, None, None, :]
            return np.exp(np.sum(L * dB, axis=-1) - 0.5 * np.einsum("...i,...ij,...j->...", L, dQ, L))
        return kernel
    if tree.extended or m != d_tilde(d):
        raise InputError(f"lambda has {m} coordinates; expected {d} or {d_tilde(d)}")
    if tree.drift is not None:
        raise InputError("extended weights need an undrifted tree")
    ext = ExtendedConstruction.from_volatility(tree.theta)
    tt = ext.theta_tilde_per_extreme                                  # (E, D, D)
    cov = np.einsum("eij,ekj->eik", tt, tt)                           # (E, D, D)
    signs = tree.signs                                                # (S, d)

    def kernel(k, lv):
        L = np.asarray(rule(tree.grid.time(k), lv.B, lv.Q), dtype=float)  # (n, D)
        v = np.einsum("eji,nj->nei", tt, L)                           # theta_tilde^T Lambda
        lin = sq * np.einsum("nei,si->nes", v[..., :d], signs)
        hidden = np.sum(np.log(np.cosh(sq * v[..., d:])), axis=-1)   # (n, E)
        quad = 0.5 * dt * np.einsum("ni,eij,nj->ne", L, cov, L)
        return np.exp(lin + (hidden - quad)[:, :, None])
    return kernel


def _shift_drift(tree: ScenarioTree, lam):
    """Per-extreme drift ``b + sum_ij d^{ij} gamma_e^{ij}`` from ``(b, dcoef)`` data."""
    theta = tree.theta
    gam = theta.covariances
    if isinstance(lam, LinearCoefficients):
        b_rule, d_rule = lam.b, lam.dcoef
    elif isinstance(lam, tuple) and len(lam) == 2:
        b_rule, d_rule = _as_rule(lam[0]), _as_rule(lam[1])
    else:
        raise InputError("shift mode needs the (b, d) coefficient data, not a raw lambda vector")
    b_c = getattr(b_rule, "constant", None)
    d_c = getattr(d_rule, "constant", None)
    if b_c is not None and d_c is not None:
        b_c = np.asarray(b_c, dtype=float).reshape(theta.dim)
        d_c = np.asarray(d_c, dtype=float).reshape(theta.dim, theta.dim, theta.dim)
        return b_c[None, :] + np.einsum("ijm,eij->em", d_c, gam)

    def drift(t, B, Q):
        b = np.asarray(b_rule(t, B, Q), dtype=float)
        dd = np.asarray(d_rule(t, B, Q), dtype=float)
        return b[..., None, :] + np.einsum("...ijm,eij->...em", dd, gam)
    return drift


def shifted_tree(tree: ScenarioTree, lam) -> ScenarioTree:
    drift = _shift_drift(tree, lam)
    recombine = tree.recombining and not callable(drift)
    return build_tree(tree.theta, tree.grid, recombine, tree.node_budget, drift, tree.levels[0].B[0])


def girsanov_setup(tree: ScenarioTree, lam, mode: str = "weight") -> tuple[ScenarioTree, Kernel | None]:
    """Tree and per-branch weight kernel realising the Girsanov-transformed expectation.

    weight mode: the same tree with stochastic-exponential weights; ``lam`` is a
    rule, a constant vector or :class:`LinearCoefficients` (mapped to the
    extended ``Lambda``).  shift mode: a drifted tree without weights; ``lam``
    must be :class:`LinearCoefficients` or a ``(b, d)`` pair.
    """
    if mode == "weight":
        if isinstance(lam, LinearCoefficients):
            coeffs = lam
            lam = lambda t, B, Q: lambda_from_arrays(coeffs.b(t, B, Q), coeffs.dcoef(t, B, Q))
        return tree, girsanov_weight(tree, lam)
    if mode == "shift":
        if tree.extended:
            raise InputError("shift mode runs on the original-space tree")
        if not isinstance(lam, (LinearCoefficients, tuple)):
            raise InputError("shift mode needs the (b, d) coefficient data, not a raw lambda vector")
        return shifted_tree(tree, lam), None
    raise InputError(f"unknown Girsanov mode {mode!r}; expected 'weight' or 'shift'")


def girsanov_values(tree: ScenarioTree, payoff: PathFunctional, lam,
                    mode: str = "weight") -> tuple[ScenarioTree, DPResult]:
    """DP values of the Girsanov-transformed upper expectation, with the tree they live on
    (the drifted lattice in shift mode)."""
    used, weight = girsanov_setup(tree, lam, mode)
    return used, backward(used, payoff.evaluate(used), weight=weight)


def girsanov_expectation(tree: ScenarioTree, payoff: PathFunctional, lam, mode: str = "weight",
                         node=(0, 0)) -> float:
    used, result = girsanov_values(tree, payoff, lam, mode)
    k, i = used.check_node(node)
    return float(result.values[k][i])


# ---------------------------------------------------------------------------
# BMO estimate


def bmo_norm_estimate(tree: ScenarioTree, lam) -> float:
    """Largest conditional remaining energy ``E_t[int_t^T |lam|^2 ds]`` over lattice nodes.

    ``lam`` is a rule ``(t, B, Q) -> (..., m)`` or a per-level list of arrays
    ``(n_k, m)`` for levels 0..N-1.  Stopping is restricted to lattice dates,
    so this is a lower estimate of the norm.
    """
    dt = tree.grid.dt

    def energy(k, lv):
        if callable(lam):
            L = np.asarray(lam(tree.grid.time(k), lv.B, lv.Q), dtype=float)
        else:
            L = np.asarray(lam[k], dtype=float)
        L = L.reshape(lv.size, -1)
        return (np.sum(L * L, axis=-1) * dt)[:, None, None]

    result = backward(tree, np.zeros(tree.leaves.size), add=energy)
    return float(max(v.max() for v in result.values))
