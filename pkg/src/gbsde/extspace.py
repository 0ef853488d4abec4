"""Extended-space construction for linear G-BSDEs.

The original ``d``-dimensional G-Brownian motion ``B`` is embedded in a
``d_tilde``-dimensional one ``(B, Bdot, Bhat, Bbar)`` whose mutual variations
with ``B`` reproduce ``ds`` and every ``d<B>^{ij}``.  A Girsanov transform in
the bigger space then removes the whole drift ``b ds + sum d^{ij} d<B>^{ij}``.

All coordinates are 1-based in the public index functions, as in the usual
mathematical notation; arrays are 0-based.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import DomainError, InputError, NumericError
from .expr import Expr, state_env, state_variables
from .gcore import VolatilitySet
from .report import Report


def d_tilde(d: int) -> int:
    if d < 1:
        raise DomainError(f"dimension must be positive, got {d}")
    return 2 * d + d * (d - 1) + d * (d - 1) * d // 2


def _triangle(i: int, d: int) -> int:
    # sum_{m=0}^{i-1} (d - m)
    return sum(d - m for m in range(i))


def index_h(i: int, j: int, d: int) -> int:
    """Position of the pair ``i < j`` in lexicographic order, starting at 1."""
    if not (1 <= i < j <= d):
        raise DomainError(f"index_h needs 1 <= i < j <= d, got ({i}, {j}) with d={d}")
    return _triangle(i, d) - d + j - i


def index_hat(i: int, k: int, d: int) -> int:
    """Coordinate of ``Bhat^{i,k}`` (``i != k``)."""
    if not (1 <= i <= d and 1 <= k <= d) or i == k:
        raise DomainError(f"index_hat needs distinct 1 <= i, k <= d, got ({i}, {k}) with d={d}")
    return 2 * d + (i - 1) * (d - 1) + k - (1 if k > i else 0)


def index_bar(i: int, j: int, k: int, d: int) -> int:
    """Coordinate of ``Bbar^{i,j,k}`` (``i < j``)."""
    if not (1 <= i < j <= d and 1 <= k <= d):
        raise DomainError(f"index_bar needs 1 <= i < j <= d and 1 <= k <= d, got ({i}, {j}, {k})")
    return 2 * d + d * (d - 1) + (_triangle(i, d) - d) * d + (j - i - 1) * d + k


@dataclass(frozen=True)
class IndexMaps:
    """The three index bijections with enumerated inverse tables."""

    dim: int
    pair_to_h: dict
    h_to_pair: dict
    hat_map: dict
    hat_inverse: dict
    bar_map: dict
    bar_inverse: dict

    @classmethod
    @lru_cache(maxsize=None)
    def build(cls, d: int) -> "IndexMaps":
        pairs = [(i, j) for i in range(1, d + 1) for j in range(i + 1, d + 1)]
        pair_to_h = {p: index_h(*p, d) for p in pairs}
        hats = [(i, k) for i in range(1, d + 1) for k in range(1, d + 1) if k != i]
        hat_map = {p: index_hat(*p, d) for p in hats}
        bars = [(i, j, k) for (i, j) in pairs for k in range(1, d + 1)]
        bar_map = {p: index_bar(*p, d) for p in bars}
        return cls(d, pair_to_h, {v: k for k, v in pair_to_h.items()},
                   hat_map, {v: k for k, v in hat_map.items()},
                   bar_map, {v: k for k, v in bar_map.items()})

    def classify(self, l: int):
        """Return ``(kind, index tuple)`` for extended coordinate ``l``."""
        d = self.dim
        if 1 <= l <= d:
            return "B", (l,)
        if d < l <= 2 * d:
            return "Bdot", (l - d,)
        if l in self.hat_inverse:
            return "Bhat", self.hat_inverse[l]
        if l in self.bar_inverse:
            return "Bbar", self.bar_inverse[l]
        raise DomainError(f"coordinate {l} outside 1..{d_tilde(d)}")

    def labels(self) -> list[str]:
        out = []
        for l in range(1, d_tilde(self.dim) + 1):
            kind, idx = self.classify(l)
            out.append(f"{kind}^{','.join(map(str, idx))}")
        return out


def _inverse_transpose(theta: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(theta)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericError(f"theta is singular or ill-conditioned (condition number {cond:.3g})")
    return np.linalg.inv(theta).T


def _hat_selector(gamma: np.ndarray) -> np.ndarray:
    # stacked gamma^{ii} I_d^{(-i)}, shape (d(d-1), d)
    d = gamma.shape[0]
    rows = []
    for i in range(d):
        eye = np.delete(np.eye(d), i, axis=0)
        rows.append(gamma[i, i] * eye)
    return np.vstack(rows) if rows else np.zeros((0, d))


def _bar_selector(gamma: np.ndarray) -> np.ndarray:
    # stacked Gamma^h I_d over pairs h ~ (i, j) in lexicographic order
    d = gamma.shape[0]
    rows = [gamma[i, j] * np.eye(d) for i in range(d) for j in range(i + 1, d)]
    return np.vstack(rows) if rows else np.zeros((0, d))


def build_theta_tilde(theta) -> np.ndarray:
    """Block lower-triangular ``d_tilde x d_tilde`` matrix attached to ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    d = theta.shape[0]
    dt_ = d_tilde(d)
    inv_t = _inverse_transpose(theta)
    gamma = theta @ theta.T
    first = np.vstack([theta, inv_t, _hat_selector(gamma) @ inv_t, _bar_selector(gamma) @ inv_t])
    out = np.zeros((dt_, dt_))
    out[:, :d] = first
    out[d:, d:] = np.eye(dt_ - d)
    return out


@dataclass(frozen=True)
class ExtendedConstruction:
    dim: int
    d_tilde: int
    maps: IndexMaps
    theta_tilde_per_extreme: np.ndarray
    labels: tuple[str, ...]

    @classmethod
    def from_volatility(cls, theta: VolatilitySet) -> "ExtendedConstruction":
        d = theta.dim
        tt = np.array([build_theta_tilde(th) for th in theta.extremes])
        maps = IndexMaps.build(d)
        return cls(d, d_tilde(d), maps, tt, tuple(maps.labels()))

    def volatility_set(self) -> VolatilitySet:
        return VolatilitySet(self.theta_tilde_per_extreme)


def verify_product_structure(theta) -> Report:
    """Compare ``theta_tilde theta_tilde^T`` against its block formulas."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    d = theta.shape[0]
    tt = build_theta_tilde(theta)
    prod = tt @ tt.T
    gamma = theta @ theta.T
    hat = _hat_selector(gamma)
    bar = _bar_selector(gamma)
    n_hat = hat.shape[0]
    sl_dot = slice(d, 2 * d)
    sl_hat = slice(2 * d, 2 * d + n_hat)
    sl_bar = slice(2 * d + n_hat, None)
    dev = {
        "gamma": np.abs(prod[:d, :d] - gamma).max(),
        "dot_identity": np.abs(prod[sl_dot, :d] - np.eye(d)).max(),
        "hat_block": np.abs(prod[sl_hat, :d] - hat).max() if n_hat else 0.0,
        "bar_block": np.abs(prod[sl_bar, :d] - bar).max() if bar.size else 0.0,
        "symmetry": np.abs(prod - prod.T).max(),
    }
    dev = {k: float(v) for k, v in dev.items()}
    max_dev = max(dev.values())
    return Report("product_structure", max_dev < 1e-10, {"max_deviation": max_dev, "blocks": dev, "dim": d})


def random_well_conditioned(rng: np.random.Generator, d: int, max_cond: float = 10.0) -> np.ndarray:
    while True:
        m = rng.normal(size=(d, d))
        if np.linalg.cond(m) <= max_cond:
            return m


# ---------------------------------------------------------------------------
# linear coefficients and the Girsanov process Lambda


def _rule(value, shape: tuple, dim: int, name: str) -> Callable:
    """Turn a constant, an expression (nested lists of strings) or a callable into ``rule(t, B, Q)``."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=object)
    if arr.shape != shape:
        raise InputError(f"coefficient {name} must have shape {shape}, got {arr.shape}")
    if all(not isinstance(v, str) for v in arr.flat):
        const = np.asarray(value, dtype=float)

        def constant(t, B, Q):
            batch = np.shape(B)[:-1]
            return np.broadcast_to(const, batch + shape).copy()

        constant.constant = const
        return constant
    names = state_variables(dim)
    exprs = [Expr(str(v), names) for v in arr.flat]

    def expression(t, B, Q):
        env = state_env(np.broadcast_to(t, np.shape(B)[:-1]), B, Q)
        batch = np.shape(B)[:-1]
        out = np.empty(batch + (len(exprs),))
        for k, e in enumerate(exprs):
            out[..., k] = np.broadcast_to(e(**env), batch)
        return out.reshape(batch + shape)

    if not any(e.names for e in exprs):
        expression.constant = expression(0.0, np.zeros(dim), np.zeros((dim, dim)))
    return expression


@dataclass(frozen=True)
class LinearCoefficients:
    """Coefficients of ``f = aY + b.Z + m`` and ``g^{ij} = c^{ij} Y + d^{ij}.Z + n^{ij}``.

    Each field is a rule ``(t, B, Q) -> array`` with the field shape appended
    to the batch shape of ``B``; ``dcoef[..., i, j, k]`` is ``d^{ij,k}``.
    Use :meth:`create` to build rules from constants or expressions.
    """

    dim: int
    a: Callable
    b: Callable
    c: Callable
    dcoef: Callable
    m: Callable
    n: Callable

    @classmethod
    def create(cls, dim: int, a=0.0, b=None, c=None, dcoef=None, m=0.0, n=None) -> "LinearCoefficients":
        d = dim
        b = np.zeros(d) if b is None else b
        c = np.zeros((d, d)) if c is None else c
        dcoef = np.zeros((d, d, d)) if dcoef is None else dcoef
        n = np.zeros((d, d)) if n is None else n
        return cls(d, _rule(a, (), d, "a"), _rule(b, (d,), d, "b"), _rule(c, (d, d), d, "c"),
                   _rule(dcoef, (d, d, d), d, "d"), _rule(m, (), d, "m"), _rule(n, (d, d), d, "n"))

    def evaluate(self, t, B, Q) -> dict[str, np.ndarray]:
        return {name: np.asarray(getattr(self, name)(t, B, Q), dtype=float)
                for name in ("a", "b", "c", "dcoef", "m", "n")}

    def constant(self, name: str):
        """Value of a state-independent coefficient, or ``None`` if it varies."""
        return getattr(getattr(self, name), "constant", None)

    def check_symmetry(self, t, B, Q, tol: float = 1e-12) -> Report:
        v = self.evaluate(t, B, Q)
        gaps = {
            "c": np.abs(v["c"] - np.swapaxes(v["c"], -1, -2)).max(),
            "n": np.abs(v["n"] - np.swapaxes(v["n"], -1, -2)).max(),
            "d": np.abs(v["dcoef"] - np.swapaxes(v["dcoef"], -2, -3)).max(),
        }
        gaps = {k: float(x) for k, x in gaps.items()}
        return Report("coefficient_symmetry", max(gaps.values()) <= tol, gaps)


def lambda_from_arrays(b: np.ndarray, dcoef: np.ndarray) -> np.ndarray:
    """Assemble Lambda from ``b`` (..., d) and ``d^{ij,k}`` (..., d, d, d)."""
    b = np.asarray(b, dtype=float)
    dcoef = np.asarray(dcoef, dtype=float)
    d = b.shape[-1]
    if dcoef.shape[-3:] != (d, d, d):
        raise InputError(f"d-coefficients must have trailing shape {(d, d, d)}")
    if np.abs(dcoef - np.swapaxes(dcoef, -2, -3)).max(initial=0.0) > 1e-12:
        raise InputError("d-coefficients must satisfy d^{ij} = d^{ji}")
    maps = IndexMaps.build(d)
    out = np.zeros(b.shape[:-1] + (d_tilde(d),))
    for l in range(d):
        out[..., l] = dcoef[..., l, l, l]
    out[..., d:2 * d] = b
    for (i, k), l in maps.hat_map.items():
        out[..., l - 1] = dcoef[..., i - 1, i - 1, k - 1]
    for (i, j, k), l in maps.bar_map.items():
        val = 2.0 * dcoef[..., i - 1, j - 1, k - 1]
        if k == j:
            val = val - dcoef[..., i - 1, i - 1, i - 1]
        if k == i:
            val = val - dcoef[..., j - 1, j - 1, j - 1]
        out[..., l - 1] = val
    return out


def build_lambda(coeffs: LinearCoefficients, t=0.0, B=None, Q=None) -> np.ndarray:
    """Lambda at one evaluation point (or a batch of them)."""
    d = coeffs.dim
    B = np.zeros(d) if B is None else np.asarray(B, dtype=float)
    Q = np.zeros((d, d)) if Q is None else np.asarray(Q, dtype=float)
    return lambda_from_arrays(coeffs.b(t, B, Q), coeffs.dcoef(t, B, Q))


# ---------------------------------------------------------------------------
# exact symbolic drift identity

def _qv(i: int, j: int):
    return ("QV",) + tuple(sorted((i, j)))


def _dsym(i: int, j: int, k: int):
    a, b = sorted((i, j))
    return ("d", a, b, k)


def _lambda_symbols(kind: str, idx: tuple, d: int) -> Counter:
    """Lambda^l as an integer combination of coefficient symbols."""
    if kind == "B":
        (l,) = idx
        return Counter({_dsym(l, l, l): 1})
    if kind == "Bdot":
        return Counter({("b", idx[0]): 1})
    if kind == "Bhat":
        i, k = idx
        return Counter({_dsym(i, i, k): 1})
    i, j, k = idx
    out = Counter({_dsym(i, j, k): 2})
    if k == j:
        out[_dsym(i, i, i)] -= 1
    if k == i:
        out[_dsym(j, j, j)] -= 1
    return out


def _collect(terms: Counter) -> dict:
    result: dict = {}
    for (measure, sym), mult in sorted(terms.items(), key=lambda kv: str(kv[0])):
        if mult:
            result.setdefault(measure, {})[sym] = mult
    return result


def girsanov_drift(m: int, d: int) -> dict:
    """Drift of the m-th transformed coordinate, ``sum_l Lambda^l d<B^m, Btilde^l>``.

    Uses the mutual-variation table of the extended coordinates with ``B^m``:
    ``<B^m, B^l> = <B>^{ml}``, ``<B^m, Bdot^i> = t 1{i=m}``,
    ``<B^m, Bhat^{i,k}> = <B>^{ii} 1{k=m}``, ``<B^m, Bbar^{i,j,k}> = <B>^{ij} 1{k=m}``.
    Returns ``{measure: {symbol: multiplicity}}``; the ``d^{ii,i}`` terms cancel
    in the integer sums.
    """
    if not 1 <= m <= d:
        raise DomainError(f"coordinate m={m} outside 1..{d}")
    maps = IndexMaps.build(d)
    terms: Counter = Counter()

    def add(measure, lam: Counter):
        for sym, mult in lam.items():
            terms[(measure, sym)] += mult

    for l in range(1, d + 1):
        add(_qv(m, l), _lambda_symbols("B", (l,), d))
    add("ds", _lambda_symbols("Bdot", (m,), d))
    for (i, k) in maps.hat_map:
        if k == m:
            add(_qv(i, i), _lambda_symbols("Bhat", (i, k), d))
    for (i, j, k) in maps.bar_map:
        if k == m:
            add(_qv(i, j), _lambda_symbols("Bbar", (i, j, k), d))
    return _collect(terms)


def expected_drift(m: int, d: int) -> dict:
    """``{ds: b^m, <B>^{ij}: d^{ij,m}}`` with symmetric pairs merged."""
    out = {"ds": {("b", m): 1}}
    for i in range(1, d + 1):
        out[_qv(i, i)] = {_dsym(i, i, m): 1}
        for j in range(i + 1, d + 1):
            out[_qv(i, j)] = {_dsym(i, j, m): 2}
    return out


def _identify_pairings(d: int, seed: int = 0) -> dict:
    """Read the mutual-variation pairing of ``B^m`` with every coordinate off ``theta_tilde theta_tilde^T``.

    Two random ``theta`` are used; an entry is identified with ``ds`` (value 1),
    ``<B>^{ij}`` (value gamma^{ij}) or nothing (value 0) only if it matches
    under both draws.
    """
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(2):
        th = random_well_conditioned(rng, d)
        draws.append((th @ th.T, build_theta_tilde(th)))
    table = {}
    n = d_tilde(d)
    for m in range(1, d + 1):
        for l in range(1, n + 1):
            cands = [None, "ds"] + [_qv(i, j) for i in range(1, d + 1) for j in range(i, d + 1)]
            found = None
            for cand in cands:
                ok = True
                for gamma, tt in draws:
                    x = (tt @ tt.T)[m - 1, l - 1]
                    if cand is None:
                        target = 0.0
                    elif cand == "ds":
                        target = 1.0
                    else:
                        target = gamma[cand[1] - 1, cand[2] - 1]
                    ok &= abs(x - target) < 1e-9
                if ok:
                    found = cand
                    break
            else:
                raise NumericError(f"entry ({m}, {l}) of theta_tilde theta_tilde^T matches no pairing")
            table[(m, l)] = found
    return table


def girsanov_drift_bruteforce(m: int, d: int, seed: int = 0) -> dict:
    """Independent accumulator: enumerates every coordinate ``l = 1..d_tilde`` and
    takes the pairing from a numeric ``theta_tilde theta_tilde^T``."""
    maps = IndexMaps.build(d)
    pairing = _identify_pairings(d, seed)
    terms: Counter = Counter()
    for l in range(1, d_tilde(d) + 1):
        measure = pairing[(m, l)]
        if measure is None:
            continue
        kind, idx = maps.classify(l)
        for sym, mult in _lambda_symbols(kind, idx, d).items():
            terms[(measure, sym)] += mult
    return _collect(terms)


def render_symbolic(drift: dict) -> dict:
    """String keys for JSON output: ``<B>^{12}``, ``d^{12,1}``, ``b^1``."""
    def meas(key):
        return key if key == "ds" else f"<B>^{{{key[1]}{key[2]}}}"

    def sym(key):
        return f"b^{key[1]}" if key[0] == "b" else f"d^{{{key[1]}{key[2]},{key[3]}}}"

    return {meas(k): {sym(s): v for s, v in inner.items()} for k, inner in drift.items()}


def verify_drift_identity(d: int) -> Report:
    mismatches = []
    for m in range(1, d + 1):
        main = girsanov_drift(m, d)
        brute = girsanov_drift_bruteforce(m, d)
        target = expected_drift(m, d)
        if main != target or brute != target:
            mismatches.append({"m": m, "main": render_symbolic(main), "brute": render_symbolic(brute)})
    return Report("drift_identity", not mismatches, {"dim": d, "coordinates": d},
                  {"mismatches": mismatches} if mismatches else None)


def index_tables(d: int) -> dict:
    maps = IndexMaps.build(d)
    return {
        "h": {f"({i},{j})": h for (i, j), h in maps.pair_to_h.items()},
        "hat": {f"({i},{k})": l for (i, k), l in maps.hat_map.items()},
        "bar": {f"({i},{j},{k})": l for (i, j, k), l in maps.bar_map.items()},
    }


def verify_bijections(d: int) -> Report:
    maps = IndexMaps.build(d)
    ok = all(maps.h_to_pair[h] == p for p, h in maps.pair_to_h.items())
    ok &= all(maps.hat_inverse[l] == p for p, l in maps.hat_map.items())
    ok &= all(maps.bar_inverse[l] == p for p, l in maps.bar_map.items())
    ok &= sorted(maps.pair_to_h.values()) == list(range(1, d * (d - 1) // 2 + 1))
    covered = list(range(1, 2 * d + 1)) + sorted(maps.hat_map.values()) + sorted(maps.bar_map.values())
    partition = sorted(covered) == list(range(1, d_tilde(d) + 1)) and len(set(covered)) == len(covered)
    return Report("bijections", bool(ok and partition), {"dim": d, "d_tilde": d_tilde(d)})
