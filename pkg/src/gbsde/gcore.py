"""G-functions represented by volatility sets, and checks on generator assumptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, InputError
from .expr import Expr, generator_env, generator_variables
from .report import Report

ASSUMPTION_TOL = 1e-9


@dataclass(frozen=True)
class VolatilitySet:
    """Extreme points of the bounded convex closed set of invertible matrices.

    ``G(A) = 1/2 max_theta tr[theta theta^T A]`` is evaluated over ``extremes``;
    the objective is linear in ``theta theta^T`` so nothing is lost by dropping
    interior points for a single maximisation.
    """

    extremes: np.ndarray
    sigma_lower: float | None = None

    def __post_init__(self):
        ext = np.asarray(self.extremes, dtype=float)
        if ext.ndim == 1:
            ext = ext.reshape(-1, 1, 1)
        elif ext.ndim == 2 and ext.shape[0] != ext.shape[1]:
            raise InputError(f"extremes must be a list of square matrices, got shape {ext.shape}")
        elif ext.ndim == 2:
            ext = ext[None]
        if ext.ndim != 3 or ext.shape[1] != ext.shape[2] or ext.shape[0] == 0:
            raise InputError(f"extremes must be a nonempty list of square matrices, got shape {ext.shape}")
        for k, th in enumerate(ext):
            scale = max(np.max(np.abs(th)), 1e-300)
            if abs(np.linalg.det(th / scale)) <= 1e-12:
                raise InputError(f"extreme {k} is singular (condition {np.linalg.cond(th):.3g})")
        ext.setflags(write=False)
        object.__setattr__(self, "extremes", ext)
        certified = self.certified_sigma_lower
        if self.sigma_lower is None:
            object.__setattr__(self, "sigma_lower", certified)
        else:
            sl = float(self.sigma_lower)
            if sl <= 0:
                raise InputError("sigma_lower must be positive")
            if sl > certified * (1 + 1e-12):
                raise InputError(
                    f"declared sigma_lower={sl} exceeds the certified value {certified} "
                    "(smallest eigenvalue of theta theta^T, square-rooted)")
            object.__setattr__(self, "sigma_lower", sl)

    @classmethod
    def interval(cls, sigma: float, upper: float = 1.0) -> "VolatilitySet":
        """One-dimensional set ``[sigma, upper]``."""
        return cls(np.array([[[sigma]], [[upper]]]))

    @property
    def dim(self) -> int:
        return self.extremes.shape[1]

    @property
    def count(self) -> int:
        return self.extremes.shape[0]

    @property
    def covariances(self) -> np.ndarray:
        """theta theta^T for every extreme, shape (E, d, d)."""
        return np.einsum("eij,ekj->eik", self.extremes, self.extremes)

    @property
    def certified_sigma_lower(self) -> float:
        return float(np.sqrt(min(np.linalg.eigvalsh(c)[0] for c in self.covariances)))

    def with_midpoints(self) -> "VolatilitySet":
        """Add the midpoint of every pair of extremes (refines multi-step maximisation)."""
        ext = list(self.extremes)
        for i in range(len(self.extremes)):
            for j in range(i + 1, len(self.extremes)):
                mid = 0.5 * (self.extremes[i] + self.extremes[j])
                scale = max(np.max(np.abs(mid)), 1e-300)
                if abs(np.linalg.det(mid / scale)) > 1e-12:
                    ext.append(mid)
        return VolatilitySet(np.array(ext))

    def to_dict(self) -> dict:
        return {"dim": self.dim, "extremes": self.extremes.tolist(), "sigma_lower": self.sigma_lower}


@dataclass(frozen=True)
class SigmaBars:
    entry_bounds: np.ndarray
    total: float


def _check_dims(A: np.ndarray, theta: VolatilitySet) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 0 and theta.dim == 1:
        A = A.reshape(1, 1)
    if A.shape[-2:] != (theta.dim, theta.dim):
        raise InputError(f"matrix of shape {A.shape[-2:]} does not match dimension {theta.dim}")
    return A


def eval_G(A, theta: VolatilitySet) -> float | np.ndarray:
    """``1/2 max over extremes of tr[theta theta^T A]``; batches over leading axes of ``A``."""
    A = _check_dims(A, theta)
    vals = np.einsum("eij,...ij->...e", theta.covariances, A)
    out = 0.5 * vals.max(axis=-1)
    return float(out) if out.ndim == 0 else out


def two_G_minus_J(theta: VolatilitySet) -> float:
    """``2 G(-J_d)`` with ``J_d`` the all-ones matrix; always negative."""
    return 2.0 * eval_G(-np.ones((theta.dim, theta.dim)), theta)


def sigma_bounds(theta: VolatilitySet) -> SigmaBars:
    bounds = np.abs(theta.covariances).max(axis=0)
    return SigmaBars(bounds, float(bounds.sum()))


def phi_of_q(q: float) -> float:
    """BMO-norm threshold ``(1 + q^-2 ln((2q-1)/(2(q-1))))^(1/2) - 1``."""
    q = float(q)
    if not q > 1:
        raise DomainError(f"phi_of_q needs q > 1, got {q}")
    # log1p keeps precision for huge q where the ratio is 1 + 1/(2(q-1))
    inner = np.log1p(1.0 / (2.0 * (q - 1.0))) / (q * q)
    return float(np.expm1(0.5 * np.log1p(inner)))


def _random_psd(rng, d, n):
    m = rng.normal(size=(n, d, d))
    return np.einsum("nij,nkj->nik", m, m)


def _random_sym(rng, d, n):
    m = rng.normal(size=(n, d, d))
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def check_nondegenerate(theta: VolatilitySet, samples: int = 1000, seed: int = 0) -> Report:
    """Certify ``G(A) - G(B) >= 1/2 sigma^2 tr[A - B]`` for ``A >= B``.

    The certificate is the smallest eigenvalue of ``theta theta^T`` over the
    extremes; the inequality itself is then spot-checked on random pairs.
    """
    eig_min = min(np.linalg.eigvalsh(c)[0] for c in theta.covariances)
    if eig_min <= 0:
        return Report("nondegenerate", False, {"sigma_lower": 0.0, "min_eigenvalue": float(eig_min)})
    sigma = float(np.sqrt(eig_min))
    rng = np.random.default_rng(seed)
    B = _random_sym(rng, theta.dim, samples)
    A = B + _random_psd(rng, theta.dim, samples)
    lhs = eval_G(A, theta) - eval_G(B, theta)
    rhs = 0.5 * sigma ** 2 * np.trace(A - B, axis1=-2, axis2=-1)
    slack = lhs - rhs
    worst = int(np.argmin(slack))
    passed = bool(slack[worst] >= -ASSUMPTION_TOL)
    witness = None if passed else {"A": A[worst], "B": B[worst], "slack": slack[worst]}
    return Report("nondegenerate", passed,
                  {"sigma_lower": sigma, "min_eigenvalue": float(eig_min),
                   "samples": samples, "worst_slack": float(slack[worst])}, witness)


GenFn = Callable[..., np.ndarray]


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator pair ``(f, g)`` with its declared constants.

    ``f(t, y, z, B, Q)`` returns an array shaped like ``y``; ``g`` returns the
    trailing ``(d, d)`` block of ``g^{ij}`` values.  ``z`` and ``B`` carry a
    trailing axis of length ``d`` and ``Q`` a trailing ``(d, d)``.
    """

    dim: int
    f: GenFn
    g: GenFn
    M0: float = 0.0
    Ly: float = 1.0
    Lz: float = 1.0
    mu: float | None = None
    source: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_expressions(cls, dim: int, f: str, g: Sequence[Sequence[str]] | str | None = None,
                         **constants) -> "GeneratorSpec":
        names = generator_variables(dim)
        f_expr = Expr(f, names)
        if g is None:
            g = "0"
        if isinstance(g, str):
            g = [[g if i == j else "0" for j in range(dim)] for i in range(dim)]
        if len(g) != dim or any(len(row) != dim for row in g):
            raise InputError(f"g must be a {dim}x{dim} array of expressions")
        # symmetry g^{ij} = g^{ji} is checked by sampling, not textually
        g_expr = [[Expr(g[i][j], names) for j in range(dim)] for i in range(dim)]

        def f_fn(t, y, z, B, Q):
            y = np.asarray(y, dtype=float)
            return np.broadcast_to(f_expr(**generator_env(t, y, z, B, Q)), y.shape).astype(float)

        def g_fn(t, y, z, B, Q):
            y = np.asarray(y, dtype=float)
            env = generator_env(t, y, z, B, Q)
            out = np.empty(y.shape + (dim, dim))
            for i in range(dim):
                for j in range(dim):
                    out[..., i, j] = np.broadcast_to(g_expr[i][j](**env), y.shape)
            return out

        source = {"f": f_expr.source, "g": [[e.source for e in row] for row in g_expr]}
        return cls(dim, f_fn, g_fn, source=source, **constants)

    def evaluate(self, t, y, z, B=None, Q=None):
        """Return ``(f, g)`` at a batch of points; ``B`` and ``Q`` default to zero."""
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        if B is None:
            B = np.zeros(y.shape + (self.dim,))
        if Q is None:
            Q = np.zeros(y.shape + (self.dim, self.dim))
        return self.f(t, y, z, B, Q), self.g(t, y, z, B, Q)

    def to_dict(self) -> dict:
        out = dict(self.source)
        out.update(M0=self.M0, Ly=self.Ly, Lz=self.Lz, mu=self.mu)
        return out


@dataclass(frozen=True)
class SamplePlan:
    """Seeded random sample plan over ``(t, y, y', z, z')``.

    A fraction of the pairs is drawn close together with log-uniform
    separations so that every threshold down to ``min_gap`` sees samples on
    both sides.
    """

    n: int = 10_000
    seed: int = 0
    t_range: tuple[float, float] = (0.0, 1.0)
    y_range: tuple[float, float] = (-2.0, 2.0)
    z_range: tuple[float, float] = (-2.0, 2.0)
    near_fraction: float = 0.5
    min_gap: float = 1e-5

    def draw(self, dim: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        n = self.n
        t = rng.uniform(*self.t_range, size=n)
        y = rng.uniform(*self.y_range, size=n)
        y2 = rng.uniform(*self.y_range, size=n)
        z = rng.uniform(*self.z_range, size=(n, dim))
        z2 = rng.uniform(*self.z_range, size=(n, dim))
        near = rng.random(n) < self.near_fraction
        lo, hi = np.log10(self.min_gap), 0.0
        gap_y = 10 ** rng.uniform(lo, hi, size=n) * rng.choice([-1.0, 1.0], size=n)
        gap_z = 10 ** rng.uniform(lo, hi, size=(n, dim)) * rng.choice([-1.0, 1.0], size=(n, dim))
        y2 = np.where(near, y + gap_y, y2)
        z2 = np.where(near[:, None], z + gap_z, z2)
        return {"t": t, "y": y, "y2": y2, "z": z, "z2": z2}


def _worst(values: np.ndarray, sample: dict, extra: dict | None = None) -> dict:
    k = int(np.argmax(values))
    out = {key: arr[k] for key, arr in sample.items()}
    out["violation"] = float(values[k])
    if extra:
        out.update({key: arr[k] for key, arr in extra.items()})
    return out


def check_condition_HI(gen: GeneratorSpec, theta: VolatilitySet,
                       sampling: SamplePlan | None = None) -> Report:
    """Sampled check of the dissipativity condition with constant ``gen.mu``.

    ``(y-y')(f(y,z)-f(y',z)) + 2G((y-y')(g(y,z)-g(y',z))) <= -mu |y-y'|^2``.
    """
    if gen.mu is None:
        raise ConfigError("dissipativity check needs a declared mu")
    if gen.dim != theta.dim:
        raise InputError("generator and volatility set dimensions differ")
    sampling = sampling or SamplePlan()
    s = sampling.draw(gen.dim)
    f1, g1 = gen.evaluate(s["t"], s["y"], s["z"])
    f2, g2 = gen.evaluate(s["t"], s["y2"], s["z"])
    dy = s["y"] - s["y2"]
    lhs = dy * (f1 - f2) + 2.0 * eval_G(dy[:, None, None] * (g1 - g2), theta)
    excess = lhs + gen.mu * dy ** 2
    passed = bool(np.max(excess) <= ASSUMPTION_TOL)
    witness = None if passed else _worst(excess, s)
    return Report("condition_dissipative", passed,
                  {"mu": gen.mu, "samples": sampling.n, "max_excess": float(np.max(excess))}, witness)


def check_ly_lower_bound(gen: GeneratorSpec, theta: VolatilitySet) -> Report:
    """``Ly >= mu / (1 - 2G(-J_d))``, needed for the linearisation fallback slope."""
    if gen.mu is None:
        return Report("ly_lower_bound", True, {"skipped": "no mu declared"})
    need = gen.mu / (1.0 - two_G_minus_J(theta))
    return Report("ly_lower_bound", bool(gen.Ly >= need - ASSUMPTION_TOL),
                  {"Ly": gen.Ly, "required": need})


def check_generator_symmetry(gen: GeneratorSpec, sampling: SamplePlan | None = None) -> Report:
    sampling = sampling or SamplePlan()
    s = sampling.draw(gen.dim)
    _, g = gen.evaluate(s["t"], s["y"], s["z"])
    gap = float(np.max(np.abs(g - np.swapaxes(g, -1, -2)))) if g.size else 0.0
    return Report("g_symmetric", gap <= ASSUMPTION_TOL, {"max_asymmetry": gap})


def check_lipschitz(gen: GeneratorSpec, sampling: SamplePlan | None = None) -> Report:
    """Spot-check ``|h(y,z)-h(y',z')| <= Ly|y-y'| + Lz(1+|z|+|z'|)|z-z'|`` and ``|h(t,0,0)| <= M0``."""
    sampling = sampling or SamplePlan()
    s = sampling.draw(gen.dim)
    f1, g1 = gen.evaluate(s["t"], s["y"], s["z"])
    f2, g2 = gen.evaluate(s["t"], s["y2"], s["z2"])
    nz, nz2 = np.linalg.norm(s["z"], axis=1), np.linalg.norm(s["z2"], axis=1)
    bound = gen.Ly * np.abs(s["y"] - s["y2"]) + gen.Lz * (1 + nz + nz2) * np.linalg.norm(s["z"] - s["z2"], axis=1)
    diffs = np.concatenate([np.abs(f1 - f2)[:, None], np.abs(g1 - g2).reshape(len(f1), -1)], axis=1)
    excess = diffs.max(axis=1) - bound
    zero = np.zeros_like(s["y"])
    f0, g0 = gen.evaluate(s["t"], zero, np.zeros_like(s["z"]))
    h0 = np.maximum(np.abs(f0), np.abs(g0).reshape(len(f0), -1).max(axis=1))
    children = [
        Report("lipschitz", bool(excess.max() <= ASSUMPTION_TOL), {"max_excess": float(excess.max())},
               None if excess.max() <= ASSUMPTION_TOL else _worst(excess, s)),
        Report("growth_M0", bool(h0.max() <= gen.M0 + ASSUMPTION_TOL),
               {"max_abs_h0": float(h0.max()), "M0": gen.M0}),
    ]
    return Report.combine("generator_constants", children)
