"""Linearization of quadratic generators around a pair of points.

For ``(y, z)`` and ``(y', z')`` the generator difference is written as

    f(y, z) - f(y', z') = a (y - y') + b . (z - z') + m

with ``a`` a truncated difference quotient in ``y``, ``b`` built coordinate by
coordinate along the path ``z = theta_0, theta_1, ..., theta_d = z'`` and ``m``
the residual, which is small (order ``eps``).  The same construction applied
to each ``g^{ij}`` gives ``c^{ij}``, ``d^{ij}`` and ``n^{ij}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, InputError
from .gcore import ASSUMPTION_TOL, GeneratorSpec, SamplePlan, VolatilitySet, eval_G, two_G_minus_J
from .report import Report

RECONSTRUCTION_TOL = 1e-10


def l_eps(x, x2, eps: float):
    """``1`` when ``|x - x'| >= eps``, else ``|x - x'| / eps``."""
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    gap = np.abs(np.asarray(x, dtype=float) - np.asarray(x2, dtype=float))
    out = np.where(gap >= eps, 1.0, gap / eps)
    return float(out) if out.ndim == 0 else out


def intermediate_points(z, z2) -> np.ndarray:
    """``theta_k = (z'_1..z'_k, z_{k+1}..z_d)`` for k = 0..d, shape (..., d+1, d)."""
    z = np.asarray(z, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    d = z.shape[-1]
    take_new = np.arange(d)[None, :] < np.arange(d + 1)[:, None]      # (d+1, d)
    return np.where(take_new, z2[..., None, :], z[..., None, :])


def fallback_slope(gen: GeneratorSpec, theta: VolatilitySet) -> float:
    """``mu / (1 - 2G(-J_d))``; zero when no ``mu`` is declared."""
    if gen.mu is None:
        return 0.0
    return gen.mu / (1.0 - two_G_minus_J(theta))


@dataclass(frozen=True)
class LinearizationOutput:
    """Coefficients at a batch of points; ``d_eps[..., i, j, k]`` is ``d^{ij,k}``."""

    a_eps: np.ndarray
    b_eps: np.ndarray
    c_eps: np.ndarray
    d_eps: np.ndarray
    m_eps: np.ndarray
    n_eps: np.ndarray
    eps: float
    f_diff: np.ndarray
    g_diff: np.ndarray

    def reconstruction_error(self, dy, dz) -> tuple[np.ndarray, np.ndarray]:
        """Relative error of both identities; zero up to rounding by construction."""
        f_rec = self.a_eps * dy + np.sum(self.b_eps * dz, axis=-1) + self.m_eps
        g_rec = (self.c_eps * dy[..., None, None] + np.einsum("...ijk,...k->...ij", self.d_eps, dz)
                 + self.n_eps)
        f_err = np.abs(self.f_diff - f_rec) / np.maximum(1.0, np.abs(self.f_diff))
        g_err = np.abs(self.g_diff - g_rec) / np.maximum(1.0, np.abs(self.g_diff))
        return f_err, g_err


def _quotient(num, den, weight):
    # weight * num / den with the 0/0 case (weight 0) sent to 0
    safe = np.where(den != 0, den, 1.0)
    return np.where(weight > 0, weight * num / safe, 0.0)


def linearize_pair(gen: GeneratorSpec, t, y, y2, z, z2, eps: float,
                   theta: VolatilitySet | None = None, slope: float | None = None) -> LinearizationOutput:
    """Coefficients for a batch of pairs ``(y, z)``, ``(y', z')``.

    The fallback slope in ``y`` is ``mu / (1 - 2G(-J_d))`` from ``theta``,
    or ``slope`` if given directly.
    """
    if not eps > 0:
        raise DomainError(f"eps must be positive, got {eps}")
    if slope is None:
        if theta is None and gen.mu is not None:
            raise InputError("the fallback slope needs the volatility set")
        slope = 0.0 if theta is None else fallback_slope(gen, theta)
    y = np.asarray(y, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    z = np.asarray(z, dtype=float).reshape(y.shape + (gen.dim,))
    z2 = np.asarray(z2, dtype=float).reshape(y.shape + (gen.dim,))
    t = np.broadcast_to(np.asarray(t, dtype=float), y.shape)
    d = gen.dim

    f_yz, g_yz = gen.evaluate(t, y, z)
    f_y2z, g_y2z = gen.evaluate(t, y2, z)
    dy = y - y2
    ly = l_eps(y, y2, eps)
    ly = np.asarray(ly)
    a = _quotient(f_yz - f_y2z, dy, ly) - slope * (1.0 - ly)
    c = _quotient(g_yz - g_y2z, dy[..., None, None], ly[..., None, None]) - slope * (1.0 - ly)[..., None, None]

    pts = intermediate_points(z, z2)                                  # (..., d+1, d)
    y2b = np.broadcast_to(y2[..., None], pts.shape[:-1])
    tb = np.broadcast_to(t[..., None], pts.shape[:-1])
    f_path, g_path = gen.evaluate(tb, y2b, pts)                       # (..., d+1), (..., d+1, d, d)
    dz = z - z2
    lz = np.asarray(l_eps(z, z2, eps))                                # (..., d)
    f_steps = f_path[..., :-1] - f_path[..., 1:]                      # (..., d)
    b = _quotient(f_steps, dz, lz) + gen.Lz * (1.0 - lz)
    g_steps = np.moveaxis(g_path[..., :-1, :, :] - g_path[..., 1:, :, :], -3, -1)  # (..., d, d, k)
    dcoef = _quotient(g_steps, dz[..., None, None, :], lz[..., None, None, :]) \
        + gen.Lz * (1.0 - lz)[..., None, None, :]

    f_z2 = f_path[..., -1]
    g_z2 = g_path[..., -1, :, :]
    f_diff = f_yz - f_z2
    g_diff = g_yz - g_z2
    m = f_diff - a * dy - np.sum(b * dz, axis=-1)
    n = g_diff - c * dy[..., None, None] - np.einsum("...ijk,...k->...ij", dcoef, dz)
    return LinearizationOutput(a, b, c, dcoef, m, n, float(eps), f_diff, g_diff)


def _worst_sample(excess: np.ndarray, sample: dict) -> dict:
    k = int(np.argmax(excess))
    out = {key: np.asarray(v)[k] for key, v in sample.items()}
    out["excess"] = float(excess[k])
    return out


def _bound_report(name: str, excess: np.ndarray, sample: dict, **metrics) -> Report:
    worst = float(excess.max())
    passed = worst <= ASSUMPTION_TOL
    metrics["max_excess"] = worst
    return Report(name, bool(passed), metrics, None if passed else _worst_sample(excess, sample))


def verify_linearization(gen: GeneratorSpec, theta: VolatilitySet, samples: SamplePlan | int = 100_000,
                         eps: float = 1e-2) -> Report:
    """Reconstruction, coefficient bounds and (when ``mu`` is declared) dissipativity."""
    plan = SamplePlan(n=samples) if isinstance(samples, int) else samples
    s = plan.draw(gen.dim)
    d = gen.dim
    out = linearize_pair(gen, s["t"], s["y"], s["y2"], s["z"], s["z2"], eps, theta)
    dy = s["y"] - s["y2"]
    dz = s["z"] - s["z2"]
    f_err, g_err = out.reconstruction_error(dy, dz)
    rec = np.maximum(f_err, g_err.reshape(len(f_err), -1).max(axis=1, initial=0.0))
    growth = 1.0 + np.linalg.norm(s["z"], axis=1) + np.linalg.norm(s["z2"], axis=1)
    ac = np.maximum(np.abs(out.a_eps), np.abs(out.c_eps).reshape(len(dy), -1).max(axis=1))
    bd = np.maximum(np.linalg.norm(out.b_eps, axis=-1),
                    np.linalg.norm(out.d_eps, axis=-1).reshape(len(dy), -1).max(axis=1))
    mn = np.maximum(np.abs(out.m_eps), np.abs(out.n_eps).reshape(len(dy), -1).max(axis=1))
    children = [
        _bound_report("reconstruction", rec - RECONSTRUCTION_TOL, s, max_relative_error=float(rec.max())),
        _bound_report("bound_a_c", ac - gen.Ly, s, Ly=gen.Ly, max_abs=float(ac.max())),
        _bound_report("bound_b_d", bd - 2 * d * gen.Lz * growth, s, max_ratio=float((bd / growth).max())),
        _bound_report("bound_m_n", mn - (2 * gen.Ly * eps + 4 * d * gen.Lz * eps * growth), s,
                      max_abs=float(mn.max())),
    ]
    if gen.mu is not None:
        diss = out.a_eps + 2.0 * eval_G(out.c_eps, theta) + gen.mu
        children.append(_bound_report("dissipativity", diss, s, mu=gen.mu, max_value=float(diss.max() - gen.mu)))
    return Report.combine("linearization", children, samples=plan.n, eps=eps, seed=plan.seed)


def residual_scaling(gen: GeneratorSpec, theta: VolatilitySet, plan: SamplePlan,
                     eps_values=(1e-1, 1e-2, 1e-3)) -> Report:
    """Max sampled ``|m^eps|`` per ``eps`` and its ratio to linear scaling.

    A ratio ``(max_k / max_{k+1}) / (eps_k / eps_{k+1})`` within ``[0.5, 2]``
    means the residual shrinks linearly in ``eps``.
    """
    s = plan.draw(gen.dim)
    maxima = []
    for eps in eps_values:
        out = linearize_pair(gen, s["t"], s["y"], s["y2"], s["z"], s["z2"], eps, theta)
        maxima.append(float(np.abs(out.m_eps).max()))
    ratios = []
    for k in range(len(eps_values) - 1):
        if maxima[k + 1] == 0.0:
            ratios.append(1.0 if maxima[k] == 0.0 else float("inf"))
        else:
            ratios.append((maxima[k] / maxima[k + 1]) / (eps_values[k] / eps_values[k + 1]))
    passed = all(0.5 <= r <= 2.0 for r in ratios)
    return Report("residual_scaling", passed, {"eps": list(eps_values), "max_abs_m": maxima,
                                               "linear_ratio": ratios})
