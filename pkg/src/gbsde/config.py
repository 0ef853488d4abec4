"""Experiment configuration files (TOML, ``schema = 1``).

Sections::

    schema = 1

    [volatility]          # required
    dim = 1
    extremes = [[[0.5]], [[1.0]]]   # list of d x d matrices; scalars allowed when d = 1
    sigma_lower = 0.5               # optional, must not exceed the certified value
    midpoints = false               # optional, add pairwise midpoints of the extremes

    [generator]           # f and g as expression strings plus constants
    f = "-y + 1"
    g = [["0"]]                     # or a single string placed on the diagonal
    M0 = 1.0
    Ly = 1.0
    Lz = 1.0
    mu = 1.0

    [terminal]
    expr = "0"

    [generator2] / [terminal2]      # second equation for ``compare``

    [linear]              # linear equation, coefficients as numbers or expressions
    a = -1.0
    b = [0.0]
    c = [[0.0]]
    d = [[[0.0]]]                   # d[i][j][k] = d^{ij,k}
    m = 1.0
    n = [[0.0]]
    xi = "0"
    rho = 1.0
    mu = 1.0

    [run]
    horizon = 2.0
    steps = 64
    t0 = 0.0
    tol = 0.01
    dt = 0.125
    horizons = [2, 3, 4, 5]
    node_budget = 2000000
    seed = 0
    samples = 100000
    eps = 0.01
    recombine = true
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, GbsdeError, ParseError
from .extspace import LinearCoefficients
from .gcore import GeneratorSpec, SamplePlan, VolatilitySet
from .lattice import PathFunctional, TimeGrid

SCHEMA_VERSION = 1
KNOWN_SECTIONS = {"volatility", "generator", "generator2", "terminal", "terminal2", "linear", "run"}

RUN_DEFAULTS = {
    "horizon": 1.0,
    "steps": 16,
    "t0": 0.0,
    "tol": 1e-2,
    "dt": None,
    "horizons": None,
    "steps_per_horizon": None,
    "node_budget": None,
    "seed": 0,
    "samples": 10_000,
    "eps": 1e-2,
    "recombine": True,
}


@dataclass
class ExperimentConfig:
    data: dict
    digest: str
    source: str = "<memory>"
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, source: str = "<memory>") -> "ExperimentConfig":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{source}: {exc}") from exc
        cfg = cls(data, hashlib.sha256(text.encode()).hexdigest(), source)
        cfg._validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ParseError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text, str(path))

    def _validate(self):
        schema = self.data.get("schema")
        if schema != SCHEMA_VERSION:
            raise ParseError(f"{self.source}: expected 'schema = {SCHEMA_VERSION}', got {schema!r}")
        unknown = set(self.data) - KNOWN_SECTIONS - {"schema"}
        if unknown:
            raise ParseError(f"{self.source}: unknown section(s) {sorted(unknown)}")
        if "volatility" not in self.data:
            raise ParseError(f"{self.source}: missing required section [volatility]")
        unknown_run = set(self.data.get("run", {})) - set(RUN_DEFAULTS)
        if unknown_run:
            raise ParseError(f"{self.source}: unknown key(s) {sorted(unknown_run)} in [run]")

    def has(self, section: str) -> bool:
        return section in self.data

    def section(self, name: str) -> dict:
        if name not in self.data:
            raise ParseError(f"{self.source}: missing required section [{name}]")
        return self.data[name]

    def _get(self, section: str, key: str, required: bool = True, default=None):
        sec = self.section(section)
        if key not in sec:
            if required:
                raise ParseError(f"{self.source}: missing key '{key}' in [{section}]")
            return default
        return sec[key]

    def run(self, key: str):
        if key in self.overrides and self.overrides[key] is not None:
            return self.overrides[key]
        return self.data.get("run", {}).get(key, RUN_DEFAULTS[key])

    # -- builders ---------------------------------------------------------

    @property
    def dim(self) -> int:
        dim = self._get("volatility", "dim")
        if not isinstance(dim, int) or dim < 1:
            raise ConfigError(f"[volatility] dim must be a positive integer, got {dim!r}")
        return dim

    def volatility(self) -> VolatilitySet:
        d = self.dim
        raw = self._get("volatility", "extremes")
        try:
            arr = np.asarray(raw, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[volatility] extremes must be numeric matrices: {exc}") from exc
        if d == 1 and arr.ndim == 1:
            arr = arr.reshape(-1, 1, 1)
        if arr.ndim != 3 or arr.shape[1:] != (d, d):
            raise ConfigError(f"[volatility] extremes must be a list of {d}x{d} matrices, got shape {arr.shape}")
        try:
            theta = VolatilitySet(arr, self._get("volatility", "sigma_lower", False))
        except GbsdeError as exc:
            raise ConfigError(f"[volatility] {exc}") from exc
        if self._get("volatility", "midpoints", False, False):
            theta = theta.with_midpoints()
        return theta

    def generator(self, name: str = "generator") -> GeneratorSpec:
        sec = self.section(name)
        f = self._get(name, "f")
        consts = {}
        for key in ("M0", "Ly", "Lz", "mu"):
            if key in sec:
                value = float(sec[key])
                if value < 0 or (key == "mu" and value <= 0):
                    raise ConfigError(f"[{name}] {key} must be positive, got {value}")
                consts[key] = value
        return GeneratorSpec.from_expressions(self.dim, str(f), sec.get("g"), **consts)

    def terminal(self, name: str = "terminal") -> PathFunctional:
        return PathFunctional.from_expression(str(self._get(name, "expr")), self.dim)

    def linear(self) -> dict:
        sec = self.section("linear")
        d = self.dim
        coeffs = LinearCoefficients.create(
            d, a=sec.get("a", 0.0), b=sec.get("b"), c=sec.get("c"), dcoef=sec.get("d"),
            m=sec.get("m", 0.0), n=sec.get("n"))
        mu = sec.get("mu")
        if mu is not None and mu <= 0:
            raise ConfigError(f"[linear] mu must be positive, got {mu}")
        return {"coeffs": coeffs, "terminal": PathFunctional.from_expression(str(sec.get("xi", "0")), d),
                "mu": mu, "rho": sec.get("rho")}

    def grid(self, steps: int | None = None) -> TimeGrid:
        steps = self.run("steps") if steps is None else steps
        try:
            return TimeGrid(float(self.run("t0")), float(self.run("horizon")), int(steps))
        except GbsdeError as exc:
            raise ConfigError(f"[run] {exc}") from exc

    def sample_plan(self) -> SamplePlan:
        return SamplePlan(n=int(self.run("samples")), seed=int(self.run("seed")))
