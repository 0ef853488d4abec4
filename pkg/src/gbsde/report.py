"""Pass/fail reports returned by the verification operations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np


def to_plain(value):
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


@dataclass
class Report:
    name: str
    passed: bool
    metrics: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] | None = None
    children: list["Report"] = field(default_factory=list)

    def __bool__(self):
        return bool(self.passed)

    def to_dict(self) -> dict:
        out = {"name": self.name, "passed": bool(self.passed), "metrics": to_plain(self.metrics)}
        if self.witness is not None:
            out["witness"] = to_plain(self.witness)
        if self.children:
            out["checks"] = [c.to_dict() for c in self.children]
        return out

    @classmethod
    def combine(cls, name: str, children: list["Report"], **metrics) -> "Report":
        return cls(name, all(c.passed for c in children), metrics, children=list(children))
