"""Uniform pass/fail report returned by every assumption check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

PASS = "pass"
FAIL = "fail"
NOT_APPLICABLE = "not-applicable"


@dataclass
class AuditReport:
    """Outcome of one audit.

    ``passed`` is ``None`` when the check does not apply. ``witness`` holds the
    first counterexample found, ``details`` any measured quantities, and
    ``justification`` a short reason for static passes or limitations.
    """

    name: str
    passed: bool | None
    details: dict[str, Any] = field(default_factory=dict)
    witness: Any = None
    justification: str = ""
    clauses: dict[str, "AuditReport"] = field(default_factory=dict)

    @property
    def status(self) -> str:
        if self.passed is None:
            return NOT_APPLICABLE
        return PASS if self.passed else FAIL

    def __bool__(self):
        return bool(self.passed)

    def to_dict(self) -> dict:
        out = {"name": self.name, "status": self.status}
        if self.details:
            out["details"] = _plain(self.details)
        if self.witness is not None:
            out["witness"] = _plain(self.witness)
        if self.justification:
            out["justification"] = self.justification
        if self.clauses:
            out["clauses"] = {k: v.to_dict() for k, v in self.clauses.items()}
        return out


def not_applicable(name: str, why: str) -> AuditReport:
    return AuditReport(name, None, justification=why)


def _plain(obj):
    """Convert numpy containers/scalars to JSON-friendly builtins."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if v != v or v in (float("inf"), float("-inf")):
            return repr(v)
        return v
    return obj
