"""Data-quality violations surfaced during ingestion and funnel reconciliation.

Violations are values, not exceptions: bad records and inconsistent funnel
states are facts about the input that the caller decides how to act on.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class ViolationKind(str, Enum):
    TREATED_WITHOUT_TRIGGERED = "treated-without-triggered"
    TREATED_WITHOUT_ACTIVATED = "treated-without-activated"
    ACTIVATED_WITHOUT_ALLOCATED = "activated-without-allocated"
    TRIGGERED_WITHOUT_ALLOCATED = "triggered-without-allocated"
    ASSIGNMENT_CONFLICT = "assignment-conflict"
    MALFORMED_RECORD = "malformed-record"
    DUPLICATE_OUTCOME = "duplicate-outcome"
    # Only emitted in strict-outcomes mode, for units whose outcome would
    # otherwise be imputed as zero.
    MISSING_OUTCOME = "missing-outcome"


@dataclass(frozen=True)
class Violation:
    """One located anomaly in the input data.

    ``unit_id`` is set for per-unit problems, ``line_number`` (1-based) for
    per-record parse problems; at least one of the two is always present so
    the offending input can be found.
    """

    kind: ViolationKind
    message: str
    unit_id: str | None = None
    line_number: int | None = None

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "unit_id": self.unit_id,
            "line_number": self.line_number,
            "message": self.message,
        }
