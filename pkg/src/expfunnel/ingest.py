"""Parsing and validation of newline-delimited event logs and outcome files.

One JSON object per line; malformed lines are collected as located
violations and skipped, so no input can crash the pipeline before the
statistics run. A fixed-header CSV reader is provided for outcomes only.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Iterator
from pathlib import Path

from .funnel import (
    DEFAULT_GROUP,
    Assignment,
    FunnelEvent,
    FunnelSnapshot,
    OutcomeRecord,
    Stage,
    check_stage_consistency,
)
from .violations import Violation, ViolationKind

OUTCOME_CSV_HEADER = ("unit_id", "outcome", "played")

_STAGE_VALUES = {s.value: s for s in Stage}
_ASSIGNMENT_VALUES = {a.value: a for a in Assignment}


def _iter_text_lines(stream: Iterable[bytes] | Iterable[str]) -> Iterator[tuple[int, str | None]]:
    """Yield (1-based line number, decoded line or None on a bad byte sequence)."""
    for number, raw in enumerate(stream, start=1):
        if isinstance(raw, bytes):
            try:
                yield number, raw.decode("utf-8")
            except UnicodeDecodeError:
                yield number, None
        else:
            yield number, raw


def _malformed(line_number: int, message: str) -> Violation:
    return Violation(
        kind=ViolationKind.MALFORMED_RECORD,
        line_number=line_number,
        message=message,
    )


def _parse_json_line(line: str, number: int) -> tuple[dict | None, Violation | None]:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        return None, _malformed(number, f"invalid JSON: {exc.msg}")
    if not isinstance(obj, dict):
        return None, _malformed(number, "record is not a JSON object")
    return obj, None


def _require_unit_id(obj: dict, number: int) -> tuple[str | None, Violation | None]:
    unit_id = obj.get("unit_id")
    if not isinstance(unit_id, str) or not unit_id:
        return None, _malformed(number, "missing or empty 'unit_id'")
    return unit_id, None


def parse_event_log(
    stream: Iterable[bytes] | Iterable[str],
) -> tuple[list[FunnelEvent], list[Violation]]:
    """Parse newline-delimited funnel events.

    Every well-formed line yields exactly one event; malformed lines become
    MalformedRecord violations carrying the line number. Unknown fields are
    ignored for forward compatibility; blank lines are skipped. Timestamps
    must be integers (reconciliation needs a total order) and stages past
    targeted must carry an assignment.
    """
    events: list[FunnelEvent] = []
    violations: list[Violation] = []

    for number, line in _iter_text_lines(stream):
        if line is None:
            violations.append(_malformed(number, "line is not valid UTF-8"))
            continue
        if not line.strip():
            continue
        obj, bad = _parse_json_line(line, number)
        if bad:
            violations.append(bad)
            continue

        unit_id, bad = _require_unit_id(obj, number)
        if bad:
            violations.append(bad)
            continue

        stage = _STAGE_VALUES.get(obj.get("stage"))
        if stage is None:
            violations.append(_malformed(number, f"unknown stage {obj.get('stage')!r}"))
            continue

        ts = obj.get("ts")
        if not isinstance(ts, int) or isinstance(ts, bool):
            violations.append(_malformed(number, "missing or non-integer 'ts'"))
            continue

        raw_assignment = obj.get("assignment")
        assignment = None
        if raw_assignment is not None:
            assignment = _ASSIGNMENT_VALUES.get(raw_assignment)
            if assignment is None:
                violations.append(_malformed(number, f"unknown assignment {raw_assignment!r}"))
                continue
        if stage is not Stage.TARGETED and assignment is None:
            violations.append(
                _malformed(number, f"stage {stage.value!r} requires an 'assignment'")
            )
            continue

        group = obj.get("group", DEFAULT_GROUP)
        if not isinstance(group, str) or not group:
            violations.append(_malformed(number, "'group' must be a non-empty string"))
            continue

        events.append(
            FunnelEvent(
                unit_id=unit_id,
                stage=stage,
                assignment=assignment,
                group=group,
                timestamp=ts,
            )
        )

    return events, violations


def parse_outcomes(
    stream: Iterable[bytes] | Iterable[str],
) -> tuple[list[OutcomeRecord], list[Violation]]:
    """Parse newline-delimited outcome records; duplicates keep the first record."""
    records: list[OutcomeRecord] = []
    violations: list[Violation] = []
    seen: set[str] = set()

    for number, line in _iter_text_lines(stream):
        if line is None:
            violations.append(_malformed(number, "line is not valid UTF-8"))
            continue
        if not line.strip():
            continue
        obj, bad = _parse_json_line(line, number)
        if bad:
            violations.append(bad)
            continue

        unit_id, bad = _require_unit_id(obj, number)
        if bad:
            violations.append(bad)
            continue

        outcome = obj.get("outcome")
        if isinstance(outcome, bool) or not isinstance(outcome, (int, float)):
            violations.append(_malformed(number, "missing or non-numeric 'outcome'"))
            continue
        if not math.isfinite(outcome):
            violations.append(_malformed(number, "'outcome' must be finite"))
            continue

        played = obj.get("played", False)
        if not isinstance(played, bool):
            violations.append(_malformed(number, "'played' must be a boolean"))
            continue

        if unit_id in seen:
            violations.append(
                Violation(
                    kind=ViolationKind.DUPLICATE_OUTCOME,
                    unit_id=unit_id,
                    line_number=number,
                    message=f"duplicate outcome for unit {unit_id!r}; kept the first",
                )
            )
            continue
        seen.add(unit_id)
        records.append(OutcomeRecord(unit_id=unit_id, outcome=float(outcome), played=played))

    return records, violations


def parse_outcomes_csv(
    stream: Iterable[bytes] | Iterable[str],
) -> tuple[list[OutcomeRecord], list[Violation]]:
    """Parse outcomes from CSV with the fixed header ``unit_id,outcome,played``."""
    records: list[OutcomeRecord] = []
    violations: list[Violation] = []
    seen: set[str] = set()

    lines: list[str] = []
    for number, line in _iter_text_lines(stream):
        if line is None:
            violations.append(_malformed(number, "line is not valid UTF-8"))
            lines.append("")
            continue
        lines.append(line)

    reader = csv.reader(lines)
    header_checked = False
    for number, row in enumerate(reader, start=1):
        if not row:
            continue
        if not header_checked:
            header_checked = True
            if tuple(field.strip() for field in row) != OUTCOME_CSV_HEADER:
                violations.append(
                    _malformed(number, f"expected header {','.join(OUTCOME_CSV_HEADER)!r}")
                )
                return records, violations
            continue
        if len(row) != 3:
            violations.append(_malformed(number, f"expected 3 columns, got {len(row)}"))
            continue
        unit_id, outcome_text, played_text = (field.strip() for field in row)
        if not unit_id:
            violations.append(_malformed(number, "missing or empty 'unit_id'"))
            continue
        try:
            outcome = float(outcome_text)
        except ValueError:
            violations.append(_malformed(number, f"non-numeric 'outcome' {outcome_text!r}"))
            continue
        if not math.isfinite(outcome):
            violations.append(_malformed(number, "'outcome' must be finite"))
            continue
        played_key = played_text.lower()
        if played_key in ("true", "1"):
            played = True
        elif played_key in ("false", "0", ""):
            played = False
        else:
            violations.append(_malformed(number, f"invalid 'played' value {played_text!r}"))
            continue

        if unit_id in seen:
            violations.append(
                Violation(
                    kind=ViolationKind.DUPLICATE_OUTCOME,
                    unit_id=unit_id,
                    line_number=number,
                    message=f"duplicate outcome for unit {unit_id!r}; kept the first",
                )
            )
            continue
        seen.add(unit_id)
        records.append(OutcomeRecord(unit_id=unit_id, outcome=outcome, played=played))

    return records, violations


def validate_funnel(snapshot: FunnelSnapshot) -> list[Violation]:
    """One violation per unit per broken stage-subset rule; empty iff consistent."""
    violations: list[Violation] = []
    for unit in snapshot.units:
        violations.extend(check_stage_consistency(unit.unit_id, unit.reached))
    violations.sort(key=lambda v: (v.unit_id or "", v.kind.value))
    return violations


def format_event_line(event: FunnelEvent) -> str:
    obj: dict = {"unit_id": event.unit_id, "stage": event.stage.value}
    if event.assignment is not None:
        obj["assignment"] = event.assignment.value
    obj["group"] = event.group
    obj["ts"] = event.timestamp
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def format_outcome_line(record: OutcomeRecord) -> str:
    obj = {"unit_id": record.unit_id, "outcome": record.outcome, "played": record.played}
    return json.dumps(obj, separators=(",", ":"), sort_keys=True)


def read_events(path: str | Path) -> tuple[list[FunnelEvent], list[Violation]]:
    with io.open(path, "rb") as handle:
        return parse_event_log(handle)


def read_outcomes(
    path: str | Path, *, format: str | None = None
) -> tuple[list[OutcomeRecord], list[Violation]]:
    """Read outcomes from a file; ``format`` is ``ndjson`` or ``csv`` (inferred from the suffix)."""
    if format is None:
        format = "csv" if Path(path).suffix.lower() == ".csv" else "ndjson"
    if format not in ("ndjson", "csv"):
        raise ValueError(f"unknown outcomes format {format!r}")
    with io.open(path, "rb") as handle:
        if format == "csv":
            return parse_outcomes_csv(handle)
        return parse_outcomes(handle)
