"""Five-stage experiment funnel: domain types, event reconciliation, rates.

The funnel stages are targeted -> allocated -> activated/triggered -> treated.
Activated and triggered are incomparable branches: both require allocation,
and treated requires both. A unit's logged stages are reconciled into a
:class:`UnitState`; stage memberships that lack their prerequisites are
reported as violations and excluded from counts rather than silently
repaired.
"""
from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

from .violations import Violation, ViolationKind


class Assignment(str, Enum):
    """Experiment arm. Exactly two arms; a unit may carry only one."""

    TREATMENT = "treatment"
    CONTROL = "control"


class Stage(str, Enum):
    TARGETED = "targeted"
    ALLOCATED = "allocated"
    ACTIVATED = "activated"
    TRIGGERED = "triggered"
    TREATED = "treated"


# Stages a unit must have reached for membership at the key stage to count.
# TARGETED is deliberately absent as a prerequisite of ALLOCATED: platforms
# often cannot log non-allocated units, so a missing targeted event is not
# an inconsistency.
STAGE_PREREQUISITES: Mapping[Stage, frozenset[Stage]] = {
    Stage.TARGETED: frozenset(),
    Stage.ALLOCATED: frozenset(),
    Stage.ACTIVATED: frozenset({Stage.ALLOCATED}),
    Stage.TRIGGERED: frozenset({Stage.ALLOCATED}),
    Stage.TREATED: frozenset({Stage.TRIGGERED, Stage.ACTIVATED}),
}

_STAGE_ORDER = {s: i for i, s in enumerate(Stage)}

_PREREQUISITE_VIOLATIONS = (
    (Stage.TREATED, Stage.TRIGGERED, ViolationKind.TREATED_WITHOUT_TRIGGERED),
    (Stage.TREATED, Stage.ACTIVATED, ViolationKind.TREATED_WITHOUT_ACTIVATED),
    (Stage.ACTIVATED, Stage.ALLOCATED, ViolationKind.ACTIVATED_WITHOUT_ALLOCATED),
    (Stage.TRIGGERED, Stage.ALLOCATED, ViolationKind.TRIGGERED_WITHOUT_ALLOCATED),
)

DEFAULT_GROUP = "_all"


def stage_precedes(earlier: Stage, later: Stage) -> bool:
    """True when ``earlier`` is a strict funnel ancestor of ``later``.

    TARGETED precedes everything; ACTIVATED and TRIGGERED are incomparable.
    """
    if earlier is later:
        return False
    if earlier is Stage.TARGETED:
        return True
    seen: set[Stage] = set()
    frontier = [later]
    while frontier:
        stage = frontier.pop()
        for req in STAGE_PREREQUISITES[stage]:
            if req is earlier:
                return True
            if req not in seen:
                seen.add(req)
                frontier.append(req)
    return False


@dataclass(frozen=True)
class FunnelEvent:
    """One logged stage transition for one unit."""

    unit_id: str
    stage: Stage
    assignment: Assignment | None = None
    group: str = DEFAULT_GROUP
    timestamp: int = 0

    def __post_init__(self) -> None:
        if self.stage is not Stage.TARGETED and self.assignment is None:
            raise ValueError(
                f"stage {self.stage.value!r} requires an assignment (unit {self.unit_id!r})"
            )


@dataclass(frozen=True)
class OutcomeRecord:
    """Measured outcome for one unit; ``played`` flags engagement with the treatment."""

    unit_id: str
    outcome: float
    played: bool = False


@dataclass(frozen=True)
class UnitState:
    """Reconciled per-unit funnel state.

    ``reached`` is exactly what the log said; ``counted`` is the subset whose
    prerequisites are satisfied and is what all counts and estimators use.
    ``outcome`` is None when no outcome record existed (treated as 0.0 by
    estimators, and reported as imputed).
    """

    unit_id: str
    assignment: Assignment | None
    group: str
    reached: frozenset[Stage]
    counted: frozenset[Stage]
    outcome: float | None = None
    played: bool = False

    @property
    def outcome_value(self) -> float:
        return 0.0 if self.outcome is None else self.outcome


@dataclass(frozen=True)
class ArmCounts:
    treatment: int = 0
    control: int = 0

    def __getitem__(self, arm: Assignment) -> int:
        return self.treatment if arm is Assignment.TREATMENT else self.control

    @property
    def total(self) -> int:
        return self.treatment + self.control


@dataclass(frozen=True)
class FunnelSnapshot:
    """Reconciled funnel state for a whole experiment.

    Counts are exact cardinalities of the counted stage memberships and are
    monotone down the funnel per arm. ``targeted_logged`` records whether any
    targeted-stage event appeared in the input at all; without it (or an
    external targeted total) the allocation rate is undefined.
    """

    units: tuple[UnitState, ...]
    n_targeted: int
    n_allocated: ArmCounts
    n_activated: ArmCounts
    n_triggered: ArmCounts
    n_treated: ArmCounts
    targeted_logged: bool
    n_imputed_outcomes: int = 0

    def count(self, stage: Stage) -> ArmCounts:
        return {
            Stage.ALLOCATED: self.n_allocated,
            Stage.ACTIVATED: self.n_activated,
            Stage.TRIGGERED: self.n_triggered,
            Stage.TREATED: self.n_treated,
        }[stage]

    def units_at(self, stage: Stage, arm: Assignment | None = None) -> Iterable[UnitState]:
        """Units counted at ``stage``, optionally restricted to one arm."""
        for unit in self.units:
            if stage in unit.counted and (arm is None or unit.assignment is arm):
                yield unit


@dataclass(frozen=True)
class FunnelRates:
    """The four funnel rates; None marks a rate whose denominator was zero or unknown."""

    allocation_rate: float | None
    activation_rate: float | None
    trigger_rate: float | None
    compliance_rate: float | None

    def to_json_dict(self) -> dict:
        return {
            "allocation_rate": self.allocation_rate,
            "activation_rate": self.activation_rate,
            "trigger_rate": self.trigger_rate,
            "compliance_rate": self.compliance_rate,
        }


def check_stage_consistency(unit_id: str, reached: frozenset[Stage]) -> list[Violation]:
    """Violations for every prerequisite rule ``reached`` breaks."""
    found = []
    for stage, required, kind in _PREREQUISITE_VIOLATIONS:
        if stage in reached and required not in reached:
            found.append(
                Violation(
                    kind=kind,
                    unit_id=unit_id,
                    message=f"unit {unit_id!r} logged {stage.value!r} without {required.value!r}",
                )
            )
    return found


def counted_stages(reached: frozenset[Stage]) -> frozenset[Stage]:
    """Subset of ``reached`` whose prerequisite chains are fully present.

    Allocation implies targeting by definition, so allocated units count as
    targeted even when the platform never logged their targeted event.
    """
    counted: set[Stage] = set()
    for stage in Stage:  # declaration order puts prerequisites first
        if stage in reached and STAGE_PREREQUISITES[stage] <= counted:
            counted.add(stage)
    if Stage.ALLOCATED in counted:
        counted.add(Stage.TARGETED)
    return frozenset(counted)


_EVENT_SORT_KEY = lambda e: (  # noqa: E731 - tiny tie-break key
    e.timestamp,
    _STAGE_ORDER[e.stage],
    e.group,
    e.assignment.value if e.assignment else "",
)


def build_funnel(
    events: Sequence[FunnelEvent] | Iterable[FunnelEvent],
    outcomes: Sequence[OutcomeRecord] | Iterable[OutcomeRecord] = (),
    *,
    strict_outcomes: bool = False,
) -> tuple[FunnelSnapshot, list[Violation]]:
    """Reconcile raw events and outcomes into a :class:`FunnelSnapshot`.

    Tolerates unordered and duplicated input: duplicate (unit, stage) events
    keep the latest timestamp, duplicate outcomes keep the first record.
    Units whose events disagree on the assigned arm are excluded entirely
    (any choice of arm would bias it) with an assignment-conflict violation.
    Units with no outcome record are imputed outcome 0 (the revenue-metric
    convention) and counted in ``n_imputed_outcomes``; with
    ``strict_outcomes`` each such triggered unit is a violation instead.

    Nothing here raises on bad data; every anomaly is returned as a
    :class:`Violation`.
    """
    per_unit: dict[str, dict[Stage, FunnelEvent]] = {}
    assignments_seen: dict[str, set[Assignment]] = {}
    targeted_logged = False

    for event in events:
        if event.stage is Stage.TARGETED:
            targeted_logged = True
        if event.assignment is not None:
            assignments_seen.setdefault(event.unit_id, set()).add(event.assignment)
        stages = per_unit.setdefault(event.unit_id, {})
        incumbent = stages.get(event.stage)
        if incumbent is None or _EVENT_SORT_KEY(event) > _EVENT_SORT_KEY(incumbent):
            stages[event.stage] = event

    violations: list[Violation] = []

    outcome_by_unit: dict[str, OutcomeRecord] = {}
    for record in outcomes:
        if record.unit_id in outcome_by_unit:
            violations.append(
                Violation(
                    kind=ViolationKind.DUPLICATE_OUTCOME,
                    unit_id=record.unit_id,
                    message=f"duplicate outcome for unit {record.unit_id!r}; kept the first",
                )
            )
        else:
            outcome_by_unit[record.unit_id] = record

    units: list[UnitState] = []
    n_targeted = 0
    alloc = {Assignment.TREATMENT: 0, Assignment.CONTROL: 0}
    activ = {Assignment.TREATMENT: 0, Assignment.CONTROL: 0}
    trig = {Assignment.TREATMENT: 0, Assignment.CONTROL: 0}
    treat = {Assignment.TREATMENT: 0, Assignment.CONTROL: 0}
    n_imputed = 0

    for unit_id in sorted(per_unit):
        stages = per_unit[unit_id]
        arms = assignments_seen.get(unit_id, set())
        if len(arms) > 1:
            violations.append(
                Violation(
                    kind=ViolationKind.ASSIGNMENT_CONFLICT,
                    unit_id=unit_id,
                    message=f"unit {unit_id!r} carries conflicting assignments; excluded from all counts",
                )
            )
            continue

        reached = frozenset(stages)
        counted = counted_stages(reached)
        violations.extend(check_stage_consistency(unit_id, reached))

        latest = max(stages.values(), key=_EVENT_SORT_KEY)
        assignment = next(iter(arms)) if arms else None
        record = outcome_by_unit.get(unit_id)

        outcome = record.outcome if record is not None else None
        played = record.played if record is not None else False
        if record is None and Stage.TRIGGERED in counted:
            n_imputed += 1
            if strict_outcomes:
                violations.append(
                    Violation(
                        kind=ViolationKind.MISSING_OUTCOME,
                        unit_id=unit_id,
                        message=f"triggered unit {unit_id!r} has no outcome record",
                    )
                )

        units.append(
            UnitState(
                unit_id=unit_id,
                assignment=assignment,
                group=latest.group,
                reached=reached,
                counted=counted,
                outcome=outcome,
                played=played,
            )
        )

        if Stage.TARGETED in counted:
            n_targeted += 1
        if assignment is not None:
            if Stage.ALLOCATED in counted:
                alloc[assignment] += 1
            if Stage.ACTIVATED in counted:
                activ[assignment] += 1
            if Stage.TRIGGERED in counted:
                trig[assignment] += 1
            if Stage.TREATED in counted:
                treat[assignment] += 1

    violations.sort(key=lambda v: (v.unit_id or "", v.kind.value))
    snapshot = FunnelSnapshot(
        units=tuple(units),
        n_targeted=n_targeted,
        n_allocated=ArmCounts(alloc[Assignment.TREATMENT], alloc[Assignment.CONTROL]),
        n_activated=ArmCounts(activ[Assignment.TREATMENT], activ[Assignment.CONTROL]),
        n_triggered=ArmCounts(trig[Assignment.TREATMENT], trig[Assignment.CONTROL]),
        n_treated=ArmCounts(treat[Assignment.TREATMENT], treat[Assignment.CONTROL]),
        targeted_logged=targeted_logged,
        n_imputed_outcomes=n_imputed,
    )
    return snapshot, violations


def reconstruct_events(snapshot: FunnelSnapshot) -> list[FunnelEvent]:
    """Deterministic event list that rebuilds an identical snapshot.

    Timestamps are synthetic (stage index) since the snapshot does not retain
    the originals; feeding the result back through :func:`build_funnel`
    reproduces the same counts and unit states.
    """
    events = []
    for unit in snapshot.units:
        for stage in sorted(unit.reached, key=_STAGE_ORDER.__getitem__):
            events.append(
                FunnelEvent(
                    unit_id=unit.unit_id,
                    stage=stage,
                    assignment=unit.assignment,
                    group=unit.group,
                    timestamp=_STAGE_ORDER[stage],
                )
            )
    return events


def compute_rates(snapshot: FunnelSnapshot, *, n_targeted: int | None = None) -> FunnelRates:
    """The four funnel rates, with zero/unknown denominators yielding None.

    ``n_targeted`` overrides the logged targeted count for platforms that
    cannot log non-allocated units; without either, the allocation rate is
    undefined.
    """
    total_allocated = snapshot.n_allocated.total

    if n_targeted is not None:
        if n_targeted < total_allocated:
            raise ValueError(
                f"external n_targeted ({n_targeted}) is smaller than the allocated count ({total_allocated})"
            )
        targeted_total: int | None = n_targeted
    elif snapshot.targeted_logged:
        targeted_total = snapshot.n_targeted
    else:
        targeted_total = None

    def ratio(num: int, denom: int | None) -> float | None:
        if not denom:
            return None
        return num / denom

    return FunnelRates(
        allocation_rate=ratio(total_allocated, targeted_total),
        activation_rate=ratio(snapshot.n_activated.total, total_allocated),
        trigger_rate=ratio(snapshot.n_triggered.total, total_allocated),
        compliance_rate=ratio(snapshot.n_treated.treatment, snapshot.n_triggered.treatment),
    )


def total_effect_dilution(lift_among_triggered: float, trigger_rate: float) -> float:
    """Total effect once a lift among triggered units is diluted by the trigger rate.

    A 10% lift among the 1% of units that trigger moves the overall metric by
    only 0.1%.
    """
    if not 0.0 <= trigger_rate <= 1.0:
        raise ValueError(f"trigger_rate must be in [0, 1], got {trigger_rate}")
    return lift_among_triggered * trigger_rate
