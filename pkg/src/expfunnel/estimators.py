"""Causal-effect estimators over a reconciled funnel snapshot.

All estimators work on the triggered population, the deepest stage where the
comparison of arms is still protected by randomization. Three families:

* plain difference of triggered-arm means (the always-internally-valid ITT),
* self-normalized reweighting of triggered units toward a reference
  population's group mix (allocation, target, or a caller-supplied one),
* inverse-propensity weighting of played vs non-played units to approximate
  the effect of actually experiencing the treatment.

Point estimates come with a standard error, a normal-approximation 95%
confidence interval (quantile fixed at 1.96; denominators are expected to be
large), and effective sample sizes. Reductions run over units in unit-id
order, so results are reproducible bit-for-bit.
"""
from __future__ import annotations

import math
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .funnel import Assignment, FunnelSnapshot, Stage, UnitState, stage_precedes
from .special import normal_cdf, normal_quantile

Z_95 = 1.96

ARM_LABEL = {Assignment.TREATMENT: "treatment", Assignment.CONTROL: "control"}


class EstimatorError(Exception):
    """Base class for estimator preconditions violated by the data."""


class EmptyArmError(EstimatorError):
    def __init__(self, arm: str, detail: str = "has too few triggered units"):
        self.arm = arm
        super().__init__(f"arm {arm!r} {detail}")


class MissingGroupError(EstimatorError):
    def __init__(self, group: str, where: str):
        self.group = group
        super().__init__(f"group {group!r} is missing from {where}")


class DegenerateRateError(EstimatorError):
    def __init__(self, group: str, detail: str):
        self.group = group
        super().__init__(f"group {group!r}: {detail}")


class DegeneratePropensityError(EstimatorError):
    def __init__(self, group: str, value: float):
        self.group = group
        self.value = value
        super().__init__(
            f"group {group!r} has propensity {value}; inverse weighting needs values strictly inside (0, 1)"
        )


class MissingTargetDataError(EstimatorError):
    def __init__(self) -> None:
        super().__init__(
            "target reference requires targeted-stage events in the log or per-group target counts"
        )


class Estimand(str, Enum):
    ITT_TRIGGERED = "itt_triggered"
    ITT_REWEIGHTED = "itt_reweighted"
    ITT_ALLOCATION_REF = "itt_allocation_ref"
    ITT_TARGET_REF = "itt_target_ref"
    PLAY_EFFECT_IPW = "play_effect_ipw"
    NAIVE_ACTIVATED = "naive_activated"


class ReferencePopulation(str, Enum):
    ALLOCATION = "allocation"
    TARGET = "target"


@dataclass(frozen=True)
class GroupTable:
    """Per-group rate table: trigger rates, allocation rates, or play propensities.

    ``kind`` names what the values mean; validation depends on the use site
    (rates live in (0, 1], propensities strictly inside (0, 1)).
    """

    values: dict[str, float]
    kind: str = "rate"

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", dict(self.values))

    def __getitem__(self, group: str) -> float:
        return self.values[group]

    def __contains__(self, group: str) -> bool:
        return group in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def get(self, group: str, default: float | None = None) -> float | None:
        return self.values.get(group, default)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "values": dict(sorted(self.values.items()))}


@dataclass(frozen=True)
class EffectEstimate:
    """A point estimate with variance, confidence interval, and effective sample sizes."""

    estimand: Estimand
    point: float
    std_error: float
    ci_95: tuple[float, float]
    n_effective: tuple[float, float]
    diagnostics: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.std_error < 0.0:
            raise ValueError(f"std_error must be non-negative, got {self.std_error}")
        if self.n_effective[0] <= 0.0 or self.n_effective[1] <= 0.0:
            raise ValueError(f"n_effective components must be positive, got {self.n_effective}")

    def to_json_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "point": self.point,
            "std_error": self.std_error,
            "ci_95": list(self.ci_95),
            "n_effective": list(self.n_effective),
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }


def _make_estimate(
    estimand: Estimand,
    point: float,
    std_error: float,
    n_effective: tuple[float, float],
    diagnostics: dict[str, float],
) -> EffectEstimate:
    return EffectEstimate(
        estimand=estimand,
        point=point,
        std_error=std_error,
        ci_95=(point - Z_95 * std_error, point + Z_95 * std_error),
        n_effective=n_effective,
        diagnostics=diagnostics,
    )


def triggered_units(snapshot: FunnelSnapshot, arm: Assignment | None = None) -> list[UnitState]:
    return list(snapshot.units_at(Stage.TRIGGERED, arm))


def _outcomes(units: list[UnitState]) -> np.ndarray:
    return np.array([u.outcome_value for u in units], dtype=float)


def _count_imputed(units: list[UnitState]) -> int:
    return sum(1 for u in units if u.outcome is None)


def welch_difference(treatment_y: np.ndarray, control_y: np.ndarray) -> tuple[float, float]:
    """Difference of means with the unpooled (Welch) standard error."""
    n_t, n_c = len(treatment_y), len(control_y)
    point = float(np.mean(treatment_y) - np.mean(control_y))
    std_error = math.sqrt(
        float(np.var(treatment_y, ddof=1)) / n_t + float(np.var(control_y, ddof=1)) / n_c
    )
    return point, std_error


def itt_triggered(snapshot: FunnelSnapshot) -> EffectEstimate:
    """Intent-to-treat effect among triggered units: difference of arm means.

    Includes triggered units that never activated; that inclusiveness is what
    keeps the comparison internally valid under one-sided activation failure.
    """
    t_units = triggered_units(snapshot, Assignment.TREATMENT)
    c_units = triggered_units(snapshot, Assignment.CONTROL)
    for arm, units in ((Assignment.TREATMENT, t_units), (Assignment.CONTROL, c_units)):
        if len(units) < 2:
            raise EmptyArmError(ARM_LABEL[arm])

    y_t, y_c = _outcomes(t_units), _outcomes(c_units)
    point, std_error = welch_difference(y_t, y_c)
    return _make_estimate(
        Estimand.ITT_TRIGGERED,
        point,
        std_error,
        (float(len(t_units)), float(len(c_units))),
        {
            "mean_treatment": float(np.mean(y_t)),
            "mean_control": float(np.mean(y_c)),
            "imputed_outcomes": float(_count_imputed(t_units) + _count_imputed(c_units)),
        },
    )


def estimate_group_rates(
    snapshot: FunnelSnapshot, from_stage: Stage, to_stage: Stage
) -> GroupTable:
    """Per-group conversion rates between two funnel stages, pooled across arms.

    A group whose rate would be zero is an error rather than a table entry:
    its reweighting weight downstream would be infinite.
    """
    if not stage_precedes(from_stage, to_stage):
        raise ValueError(
            f"{from_stage.value!r} does not precede {to_stage.value!r} in the funnel"
        )

    denominators: dict[str, int] = {}
    numerators: dict[str, int] = {}
    for unit in snapshot.units:
        if from_stage in unit.counted:
            denominators[unit.group] = denominators.get(unit.group, 0) + 1
        if to_stage in unit.counted:
            numerators[unit.group] = numerators.get(unit.group, 0) + 1

    values: dict[str, float] = {}
    for group in sorted(set(denominators) | set(numerators)):
        denom = denominators.get(group, 0)
        num = numerators.get(group, 0)
        if denom == 0:
            raise MissingGroupError(group, f"the {from_stage.value!r} stage")
        if num == 0:
            raise DegenerateRateError(
                group, f"no units reached {to_stage.value!r}; rate would be 0"
            )
        values[group] = num / denom
    return GroupTable(values=values, kind=f"{from_stage.value}->{to_stage.value}")


def compose_triggered_mix(
    reference_weights: Mapping[str, float],
    trigger_rates: GroupTable | Mapping[str, float],
) -> dict[str, float]:
    """Group composition of the triggered population implied by a reference mix.

    A reference ratio of 1:2 with trigger rates of 10% and 50% yields a 1:10
    triggered mix; the result is normalized to sum to one.
    """
    if set(reference_weights) != set(trigger_rates.keys() if hasattr(trigger_rates, "keys") else trigger_rates):
        raise ValueError("reference weights and trigger rates must cover the same groups")
    raw: dict[str, float] = {}
    for group in sorted(reference_weights):
        weight = reference_weights[group]
        if weight <= 0:
            raise ValueError(f"reference weight for group {group!r} must be positive")
        raw[group] = weight * trigger_rates[group]
    total = sum(raw.values())
    if total <= 0:
        raise ValueError("composed weights sum to zero")
    return {group: value / total for group, value in raw.items()}


def _weights_for(
    units: list[UnitState],
    observed_T: GroupTable | Mapping[str, float],
    target_Tprime: GroupTable | Mapping[str, float],
) -> np.ndarray:
    weights = np.empty(len(units), dtype=float)
    for i, unit in enumerate(units):
        if unit.group not in observed_T:
            raise MissingGroupError(unit.group, "the observed trigger-rate table")
        if unit.group not in target_Tprime:
            raise MissingGroupError(unit.group, "the target trigger-rate table")
        observed = observed_T[unit.group]
        if observed <= 0:
            raise DegenerateRateError(unit.group, f"observed rate {observed} is not positive")
        weights[i] = target_Tprime[unit.group] / observed
    return weights


def _hajek_arm(y: np.ndarray, weights: np.ndarray, arm: str) -> tuple[float, float, float]:
    """Self-normalized weighted mean with linearized variance.

    Returns (mean, variance, sum of weights). The n/(n-1) factor makes the
    unit-weight case agree exactly with the usual s^2/n.
    """
    n = len(y)
    if n < 2:
        raise EmptyArmError(arm)
    weight_sum = float(np.sum(weights))
    if weight_sum <= 0:
        raise EmptyArmError(arm, "has zero total weight")
    mean = float(np.sum(weights * y)) / weight_sum
    residuals = weights * (y - mean)
    variance = float(np.sum(residuals**2)) / weight_sum**2 * (n / (n - 1))
    return mean, variance, weight_sum


def itt_reweighted(
    snapshot: FunnelSnapshot,
    observed_T: GroupTable | Mapping[str, float],
    target_Tprime: GroupTable | Mapping[str, float],
    *,
    estimand: Estimand = Estimand.ITT_REWEIGHTED,
) -> EffectEstimate:
    """ITT effect re-expressed under new per-group trigger rates.

    Each triggered unit is weighted by target_rate(g) / observed_rate(g) and
    arms are compared via self-normalized weighted means, with the per-arm
    sums of weights serving as the effective sample sizes. With the target
    table equal to the observed one this reduces exactly to itt_triggered.
    """
    t_units = triggered_units(snapshot, Assignment.TREATMENT)
    c_units = triggered_units(snapshot, Assignment.CONTROL)

    results = {}
    for arm, units in ((Assignment.TREATMENT, t_units), (Assignment.CONTROL, c_units)):
        label = ARM_LABEL[arm]
        if len(units) < 2:
            raise EmptyArmError(label)
        weights = _weights_for(units, observed_T, target_Tprime)
        results[arm] = (_hajek_arm(_outcomes(units), weights, label), weights)

    (mean_t, var_t, wsum_t), weights_t = results[Assignment.TREATMENT]
    (mean_c, var_c, wsum_c), weights_c = results[Assignment.CONTROL]
    all_weights = np.concatenate([weights_t, weights_c])
    return _make_estimate(
        estimand,
        mean_t - mean_c,
        math.sqrt(var_t + var_c),
        (wsum_t, wsum_c),
        {
            "max_weight": float(np.max(all_weights)),
            "min_weight": float(np.min(all_weights)),
            "imputed_outcomes": float(_count_imputed(t_units) + _count_imputed(c_units)),
        },
    )


def itt_reference(
    snapshot: FunnelSnapshot,
    reference: ReferencePopulation | str | GroupTable = ReferencePopulation.ALLOCATION,
    *,
    target_counts: Mapping[str, int] | None = None,
) -> EffectEstimate:
    """ITT effect measured against a reference population's group composition.

    ``allocation`` undoes per-group trigger rates (target rate 1 for every
    group); ``target`` additionally undoes per-group allocation, using
    targeted-stage events or externally supplied per-group target counts; a
    :class:`GroupTable` supplies custom target trigger rates directly.
    """
    observed_T = estimate_group_rates(snapshot, Stage.ALLOCATED, Stage.TRIGGERED)
    ones = {group: 1.0 for group in observed_T}

    if isinstance(reference, GroupTable):
        return itt_reweighted(snapshot, observed_T, reference)

    reference = ReferencePopulation(reference)
    if reference is ReferencePopulation.ALLOCATION:
        return itt_reweighted(
            snapshot, observed_T, ones, estimand=Estimand.ITT_ALLOCATION_REF
        )

    # Target reference: rescale the observed trigger rate by each group's
    # allocation rate so weights undo the full targeted -> triggered path.
    if target_counts is not None:
        allocated: dict[str, int] = {}
        for unit in snapshot.units_at(Stage.ALLOCATED):
            allocated[unit.group] = allocated.get(unit.group, 0) + 1
        allocation_values: dict[str, float] = {}
        for group in sorted(allocated):
            if group not in target_counts:
                raise MissingGroupError(group, "the supplied target counts")
            total = target_counts[group]
            if total < allocated[group]:
                raise ValueError(
                    f"target count for group {group!r} ({total}) is below its allocated count ({allocated[group]})"
                )
            allocation_values[group] = allocated[group] / total
        allocation_rates = GroupTable(values=allocation_values, kind="targeted->allocated")
    elif snapshot.targeted_logged:
        allocation_rates = estimate_group_rates(snapshot, Stage.TARGETED, Stage.ALLOCATED)
    else:
        raise MissingTargetDataError()

    composed = {}
    for group, trigger_rate in observed_T.items():
        if group not in allocation_rates:
            raise MissingGroupError(group, "the allocation-rate table")
        composed[group] = allocation_rates[group] * trigger_rate
    composed_table = GroupTable(values=composed, kind="targeted->triggered")
    return itt_reweighted(
        snapshot, composed_table, ones, estimand=Estimand.ITT_TARGET_REF
    )


def estimate_play_propensity(snapshot: FunnelSnapshot) -> GroupTable:
    """Per-group share of triggered units that played, pooled across arms.

    A group where nobody or everybody played cannot be inverse-weighted;
    that is a hard error rather than a clipped value, because clipping would
    silently change the estimand.
    """
    played: dict[str, int] = {}
    totals: dict[str, int] = {}
    for unit in snapshot.units_at(Stage.TRIGGERED):
        totals[unit.group] = totals.get(unit.group, 0) + 1
        if unit.played:
            played[unit.group] = played.get(unit.group, 0) + 1
    if not totals:
        raise EmptyArmError("triggered", "is empty; no propensities to estimate")

    values = {}
    for group in sorted(totals):
        propensity = played.get(group, 0) / totals[group]
        if propensity <= 0.0 or propensity >= 1.0:
            raise DegeneratePropensityError(group, propensity)
        values[group] = propensity
    return GroupTable(values=values, kind="play_propensity")


def ipw_play_effect(
    snapshot: FunnelSnapshot, propensity: GroupTable | Mapping[str, float]
) -> EffectEstimate:
    """Effect of playing, by inverse-propensity weighting over all triggered units.

    Both arms are pooled: players contribute y / p(g) and non-players
    -y / (1 - p(g)), averaged over the whole triggered population. This is a
    propensity-weighted contrast of played vs non-played units, not a
    randomized comparison; with propensities that do not capture confounding
    (e.g. activation failure correlated with outcomes) it inherits that bias.
    """
    units = triggered_units(snapshot)
    if len(units) < 2:
        raise EmptyArmError("triggered", "needs at least two units for a variance")

    terms = np.empty(len(units), dtype=float)
    unit_weights = np.empty(len(units), dtype=float)
    for i, unit in enumerate(units):
        if unit.group not in propensity:
            raise MissingGroupError(unit.group, "the propensity table")
        p = propensity[unit.group]
        if p <= 0.0 or p >= 1.0:
            raise DegeneratePropensityError(unit.group, p)
        y = unit.outcome_value
        if unit.played:
            terms[i] = y / p
            unit_weights[i] = 1.0 / p
        else:
            terms[i] = -y / (1.0 - p)
            unit_weights[i] = 1.0 / (1.0 - p)

    n = len(units)
    point = float(np.mean(terms))
    std_error = float(np.std(terms, ddof=1)) / math.sqrt(n)

    n_t = sum(1 for u in units if u.assignment is Assignment.TREATMENT)
    n_c = n - n_t
    played_t = sum(1 for u in units if u.assignment is Assignment.TREATMENT and u.played)
    played_c = sum(1 for u in units if u.assignment is Assignment.CONTROL and u.played)
    diagnostics = {
        "min_propensity": float(min(propensity[u.group] for u in units)),
        "max_unit_weight": float(np.max(unit_weights)),
        "imputed_outcomes": float(_count_imputed(units)),
        "played_share_treatment": played_t / n_t if n_t else 0.0,
        "played_share_control": played_c / n_c if n_c else 0.0,
    }
    return _make_estimate(
        Estimand.PLAY_EFFECT_IPW, point, std_error, (float(n_t), float(n_c)), diagnostics
    )


def power_at_treated_n(
    n_treated_per_arm: int, effect: float, outcome_sd: float, alpha: float
) -> float:
    """Normal-approximation power of a two-sided, two-sample test at the treated depth.

    Power depends on the number of treated units, not the allocated count; a
    shrinking compliance or trigger rate erodes it directly. Both rejection
    tails are included, so a zero effect returns exactly the test size alpha.
    """
    if n_treated_per_arm < 2:
        raise ValueError(f"need n >= 2 per arm, got {n_treated_per_arm}")
    if outcome_sd <= 0:
        raise ValueError(f"outcome_sd must be positive, got {outcome_sd}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")

    shift = abs(effect) / (outcome_sd * math.sqrt(2.0 / n_treated_per_arm))
    z_crit = normal_quantile(1.0 - alpha / 2.0)
    power = normal_cdf(shift - z_crit) + normal_cdf(-shift - z_crit)
    return min(1.0, max(0.0, power))
