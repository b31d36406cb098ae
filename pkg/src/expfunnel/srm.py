"""Sample-ratio-mismatch checks down the experimentation funnel.

A broken experiment shows up as arm counts that are statistically
incompatible with the designed split. The check is a one-degree chi-squared
goodness-of-fit test, run at the allocation, activation, and trigger stages;
a failure is data for the operator, never an exception.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .funnel import FunnelSnapshot, Stage
from .special import chi2_sf

DEFAULT_ALPHA = 0.001
DEFAULT_RATIO = (1.0, 1.0)

# Below this expected count per cell the chi-squared approximation is
# unreliable; the verdict becomes NotApplicable instead of a shaky p-value.
MIN_EXPECTED_COUNT = 5.0

SCANNED_STAGES = (Stage.ALLOCATED, Stage.ACTIVATED, Stage.TRIGGERED)


class SrmVerdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    NOT_APPLICABLE = "not-applicable"


@dataclass(frozen=True)
class SrmResult:
    """Outcome of one SRM check: observed arm counts vs the design split."""

    stage: Stage | None
    observed: tuple[int, int]
    expected_ratio: tuple[float, float]
    chi2: float
    p_value: float
    verdict: SrmVerdict
    alpha: float

    def to_json_dict(self) -> dict:
        return {
            "stage": self.stage.value if self.stage else None,
            "observed": list(self.observed),
            "expected_ratio": list(self.expected_ratio),
            "chi2": self.chi2,
            "p_value": self.p_value,
            "verdict": self.verdict.value,
            "alpha": self.alpha,
        }


def srm_test(
    n_treatment: int,
    n_control: int,
    expected_ratio: tuple[float, float] = DEFAULT_RATIO,
    alpha: float = DEFAULT_ALPHA,
    *,
    stage: Stage | None = None,
) -> SrmResult:
    """Chi-squared goodness-of-fit test of two arm counts against a design ratio.

    Expected counts follow from applying the ratio to the observed total,
    chi2 = sum (observed - expected)^2 / expected, and the p-value comes from
    the chi-squared survival function with one degree of freedom. When either
    expected cell falls below ``MIN_EXPECTED_COUNT`` (including a zero total)
    the verdict is NotApplicable.
    """
    if n_treatment < 0 or n_control < 0:
        raise ValueError("observed counts must be non-negative")
    ratio_t, ratio_c = expected_ratio
    if ratio_t <= 0 or ratio_c <= 0:
        raise ValueError(f"expected ratio components must be positive, got {expected_ratio}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")

    total = n_treatment + n_control
    if total == 0:
        return SrmResult(
            stage=stage,
            observed=(0, 0),
            expected_ratio=(ratio_t, ratio_c),
            chi2=0.0,
            p_value=1.0,
            verdict=SrmVerdict.NOT_APPLICABLE,
            alpha=alpha,
        )

    share_t = ratio_t / (ratio_t + ratio_c)
    expected_t = total * share_t
    expected_c = total - expected_t
    chi2 = (n_treatment - expected_t) ** 2 / expected_t + (n_control - expected_c) ** 2 / expected_c
    p_value = chi2_sf(chi2, 1)

    if expected_t < MIN_EXPECTED_COUNT or expected_c < MIN_EXPECTED_COUNT:
        verdict = SrmVerdict.NOT_APPLICABLE
    elif p_value < alpha:
        verdict = SrmVerdict.FAIL
    else:
        verdict = SrmVerdict.PASS

    return SrmResult(
        stage=stage,
        observed=(n_treatment, n_control),
        expected_ratio=(ratio_t, ratio_c),
        chi2=chi2,
        p_value=p_value,
        verdict=verdict,
        alpha=alpha,
    )


def srm_scan(
    snapshot: FunnelSnapshot,
    design_ratio: tuple[float, float] = DEFAULT_RATIO,
    alpha: float = DEFAULT_ALPHA,
) -> list[SrmResult]:
    """SRM checks at the allocation, activation, and trigger stages.

    The activation check is NotApplicable when the log holds zero control-arm
    activation events: one-sided designs do not configure the control arm, so
    there is nothing to balance against.
    """
    results = []
    for stage in SCANNED_STAGES:
        counts = snapshot.count(stage)
        if stage is Stage.ACTIVATED and counts.control == 0:
            results.append(
                SrmResult(
                    stage=stage,
                    observed=(counts.treatment, counts.control),
                    expected_ratio=design_ratio,
                    chi2=0.0,
                    p_value=1.0,
                    verdict=SrmVerdict.NOT_APPLICABLE,
                    alpha=alpha,
                )
            )
            continue
        results.append(
            srm_test(counts.treatment, counts.control, design_ratio, alpha, stage=stage)
        )
    return results
