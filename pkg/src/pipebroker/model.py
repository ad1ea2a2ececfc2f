"""Analytical time-to-solution model for the staged pipeline.

Predicts end-to-end wall time for the three execution methods from
per-block stage costs, identifies the bottleneck stage, and derives the
core split that balances producer and consumer sides.
"""

from __future__ import annotations

from dataclasses import dataclass

from .core import StageTimes
from .errors import InvalidConfigurationError, InvalidInputError

METHOD_TRADITIONAL = "traditional"
METHOD_IMPROVED = "improved"
METHOD_ASYNC = "async"
METHODS = (METHOD_TRADITIONAL, METHOD_IMPROVED, METHOD_ASYNC)

# Fixed report order for bottleneck ties: first maximal stage wins.
_STAGE_ORDER = ("compute", "output", "input", "analysis")


@dataclass(frozen=True)
class StageTotals:
    """Aggregate per-stage wall time (seconds) across all blocks and workers."""

    T_comp: float
    T_o: float
    T_i: float
    T_analy: float

    def __post_init__(self):
        for name, value in self.as_dict().items():
            if value < 0:
                raise InvalidInputError(f"{name} must be >= 0, got {value}")

    def as_tuple(self) -> tuple:
        return (self.T_comp, self.T_o, self.T_i, self.T_analy)

    def as_dict(self) -> dict:
        return {"T_comp": self.T_comp, "T_o": self.T_o,
                "T_i": self.T_i, "T_analy": self.T_analy}


@dataclass(frozen=True)
class Prediction:
    """Predicted time-to-solution for one method plus its limiting stage."""

    method: str
    t2s: float
    bottleneck: str


def stage_totals(times: StageTimes, n_b: int, P: int, Q: int) -> StageTotals:
    """Per-stage totals assuming even block distribution.

    Each of the P producers handles n_b/P blocks and each of the Q consumers
    n_b/Q blocks; division is real-valued, so uneven remainders average out.
    """
    if P < 1 or Q < 1:
        raise InvalidConfigurationError(f"P and Q must be >= 1, got P={P} Q={Q}")
    if n_b < 0:
        raise InvalidInputError(f"n_b must be >= 0, got {n_b}")
    return StageTotals(
        times.t_comp * n_b / P,
        times.t_o * n_b / P,
        times.t_i * n_b / Q,
        times.t_analy * n_b / Q,
    )


def _argmax_stage(candidates) -> str:
    """First maximal entry of [(name, value), ...] in the given order."""
    best_name, best = candidates[0]
    for name, value in candidates[1:]:
        if value > best:
            best_name, best = name, value
    return best_name


def predict_traditional(totals: StageTotals) -> Prediction:
    """Strictly sequential execution: stages add up."""
    t2s = totals.T_comp + totals.T_o + totals.T_i + totals.T_analy
    bottleneck = _argmax_stage(list(zip(_STAGE_ORDER, totals.as_tuple())))
    return Prediction(METHOD_TRADITIONAL, t2s, bottleneck)


def predict_improved(totals: StageTotals) -> Prediction:
    """Output overlapped with compute; consumers still read then analyze."""
    combined = totals.T_i + totals.T_analy
    t2s = max(totals.T_comp, totals.T_o, combined)
    bottleneck = _argmax_stage([
        ("compute", totals.T_comp),
        ("output", totals.T_o),
        ("input+analysis", combined),
    ])
    return Prediction(METHOD_IMPROVED, t2s, bottleneck)


def predict_async(totals: StageTotals) -> Prediction:
    """Fully overlapped pipeline: the slowest single stage sets the pace."""
    t2s = max(totals.as_tuple())
    bottleneck = _argmax_stage(list(zip(_STAGE_ORDER, totals.as_tuple())))
    return Prediction(METHOD_ASYNC, t2s, bottleneck)


def predict(method: str, totals: StageTotals) -> Prediction:
    if method == METHOD_TRADITIONAL:
        return predict_traditional(totals)
    if method == METHOD_IMPROVED:
        return predict_improved(totals)
    if method == METHOD_ASYNC:
        return predict_async(totals)
    raise InvalidInputError(f"unknown method {method!r}")


def balance_allocation(times: StageTimes, total_cores: int) -> tuple:
    """Core split (P, Q) with P+Q=total_cores minimizing the async prediction.

    The async t2s for a split is max(max(t_comp,t_o)/P, max(t_i,t_analy)/Q)
    scaled by n_b, so the argmin does not depend on n_b. Exhaustive scan;
    ties go to the larger P.
    """
    if total_cores < 2:
        raise InvalidConfigurationError(f"total_cores must be >= 2, got {total_cores}")
    producer_side = max(times.t_comp, times.t_o)
    consumer_side = max(times.t_i, times.t_analy)
    if producer_side == 0 and consumer_side == 0:
        raise InvalidInputError("at least one stage time must be positive")
    best = None
    best_split = None
    for P in range(1, total_cores):
        Q = total_cores - P
        t2s = max(producer_side / P, consumer_side / Q)
        if best is None or t2s <= best:
            best = t2s
            best_split = (P, Q)
    return best_split


def relative_error(reference: float, estimate: float) -> float:
    """|reference - estimate| / reference."""
    if reference <= 0:
        raise InvalidInputError(f"reference must be > 0, got {reference}")
    return abs(reference - estimate) / reference
