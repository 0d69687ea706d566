"""Estimate records, validated estimate sets, weight schemes and fit containers."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DuplicateLabel,
    EmptySet,
    NonFiniteValue,
    NonPositiveSE,
    NonPositiveWeight,
    WeightMismatch,
    WeightSumError,
)

SCALE_TAGS = ("log_or", "log_rr", "smd", "beta", "generic")

WEIGHT_SUM_TOL = 1e-9
WEIGHT_RENORM_TOL = 1e-6


@dataclass(frozen=True)
class EstimateRecord:
    """One effect estimate on an additive scale with its standard error."""

    label: str
    y: float
    se: float
    team: str = ""
    scale_tag: str = "generic"

    def __post_init__(self):
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "se", float(self.se))
        if not math.isfinite(self.y):
            raise NonFiniteValue(f"{self.label}: effect size {self.y!r} is not finite")
        if not math.isfinite(self.se):
            raise NonFiniteValue(f"{self.label}: standard error {self.se!r} is not finite")
        if self.se <= 0:
            raise NonPositiveSE(f"{self.label}: standard error must be > 0, got {self.se!r}")
        if self.scale_tag not in SCALE_TAGS:
            raise ValueError(f"unknown scale tag {self.scale_tag!r}")


@dataclass(frozen=True)
class EstimateSet:
    """An ordered, validated collection of :class:`EstimateRecord`.

    Duplicate ``(y, se)`` pairs are allowed; only labels must be unique.
    """

    records: tuple[EstimateRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise EmptySet("an estimate set needs at least one record")
        dup = [lab for lab, n in Counter(r.label for r in self.records).items() if n > 1]
        if dup:
            raise DuplicateLabel(f"duplicate labels: {', '.join(map(str, dup))}")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def K(self) -> int:
        return len(self.records)

    @property
    def y(self) -> np.ndarray:
        out = np.array([r.y for r in self.records], dtype=float)
        out.flags.writeable = False
        return out

    @property
    def se(self) -> np.ndarray:
        out = np.array([r.se for r in self.records], dtype=float)
        out.flags.writeable = False
        return out

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    @property
    def teams(self) -> list[str]:
        return [r.team for r in self.records]

    @classmethod
    def from_arrays(cls, y, se, labels=None, teams=None, scale_tag="generic") -> "EstimateSet":
        """Build a set from parallel sequences; labels default to ``est1..estK``."""
        y = list(y)
        se = list(se)
        if len(y) != len(se):
            raise ValueError("y and se must have the same length")
        if labels is None:
            labels = [f"est{k + 1}" for k in range(len(y))]
        if teams is None:
            teams = list(labels)
        recs = [
            EstimateRecord(label=str(lab), y=yk, se=sk, team=str(t), scale_tag=scale_tag)
            for lab, yk, sk, t in zip(labels, y, se, teams)
        ]
        return validate_set(recs)


def validate_set(records: Sequence[EstimateRecord]) -> EstimateSet:
    """Validate records and wrap them in an :class:`EstimateSet`.

    Raises
    ------
    EmptySet, DuplicateLabel, NonPositiveSE, NonFiniteValue
    """
    return EstimateSet(tuple(records))


@dataclass(frozen=True)
class WeightScheme:
    """Fractional likelihood weights, strictly positive and summing to one.

    Sums within ``1e-6`` of one are renormalized silently (text round trips);
    anything further off is rejected.
    """

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w:
            raise EmptySet("a weight scheme needs at least one weight")
        if not all(math.isfinite(x) for x in w):
            raise NonFiniteValue("weights must be finite")
        if min(w) <= 0:
            raise NonPositiveWeight(f"weights must be > 0, got min {min(w)!r}")
        total = math.fsum(w)
        if abs(total - 1.0) > WEIGHT_RENORM_TOL:
            raise WeightSumError(f"weights sum to {total!r}, expected 1")
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            w = tuple(x / total for x in w)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    @property
    def array(self) -> np.ndarray:
        out = np.array(self.weights, dtype=float)
        out.flags.writeable = False
        return out

    def check_aligned(self, estimates: EstimateSet) -> None:
        if len(self.weights) != estimates.K:
            raise WeightMismatch(
                f"{len(self.weights)} weights for {estimates.K} estimates"
            )


def equal_weights(K: int) -> WeightScheme:
    """Weights ``1/K`` for each of ``K`` estimates."""
    if K < 1:
        raise EmptySet("K must be at least 1")
    return WeightScheme((1.0 / K,) * K)


def team_split_weights(estimates: EstimateSet) -> WeightScheme:
    """Give each team an equal share, split evenly among its submissions.

    A record from team ``t`` with ``m_t`` submissions gets ``1 / (T * m_t)``,
    where ``T`` is the number of distinct teams. Records with an empty team
    label are treated as their own team.
    """
    teams = [r.team or f"\x00{r.label}" for r in estimates.records]
    counts = Counter(teams)
    T = len(counts)
    return WeightScheme(tuple(1.0 / (T * counts[t]) for t in teams))


def custom_weights(raw: Sequence[float]) -> WeightScheme:
    """Normalize arbitrary positive numbers to weights."""
    raw = [float(x) for x in raw]
    if not raw:
        raise EmptySet("no weights given")
    if any(not math.isfinite(x) for x in raw):
        raise NonFiniteValue("weights must be finite")
    if min(raw) <= 0:
        raise NonPositiveWeight(f"weights must be > 0, got {min(raw)!r}")
    total = math.fsum(raw)
    return WeightScheme(tuple(x / total for x in raw))


@dataclass(frozen=True)
class ClassicalFit:
    """Result of a classical common- or random-effects fit.

    ``tau_hat`` is on the standard-deviation scale. For common-effect fits the
    heterogeneity fields are zero and ``p_tau`` is ``nan`` unless a Q test
    was run.
    """

    mu_hat: float
    se_mu: float
    ci_mu: tuple[float, float]
    z: float
    p_mu: float
    model_kind: str
    adjusted: bool
    tau_hat: float = 0.0
    ci_tau: tuple[float, float] = (0.0, 0.0)
    q_stat: float = 0.0
    p_tau: float = float("nan")
    level: float = 0.95
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.se_mu > 0:
            raise ValueError(f"se_mu must be > 0, got {self.se_mu!r}")
        if self.tau_hat < 0:
            raise ValueError("tau_hat must be >= 0")
        if self.model_kind not in ("common", "random"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")

    @property
    def tau2_hat(self) -> float:
        return self.tau_hat**2
