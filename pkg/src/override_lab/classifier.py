"""Override-type inference.

Each override gets a probability distribution over the five override types
(context, judgment, workflow, protocol, capability) from a fixed linear
softmax scorer. The posterior is turned into reward-loss and
capability-loss weights by averaging per-type weights under it.

The scorer's parameters never change inside a learner run; refreshing the
cohort statistics between runs is the slow outer loop.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .config import ClassifierConfig, OVERRIDE_TYPES
from .kernel import DecisionKind, InteractionRecord, action_proximity

REASON_TO_TYPE = {
    "PATIENT_PREFERENCE": "I",
    "NOT_COMFORTABLE": "V",
    "PROTOCOL": "IV",
    "NO_TIME": "III",
}

SIGNAL_NAMES = ("bias", "closeness", "has_alternative", "class_preserved", "override_rate", "cohort_accept")

# rows I..V, columns as SIGNAL_NAMES
DEFAULT_WEIGHTS = np.array([
    [-0.5, 1.5, 0.0, 1.0, -1.0, -1.0],
    [0.5, 1.0, 0.0, 1.0, -2.0, -0.5],
    [0.0, 0.0, -1.5, 0.0, 0.0, 0.0],
    [-1.5, 0.0, 0.0, -0.5, 0.5, 0.0],
    [-4.0, 0.0, 0.0, -0.5, 4.0, 3.0],
])


@dataclass(frozen=True)
class TypePosterior:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (5,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"invalid type posterior {p}")
        p = p.copy()
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    @classmethod
    def pure(cls, override_type: str) -> "TypePosterior":
        p = np.zeros(5)
        p[OVERRIDE_TYPES.index(override_type)] = 1.0
        return cls(p)

    def __getitem__(self, override_type: str) -> float:
        return float(self.probs[OVERRIDE_TYPES.index(override_type)])

    @property
    def argmax(self) -> str:
        return OVERRIDE_TYPES[int(np.argmax(self.probs))]


@dataclass(frozen=True)
class OverrideSignals:
    proximity: Optional[float]
    class_preserved: Optional[bool]
    clinician_domain_override_rate: float
    cohort_high_kappa_accept_rate: Optional[float]
    structured_reason: Optional[str] = None

    def __post_init__(self):
        for name in ("clinician_domain_override_rate", "cohort_high_kappa_accept_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def vector(self) -> np.ndarray:
        has_alt = self.proximity is not None
        return np.array([
            1.0,
            1.0 / (1.0 + self.proximity) if has_alt else 0.0,
            float(has_alt),
            float(bool(self.class_preserved)),
            self.clinician_domain_override_rate,
            self.cohort_high_kappa_accept_rate if self.cohort_high_kappa_accept_rate is not None else 0.0,
        ])


@dataclass(frozen=True)
class ClassifierParams:
    weights: np.ndarray = DEFAULT_WEIGHTS
    reason_bonus: float = 4.0
    reward_weights: tuple = (0.5, 1.0, 0.0, 0.0, 0.25)
    capability_weights: tuple = (0.5, 1.0, 0.0, 0.0, 1.0)
    high_kappa: float = 0.7

    @classmethod
    def from_config(cls, cfg: ClassifierConfig) -> "ClassifierParams":
        w = DEFAULT_WEIGHTS if cfg.weights is None else np.asarray(cfg.weights, float)
        rw = tuple(cfg.reward_weights.get(t, 0.0) for t in OVERRIDE_TYPES)
        cw = tuple(cfg.capability_weights.get(t, 0.0) for t in OVERRIDE_TYPES)
        return cls(w, cfg.reason_bonus, rw, cw, cfg.high_kappa)

    @property
    def table(self) -> dict[str, tuple[float, float]]:
        return {t: (self.reward_weights[i], self.capability_weights[i]) for i, t in enumerate(OVERRIDE_TYPES)}


# --- history and cohort statistics -------------------------------------------


def clinician_history(records: Sequence[InteractionRecord]) -> dict[tuple[str, str], tuple[int, int]]:
    """(clinician, domain) -> (overrides, interactions)."""
    counts = defaultdict(lambda: [0, 0])
    for r in records:
        c = counts[(r.clinician_id, r.domain_id)]
        c[0] += r.decision.is_override
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in counts.items()}


def cohort_stats(
    records: Sequence[InteractionRecord], kappa: Mapping[tuple[str, str], float], high_kappa: float = 0.7
) -> dict[tuple[Optional[str], str], tuple[int, int]]:
    """(state cluster, recommended action) -> (accepts, interactions) among high-kappa clinicians."""
    counts = defaultdict(lambda: [0, 0])
    for r in records:
        k = kappa.get((r.clinician_id, r.domain_id))
        if k is None or k < high_kappa:
            continue
        c = counts[(r.state.cluster, r.recommendation.action_id)]
        c[0] += r.decision.kind is DecisionKind.ACCEPT
        c[1] += 1
    return {k: (v[0], v[1]) for k, v in counts.items()}


def extract_signals(record: InteractionRecord, history, cohort) -> OverrideSignals:
    if not record.decision.is_override:
        raise ValueError("signals are only defined for overrides")
    alt = record.decision.alternative
    proximity = action_proximity(alt, record.recommendation) if alt is not None else None
    preserved = None
    if alt is not None:
        preserved = bool(alt.action_class) and alt.action_class == record.recommendation.action_class
    n_over, n_all = history.get((record.clinician_id, record.domain_id), (0, 0))
    rate = n_over / n_all if n_all else 0.0
    acc, tot = cohort.get((record.state.cluster, record.recommendation.action_id), (0, 0))
    cohort_rate = acc / tot if tot else None
    return OverrideSignals(proximity, preserved, rate, cohort_rate, record.reason_code)


def classify_override(signals: OverrideSignals, params: ClassifierParams = ClassifierParams()) -> TypePosterior:
    scores = np.asarray(params.weights, float) @ signals.vector()
    target = REASON_TO_TYPE.get(signals.structured_reason)
    if target is not None:
        scores[OVERRIDE_TYPES.index(target)] += params.reason_bonus
    return TypePosterior(softmax(scores))


def class_weights(posterior: TypePosterior, table) -> tuple[float, float]:
    """Posterior-averaged (reward weight, capability weight).

    ``table`` maps type -> (reward, capability) or is a ``ClassifierParams``.
    """
    if isinstance(table, ClassifierParams):
        table = table.table
    rw = np.array([table[t][0] for t in OVERRIDE_TYPES], float)
    cw = np.array([table[t][1] for t in OVERRIDE_TYPES], float)
    return float(posterior.probs @ rw), float(posterior.probs @ cw)


def classify_records(
    records: Sequence[InteractionRecord],
    kappa: Mapping[tuple[str, str], float],
    params: ClassifierParams = ClassifierParams(),
) -> list[Optional[TypePosterior]]:
    """Posterior per record (``None`` for accepts)."""
    history = clinician_history(records)
    cohort = cohort_stats(records, kappa, params.high_kappa)
    out: list[Optional[TypePosterior]] = []
    for r in records:
        out.append(classify_override(extract_signals(r, history, cohort), params) if r.decision.is_override else None)
    return out


def record_class_weights(posteriors: Sequence[Optional[TypePosterior]], params: ClassifierParams) -> list[tuple[float, float]]:
    """Accepts carry full weight in both losses."""
    return [(1.0, 1.0) if p is None else class_weights(p, params) for p in posteriors]
