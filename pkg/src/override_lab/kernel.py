"""Shared domain types and the capability-conditioned preference model.

Everything here is immutable after construction (except that an
``InteractionRecord`` may receive its outcome exactly once) and every
function is pure.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit


class DecisionKind(str, enum.Enum):
    ACCEPT = "accept"
    MODIFY = "modify"
    REJECT = "reject"


class ContractKind(str, enum.Enum):
    FFS = "FFS"
    OUTCOME_BASED = "OUTCOME_BASED"
    CUSTOM = "CUSTOM"


class PairKind(str, enum.Enum):
    ACCEPT_PAIR = "accept_pair"
    REJECT_PAIR = "reject_pair"
    MODIFY_PAIR = "modify_pair"


def _finite_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class PatientState:
    patient_id: str
    domain_id: str
    features: np.ndarray
    time_index: int = 0
    # recommendation-firing cluster; observable, used for cohort statistics
    cluster: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "features", _finite_vector(self.features, "state features"))


@dataclass(frozen=True)
class ClinicalAction:
    action_id: str
    features: np.ndarray
    complexity: float = 0.0
    action_class: str = ""

    def __post_init__(self):
        object.__setattr__(self, "features", _finite_vector(self.features, "action features"))
        if self.complexity < 0:
            raise ValueError("complexity must be >= 0")

    def __eq__(self, other):
        return isinstance(other, ClinicalAction) and other.action_id == self.action_id

    def __hash__(self):
        return hash(self.action_id)


@dataclass(frozen=True)
class ContractContext:
    context_id: str
    kind: ContractKind
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kind", ContractKind(self.kind))
        object.__setattr__(self, "features", _finite_vector(self.features, "contract features"))


@dataclass(frozen=True)
class Decision:
    kind: DecisionKind
    alternative: Optional[ClinicalAction] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DecisionKind(self.kind))
        if self.kind is DecisionKind.MODIFY and self.alternative is None:
            raise ValueError("MODIFY requires an alternative action")
        if self.kind is DecisionKind.ACCEPT and self.alternative is not None:
            raise ValueError("ACCEPT never carries an alternative")

    @property
    def is_override(self) -> bool:
        return self.kind is not DecisionKind.ACCEPT


@dataclass(frozen=True)
class Outcome:
    quality: Optional[float]
    event_flag: bool
    lag: int
    observed: bool

    def __post_init__(self):
        if self.observed:
            if self.quality is None or not 0.0 <= self.quality <= 1.0:
                raise ValueError("observed outcome needs quality in [0, 1]")
        elif self.quality is not None:
            raise ValueError("quality present only when observed")


@dataclass(slots=True, eq=False)
class InteractionRecord:
    state: PatientState
    recommendation: ClinicalAction
    decision: Decision
    executed: ClinicalAction
    clinician_id: str
    contract: ContractContext
    outcome: Optional[Outcome] = None
    reason_code: Optional[str] = None
    round_index: int = 0
    # simulator-only ground truth, never read by the learners
    counterfactual: Optional[Outcome] = None
    true_type: Optional[str] = None

    def __post_init__(self):
        if self.decision.kind is DecisionKind.ACCEPT and self.executed != self.recommendation:
            raise ValueError("accepted record must execute the recommendation")

    @property
    def domain_id(self) -> str:
        return self.state.domain_id

    @property
    def time_index(self) -> int:
        return self.state.time_index

    def attach_outcome(self, outcome: Outcome, counterfactual: Optional[Outcome] = None) -> None:
        if self.outcome is not None:
            raise ValueError("outcome already set; outcomes are append-only")
        self.outcome = outcome
        if counterfactual is not None:
            self.counterfactual = counterfactual


@dataclass(frozen=True)
class CapabilityProfile:
    clinician_id: str
    domain_id: str
    time_index: int
    kappa: float
    ground_truth_parts: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa {self.kappa} outside [0, 1]")
        if self.ground_truth_parts is not None:
            ex, al = self.ground_truth_parts
            if not (0.0 <= ex <= 1.0 and 0.0 <= al <= 1.0):
                raise ValueError("capability parts must lie in [0, 1]")
            if abs(ex * al - self.kappa) > 1e-9:
                raise ValueError("kappa must equal exec * align")


@dataclass(frozen=True)
class FeatureMap:
    """f(s, a, c) = [phi(s) (x) psi(a), psi(a), gamma(c) (x) psi(a)].

    Linear in the parameters, so the weighted likelihood stays concave.
    """

    state_dim: int
    action_dim: int
    contract_dim: int

    @property
    def dim(self) -> int:
        return (self.state_dim + 1 + self.contract_dim) * self.action_dim

    def __call__(self, s: np.ndarray, a: np.ndarray, c: np.ndarray) -> np.ndarray:
        s, a, c = np.asarray(s, float), np.asarray(a, float), np.asarray(c, float)
        if s.shape != (self.state_dim,) or a.shape != (self.action_dim,) or c.shape != (self.contract_dim,):
            raise ValueError(
                f"feature dimension mismatch: got {s.shape}, {a.shape}, {c.shape}; "
                f"expected ({self.state_dim},), ({self.action_dim},), ({self.contract_dim},)"
            )
        return np.concatenate([np.outer(s, a).ravel(), a, np.outer(c, a).ravel()])

    def batch(self, S: np.ndarray, A: np.ndarray, C: np.ndarray) -> np.ndarray:
        """Row-wise feature map for stacked (n, D_s), (n, D_a), (n, D_c) inputs."""
        S, A, C = np.atleast_2d(S), np.atleast_2d(A), np.atleast_2d(C)
        if S.shape[1] != self.state_dim or A.shape[1] != self.action_dim or C.shape[1] != self.contract_dim:
            raise ValueError("feature dimension mismatch in batch")
        n = A.shape[0]
        sa = (S[:, :, None] * A[:, None, :]).reshape(n, -1)
        ca = (C[:, :, None] * A[:, None, :]).reshape(n, -1)
        return np.concatenate([sa, A, ca], axis=1)


@dataclass(frozen=True)
class RewardModel:
    theta: np.ndarray
    feature_map: FeatureMap

    def __post_init__(self):
        theta = _finite_vector(self.theta, "theta")
        if theta.shape[0] != self.feature_map.dim:
            raise ValueError(f"theta has length {theta.shape[0]}, feature map needs {self.feature_map.dim}")
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, feature_map: FeatureMap) -> "RewardModel":
        return cls(np.zeros(feature_map.dim), feature_map)

    def features(self, state: PatientState, action: ClinicalAction, contract: ContractContext) -> np.ndarray:
        return self.feature_map(state.features, action.features, contract.features)

    def reward(self, state: PatientState, action: ClinicalAction, contract: ContractContext) -> float:
        return float(self.features(state, action, contract) @ self.theta)

    def margin(self, state, better: ClinicalAction, worse: ClinicalAction, contract) -> float:
        return self.reward(state, better, contract) - self.reward(state, worse, contract)


@dataclass
class PreferencePair:
    preferred: ClinicalAction
    dispreferred: ClinicalAction
    state: PatientState
    contract: ContractContext
    clinician_id: str
    domain_id: str
    time_index: int
    kind: PairKind
    capability_weight: float = 1.0
    reward_class_weight: float = 1.0
    capability_class_weight: float = 1.0
    outcome_label: Optional[float] = None
    proximity: Optional[float] = None

    def __post_init__(self):
        self.kind = PairKind(self.kind)
        if self.capability_weight < 0 or self.reward_class_weight < 0 or self.capability_class_weight < 0:
            raise ValueError("pair weights must be non-negative")
        if self.kind is PairKind.MODIFY_PAIR:
            if self.preferred == self.dispreferred:
                raise ValueError("modify pair needs distinct actions")
            if self.proximity is None:
                self.proximity = action_proximity(self.preferred, self.dispreferred)
            if not np.isfinite(self.proximity):
                raise ValueError("modify pair proximity must be finite")

    def feature_difference(self, feature_map: FeatureMap) -> np.ndarray:
        s, c = self.state.features, self.contract.features
        return feature_map(s, self.preferred.features, c) - feature_map(s, self.dispreferred.features, c)


# --- preference mathematics -------------------------------------------------


def logistic(x):
    """1 / (1 + exp(-x)), evaluated without overflow."""
    return expit(x)


def beta_of_kappa(kappa, beta0: float, beta1: float, form: str = "linear"):
    """Capability-dependent inverse temperature.

    ``form="sigmoid"`` gives the bounded variant beta0 + beta1 * logistic(kappa).
    """
    k = np.asarray(kappa, dtype=float)
    if np.any((k < 0.0) | (k > 1.0)) or not np.all(np.isfinite(k)):
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    if not beta0 > 0:
        raise ValueError("beta0 must be > 0")
    if beta1 < 0:
        raise ValueError("beta1 must be >= 0")
    if form == "linear":
        out = beta0 + beta1 * k
    elif form == "sigmoid":
        out = beta0 + beta1 * expit(k)
    else:
        raise ValueError(f"unknown beta form {form!r}")
    return float(out) if out.ndim == 0 else out


def p_accept(state, rec, default, contract, kappa, model: RewardModel, beta0, beta1, form="linear") -> float:
    margin = model.margin(state, rec, default, contract)
    return float(logistic(beta_of_kappa(kappa, beta0, beta1, form) * margin))


def p_prefer(alt, rec, state, contract, kappa, model: RewardModel, beta0, beta1, form="linear") -> float:
    if alt == rec:
        raise ValueError("p_prefer needs two distinct actions")
    margin = model.margin(state, alt, rec, contract)
    return float(logistic(beta_of_kappa(kappa, beta0, beta1, form) * margin))


def pair_loglik_and_grad(pair: PreferencePair, model: RewardModel, kappa, beta0, beta1, form="linear"):
    """Weighted log-likelihood of one pair and its exact gradient in theta.

    weight = beta(kappa) * reward_class_weight, and beta(kappa) is also the
    temperature inside the logistic.
    """
    beta = beta_of_kappa(kappa, beta0, beta1, form)
    weight = beta * pair.reward_class_weight
    if not np.isfinite(weight):
        raise ValueError("pair weight must be finite")
    if weight == 0.0:
        return 0.0, np.zeros_like(model.theta)
    df = pair.feature_difference(model.feature_map)
    z = beta * float(df @ model.theta)
    loglik = weight * float(log_expit(z))
    grad = weight * beta * float(expit(-z)) * df
    return loglik, grad


def action_proximity(a: ClinicalAction, b: ClinicalAction) -> float:
    """Euclidean distance between action encodings."""
    return float(np.linalg.norm(a.features - b.features))


def batch_objective(theta: np.ndarray, dF: np.ndarray, beta: np.ndarray, weight: np.ndarray, ridge: float = 0.0):
    """Vectorised sum of weight * log sigmoid(beta * theta . dF) - ridge/2 |theta|^2.

    Returns (objective, gradient, hessian).
    """
    z = beta * (dF @ theta)
    obj = float(weight @ log_expit(z)) - 0.5 * ridge * float(theta @ theta)
    s_neg = expit(-z)
    coef = weight * beta * s_neg
    grad = dF.T @ coef - ridge * theta
    curv = weight * beta**2 * s_neg * (1.0 - s_neg)
    hess = -(dF.T * curv) @ dF - ridge * np.eye(theta.shape[0])
    return obj, grad, hess


def stack_pairs(pairs: Sequence[PreferencePair], feature_map: FeatureMap):
    """Pairs -> (dF, beta, weight) arrays for the batch objective."""
    if not pairs:
        d = feature_map.dim
        return np.zeros((0, d)), np.zeros(0), np.zeros(0)
    S = np.stack([p.state.features for p in pairs])
    C = np.stack([p.contract.features for p in pairs])
    Ap = np.stack([p.preferred.features for p in pairs])
    Ad = np.stack([p.dispreferred.features for p in pairs])
    dF = feature_map.batch(S, Ap, C) - feature_map.batch(S, Ad, C)
    beta = np.array([p.capability_weight for p in pairs], dtype=float)
    weight = beta * np.array([p.reward_class_weight for p in pairs], dtype=float)
    return dF, beta, weight


__all__ = [
    "PROB_EPS",
    "DecisionKind",
    "ContractKind",
    "PairKind",
    "PatientState",
    "ClinicalAction",
    "ContractContext",
    "Decision",
    "Outcome",
    "InteractionRecord",
    "CapabilityProfile",
    "FeatureMap",
    "RewardModel",
    "PreferencePair",
    "logistic",
    "beta_of_kappa",
    "p_accept",
    "p_prefer",
    "pair_loglik_and_grad",
    "action_proximity",
    "batch_objective",
    "stack_pairs",
]
