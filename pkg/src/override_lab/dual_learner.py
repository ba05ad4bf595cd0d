"""Alternating estimation of the reward model and clinician capability.

M-step: fit theta to the capability-weighted preference likelihood.
E-step: score each clinician by how often the fixed reward model agrees
with their decisions (Beta evidence counting).
The converged reward model is then checked against outcome-labelled pairs
held out of training; a failing model triggers a restart with stronger
capability priors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .classifier import ClassifierParams, classify_records, record_class_weights
from .config import LearnerConfig
from .kernel import (
    ClinicalAction,
    DecisionKind,
    FeatureMap,
    InteractionRecord,
    PairKind,
    PreferencePair,
    RewardModel,
    action_proximity,
    batch_objective,
    beta_of_kappa,
    logistic,
    stack_pairs,
)

log = logging.getLogger(__name__)

Key = tuple[str, str]


@dataclass
class CapabilityEstimate:
    clinician_id: str
    domain_id: str
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("Beta evidence counters must be positive")

    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def evidence(self) -> float:
        return self.alpha + self.beta


@dataclass
class Priors:
    """Beta priors per clinician; clinicians without metadata get ``default``."""

    default: tuple[float, float] = (2.0, 2.0)
    by_clinician: dict[str, tuple[float, float]] = field(default_factory=dict)
    note: str = "diffuse Beta(2, 2)"

    def get(self, clinician_id: str, domain_id: Optional[str] = None) -> tuple[float, float]:
        return self.by_clinician.get(clinician_id, self.default)

    def mean(self, clinician_id: str) -> float:
        a, b = self.get(clinician_id)
        return a / (a + b)

    def strengthened(self, factor: float) -> "Priors":
        scale = lambda ab: (ab[0] * factor, ab[1] * factor)  # noqa: E731
        return Priors(
            scale(self.default),
            {k: scale(v) for k, v in self.by_clinician.items()},
            f"{self.note}; evidence x{factor:g}",
        )

    def describe(self) -> dict:
        return {
            "note": self.note,
            "default": list(self.default),
            "by_clinician": {k: list(v) for k, v in sorted(self.by_clinician.items())},
        }


@dataclass
class AnchorReport:
    concordance: float
    passed: bool
    threshold: float
    n_pairs: int

    def __post_init__(self):
        if not -1.0 <= self.concordance <= 1.0:
            raise ValueError("concordance must lie in [-1, 1]")
        if self.passed != (self.concordance >= self.threshold):
            raise ValueError("pass flag must equal concordance >= threshold")


@dataclass
class TrainState:
    model: RewardModel
    kappa_estimates: dict[Key, CapabilityEstimate]
    iteration: int = 0
    trace: list[dict] = field(default_factory=list)
    converged: bool = False
    oscillation: bool = False
    non_identifiable: dict[str, bool] = field(default_factory=dict)
    identifiability_stats: dict[str, float] = field(default_factory=dict)
    priors: Priors = field(default_factory=Priors)
    anchor: Optional[AnchorReport] = None
    reinits: int = 0

    def kappa_means(self) -> dict[Key, float]:
        return {k: e.mean() for k, e in self.kappa_estimates.items()}


@dataclass(frozen=True)
class OutcomePair:
    """Both arms of one decision with simulator-observed outcome quality."""

    state: object
    contract: object
    preferred: ClinicalAction
    dispreferred: ClinicalAction
    q_preferred: float
    q_dispreferred: float


# --- cold start ----------------------------------------------------------------


def cold_start_priors(metadata: Optional[Mapping[str, Optional[float]]] = None, cfg: LearnerConfig = LearnerConfig()) -> Priors:
    """Beta priors with total evidence alpha0+beta0, shifted by a bounded proxy score.

    mean = clip(0.5 + proxy_gain * (proxy - 0.5), 1 - ceiling, ceiling)
    """
    mass = cfg.prior_alpha + cfg.prior_beta
    default = (cfg.prior_alpha, cfg.prior_beta)
    by = {}
    for cid, proxy in (metadata or {}).items():
        if proxy is None:
            continue
        mean = 0.5 + cfg.proxy_gain * (float(proxy) - 0.5)
        mean = min(cfg.prior_ceiling, max(1.0 - cfg.prior_ceiling, mean))
        by[cid] = (mean * mass, (1.0 - mean) * mass)
    note = f"Beta({cfg.prior_alpha:g}, {cfg.prior_beta:g})"
    if by:
        note += f" shifted by proxy scores (gain {cfg.proxy_gain:g}, mean capped at {cfg.prior_ceiling:g})"
    return Priors(default, by, note)


# --- pairs -----------------------------------------------------------------------


def _kappa_value(v) -> float:
    return v.mean() if isinstance(v, CapabilityEstimate) else float(v)


def build_pairs(
    records: Sequence[InteractionRecord],
    default_action: ClinicalAction,
    kappa: Mapping[Key, object],
    beta0: float,
    beta1: float,
    class_weights: Optional[Sequence[tuple[float, float]]] = None,
    form: str = "linear",
    default_kappa: float = 0.5,
) -> list[PreferencePair]:
    """Accept -> (rec > default); override with captured alternative -> (alt > rec).

    Rejections without a captured alternative, and accepts of the default
    itself, carry no comparison and are skipped.
    """
    if not records:
        raise ValueError("no records")
    pairs = []
    skipped = 0
    for i, r in enumerate(records):
        rw, cw = class_weights[i] if class_weights is not None else (1.0, 1.0)
        k = _kappa_value(kappa.get((r.clinician_id, r.domain_id), default_kappa))
        beta = beta_of_kappa(k, beta0, beta1, form)
        d = r.decision
        if d.kind is DecisionKind.ACCEPT:
            if r.recommendation == default_action:
                skipped += 1
                continue
            pref, disp, kind = r.recommendation, default_action, PairKind.ACCEPT_PAIR
        elif d.alternative is not None and d.alternative != r.recommendation:
            pref, disp = d.alternative, r.recommendation
            kind = PairKind.MODIFY_PAIR if d.kind is DecisionKind.MODIFY else PairKind.REJECT_PAIR
        else:
            skipped += 1
            continue
        label = r.outcome.quality if r.outcome is not None and r.outcome.observed else None
        pairs.append(PreferencePair(
            pref, disp, r.state, r.contract, r.clinician_id, r.domain_id, r.time_index, kind,
            capability_weight=beta, reward_class_weight=rw, capability_class_weight=cw, outcome_label=label,
            proximity=action_proximity(pref, disp) if kind is PairKind.MODIFY_PAIR else None,
        ))
    if skipped:
        log.debug("build_pairs: %d records produced no pair", skipped)
    return pairs


# --- M-step ----------------------------------------------------------------------


@dataclass
class FitResult:
    model: RewardModel
    objective: float
    grad_max: float
    iterations: int
    converged: bool
    history: list[float]


def fit_reward(
    pairs_or_arrays,
    feature_map: FeatureMap,
    theta_init: Optional[np.ndarray] = None,
    ridge: float = 1e-3,
    grad_tol: float = 1e-8,
    max_iter: int = 200,
    method: str = "newton",
) -> FitResult:
    """Maximise sum_i w_i log sigmoid(beta_i theta.dF_i) - ridge/2 |theta|^2.

    Ascent direction is the Newton step (``method="newton"``) or the raw
    gradient (``method="gradient"``); step length by Armijo backtracking.
    Steps that lower the objective by more than rounding error are never taken.
    """
    if isinstance(pairs_or_arrays, tuple):
        dF, beta, weight = pairs_or_arrays
    else:
        dF, beta, weight = stack_pairs(pairs_or_arrays, feature_map)
    if weight.size == 0 or not np.any(weight > 0):
        raise ValueError("M-step needs at least one pair with positive weight")
    theta = np.zeros(feature_map.dim) if theta_init is None else np.array(theta_init, float)
    obj, g, H = batch_objective(theta, dF, beta, weight, ridge)
    if not np.isfinite(obj):
        raise ValueError("non-finite objective")
    history = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < grad_tol:
            it -= 1
            break
        direction = g
        if method == "newton":
            try:
                direction = np.linalg.solve(-H, g)
            except np.linalg.LinAlgError:
                direction = g
            if not np.all(np.isfinite(direction)) or g @ direction <= 0:
                direction = g
        elif method != "gradient":
            raise ValueError(f"unknown method {method!r}")
        slope = float(g @ direction)
        roundoff = 1e-12 * (1.0 + abs(obj))
        step = 1.0
        accepted = False
        while step > 1e-20:
            cand = theta + step * direction
            c_obj, c_g, c_H = batch_objective(cand, dF, beta, weight, ridge)
            if not np.isfinite(c_obj):
                step *= 0.5
                continue
            if c_obj >= obj + 1e-4 * step * slope:
                accepted = True
                break
            # within rounding of the optimum the objective cannot rank steps;
            # fall back to the gradient norm
            if abs(c_obj - obj) <= roundoff and np.max(np.abs(c_g)) < np.max(np.abs(g)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta, obj, g, H = cand, c_obj, c_g, c_H
        history.append(obj)
    gmax = float(np.max(np.abs(g)))
    return FitResult(RewardModel(theta, feature_map), obj, gmax, it, gmax < grad_tol, history)


def m_step(pairs, feature_map: FeatureMap, theta_init=None, ridge=1e-3, grad_tol=1e-8, max_iter=200, method="newton") -> RewardModel:
    return fit_reward(pairs, feature_map, theta_init, ridge, grad_tol, max_iter, method).model


# --- E-step ----------------------------------------------------------------------


@dataclass
class RecordArrays:
    """Stacked encodings of a record set, reused across E-steps."""

    keys: list[Key]
    S: np.ndarray
    C: np.ndarray
    A_rec: np.ndarray
    A_alt: np.ndarray
    A_def: np.ndarray
    kind: np.ndarray  # 0 accept, 1 override with alternative, 2 override without

    @classmethod
    def build(cls, records: Sequence[InteractionRecord], default_action: ClinicalAction) -> "RecordArrays":
        keys = [(r.clinician_id, r.domain_id) for r in records]
        S = np.stack([r.state.features for r in records])
        C = np.stack([r.contract.features for r in records])
        A_rec = np.stack([r.recommendation.features for r in records])
        A_def = np.broadcast_to(default_action.features, A_rec.shape)
        A_alt = np.stack([
            (r.decision.alternative or r.recommendation).features for r in records
        ])
        kind = np.array([
            0 if r.decision.kind is DecisionKind.ACCEPT else (1 if r.decision.alternative is not None else 2)
            for r in records
        ])
        return cls(keys, S, C, A_rec, A_alt, A_def, kind)

    def signed_margins(self, model: RewardModel) -> np.ndarray:
        """Model margin in favour of what the clinician did."""
        fm = model.feature_map
        r_rec = fm.batch(self.S, self.A_rec, self.C) @ model.theta
        r_def = fm.batch(self.S, self.A_def, self.C) @ model.theta
        r_alt = fm.batch(self.S, self.A_alt, self.C) @ model.theta
        return np.where(self.kind == 0, r_rec - r_def, np.where(self.kind == 1, r_alt - r_rec, r_def - r_rec))


def e_step(
    records,
    model: RewardModel,
    priors: Priors,
    default_action: Optional[ClinicalAction] = None,
    class_weights: Optional[Sequence[tuple[float, float]]] = None,
    agreement: str = "hard",
) -> dict[Key, CapabilityEstimate]:
    """Beta-count agreement between each clinician and the fixed model.

    Hard agreement is the sign of the model margin in favour of the observed
    decision; a zero margin counts as agreement for accepts and disagreement
    for overrides. ``agreement="soft"`` adds logistic(margin) instead.
    """
    arrays = records if isinstance(records, RecordArrays) else RecordArrays.build(records, default_action)
    m = arrays.signed_margins(model)
    if agreement == "hard":
        agree = np.where(arrays.kind == 0, m >= 0, m > 0).astype(float)
    elif agreement == "soft":
        agree = logistic(m)
    else:
        raise ValueError(f"unknown agreement mode {agreement!r}")
    w = np.ones(len(arrays.keys)) if class_weights is None else np.array([c[1] for c in class_weights], float)
    a_inc: dict[Key, float] = {}
    b_inc: dict[Key, float] = {}
    for key, ag, wi in zip(arrays.keys, agree, w):
        a_inc[key] = a_inc.get(key, 0.0) + wi * ag
        b_inc[key] = b_inc.get(key, 0.0) + wi * (1.0 - ag)
    out = {}
    for key in sorted(a_inc):
        a0, b0 = priors.get(*key)
        out[key] = CapabilityEstimate(key[0], key[1], a0 + a_inc[key], b0 + b_inc[key])
    return out


def identifiability(estimates: Mapping[Key, CapabilityEstimate], min_sd: float) -> tuple[dict[str, bool], dict[str, float]]:
    """Flag domains whose between-clinician spread of kappa-hat is no larger than sampling noise.

    Between-clinician sd = sqrt(max(0, var(means) - mean(posterior variances))).
    """
    by_domain: dict[str, list[CapabilityEstimate]] = {}
    for (k, d), e in estimates.items():
        by_domain.setdefault(d, []).append(e)
    flags, sds = {}, {}
    for d, ests in sorted(by_domain.items()):
        means = np.array([e.mean() for e in ests])
        post_var = np.array([e.mean() * (1 - e.mean()) / (e.evidence + 1) for e in ests])
        between = float(np.var(means) - np.mean(post_var)) if len(ests) > 1 else 0.0
        sd = float(np.sqrt(max(0.0, between)))
        sds[d] = sd
        flags[d] = sd < min_sd
    return flags, sds


# --- alternation ---------------------------------------------------------------------


def _cold_estimates(keys, priors: Priors) -> dict[Key, CapabilityEstimate]:
    return {k: CapabilityEstimate(k[0], k[1], *priors.get(*k)) for k in sorted(set(keys))}


def alternate(
    records: Sequence[InteractionRecord],
    cfg: LearnerConfig,
    default_action: ClinicalAction,
    feature_map: FeatureMap,
    priors: Optional[Priors] = None,
    classifier: Optional[ClassifierParams] = None,
    rounds: Optional[int] = None,
) -> TrainState:
    """E/M alternation from a cold start.

    The first M-step uses prior-mean capabilities. The classifier, when
    given, is frozen within each inner run and refreshed between runs.
    """
    priors = priors or Priors((cfg.prior_alpha, cfg.prior_beta))
    max_rounds = cfg.max_rounds if rounds is None else rounds
    arrays = RecordArrays.build(records, default_action)
    estimates = _cold_estimates(arrays.keys, priors)
    state = TrainState(RewardModel.zeros(feature_map), estimates, priors=priors)
    if max_rounds <= 0:
        state.non_identifiable, state.identifiability_stats = identifiability(estimates, cfg.identifiability_min_sd)
        return state

    use_cls = classifier is not None and cfg.use_classifier
    outer = max(1, cfg.classifier_outer_rounds) if use_cls else 1
    theta = np.zeros(feature_map.dim)
    kappa = {k: e.mean() for k, e in estimates.items()}
    cw = None
    history: list[float] = []
    for outer_i in range(outer):
        if use_cls:
            posteriors = classify_records(records, kappa, classifier)
            new_cw = record_class_weights(posteriors, classifier)
            if cw is not None and new_cw == cw:
                break
            cw = new_cw
        for _ in range(max_rounds):
            pairs = build_pairs(records, default_action, kappa, cfg.beta0, cfg.beta1, cw, cfg.beta_form)
            fit = fit_reward(pairs, feature_map, theta, cfg.ridge, cfg.grad_tol, cfg.max_newton_iter)
            new_est = e_step(arrays, fit.model, priors, class_weights=cw, agreement=cfg.agreement)
            new_kappa = {k: e.mean() for k, e in new_est.items()}
            d_theta = float(np.max(np.abs(fit.model.theta - theta)))
            d_kappa = max(abs(new_kappa[k] - kappa.get(k, 0.0)) for k in new_kappa)
            state.iteration += 1
            state.trace.append({
                "iteration": state.iteration,
                "outer": outer_i,
                "loglik": fit.objective,
                "theta_delta": d_theta,
                "kappa_delta": d_kappa,
                "event": "",
            })
            theta, kappa = fit.model.theta, new_kappa
            state.model, state.kappa_estimates = fit.model, new_est
            history.append(max(d_theta / cfg.tol_theta, d_kappa / cfg.tol_kappa))
            if d_kappa < cfg.tol_kappa and d_theta < cfg.tol_theta:
                state.converged = True
                break
            if len(history) >= 4 and all(history[-i] > history[-i - 1] for i in range(1, 4)):
                state.oscillation = True
                state.trace[-1]["event"] = "oscillation"
                log.warning("alternation deltas grew for 3 consecutive rounds; stopping")
                break
        if state.oscillation:
            break
    state.non_identifiable, state.identifiability_stats = identifiability(state.kappa_estimates, cfg.identifiability_min_sd)
    return state


# --- outcome anchor ------------------------------------------------------------------


def outcome_pairs(records: Sequence[InteractionRecord], default_action: ClinicalAction) -> list[OutcomePair]:
    """Executed arm vs the arm it displaced (default for accepts, the
    recommendation for overrides), where both outcomes were observed."""
    out = []
    for r in records:
        o, cf = r.outcome, r.counterfactual
        if o is None or cf is None or not o.observed or not cf.observed:
            continue
        other = default_action if r.decision.kind is DecisionKind.ACCEPT else r.recommendation
        if other == r.executed:
            continue
        out.append(OutcomePair(r.state, r.contract, r.executed, other, o.quality, cf.quality))
    return out


def split_heldout(records: Sequence[InteractionRecord], fraction: float, seed: int):
    """Deterministic (train, heldout) split by clinician-independent shuffling."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    mask = rng.random(len(records)) < fraction
    train = [r for r, m in zip(records, mask) if not m]
    held = [r for r, m in zip(records, mask) if m]
    return train, held


def anchor_concordance(model: RewardModel, pairs: Sequence[OutcomePair]) -> float:
    """Spearman correlation between model margins and outcome-quality differences."""
    margins = np.array([model.margin(p.state, p.preferred, p.dispreferred, p.contract) for p in pairs])
    dq = np.array([p.q_preferred - p.q_dispreferred for p in pairs])
    # values equal up to float noise should rank as ties
    margins, dq = np.round(margins, 10), np.round(dq, 10)
    if np.ptp(margins) == 0 or np.ptp(dq) == 0:
        return 0.0
    rho = stats.spearmanr(margins, dq).statistic
    return 0.0 if not np.isfinite(rho) else float(np.clip(rho, -1.0, 1.0))


def anchor_validate(model_or_state, heldout: Sequence[OutcomePair], threshold: float = 0.1, min_pairs: int = 30) -> AnchorReport:
    model = model_or_state.model if isinstance(model_or_state, TrainState) else model_or_state
    if len(heldout) < min_pairs:
        raise ValueError(f"anchor validation needs at least {min_pairs} held-out pairs, got {len(heldout)}")
    c = anchor_concordance(model, heldout)
    return AnchorReport(c, c >= threshold, threshold, len(heldout))


def train_with_anchor(
    records: Sequence[InteractionRecord],
    heldout: Sequence[OutcomePair],
    cfg: LearnerConfig,
    default_action: ClinicalAction,
    feature_map: FeatureMap,
    priors: Optional[Priors] = None,
    classifier: Optional[ClassifierParams] = None,
    rounds: Optional[int] = None,
) -> TrainState:
    """Alternate, validate against outcomes, and restart with priors of
    ``reinit_factor`` times the evidence while the anchor fails."""
    priors = priors or Priors((cfg.prior_alpha, cfg.prior_beta))
    trace: list[dict] = []
    state = None
    for attempt in range(cfg.max_reinits + 1):
        state = alternate(records, cfg, default_action, feature_map, priors, classifier, rounds)
        for row in state.trace:
            row["attempt"] = attempt
        trace.extend(state.trace)
        if rounds == 0 and not state.trace:
            break
        state.anchor = anchor_validate(state, heldout, cfg.anchor_threshold, cfg.anchor_min_pairs)
        state.reinits = attempt
        if state.anchor.passed or attempt == cfg.max_reinits:
            break
        log.info("anchor concordance %.3f below %.3f; reinitialising", state.anchor.concordance, cfg.anchor_threshold)
        trace.append({
            "iteration": len(trace) + 1, "outer": -1, "loglik": float("nan"), "theta_delta": float("nan"),
            "kappa_delta": float("nan"), "event": f"reinit x{cfg.reinit_factor:g}", "attempt": attempt,
        })
        priors = priors.strengthened(cfg.reinit_factor)
    state.trace = trace
    return state


def fit_with_kappa(
    records: Sequence[InteractionRecord],
    default_action: ClinicalAction,
    feature_map: FeatureMap,
    kappa: Mapping[Key, float],
    beta0: float,
    beta1: float,
    ridge: float = 1e-3,
    class_weights=None,
    form: str = "linear",
) -> FitResult:
    """Single M-step with fixed capabilities (e.g. ground truth)."""
    pairs = build_pairs(records, default_action, kappa, beta0, beta1, class_weights, form)
    return fit_reward(pairs, feature_map, None, ridge)


def scheduled_training(
    records: Sequence[InteractionRecord],
    cfg: LearnerConfig,
    default_action: ClinicalAction,
    feature_map: FeatureMap,
    priors: Optional[Priors] = None,
    kappa_every: int = 1,
    reward_every: int = 4,
    joint_every: int = 13,
) -> list[dict]:
    """Replay simulated time: capability refresh every ``kappa_every`` steps,
    reward refit every ``reward_every`` steps and full alternation every
    ``joint_every`` steps, each on the records seen so far."""
    priors = priors or Priors((cfg.prior_alpha, cfg.prior_beta))
    if not records:
        return []
    horizon = max(r.time_index for r in records) + 1
    model = RewardModel.zeros(feature_map)
    kappa: dict[Key, float] = {}
    snapshots = []
    for t in range(horizon):
        seen = [r for r in records if r.time_index <= t]
        if not seen:
            continue
        step = t + 1
        action = None
        if step % joint_every == 0:
            st = alternate(seen, cfg, default_action, feature_map, priors)
            model, kappa, action = st.model, st.kappa_means(), "joint"
        elif step % reward_every == 0:
            pairs = build_pairs(seen, default_action, kappa, cfg.beta0, cfg.beta1, None, cfg.beta_form, priors.mean(""))
            if any(p.reward_class_weight > 0 for p in pairs):
                model, action = m_step(pairs, feature_map, model.theta, cfg.ridge, cfg.grad_tol), "reward"
        elif step % kappa_every == 0:
            kappa = {k: e.mean() for k, e in e_step(seen, model, priors, default_action).items()}
            action = "kappa"
        if action:
            snapshots.append({"t": t, "update": action, "theta": model.theta.copy(), "kappa": dict(kappa)})
    return snapshots
