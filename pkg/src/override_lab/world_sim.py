"""Synthetic clinical world with known ground truth.

Clinician populations, patient panels, recommendation decisions, outcomes
and capability growth are all generated from a seeded ``ScenarioConfig``,
so every quantity the learners estimate has an exact target.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .config import ClusterConfig, ScenarioConfig
from .kernel import (
    CapabilityProfile,
    ClinicalAction,
    ContractContext,
    Decision,
    DecisionKind,
    FeatureMap,
    InteractionRecord,
    Outcome,
    PatientState,
    RewardModel,
    action_proximity,
    beta_of_kappa,
    logistic,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Catalog:
    """Encoded actions, contracts and state clusters of one scenario."""

    actions: tuple[ClinicalAction, ...]
    contracts: tuple[ContractContext, ...]
    clusters: tuple[ClusterConfig, ...]
    default_name: str
    feature_map: FeatureMap

    @classmethod
    def from_config(cls, cfg: ScenarioConfig) -> "Catalog":
        n_a = len(cfg.actions)
        actions = []
        for i, a in enumerate(cfg.actions):
            onehot = np.zeros(n_a)
            onehot[i] = 1.0
            actions.append(
                ClinicalAction(a.name, np.concatenate([onehot, np.asarray(a.attrs, float)]), a.complexity, a.action_class)
            )
        n_c = len(cfg.contracts)
        contracts = []
        for i, c in enumerate(cfg.contracts):
            onehot = np.zeros(n_c)
            onehot[i] = 1.0
            contracts.append(ContractContext(c.name, c.kind, onehot))
        fmap = FeatureMap(len(cfg.clusters), actions[0].features.shape[0], n_c)
        return cls(tuple(actions), tuple(contracts), tuple(cfg.clusters), cfg.default_action, fmap)

    @property
    def action_index(self) -> dict[str, int]:
        return {a.action_id: i for i, a in enumerate(self.actions)}

    @property
    def contract_index(self) -> dict[str, int]:
        return {c.context_id: i for i, c in enumerate(self.contracts)}

    @property
    def cluster_index(self) -> dict[str, int]:
        return {c.name: i for i, c in enumerate(self.clusters)}

    def action(self, name: str) -> ClinicalAction:
        return self.actions[self.action_index[name]]

    def contract(self, name: str) -> ContractContext:
        return self.contracts[self.contract_index[name]]

    @property
    def default(self) -> ClinicalAction:
        return self.action(self.default_name)

    def cluster_center(self, cluster: str) -> np.ndarray:
        v = np.zeros(len(self.clusters))
        v[self.cluster_index[cluster]] = 1.0
        return v

    def prototype_state(self, cluster: str, patient_id: str = "prototype") -> PatientState:
        """Noise-free state at the centre of a cluster."""
        cl = self.clusters[self.cluster_index[cluster]]
        return PatientState(patient_id, cl.domain, self.cluster_center(cluster), 0, cluster)


@dataclass(frozen=True)
class ClinicianArchetype:
    name: str
    exec: dict[str, float]
    align: dict[str, float]
    accept_floor: Optional[float] = None
    default_action_on_low_exec: Optional[str] = None

    def __post_init__(self):
        if (self.accept_floor is not None) != (self.name == "AUTOMATION_BIASED"):
            raise ValueError("accept_floor is present iff the archetype is AUTOMATION_BIASED")


@dataclass(frozen=True)
class Clinician:
    clinician_id: str
    group: str
    archetype: ClinicianArchetype
    proxy_score: Optional[float] = None
    belief_bias: dict[str, float] = field(default_factory=dict)
    private_info: float = 0.0
    scaffolding: float = 0.0
    fixed_accept_rate: Optional[float] = None


@dataclass
class GroundTruth:
    catalog: Catalog
    # R*(cluster, action, contract)
    rewards: np.ndarray
    config: ScenarioConfig
    clinicians: dict[str, Clinician]
    # (clinician, domain) -> kappa at the start of each step, plus the final value
    kappa_trajectories: dict[tuple[str, str], list[float]] = field(default_factory=dict)

    def true_reward(self, cluster: str, action: str, contract: str) -> float:
        cat = self.catalog
        return float(self.rewards[cat.cluster_index[cluster], cat.action_index[action], cat.contract_index[contract]])

    def kappa(self, clinician_id: str, domain: str, t: Optional[int] = None) -> float:
        traj = self.kappa_trajectories[(clinician_id, domain)]
        return traj[0] if t is None else traj[min(t, len(traj) - 1)]

    def true_model(self) -> RewardModel:
        """Reward model whose noise-free cluster-centre rewards equal R*."""
        cat = self.catalog
        rows, target = [], []
        for ci, cl in enumerate(cat.clusters):
            s = cat.cluster_center(cl.name)
            for ai, a in enumerate(cat.actions):
                for ki, c in enumerate(cat.contracts):
                    rows.append(cat.feature_map(s, a.features, c.features))
                    target.append(self.rewards[ci, ai, ki])
        X, y = np.array(rows), np.array(target)
        theta, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = np.max(np.abs(X @ theta - y))
        if resid > 1e-8:
            log.warning("R* is not exactly representable by the feature map (max residual %.3g)", resid)
        return RewardModel(theta, cat.feature_map)

    def to_json(self) -> dict:
        cat = self.catalog
        table = {
            cl.name: {
                a.action_id: {c.context_id: float(self.rewards[i, j, k]) for k, c in enumerate(cat.contracts)}
                for j, a in enumerate(cat.actions)
            }
            for i, cl in enumerate(cat.clusters)
        }
        return {
            "reward_table": table,
            "default_action": cat.default_name,
            "clinicians": {
                cid: {
                    "group": c.group,
                    "archetype": c.archetype.name,
                    "exec": c.archetype.exec,
                    "align": c.archetype.align,
                    "proxy_score": c.proxy_score,
                }
                for cid, c in self.clinicians.items()
            },
            "kappa_trajectories": {
                f"{k}|{d}": [round(v, 12) for v in traj] for (k, d), traj in sorted(self.kappa_trajectories.items())
            },
        }


def reward_table(cfg: ScenarioConfig) -> np.ndarray:
    """R* = per-cluster action value + per-contract action shift."""
    names = cfg.action_names
    R = np.zeros((len(cfg.clusters), len(names), len(cfg.contracts)))
    for i, cl in enumerate(cfg.clusters):
        row = cfg.rewards[cl.name]
        for j, a in enumerate(names):
            for k, c in enumerate(cfg.contracts):
                R[i, j, k] = row.get(a, 0.0) + cfg.contract_shift.get(c.name, {}).get(a, 0.0)
    if not np.all(np.isfinite(R)):
        raise ValueError("reward table must be finite")
    return R


def _per_domain(value, domains) -> dict[str, float]:
    if isinstance(value, dict):
        return {d: float(value.get(d, 1.0)) for d in domains}
    return {d: float(value) for d in domains}


def _rng(cfg: ScenarioConfig, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *stream]))


def make_population(cfg: ScenarioConfig) -> list[tuple[Clinician, CapabilityProfile]]:
    """One (clinician, profile) entry per clinician and domain, at t = 0.

    Scalar capability is exec * align.
    """
    rng = _rng(cfg, 0)
    out = []
    idx = 0
    for g in cfg.population:
        for _ in range(g.count):
            exec_ = _per_domain(g.exec, cfg.domains)
            if g.exec_spread > 0:
                exec_ = {d: float(np.clip(v + rng.uniform(-g.exec_spread, g.exec_spread), 0.0, 1.0)) for d, v in exec_.items()}
            align = _per_domain(g.align, cfg.domains)
            arch = ClinicianArchetype(g.archetype, exec_, align, g.accept_floor, g.escape_action)
            clin = Clinician(
                f"k{idx:03d}", g.name, arch, g.proxy_score, dict(g.belief_bias), g.private_info, g.scaffolding,
                g.fixed_accept_rate,
            )
            for d in cfg.domains:
                out.append((clin, CapabilityProfile(clin.clinician_id, d, 0, exec_[d] * align[d], (exec_[d], align[d]))))
            idx += 1
    if not out:
        raise ValueError("empty population")
    return out


def evolve_capability(profile: CapabilityProfile, scaffolding: float, executed_successfully: bool, eta: float) -> CapabilityProfile:
    """kappa' = kappa + eta * scaffolding * [success] * (1 - kappa)."""
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    if not 0.0 <= scaffolding <= 1.0:
        raise ValueError("scaffolding must lie in [0, 1]")
    k = profile.kappa
    k_new = k + eta * scaffolding * float(bool(executed_successfully)) * (1.0 - k)
    k_new = min(1.0, max(k, k_new))
    parts = profile.ground_truth_parts
    if parts is not None:
        ex, al = parts
        # growth goes to execution skill first; alignment absorbs any excess
        if al > 0 and k_new / al <= 1.0:
            ex = k_new / al
        else:
            ex, al = 1.0, k_new
        parts = (ex, al)
        k_new = ex * al
    return CapabilityProfile(profile.clinician_id, profile.domain_id, profile.time_index + 1, k_new, parts)


@dataclass
class _DecisionDraw:
    decision: Decision
    executed: ClinicalAction
    reason: Optional[str]
    true_type: Optional[str]


def _believed(truth: GroundTruth, clinician: Clinician, cluster_i: int, contract_i: int, latent) -> np.ndarray:
    R = truth.rewards[cluster_i, :, contract_i].copy()
    if clinician.belief_bias:
        idx = truth.catalog.action_index
        for a, b in clinician.belief_bias.items():
            R[idx[a]] += b
    if latent is not None and clinician.private_info:
        R = R + clinician.private_info * latent
    return R


def _draw_decision(clinician, profile, state, rec, contract, truth, rng, latent=None) -> _DecisionDraw:
    cfg = truth.config
    beh = cfg.behavior
    cat = truth.catalog
    idx = cat.action_index
    default = cat.default
    arch = clinician.archetype
    exec_ = profile.ground_truth_parts[0] if profile.ground_truth_parts else profile.kappa
    cluster_i = cat.cluster_index[state.cluster]
    contract_i = cat.contract_index[contract.context_id]
    believed = _believed(truth, clinician, cluster_i, contract_i, latent)

    def reject_to(action_name, reason, ttype):
        alt = cat.action(action_name)
        return _DecisionDraw(Decision(DecisionKind.REJECT, alt), alt, reason, ttype)

    def maybe_reason(code):
        return code if rng.random() < beh.reason_rate else None

    if beh.workflow_rate and rng.random() < beh.workflow_rate:
        return _DecisionDraw(Decision(DecisionKind.REJECT), default, "NO_TIME", "III")

    if arch.name == "AUTOMATION_BIASED":
        accept = rng.random() < arch.accept_floor
    elif clinician.fixed_accept_rate is not None:
        accept = rng.random() < clinician.fixed_accept_rate
        if not accept and arch.default_action_on_low_exec and arch.default_action_on_low_exec != rec.action_id:
            return reject_to(arch.default_action_on_low_exec, maybe_reason("NOT_COMFORTABLE"), "V")
    else:
        escape = arch.default_action_on_low_exec
        if (
            escape is not None
            and escape != rec.action_id
            and exec_ < beh.low_exec_threshold
            and rec.complexity >= beh.complexity_threshold
            and rng.random() < beh.low_exec_override_prob
        ):
            return reject_to(escape, maybe_reason("NOT_COMFORTABLE"), "V")
        kappa = profile.kappa
        margin = believed[idx[rec.action_id]] - believed[idx[default.action_id]]
        p = logistic(beta_of_kappa(kappa, beh.beta0, beh.beta1) * margin)
        accept = rng.random() < p

    if accept:
        return _DecisionDraw(Decision(DecisionKind.ACCEPT), rec, None, None)

    # non-accept: alternative is the believed-best action other than rec
    order = np.argsort(-believed, kind="stable")
    rec_i = idx[rec.action_id]
    if rng.random() < beh.p_modify:
        near = [
            j for j in order
            if j != rec_i and action_proximity(cat.actions[j], rec) <= beh.modify_radius
        ]
        if near:
            alt = cat.actions[near[0]]
            return _DecisionDraw(Decision(DecisionKind.MODIFY, alt), alt, maybe_reason("OTHER"), "II")
    best = next(j for j in order if j != rec_i)
    alt = cat.actions[best]
    if rng.random() < beh.alt_observed_rate:
        return _DecisionDraw(Decision(DecisionKind.REJECT, alt), alt, maybe_reason("OTHER"), "II")
    return _DecisionDraw(Decision(DecisionKind.REJECT), alt, maybe_reason("OTHER"), "II")


def simulate_decision(clinician, profile, state, rec, contract, truth, rng, latent=None) -> Decision:
    """Draw one clinician response to a recommendation."""
    return _draw_decision(clinician, profile, state, rec, contract, truth, rng, latent).decision


def _normalised_reward(truth: GroundTruth, value):
    lo, hi = float(truth.rewards.min()), float(truth.rewards.max())
    span = hi - lo if hi > lo else 1.0
    return (value - lo) / span


def simulate_outcome(state, executed, contract, truth, rng, latent=None, noise=None, observed=None) -> Outcome:
    """quality = clamp01(base + gain * normalised(R* + private term) + noise)."""
    w = truth.config.world
    cat = truth.catalog
    ai = cat.action_index[executed.action_id]
    r = truth.rewards[cat.cluster_index[state.cluster], ai, cat.contract_index[contract.context_id]]
    if latent is not None:
        r = r + latent[ai]
    if noise is None:
        noise = rng.normal(0.0, w.outcome_noise) if w.outcome_noise > 0 else 0.0
    if observed is None:
        rate = w.observability_by_contract.get(contract.context_id, w.observability)
        observed = bool(rng.random() < rate)
    if not observed:
        return Outcome(None, False, w.outcome_lag, False)
    q = float(np.clip(w.outcome_base + w.outcome_gain * _normalised_reward(truth, r) + noise, 0.0, 1.0))
    return Outcome(q, q < w.event_threshold, w.outcome_lag, True)


def expected_record_count(cfg: ScenarioConfig) -> int:
    n_clin = sum(g.count for g in cfg.population)
    return n_clin * cfg.world.horizon * cfg.world.interactions_per_step


Recommender = Callable[[PatientState, ContractContext], ClinicalAction]


def generate_dataset(
    cfg: ScenarioConfig,
    recommender: Optional[Recommender] = None,
    round_index: int = 0,
    initial_kappa: Optional[dict[tuple[str, str], CapabilityProfile]] = None,
) -> tuple[list[InteractionRecord], GroundTruth]:
    """Simulate ``horizon`` steps of interactions for the whole population.

    Outcomes arrive ``outcome_lag`` steps later; records whose follow-up falls
    past the horizon keep ``outcome=None``.
    """
    catalog = Catalog.from_config(cfg)
    population = make_population(cfg)
    clinicians: dict[str, Clinician] = {}
    profiles: dict[tuple[str, str], CapabilityProfile] = {}
    for clin, prof in population:
        clinicians[clin.clinician_id] = clin
        profiles[(clin.clinician_id, prof.domain_id)] = prof
    if initial_kappa:
        profiles.update(initial_kappa)
    truth = GroundTruth(catalog, reward_table(cfg), cfg, clinicians)
    traj = {key: [p.kappa] for key, p in profiles.items()}

    rng = _rng(cfg, 1, round_index)
    w = cfg.world
    beh = cfg.behavior
    n_clusters = len(catalog.clusters)
    n_actions = len(catalog.actions)
    cluster_p = np.array([c.weight for c in catalog.clusters], float)
    cluster_p /= cluster_p.sum()
    contract_p = np.array([c.weight for c in cfg.contracts], float)
    contract_p /= contract_p.sum()
    rec_policy = []
    for cl in catalog.clusters:
        names = list(cl.recommend)
        p = np.array([cl.recommend[n] for n in names], float)
        rec_policy.append(([catalog.action(n) for n in names], p / p.sum()))

    # panels are fixed across rounds so patient ids keep their cluster
    panel_rng = _rng(cfg, 2)
    panels = {}
    for cid in clinicians:
        cl = panel_rng.choice(n_clusters, size=w.panel_size, p=cluster_p)
        ct = panel_rng.choice(len(catalog.contracts), size=w.panel_size, p=contract_p)
        panels[cid] = list(zip(cl.tolist(), ct.tolist()))

    records: list[InteractionRecord] = []
    for t in range(w.horizon):
        for cid, clin in clinicians.items():
            successes: set[str] = set()
            for _ in range(w.interactions_per_step):
                j = int(rng.integers(w.panel_size))
                cl_i, ct_i = panels[cid][j]
                cluster = catalog.clusters[cl_i]
                feats = catalog.cluster_center(cluster.name)
                if w.state_noise > 0:
                    feats = feats + rng.normal(0.0, w.state_noise, n_clusters)
                state = PatientState(f"{cid}-p{j:03d}", cluster.domain, feats, t, cluster.name)
                contract = catalog.contracts[ct_i]
                if recommender is not None:
                    rec = recommender(state, contract)
                else:
                    acts, p = rec_policy[cl_i]
                    rec = acts[int(rng.choice(len(acts), p=p))] if len(acts) > 1 else acts[0]
                latent = rng.normal(0.0, w.private_info_sd, n_actions) if w.private_info_sd > 0 else None
                prof = profiles[(cid, cluster.domain)]
                draw = _draw_decision(clin, prof, state, rec, contract, truth, rng, latent)
                rec_obj = InteractionRecord(
                    state, rec, draw.decision, draw.executed, cid, contract,
                    reason_code=draw.reason, round_index=round_index, true_type=draw.true_type,
                )
                noise = rng.normal(0.0, w.outcome_noise) if w.outcome_noise > 0 else 0.0
                outcome = simulate_outcome(state, draw.executed, contract, truth, rng, latent, noise)
                if t + w.outcome_lag < w.horizon:
                    other = catalog.default if draw.decision.kind is DecisionKind.ACCEPT else rec
                    cf = simulate_outcome(state, other, contract, truth, rng, latent, noise, outcome.observed)
                    rec_obj.attach_outcome(outcome, cf)
                records.append(rec_obj)
                if draw.decision.kind is DecisionKind.ACCEPT and rec.complexity >= beh.complexity_threshold:
                    successes.add(cluster.domain)
            if cfg.evolution.eta > 0 and clin.scaffolding > 0:
                for d in cfg.domains:
                    key = (cid, d)
                    profiles[key] = evolve_capability(profiles[key], clin.scaffolding, d in successes, cfg.evolution.eta)
        for key, p in profiles.items():
            traj[key].append(p.kappa)
    truth.kappa_trajectories = traj
    return records, truth
