"""Canonical scenario configurations.

Each builder returns a validated ``ScenarioConfig``; ``dump`` of the result
is the human-editable YAML form used by the CLI.
"""

from __future__ import annotations

from dataclasses import replace

from .config import (
    ActionConfig,
    BehaviorConfig,
    ClusterConfig,
    ContractConfig,
    EvolutionConfig,
    GroupConfig,
    LearnerConfig,
    MonitorConfig,
    ScenarioConfig,
    WorldConfig,
)

# HF action catalog; referral is the status-quo pathway and doubles as the default.
HF_ACTIONS = [
    ActionConfig("referral", attrs=[0.0, 0.0], complexity=0.1, action_class="referral", default=True),
    ActionConfig("sglt2i", attrs=[1.0, 0.5], complexity=0.9, action_class="gdmt", first_line=["hf_stage_c"]),
    ActionConfig("sglt2i_low_dose", attrs=[1.0, 0.25], complexity=0.8, action_class="gdmt"),
    ActionConfig("bb_titrate", attrs=[1.0, 0.0], complexity=0.3, action_class="gdmt", first_line=["hf_titration"]),
    ActionConfig("diuretic_adjust", attrs=[0.0, 0.5], complexity=0.2, action_class="diuretic",
                 first_line=["hf_congestion"]),
]



def _hf_actions(clusters: list[str]) -> list[ActionConfig]:
    """HF catalog with first-line lists restricted to the clusters present."""
    return [replace(a, first_line=[c for c in a.first_line if c in clusters]) for a in HF_ACTIONS]


HF_CLUSTERS = [
    ClusterConfig("hf_stage_c", "hf", 0.3, {"sglt2i": 1.0}),
    ClusterConfig("hf_titration", "hf", 0.35, {"bb_titrate": 1.0}),
    ClusterConfig("hf_congestion", "hf", 0.35, {"diuretic_adjust": 1.0}),
]

# Mixed policy: every likely override target is also recommended sometimes,
# so each action pair is observed in both directions.
MIXED_HF_CLUSTERS = [
    ClusterConfig("hf_stage_c", "hf", 0.3, {"sglt2i": 0.6, "sglt2i_low_dose": 0.4}),
    ClusterConfig("hf_titration", "hf", 0.35, {"bb_titrate": 0.6, "sglt2i": 0.4}),
    ClusterConfig("hf_congestion", "hf", 0.35, {"diuretic_adjust": 0.6, "sglt2i": 0.4}),
]

HF_REWARDS = {
    "hf_stage_c": {"referral": 0.0, "sglt2i": 1.0, "sglt2i_low_dose": 0.8, "bb_titrate": 0.3, "diuretic_adjust": 0.1},
    "hf_titration": {"referral": 0.0, "sglt2i": 0.3, "sglt2i_low_dose": 0.3, "bb_titrate": 0.7, "diuretic_adjust": 0.2},
    "hf_congestion": {"referral": 0.0, "sglt2i": 0.2, "sglt2i_low_dose": 0.2, "bb_titrate": 0.1, "diuretic_adjust": 0.7},
}


def fig1(seed: int = 0) -> ScenarioConfig:
    """50 clinicians: 35 with kappa = 0.2 who escape SGLT2i initiation to
    referral, 15 experts; true reward favours SGLT2i."""
    return ScenarioConfig(
        seed=seed,
        name="fig1",
        world=WorldConfig(horizon=4, interactions_per_step=25, outcome_lag=1),
        domains=["hf"],
        clusters=list(HF_CLUSTERS),
        actions=list(HF_ACTIONS),
        contracts=[ContractConfig("vbc", "OUTCOME_BASED")],
        rewards=dict(HF_REWARDS),
        behavior=BehaviorConfig(),
        population=[
            GroupConfig("low_kappa_np", "HESITANT", 35, exec=0.2, align=1.0, proxy_score=0.0, escape_action="referral"),
            GroupConfig("experienced_internist", "EXPERT", 15, exec=0.95, align=0.95, proxy_score=1.0,
                        escape_action="referral"),
        ],
    ).validate()


def heterogeneous(seed: int = 0) -> ScenarioConfig:
    """Capability spread evenly over the unit interval; no escape behaviour."""
    groups = [
        GroupConfig(f"tier_{i}", "EXPERT", 6, exec=e, align=1.0, exec_spread=0.05)
        for i, e in enumerate([0.1, 0.3, 0.5, 0.7, 0.9])
    ]
    return ScenarioConfig(
        seed=seed,
        name="heterogeneous",
        world=WorldConfig(horizon=10, interactions_per_step=25),
        domains=["hf"],
        clusters=MIXED_HF_CLUSTERS,
        actions=list(HF_ACTIONS),
        rewards=dict(HF_REWARDS),
        behavior=BehaviorConfig(beta0=0.1, beta1=5.0),
        population=groups,
    ).validate()


def homogeneous(seed: int = 0) -> ScenarioConfig:
    """Identical clinicians: the capability model has nothing to identify."""
    cfg = heterogeneous(seed)
    return cfg.replace(
        name="identifiability",
        population=[{"name": "uniform", "archetype": "EXPERT", "count": 30, "exec": 0.6, "align": 1.0}],
    )


def flywheel(seed: int = 0) -> ScenarioConfig:
    """Scaffolded hesitant clinicians gain capability over four quarters."""
    return ScenarioConfig(
        seed=seed,
        name="flywheel",
        world=WorldConfig(horizon=52, interactions_per_step=10, outcome_lag=4),
        domains=["hf"],
        clusters=[ClusterConfig("hf_stage_c", "hf", 1.0, {"sglt2i": 1.0})],
        actions=_hf_actions(["hf_stage_c"]),
        rewards={"hf_stage_c": HF_REWARDS["hf_stage_c"]},
        behavior=BehaviorConfig(),
        population=[
            GroupConfig("expert", "EXPERT", 10, exec=0.9, align=1.0, proxy_score=1.0, escape_action="referral"),
            GroupConfig("hesitant", "HESITANT", 20, exec=0.25, align=1.0, exec_spread=0.1, proxy_score=0.0,
                        escape_action="referral", scaffolding=1.0),
        ],
        evolution=EvolutionConfig(eta=0.03),
        monitors=MonitorConfig(window=13),
    ).validate()


def tiers(seed: int = 0) -> ScenarioConfig:
    """Three experience tiers with scripted override rates 15% / 55% / 80%."""
    return ScenarioConfig(
        seed=seed,
        name="tiers",
        world=WorldConfig(horizon=25, interactions_per_step=20),
        domains=["hf"],
        clusters=[ClusterConfig("hf_stage_c", "hf", 1.0, {"sglt2i": 1.0})],
        actions=_hf_actions(["hf_stage_c"]),
        rewards={"hf_stage_c": HF_REWARDS["hf_stage_c"]},
        population=[
            GroupConfig("experienced_internist", "CUSTOM", 10, exec=0.9, fixed_accept_rate=0.85, escape_action="referral"),
            GroupConfig("mid_career_np", "CUSTOM", 10, exec=0.55, fixed_accept_rate=0.45, escape_action="referral"),
            GroupConfig("early_career_np", "CUSTOM", 10, exec=0.2, fixed_accept_rate=0.20, escape_action="referral"),
        ],
    ).validate()


def amplification(seed: int = 0) -> ScenarioConfig:
    """High-kappa clinicians share therapeutic inertia against intensification."""
    return ScenarioConfig(
        seed=seed,
        name="amplification",
        world=WorldConfig(horizon=6, interactions_per_step=25, outcome_lag=1, outcome_noise=0.05),
        domains=["htn"],
        clusters=[ClusterConfig("htn_uncontrolled", "htn", 1.0, {"intensify": 0.6, "add_agent": 0.4})],
        actions=[
            ActionConfig("no_change", attrs=[0.0], complexity=0.0, action_class="none", default=True),
            ActionConfig("intensify", attrs=[1.0], complexity=0.3, action_class="antihypertensive",
                         first_line=["htn_uncontrolled"]),
            ActionConfig("add_agent", attrs=[0.5], complexity=0.4, action_class="antihypertensive"),
        ],
        rewards={"htn_uncontrolled": {"no_change": 0.0, "intensify": 1.0, "add_agent": 0.6}},
        population=[
            GroupConfig("inertial_expert", "EXPERT", 15, exec=0.95, align=0.95, proxy_score=1.0,
                        belief_bias={"intensify": -1.5, "add_agent": -1.2}),
            GroupConfig("junior", "HESITANT", 35, exec=0.3, align=1.0, proxy_score=0.0),
        ],
        # isolates capability weighting: no override-type down-weighting
        learner=LearnerConfig(use_classifier=False),
    ).validate()


def stacking(seed: int = 0) -> ScenarioConfig:
    """Clinicians trained to under-refer; referral is first-line for a small subgroup."""
    return ScenarioConfig(
        seed=seed,
        name="stacking",
        world=WorldConfig(horizon=4, interactions_per_step=25, outcome_lag=1),
        domains=["hf"],
        clusters=[
            ClusterConfig("hf_general", "hf", 0.85, {"sglt2i": 1.0}),
            ClusterConfig("hf_needs_referral", "hf", 0.15, {"cardiology_referral": 1.0}),
        ],
        actions=[
            ActionConfig("usual_care", attrs=[0.0], complexity=0.0, action_class="none", default=True),
            ActionConfig("sglt2i", attrs=[1.0], complexity=0.5, action_class="gdmt", first_line=["hf_general"]),
            ActionConfig("cardiology_referral", attrs=[0.0], complexity=0.2, action_class="referral",
                         first_line=["hf_needs_referral"]),
        ],
        rewards={
            "hf_general": {"usual_care": 0.0, "sglt2i": 1.0, "cardiology_referral": 0.2},
            "hf_needs_referral": {"usual_care": 0.2, "sglt2i": 0.3, "cardiology_referral": 1.0},
        },
        population=[
            GroupConfig("vbc_trained", "EXPERT", 30, exec=0.9, align=1.0, proxy_score=1.0,
                        belief_bias={"cardiology_referral": -1.5}),
        ],
        monitors=MonitorConfig(surfacing_floor=0.05, probe_rate=0.01),
    ).validate()


def type_concordance(seed: int = 0) -> ScenarioConfig:
    """Experts with private patient information (judgment overrides), hesitant
    clinicians escaping to referral (capability overrides), and an
    automation-biased subgroup."""
    return ScenarioConfig(
        seed=seed,
        name="type_concordance",
        world=WorldConfig(horizon=52, interactions_per_step=20, outcome_lag=1, private_info_sd=0.5,
                          observability=0.9, observability_by_contract={"ffs": 0.6}),
        domains=["hf"],
        clusters=[ClusterConfig("hf_stage_c", "hf", 1.0, {"sglt2i": 1.0})],
        actions=_hf_actions(["hf_stage_c"]),
        contracts=[ContractConfig("vbc", "OUTCOME_BASED", 0.7), ContractConfig("ffs", "FFS", 0.3)],
        rewards={"hf_stage_c": HF_REWARDS["hf_stage_c"]},
        behavior=BehaviorConfig(beta0=0.5, beta1=2.0),
        population=[
            GroupConfig("expert", "EXPERT", 20, exec=0.95, align=0.95, proxy_score=1.0, private_info=1.0,
                        escape_action="referral"),
            GroupConfig("hesitant", "HESITANT", 20, exec=0.2, align=1.0, proxy_score=0.0, escape_action="referral"),
            GroupConfig("automation", "AUTOMATION_BIASED", 5, exec=0.3, align=0.5, accept_floor=0.95,
                        escape_action="referral"),
        ],
    ).validate()


SCENARIOS = {
    "fig1": fig1,
    "heterogeneous": heterogeneous,
    "identifiability": homogeneous,
    "flywheel": flywheel,
    "tiers": tiers,
    "amplification": amplification,
    "stacking": stacking,
    "type_concordance": type_concordance,
}
