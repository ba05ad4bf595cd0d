"""Scenario configuration: dataclasses plus a YAML loader that reports
schema violations with the offending field path and source line."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

SCHEMA_VERSION = 1

OVERRIDE_TYPES = ("I", "II", "III", "IV", "V")
ARCHETYPES = ("EXPERT", "HESITANT", "AUTOMATION_BIASED", "CUSTOM")
REASON_CODES = ("PATIENT_PREFERENCE", "NOT_COMFORTABLE", "PROTOCOL", "NO_TIME", "OTHER")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        where = f"{path}" + (f" (line {line})" if line is not None else "")
        super().__init__(f"{where}: {message}")


@dataclass
class WorldConfig:
    horizon: int = 4
    interactions_per_step: int = 25
    panel_size: int = 40
    state_noise: float = 0.05
    outcome_lag: int = 1
    observability: float = 1.0
    observability_by_contract: dict[str, float] = field(default_factory=dict)
    outcome_base: float = 0.2
    outcome_gain: float = 0.6
    outcome_noise: float = 0.05
    private_info_sd: float = 0.0
    event_threshold: float = 0.3


@dataclass
class ClusterConfig:
    name: str
    domain: str
    weight: float = 1.0
    recommend: dict[str, float] = field(default_factory=dict)


@dataclass
class ActionConfig:
    name: str
    attrs: list[float] = field(default_factory=list)
    complexity: float = 0.0
    action_class: str = ""
    default: bool = False
    # clusters in which guidelines mark this action first-line
    first_line: list[str] = field(default_factory=list)


@dataclass
class ContractConfig:
    name: str
    kind: str = "OUTCOME_BASED"
    weight: float = 1.0


@dataclass
class BehaviorConfig:
    beta0: float = 0.5
    beta1: float = 4.0
    p_modify: float = 0.5
    modify_radius: float = 1.6
    low_exec_threshold: float = 0.5
    low_exec_override_prob: float = 0.8
    complexity_threshold: float = 0.5
    workflow_rate: float = 0.0
    reason_rate: float = 0.5
    # fraction of REJECTs whose alternative is captured
    alt_observed_rate: float = 1.0


@dataclass
class GroupConfig:
    name: str
    archetype: str = "EXPERT"
    count: int = 1
    exec: Union[float, dict[str, float]] = 0.9
    align: Union[float, dict[str, float]] = 1.0
    # uniform jitter applied to exec per clinician (clipped to [0, 1])
    exec_spread: float = 0.0
    proxy_score: Optional[float] = None
    escape_action: Optional[str] = None
    accept_floor: Optional[float] = None
    fixed_accept_rate: Optional[float] = None
    belief_bias: dict[str, float] = field(default_factory=dict)
    private_info: float = 0.0
    scaffolding: float = 0.0


@dataclass
class EvolutionConfig:
    eta: float = 0.0


@dataclass
class ClassifierConfig:
    # rows: types I..V, columns: bias, closeness, has_alternative,
    # class_preserved, clinician override rate, cohort high-kappa accept rate
    weights: Optional[list[list[float]]] = None
    reason_bonus: float = 4.0
    reward_weights: dict[str, float] = field(
        default_factory=lambda: {"I": 0.5, "II": 1.0, "III": 0.0, "IV": 0.0, "V": 0.25}
    )
    capability_weights: dict[str, float] = field(
        default_factory=lambda: {"I": 0.5, "II": 1.0, "III": 0.0, "IV": 0.0, "V": 1.0}
    )
    high_kappa: float = 0.7


@dataclass
class LearnerConfig:
    beta0: float = 0.1
    beta1: float = 5.0
    beta_form: str = "linear"
    ridge: float = 1e-3
    max_rounds: int = 20
    tol_kappa: float = 1e-3
    tol_theta: float = 1e-4
    grad_tol: float = 1e-8
    max_newton_iter: int = 200
    prior_alpha: float = 2.0
    prior_beta: float = 2.0
    proxy_gain: float = 0.6
    prior_ceiling: float = 0.7
    agreement: str = "hard"
    use_classifier: bool = True
    classifier_outer_rounds: int = 2
    anchor_threshold: float = 0.1
    anchor_min_pairs: int = 30
    heldout_fraction: float = 0.2
    reinit_factor: float = 4.0
    max_reinits: int = 2
    identifiability_min_sd: float = 0.025


@dataclass
class MonitorConfig:
    band_edges: list[float] = field(default_factory=lambda: [0.4, 0.7])
    window: int = 13
    entropy_threshold: float = 0.4
    accept_ceiling: float = 0.9
    surfacing_floor: float = 0.05
    probe_rate: float = 0.01
    min_outcomes_per_type: int = 30


@dataclass
class ScenarioConfig:
    seed: int
    schema_version: int = SCHEMA_VERSION
    name: str = "custom"
    world: WorldConfig = field(default_factory=WorldConfig)
    domains: list[str] = field(default_factory=lambda: ["hf"])
    clusters: list[ClusterConfig] = field(default_factory=list)
    actions: list[ActionConfig] = field(default_factory=list)
    contracts: list[ContractConfig] = field(default_factory=lambda: [ContractConfig("vbc")])
    rewards: dict[str, dict[str, float]] = field(default_factory=dict)
    contract_shift: dict[str, dict[str, float]] = field(default_factory=dict)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)
    population: list[GroupConfig] = field(default_factory=list)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    monitors: MonitorConfig = field(default_factory=MonitorConfig)

    # -- convenience lookups --------------------------------------------
    @property
    def action_names(self) -> list[str]:
        return [a.name for a in self.actions]

    @property
    def default_action(self) -> str:
        return next(a.name for a in self.actions if a.default)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ScenarioConfig":
        return from_dict(_merge(self.to_dict(), changes))

    def validate(self, lines: Optional[dict[str, int]] = None) -> "ScenarioConfig":
        _check_semantics(self, lines or {})
        return self


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("rewards", "contract_shift"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


# --- generic dataclass construction ------------------------------------------


def _line(lines, path):
    while path:
        if path in lines:
            return lines[path]
        path = path.rsplit(".", 1)[0] if "." in path else ""
    return None


def _coerce(tp, value, path, lines):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, path, lines)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0] if errors else ConfigError(path, "invalid value", _line(lines, path))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected a mapping, got {type(value).__name__}", _line(lines, path))
        return _build(tp, value, path, lines)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list", _line(lines, path))
        return [_coerce(args[0], v, f"{path}[{i}]", lines) for i, v in enumerate(value)]
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(path, "expected a mapping", _line(lines, path))
        return {str(k): _coerce(args[1], v, f"{path}.{k}", lines) for k, v in value.items()}
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false", _line(lines, path))
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}", _line(lines, path))
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}", _line(lines, path))
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}", _line(lines, path))
        return value
    return value


def _build(cls, data: dict, prefix: str, lines: dict):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            p = f"{prefix}.{key}" if prefix else str(key)
            raise ConfigError(p, "unknown field", _line(lines, p))
    kwargs = {}
    for f in dataclasses.fields(cls):
        p = f"{prefix}.{f.name}" if prefix else f.name
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], p, lines)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(p, "required field missing", _line(lines, prefix) if prefix else None)
    return cls(**kwargs)


def _line_map(node, path="", out=None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            p = f"{path}.{key_node.value}" if path else str(key_node.value)
            out[p] = key_node.start_mark.line + 1
            _line_map(value_node, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            p = f"{path}[{i}]"
            out[p] = item.start_mark.line + 1
            _line_map(item, p, out)
    return out


def _check_semantics(cfg: ScenarioConfig, lines: dict) -> None:
    def fail(path, msg):
        raise ConfigError(path, msg, _line(lines, path))

    def prob(path, v):
        if v is not None and not 0.0 <= v <= 1.0:
            fail(path, f"probability {v} outside [0, 1]")

    if cfg.schema_version != SCHEMA_VERSION:
        fail("schema_version", f"unsupported schema version {cfg.schema_version}")
    if not cfg.actions:
        fail("actions", "action catalog is empty")
    names = cfg.action_names
    if len(set(names)) != len(names):
        fail("actions", "duplicate action names")
    n_default = sum(a.default for a in cfg.actions)
    if n_default != 1:
        fail("actions", f"exactly one default action required, found {n_default}")
    attr_lens = {len(a.attrs) for a in cfg.actions}
    if len(attr_lens) != 1:
        fail("actions", "all actions need the same number of attrs")
    for i, a in enumerate(cfg.actions):
        if a.complexity < 0:
            fail(f"actions[{i}].complexity", "must be >= 0")
    if not cfg.clusters:
        fail("clusters", "no state clusters defined")
    cluster_names = [c.name for c in cfg.clusters]
    for i, c in enumerate(cfg.clusters):
        if c.domain not in cfg.domains:
            fail(f"clusters[{i}].domain", f"unknown domain {c.domain!r}")
        if c.weight < 0:
            fail(f"clusters[{i}].weight", "must be >= 0")
        if not c.recommend:
            fail(f"clusters[{i}].recommend", "recommendation policy is empty")
        for a, w in c.recommend.items():
            if a not in names:
                fail(f"clusters[{i}].recommend.{a}", "unknown action")
            if w < 0:
                fail(f"clusters[{i}].recommend.{a}", "negative weight")
        if c.name not in cfg.rewards:
            fail("rewards", f"no reward row for cluster {c.name!r}")
    for cname, row in cfg.rewards.items():
        if cname not in cluster_names:
            fail(f"rewards.{cname}", "unknown cluster")
        for a in row:
            if a not in names:
                fail(f"rewards.{cname}.{a}", "unknown action")
    contract_names = [c.name for c in cfg.contracts]
    if not cfg.contracts:
        fail("contracts", "at least one contract required")
    for i, c in enumerate(cfg.contracts):
        if c.kind not in ("FFS", "OUTCOME_BASED", "CUSTOM"):
            fail(f"contracts[{i}].kind", f"unknown contract kind {c.kind!r}")
    for cname, row in cfg.contract_shift.items():
        if cname not in contract_names:
            fail(f"contract_shift.{cname}", "unknown contract")
        for a in row:
            if a not in names:
                fail(f"contract_shift.{cname}.{a}", "unknown action")
    for i, a in enumerate(cfg.actions):
        for cl in a.first_line:
            if cl not in cluster_names:
                fail(f"actions[{i}].first_line", f"unknown cluster {cl!r}")
    w = cfg.world
    if w.horizon < 0:
        fail("world.horizon", "must be >= 0")
    if w.interactions_per_step < 0:
        fail("world.interactions_per_step", "must be >= 0")
    if w.panel_size < 1:
        fail("world.panel_size", "must be >= 1")
    if w.outcome_lag < 0:
        fail("world.outcome_lag", "must be >= 0")
    prob("world.observability", w.observability)
    for k, v in w.observability_by_contract.items():
        prob(f"world.observability_by_contract.{k}", v)
    b = cfg.behavior
    for name in ("p_modify", "low_exec_override_prob", "workflow_rate", "reason_rate", "alt_observed_rate"):
        prob(f"behavior.{name}", getattr(b, name))
    if b.beta0 <= 0:
        fail("behavior.beta0", "must be > 0")
    if not cfg.population:
        fail("population", "population is empty")
    for i, g in enumerate(cfg.population):
        p = f"population[{i}]"
        if g.archetype not in ARCHETYPES:
            fail(f"{p}.archetype", f"unknown archetype {g.archetype!r}")
        if g.count < 0:
            fail(f"{p}.count", "must be >= 0")
        if (g.accept_floor is not None) != (g.archetype == "AUTOMATION_BIASED"):
            fail(f"{p}.accept_floor", "accept_floor is required for, and only for, AUTOMATION_BIASED")
        prob(f"{p}.accept_floor", g.accept_floor)
        prob(f"{p}.fixed_accept_rate", g.fixed_accept_rate)
        prob(f"{p}.proxy_score", g.proxy_score)
        prob(f"{p}.scaffolding", g.scaffolding)
        if g.escape_action is not None and g.escape_action not in names:
            fail(f"{p}.escape_action", "unknown action")
        for part in ("exec", "align"):
            v = getattr(g, part)
            vals = v.values() if isinstance(v, dict) else [v]
            for x in vals:
                prob(f"{p}.{part}", x)
            if isinstance(v, dict):
                for d in v:
                    if d not in cfg.domains:
                        fail(f"{p}.{part}.{d}", "unknown domain")
        for a in g.belief_bias:
            if a not in names:
                fail(f"{p}.belief_bias.{a}", "unknown action")
    if sum(g.count for g in cfg.population) == 0:
        fail("population", "population is empty")
    if not 0.0 < cfg.evolution.eta < 1.0 and cfg.evolution.eta != 0.0:
        fail("evolution.eta", "eta must lie in (0, 1) or be 0 to disable evolution")
    for t in cfg.classifier.reward_weights:
        if t not in OVERRIDE_TYPES:
            fail(f"classifier.reward_weights.{t}", "unknown override type")
    for t in cfg.classifier.capability_weights:
        if t not in OVERRIDE_TYPES:
            fail(f"classifier.capability_weights.{t}", "unknown override type")
    if cfg.classifier.weights is not None:
        m = cfg.classifier.weights
        if len(m) != 5 or any(len(r) != 6 for r in m):
            fail("classifier.weights", "expected a 5x6 matrix")
    edges = cfg.monitors.band_edges
    if any(not 0.0 < e < 1.0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        fail("monitors.band_edges", "band edges must be strictly increasing within (0, 1)")
    if cfg.learner.agreement not in ("hard", "soft"):
        fail("learner.agreement", "must be 'hard' or 'soft'")
    if cfg.learner.beta0 <= 0:
        fail("learner.beta0", "must be > 0")


def from_dict(data: dict, lines: Optional[dict[str, int]] = None) -> ScenarioConfig:
    lines = lines or {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    if "seed" not in data:
        raise ConfigError("seed", "required field missing")
    cfg = _build(ScenarioConfig, data, "", lines)
    return cfg.validate(lines)


def loads(text: str) -> ScenarioConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError("<root>", f"malformed YAML: {exc}", mark.line + 1 if mark else None) from exc
    return from_dict(data or {}, _line_map(node) if node is not None else {})


def load(path) -> ScenarioConfig:
    return loads(Path(path).read_text())


def dumps(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None, width=100)


def dump(cfg: ScenarioConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def resolved_defaults(cfg: ScenarioConfig) -> dict[str, Any]:
    """Every parameter, defaults included, for the run manifest."""
    return cfg.to_dict()
