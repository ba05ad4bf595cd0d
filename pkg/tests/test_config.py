from pathlib import Path

import pytest

from override_lab import config, scenarios
from override_lab.config import ConfigError

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


class TestRoundTrip:
    @pytest.mark.parametrize("name", sorted(scenarios.SCENARIOS))
    def test_dump_load_identity(self, name):
        cfg = scenarios.SCENARIOS[name](7)
        again = config.loads(config.dumps(cfg))
        assert again == cfg
        assert again.digest() == cfg.digest()

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_configs_match_builders(self, path):
        cfg = config.load(path)
        assert cfg.to_dict() == scenarios.SCENARIOS[path.stem](cfg.seed).to_dict()

    def test_replace_changes_digest(self):
        cfg = scenarios.fig1(0)
        assert cfg.replace(seed=1).digest() != cfg.digest()
        assert cfg.replace(seed=0).digest() == cfg.digest()

    def test_nested_replace(self):
        cfg = scenarios.fig1(0).replace(world={"horizon": 9})
        assert cfg.world.horizon == 9
        assert cfg.world.interactions_per_step == 25


def _yaml(extra=""):
    return f"""\
seed: 3
clusters:
  - name: c
    domain: hf
    recommend: {{drug: 1.0}}
actions:
  - name: none
    default: true
  - name: drug
rewards:
  c: {{drug: 1.0}}
population:
  - name: g
    count: 2
{extra}"""


class TestValidation:
    def test_minimal_config_loads(self):
        cfg = config.loads(_yaml())
        assert cfg.seed == 3
        assert cfg.default_action == "none"

    def test_missing_seed(self):
        with pytest.raises(ConfigError) as e:
            config.loads(_yaml().replace("seed: 3\n", ""))
        assert e.value.path == "seed"

    def test_wrong_type_reports_line(self):
        text = _yaml().replace("count: 2", "count: many")
        with pytest.raises(ConfigError) as e:
            config.loads(text)
        assert "population[0].count" in str(e.value)
        assert e.value.line == text.splitlines().index("    count: many") + 1

    def test_unknown_field(self):
        with pytest.raises(ConfigError) as e:
            config.loads(_yaml("bogus: 1\n"))
        assert "bogus" in str(e.value)

    def test_probability_out_of_range(self):
        with pytest.raises(ConfigError) as e:
            config.loads(_yaml("world:\n  observability: 1.5\n"))
        assert e.value.path == "world.observability"

    def test_automation_floor_only_for_automation(self):
        text = _yaml().replace("count: 2", "count: 2\n    accept_floor: 0.9")
        with pytest.raises(ConfigError):
            config.loads(text)

    def test_two_defaults_rejected(self):
        with pytest.raises(ConfigError):
            config.loads(_yaml().replace("  - name: drug", "  - name: drug\n    default: true"))

    def test_unknown_recommended_action(self):
        with pytest.raises(ConfigError) as e:
            config.loads(_yaml().replace("recommend: {drug: 1.0}", "recommend: {pill: 1.0}"))
        assert "recommend" in e.value.path

    def test_band_edges_must_increase(self):
        with pytest.raises(ConfigError):
            config.loads(_yaml("monitors:\n  band_edges: [0.7, 0.4]\n"))

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError):
            config.loads("seed: [1, 2\n")

    def test_eta_range(self):
        with pytest.raises(ConfigError):
            config.loads(_yaml("evolution:\n  eta: 1.0\n"))

    def test_resolved_defaults_include_unset_fields(self):
        d = config.resolved_defaults(config.loads(_yaml()))
        assert d["learner"]["ridge"] == config.LearnerConfig().ridge
        assert d["monitors"]["probe_rate"] == 0.01
