import numpy as np
import pytest

from override_lab import scenarios
from override_lab.kernel import (
    ClinicalAction,
    ContractContext,
    Decision,
    DecisionKind,
    FeatureMap,
    InteractionRecord,
    PatientState,
    RewardModel,
)
from override_lab.world_sim import generate_dataset

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def onehot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


@pytest.fixture
def fm():
    return FeatureMap(state_dim=2, action_dim=3, contract_dim=1)


@pytest.fixture
def actions():
    return {
        "default": ClinicalAction("default", onehot(0, 3), 0.0, "none"),
        "drug": ClinicalAction("drug", onehot(1, 3), 0.9, "gdmt"),
        "drug_low": ClinicalAction("drug_low", onehot(2, 3) * 0.9 + onehot(1, 3) * 0.1, 0.8, "gdmt"),
    }


@pytest.fixture
def contract():
    return ContractContext("vbc", "OUTCOME_BASED", np.array([1.0]))


@pytest.fixture
def state():
    return PatientState("p1", "hf", np.array([1.0, 0.0]), 0, "c0")


def make_record(state, rec, kind, contract, clinician="k1", alt=None, executed=None, reason=None):
    kind = DecisionKind(kind)
    if executed is None:
        executed = rec if kind is DecisionKind.ACCEPT else (alt or rec)
    return InteractionRecord(state, rec, Decision(kind, alt), executed, clinician, contract, reason_code=reason)


@pytest.fixture
def record_factory():
    return make_record


@pytest.fixture
def random_model(fm):
    rng = np.random.default_rng(3)
    return RewardModel(rng.normal(size=fm.dim), fm)


@pytest.fixture(scope="session")
def fig1_data():
    return generate_dataset(scenarios.fig1(0))


@pytest.fixture(scope="session")
def type_data():
    return generate_dataset(scenarios.type_concordance(0))
