import math

import numpy as np
import pytest

from override_lab.classifier import TypePosterior
from override_lab.kernel import Decision, DecisionKind, InteractionRecord, Outcome, PatientState
from override_lab.monitors import (
    acceptance_entropy,
    binary_entropy,
    complexity_trend,
    concordance_by_type,
    kappa_band,
    monitor_report,
    observability,
    stratified_override_rates,
    suppression_audit,
)


def rec(actions, contract, kind="accept", clinician="k1", t=0, rnd=0, cluster="c0", patient="p1", rec_action="drug",
        alt=None, q=None, q_cf=None):
    state = PatientState(patient, "hf", np.array([1.0, 0.0]), t, cluster)
    r_action = actions[rec_action]
    kind = DecisionKind(kind)
    alt_action = actions[alt] if alt else None
    executed = r_action if kind is DecisionKind.ACCEPT else (alt_action or actions["default"])
    r = InteractionRecord(state, r_action, Decision(kind, alt_action), executed, clinician, contract, round_index=rnd)
    if q is not None:
        r.attach_outcome(Outcome(q, False, 1, True), Outcome(q_cf, False, 1, True))
    return r


class TestEntropy:
    def test_reference_values(self):
        assert binary_entropy(0.5) == pytest.approx(1.0)
        assert binary_entropy(0.95) == pytest.approx(-(0.95 * math.log2(0.95) + 0.05 * math.log2(0.05)))
        assert binary_entropy(0.95) == pytest.approx(0.2864, abs=1e-4)
        assert binary_entropy(0.0) == 0.0

    def test_flags_high_acceptors_only(self, actions, contract):
        records = (
            [rec(actions, contract, clinician="auto") for _ in range(19)]
            + [rec(actions, contract, "reject", clinician="auto")]
            + [rec(actions, contract, clinician="even") for _ in range(10)]
            + [rec(actions, contract, "reject", clinician="even") for _ in range(10)]
            + [rec(actions, contract, clinician="refuser")]
            + [rec(actions, contract, "reject", clinician="refuser") for _ in range(19)]
        )
        flags = {f.clinician_id: f for f in acceptance_entropy(records)}
        assert flags["auto"].flagged and flags["auto"].accept_rate == pytest.approx(0.95)
        assert not flags["even"].flagged and flags["even"].entropy == pytest.approx(1.0)
        assert not flags["refuser"].flagged

    def test_window(self, actions, contract):
        records = [rec(actions, contract, t=0), rec(actions, contract, "reject", t=5)]
        (f,) = acceptance_entropy(records, window=(0, 3))
        assert f.n == 1 and f.accept_rate == 1.0

    def test_empty_window_raises(self, actions, contract):
        with pytest.raises(ValueError):
            acceptance_entropy([rec(actions, contract, t=9)], window=(0, 3))


class TestStratifiedRates:
    def test_bands(self):
        assert kappa_band(0.39, (0.4, 0.7)) == "low"
        assert kappa_band(0.4, (0.4, 0.7)) == "mid"
        assert kappa_band(0.9, (0.4, 0.7)) == "high"

    def test_all_accept_gives_zero_rates(self, actions, contract):
        records = [rec(actions, contract, clinician=c, t=t) for c in ("a", "b") for t in range(4)]
        sr = stratified_override_rates(records, {("a", "hf"): 0.2, ("b", "hf"): 0.9}, window=2)
        assert all(row["rate"] == 0.0 for row in sr.rows())
        assert sr.gaps == {("hf", 0): 0.0, ("hf", 1): 0.0}

    def test_counts_partition_records(self, actions, contract):
        rng = np.random.default_rng(0)
        records = [rec(actions, contract, "accept" if rng.random() < 0.6 else "reject", clinician=f"k{i % 5}", t=i % 7)
                   for i in range(200)]
        kappa = {(f"k{i}", "hf"): v for i, v in enumerate([0.1, 0.3, 0.5, 0.75, 0.9])}
        sr = stratified_override_rates(records, kappa, window=3)
        assert sr.total() == 200
        assert sum(o for o, _ in sr.counts.values()) == sum(r.decision.is_override for r in records)

    def test_hand_computed_gap(self, actions, contract):
        records = ([rec(actions, contract, "reject", clinician="lo")] * 3 + [rec(actions, contract, clinician="lo")]
                   + [rec(actions, contract, "reject", clinician="hi")] + [rec(actions, contract, clinician="hi")] * 3)
        sr = stratified_override_rates(records, {("lo", "hf"): 0.1, ("hi", "hf"): 0.8})
        assert sr.rate("low", "hf", 0) == 0.75
        assert sr.gaps[("hf", 0)] == pytest.approx(0.25 - 0.75)

    def test_time_varying_kappa(self, actions, contract):
        records = [rec(actions, contract, t=0), rec(actions, contract, t=1)]
        sr = stratified_override_rates(records, {("k1", "hf"): [0.1, 0.9]}, window=1, time_varying=True)
        assert sr.rate("low", "hf", 0) == 0.0 and sr.rate("high", "hf", 1) == 0.0
        assert sr.rate("high", "hf", 0) is None

    @pytest.mark.parametrize("edges", [(), (0.7, 0.4), (0.4, 0.4), (1.2,)])
    def test_invalid_edges(self, actions, contract, edges):
        with pytest.raises(ValueError):
            stratified_override_rates([rec(actions, contract)], {("k1", "hf"): 0.5}, edges)


class TestConcordance:
    def test_symmetric_outcomes_give_half(self, actions, contract):
        records = []
        for i in range(40):
            win = i % 2 == 0
            records.append(rec(actions, contract, "reject", alt="drug_low", q=0.6 if win else 0.4, q_cf=0.4 if win else 0.6))
        out = concordance_by_type(records, [TypePosterior.pure("II")] * 40)
        assert out["II"]["concordance"] == pytest.approx(0.5)
        assert out["V"] is None

    def test_posterior_weighting(self, actions, contract):
        good = [rec(actions, contract, "reject", alt="drug_low", q=0.9, q_cf=0.1) for _ in range(40)]
        bad = [rec(actions, contract, "reject", alt="drug_low", q=0.1, q_cf=0.9) for _ in range(40)]
        posts = [TypePosterior.pure("II")] * 40 + [TypePosterior(np.array([0, 0.25, 0, 0, 0.75]))] * 40
        out = concordance_by_type(good + bad, posts)
        assert out["II"]["concordance"] == pytest.approx(40 / 50)
        assert out["V"]["concordance"] == 0.0 and out["V"]["n"] == pytest.approx(30)

    def test_ties_and_accepts(self, actions, contract):
        records = [rec(actions, contract, q=0.5, q_cf=0.5) for _ in range(30)]
        out = concordance_by_type(records, [None] * 30)
        assert out["ACCEPT"]["concordance"] == 0.5

    def test_length_mismatch(self, actions, contract):
        with pytest.raises(ValueError):
            concordance_by_type([rec(actions, contract)], [])


class TestSuppression:
    def _rounds(self, actions, contract, shares):
        records = []
        for rnd, share in enumerate(shares):
            for i in range(100):
                a = "drug" if i < share * 100 else "default"
                records.append(rec(actions, contract, rnd=rnd, patient=f"p{i:03d}", rec_action=a))
        return records

    def test_detects_suppressed_action(self, actions, contract):
        records = self._rounds(actions, contract, [0.5, 0.02, 0.0])
        (s,) = suppression_audit(records, {"drug": ["c0"]}, floor=0.05, probe_rate=0.01, seed=3)
        assert s.action_id == "drug" and s.first_round_below == 1
        assert s.surfacing_by_round == {0: 0.5, 1: 0.02, 2: 0.0}
        assert len(s.probe_states) == 1

    def test_healthy_action_not_listed(self, actions, contract):
        records = self._rounds(actions, contract, [0.5, 0.4])
        assert suppression_audit(records, {"drug": ["c0"]}) == []

    def test_recovered_action_not_listed(self, actions, contract):
        records = self._rounds(actions, contract, [0.0, 0.5])
        assert suppression_audit(records, {"drug": ["c0"]}) == []

    def test_probe_schedule_deterministic(self, actions, contract):
        records = self._rounds(actions, contract, [0.3, 0.0])
        a = suppression_audit(records, {"drug": ["c0"]}, probe_rate=0.05, seed=1)
        b = suppression_audit(records, {"drug": ["c0"]}, probe_rate=0.05, seed=1)
        assert a[0].probe_states == b[0].probe_states and len(a[0].probe_states) == 5

    def test_single_round_raises(self, actions, contract):
        with pytest.raises(ValueError):
            suppression_audit(self._rounds(actions, contract, [0.0]), {"drug": ["c0"]})


class TestReport:
    def test_complexity_trend_slope(self, actions, contract):
        records = [rec(actions, contract, t=t, rec_action="drug" if t < 2 else "default") for t in range(4)]
        trend = complexity_trend(records, window=1)
        assert trend["slope"] == pytest.approx(np.polyfit([0, 1, 2, 3], [0.9, 0.9, 0.0, 0.0], 1)[0])

    def test_observability_shares(self, actions, contract):
        records = [rec(actions, contract, q=0.5, q_cf=0.5), rec(actions, contract)]
        records[1].attach_outcome(Outcome(None, False, 1, False))
        records.append(rec(actions, contract))
        assert observability(records) == {"contract": {"vbc": 0.5}, "domain": {"hf": 0.5}}

    def test_report_serialises(self, actions, contract):
        records = [rec(actions, contract, t=t) for t in range(30)]
        d = monitor_report(records, {"drug": ["c0"]}).to_dict()
        assert d["automation_flags"][0]["clinician_id"] == "k1"
        assert d["suppressed_actions"] == []
        assert d["counterfactual_source"] == "simulator"
