"""End-to-end runs: simulate, train, audit and the named reproductions.

Every stage returns its outputs as ``{relative path: bytes}`` so the caller
can digest them before writing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import dual_learner as dl
from . import io
from . import monitors as mon
from . import scenarios
from .classifier import ClassifierParams, TypePosterior, classify_records
from .config import ScenarioConfig
from .kernel import ClinicalAction, InteractionRecord, RewardModel
from .world_sim import Catalog, GroundTruth, generate_dataset

Key = tuple[str, str]
REPRODUCIBLE = ("fig1", "identifiability", "flywheel", "stacking", "amplification")

# (cluster, a*) for the suppression-bias check; referral is the catalog default
FIG1_FOCUS = ("hf_stage_c", "sglt2i")


# --- simulate --------------------------------------------------------------------


def simulate_files(cfg: ScenarioConfig) -> tuple[dict[str, bytes], list[InteractionRecord], GroundTruth]:
    records, truth = generate_dataset(cfg)
    clinicians = [
        {"clinician": cid, "group": c.group, "proxy_score": c.proxy_score}
        for cid, c in sorted(truth.clinicians.items())
    ]
    files = {
        "dataset.csv": io.records_to_csv(records, truth.catalog.feature_map.state_dim),
        "clinicians.csv": io.rows_to_csv(clinicians, ["clinician", "group", "proxy_score"]),
        "ground_truth.json": io.to_json(truth.to_json()),
        "config.yaml": cfgmod.dumps(cfg).encode(),
    }
    return files, records, truth


def true_kappa(truth: GroundTruth, t: int = 0) -> dict[Key, float]:
    return {k: v[min(t, len(v) - 1)] for k, v in truth.kappa_trajectories.items()}


def kappa_from_ground_truth_json(gt: dict, t: int = 0) -> dict[Key, float]:
    out = {}
    for key, traj in gt["kappa_trajectories"].items():
        k, d = key.split("|")
        out[(k, d)] = traj[min(t, len(traj) - 1)]
    return out


# --- train -------------------------------------------------------------------------


def margin_table(model: RewardModel, catalog: Catalog) -> list[dict]:
    """Margins for every ordered catalog action pair at each cluster centre and contract."""
    rows = []
    for cl in catalog.clusters:
        s = catalog.prototype_state(cl.name)
        for c in catalog.contracts:
            for i, a in enumerate(catalog.actions):
                for b in catalog.actions[i + 1:]:
                    rows.append({
                        "cluster": cl.name, "contract": c.context_id, "preferred": a.action_id,
                        "dispreferred": b.action_id, "margin": model.margin(s, a, b, c),
                    })
    return rows


@dataclass
class TrainResult:
    model: RewardModel
    summary: dict
    trace: list[dict]
    state: Optional[dl.TrainState] = None

    @property
    def anchor_failed(self) -> bool:
        a = self.summary.get("anchor")
        return bool(a) and not a["passed"]


TRACE_COLUMNS = ["attempt", "iteration", "outer", "loglik", "theta_delta", "kappa_delta", "event"]


def train(
    records: Sequence[InteractionRecord],
    cfg: ScenarioConfig,
    catalog: Catalog,
    weighting: str = "kappa",
    proxies: Optional[Mapping[str, Optional[float]]] = None,
    rounds: Optional[int] = None,
    kappa: Optional[Mapping[Key, float]] = None,
) -> TrainResult:
    """Fit on a deterministic training split and anchor on the held-out rest.

    ``naive`` ignores capability (beta1 = 0, no type weighting).
    ``kappa`` runs the alternation from proxy-informed cold-start priors,
    unless fixed capabilities ``kappa`` are given, in which case a single
    capability-weighted fit is made with them.
    """
    if weighting not in ("naive", "kappa"):
        raise ValueError(f"unknown weighting {weighting!r}")
    if not records:
        raise ValueError("no records to train on")
    lc = cfg.learner
    default = catalog.default
    fm = catalog.feature_map
    train_recs, held = dl.split_heldout(records, lc.heldout_fraction, cfg.seed)
    heldout = dl.outcome_pairs(held, default)
    can_anchor = len(heldout) >= lc.anchor_min_pairs
    state = None
    summary: dict = {"weighting": weighting, "n_records": len(records), "n_train": len(train_recs),
                     "n_heldout_pairs": len(heldout)}
    if weighting == "naive" or kappa is not None:
        beta1 = 0.0 if weighting == "naive" else lc.beta1
        fit = dl.fit_with_kappa(train_recs, default, fm, kappa or {}, lc.beta0, beta1, lc.ridge, None, lc.beta_form)
        model = fit.model
        trace = [{"attempt": 0, "iteration": 1, "outer": 0, "loglik": fit.objective, "theta_delta": float("nan"),
                  "kappa_delta": float("nan"), "event": "fixed-kappa fit" if kappa is not None else "naive fit"}]
        summary.update(converged=fit.converged, iterations=fit.iterations, kappa_source="fixed" if kappa else "none")
        summary["kappa_hat"] = [
            {"clinician": k, "domain": d, "mean": v} for (k, d), v in sorted((kappa or {}).items())
        ]
        anchor = dl.anchor_validate(model, heldout, lc.anchor_threshold, lc.anchor_min_pairs) if can_anchor else None
    else:
        priors = dl.cold_start_priors(proxies, lc)
        classifier = ClassifierParams.from_config(cfg.classifier) if lc.use_classifier else None
        if can_anchor:
            state = dl.train_with_anchor(train_recs, heldout, lc, default, fm, priors, classifier, rounds)
        else:
            state = dl.alternate(train_recs, lc, default, fm, priors, classifier, rounds)
            for row in state.trace:
                row["attempt"] = 0
        model = state.model
        trace = state.trace
        anchor = state.anchor
        summary.update(
            converged=state.converged, iterations=state.iteration, oscillation=state.oscillation,
            reinits=state.reinits, priors=priors.describe(), kappa_source="estimated",
            non_identifiable=state.non_identifiable, identifiability_sd=state.identifiability_stats,
        )
        summary["kappa_hat"] = [
            {"clinician": e.clinician_id, "domain": e.domain_id, "alpha": e.alpha, "beta": e.beta, "mean": e.mean()}
            for _, e in sorted(state.kappa_estimates.items())
        ]
    summary["anchor"] = None if anchor is None else {
        "concordance": anchor.concordance, "passed": anchor.passed, "threshold": anchor.threshold,
        "n_pairs": anchor.n_pairs,
    }
    if anchor is None and not can_anchor:
        summary["anchor_note"] = f"fewer than {lc.anchor_min_pairs} held-out outcome pairs"
    summary["theta"] = model.theta
    summary["margins"] = margin_table(model, catalog)
    return TrainResult(model, summary, trace, state)


def train_files(result: TrainResult) -> dict[str, bytes]:
    return {
        "trace.csv": io.rows_to_csv(result.trace, TRACE_COLUMNS),
        "summary.json": io.to_json(result.summary),
    }


def focus_margin(summary_or_model, catalog: Catalog, cluster: str, better: str, worse: Optional[str] = None) -> float:
    worse = worse or catalog.default_name
    if isinstance(summary_or_model, RewardModel):
        c = catalog.contracts[0]
        return summary_or_model.margin(catalog.prototype_state(cluster), catalog.action(better), catalog.action(worse), c)
    for row in summary_or_model["margins"]:
        if row["cluster"] == cluster and {row["preferred"], row["dispreferred"]} == {better, worse}:
            return row["margin"] if row["preferred"] == better else -row["margin"]
    raise KeyError((cluster, better, worse))


# --- audit -------------------------------------------------------------------------


def guideline_first_line(cfg: ScenarioConfig) -> dict[str, list[str]]:
    return {a.name: list(a.first_line) for a in cfg.actions if a.first_line}


def audit(
    records: Sequence[InteractionRecord],
    cfg: ScenarioConfig,
    kappa: Mapping[Key, object],
    kappa_source: str,
    time_varying: bool = False,
) -> tuple[dict[str, bytes], dict]:
    """Stratified rates, override gap, type concordance and monitor report."""
    m = cfg.monitors
    if not records:
        report = {"status": "no data", "kappa_source": kappa_source}
        return {"monitor_report.json": io.to_json(report)}, report
    sr = mon.stratified_override_rates(records, kappa, m.band_edges, m.window, time_varying)
    scalar_kappa = {k: (v[0] if time_varying else v) for k, v in kappa.items()}
    params = ClassifierParams.from_config(cfg.classifier)
    posteriors = classify_records(records, scalar_kappa, params)
    conc_rows = []
    tables = {"classifier": mon.concordance_by_type(records, posteriors, m.min_outcomes_per_type)}
    if any(r.true_type for r in records):
        pure = [TypePosterior.pure(r.true_type) if r.decision.is_override and r.true_type else None for r in records]
        tables["simulated_type"] = mon.concordance_by_type(records, pure, m.min_outcomes_per_type)
    for source, table in tables.items():
        for t, v in table.items():
            conc_rows.append({
                "posterior": source, "type": t,
                "concordance": None if v is None else v["concordance"],
                "n": None if v is None else v["n"],
                "counterfactual_source": mon.COUNTERFACTUAL_SOURCE,
            })
    report = mon.monitor_report(
        records, guideline_first_line(cfg), m.window, m.entropy_threshold, m.accept_ceiling,
        m.surfacing_floor, m.probe_rate, cfg.seed,
    ).to_dict()
    report["kappa_source"] = kappa_source
    report["override_gap"] = sr.gap_rows()
    report["partition_ok"] = all(
        sr.total(window=w) == sum(1 for r in records if r.time_index // m.window == w) for w in sr.windows
    )
    entropy_rows = [vars(f) for f in mon.acceptance_entropy(records, None, m.entropy_threshold, m.accept_ceiling)]
    files = {
        "stratified_rates.csv": io.rows_to_csv(sr.rows(), ["domain", "window", "band", "overrides", "interactions", "rate"]),
        "override_gap.csv": io.rows_to_csv(sr.gap_rows(), ["domain", "window", "gap"]),
        "concordance.csv": io.rows_to_csv(conc_rows, ["posterior", "type", "concordance", "n", "counterfactual_source"]),
        "acceptance_entropy.csv": io.rows_to_csv(entropy_rows, ["clinician_id", "accept_rate", "entropy", "n", "flagged"]),
        "monitor_report.json": io.to_json(report),
    }
    return files, report


# --- stacking loop --------------------------------------------------------------------


def model_recommender(
    model: RewardModel, catalog: Catalog, probes: Mapping[str, set[str]] | None = None,
    first_line: Mapping[str, Sequence[str]] | None = None,
) -> Callable:
    """Recommend argmax R_theta; force-surface probed actions for scheduled patients."""
    probes = probes or {}
    first_line = first_line or {}

    def recommend(state, contract) -> ClinicalAction:
        for a, pids in probes.items():
            if state.patient_id in pids and state.cluster in first_line.get(a, ()):
                return catalog.action(a)
        scores = [model.reward(state, a, contract) for a in catalog.actions]
        return catalog.actions[int(np.argmax(scores))]

    return recommend


@dataclass
class StackingRun:
    records: list[InteractionRecord]
    truth: GroundTruth
    models: list[RewardModel] = field(default_factory=list)
    audits: list[list[mon.SuppressedAction]] = field(default_factory=list)


def run_stacking(cfg: ScenarioConfig, n_rounds: int = 3) -> StackingRun:
    """Round 0 follows the guideline policy; later rounds recommend from the
    model trained on everything so far, with probes from the previous audit."""
    first_line = guideline_first_line(cfg)
    records, truth = generate_dataset(cfg, None, 0)
    run = StackingRun(list(records), truth)
    catalog = truth.catalog
    proxies = {k: c.proxy_score for k, c in truth.clinicians.items()}
    probes: dict[str, set[str]] = {}
    for rnd in range(1, n_rounds):
        res = train(run.records, cfg, catalog, "kappa", proxies)
        run.models.append(res.model)
        rec = model_recommender(res.model, catalog, probes, first_line)
        new, _ = generate_dataset(cfg, rec, rnd)
        run.records.extend(new)
        found = mon.suppression_audit(run.records, first_line, cfg.monitors.surfacing_floor, cfg.monitors.probe_rate, cfg.seed)
        run.audits.append(found)
        probes = {s.action_id: set(s.probe_states) for s in found}
    return run


# --- named reproductions -----------------------------------------------------------------


@dataclass
class Reproduction:
    name: str
    verdict: dict
    files: dict[str, bytes]

    @property
    def passed(self) -> bool:
        return self.verdict["verdict"] == "PASS"


def _prefixed(prefix: str, files: Mapping[str, bytes]) -> dict[str, bytes]:
    return {f"{prefix}/{k}": v for k, v in files.items()}


def _proxies(truth: GroundTruth) -> dict[str, Optional[float]]:
    return {k: c.proxy_score for k, c in truth.clinicians.items()}


def reproduce_fig1(seed: Optional[int] = None) -> Reproduction:
    cfg = scenarios.fig1(0 if seed is None else seed)
    sim, records, truth = simulate_files(cfg)
    cat = truth.catalog
    cluster, a_star = FIG1_FOCUS
    naive = train(records, cfg, cat, "naive")
    weighted = train(records, cfg, cat, "kappa", kappa=true_kappa(truth))
    estimated = train(records, cfg, cat, "kappa", _proxies(truth))
    audit_files, _ = audit(records, cfg, true_kappa(truth), "ground_truth")
    m_naive = focus_margin(naive.model, cat, cluster, a_star)
    m_true = focus_margin(weighted.model, cat, cluster, a_star)
    m_est = focus_margin(estimated.model, cat, cluster, a_star)
    checks = {"naive_flips": m_naive < 0, "kappa_weighted_recovers": m_true > 0}
    verdict = {
        "scenario": "fig1", "seed": cfg.seed, "checks": checks,
        "margin_naive": m_naive, "margin_kappa_true": m_true, "margin_kappa_estimated": m_est,
        "estimated_anchor": estimated.summary["anchor"],
        "verdict": "PASS" if all(checks.values()) else "FAIL",
    }
    files = {
        **_prefixed("simulate", sim),
        **_prefixed("train_naive", train_files(naive)),
        **_prefixed("train_kappa_true", train_files(weighted)),
        **_prefixed("train_kappa", train_files(estimated)),
        **_prefixed("audit", audit_files),
    }
    return Reproduction("fig1", verdict, files)


def reproduce_identifiability(seed: Optional[int] = None) -> Reproduction:
    s = 0 if seed is None else seed
    files: dict[str, bytes] = {}
    flags = {}
    sds = {}
    for label, builder in (("homogeneous", scenarios.homogeneous), ("heterogeneous", scenarios.heterogeneous)):
        cfg = builder(s)
        sim, records, truth = simulate_files(cfg)
        res = train(records, cfg, truth.catalog, "kappa", _proxies(truth))
        files.update(_prefixed(f"{label}/simulate", sim))
        files.update(_prefixed(f"{label}/train_kappa", train_files(res)))
        flags[label] = any(res.summary["non_identifiable"].values())
        sds[label] = res.summary["identifiability_sd"]
    checks = {"homogeneous_flagged": flags["homogeneous"], "heterogeneous_not_flagged": not flags["heterogeneous"]}
    verdict = {
        "scenario": "identifiability", "seed": s, "checks": checks, "between_clinician_sd": sds,
        "verdict": "PASS" if all(checks.values()) else "FAIL",
    }
    return Reproduction("identifiability", verdict, files)


def flywheel_gaps(records, truth: GroundTruth, cfg: ScenarioConfig) -> list[float]:
    """Override-rate gap per window, strata fixed by capability at t = 0."""
    sr = mon.stratified_override_rates(records, true_kappa(truth, 0), cfg.monitors.band_edges, cfg.monitors.window)
    return [g for (_, _), g in sorted(sr.gaps.items(), key=lambda kv: kv[0][1])]


def reproduce_flywheel(seed: Optional[int] = None, noise_band: float = 0.02) -> Reproduction:
    cfg = scenarios.flywheel(0 if seed is None else seed)
    sim, records, truth = simulate_files(cfg)
    audit_files, _ = audit(records, cfg, true_kappa(truth, 0), "ground_truth_initial")
    gaps = [abs(g) for g in flywheel_gaps(records, truth, cfg)]
    checks = {
        "final_below_first": len(gaps) >= 2 and gaps[-1] < gaps[0],
        "monotone_within_noise": all(b <= a + noise_band for a, b in zip(gaps, gaps[1:])),
    }
    verdict = {
        "scenario": "flywheel", "seed": cfg.seed, "checks": checks, "abs_gap_by_window": gaps,
        "noise_band": noise_band, "verdict": "PASS" if all(checks.values()) else "FAIL",
    }
    return Reproduction("flywheel", verdict, {**_prefixed("simulate", sim), **_prefixed("audit", audit_files)})


def reproduce_stacking(seed: Optional[int] = None, n_rounds: int = 3) -> Reproduction:
    cfg = scenarios.stacking(0 if seed is None else seed)
    run = run_stacking(cfg, n_rounds)
    final = run.audits[-1]
    suppressed = [s.action_id for s in final]
    checks = {"referral_suppressed": "cardiology_referral" in suppressed}
    audit_files, _ = audit(run.records, cfg, true_kappa(run.truth), "ground_truth")
    verdict = {
        "scenario": "stacking", "seed": cfg.seed, "checks": checks, "rounds": n_rounds,
        "suppressed_actions": [vars(s) for s in final],
        "verdict": "PASS" if all(checks.values()) else "FAIL",
    }
    files = {
        "simulate/dataset.csv": io.records_to_csv(run.records, run.truth.catalog.feature_map.state_dim),
        "simulate/ground_truth.json": io.to_json(run.truth.to_json()),
        "simulate/config.yaml": cfgmod.dumps(cfg).encode(),
        **_prefixed("audit", audit_files),
    }
    return Reproduction("stacking", verdict, files)


def amplification_concordances(records, truth: GroundTruth, cfg: ScenarioConfig) -> dict:
    """Held-out anchor concordance of R* and of the fit weighted by true capability."""
    cat = truth.catalog
    lc = cfg.learner
    train_recs, held = dl.split_heldout(records, lc.heldout_fraction, cfg.seed)
    pairs = dl.outcome_pairs(held, cat.default)
    biased = dl.fit_with_kappa(train_recs, cat.default, cat.feature_map, true_kappa(truth), lc.beta0, lc.beta1,
                               lc.ridge, None, lc.beta_form).model
    true_c = dl.anchor_concordance(truth.true_model(), pairs)
    report = dl.anchor_validate(biased, pairs, lc.anchor_threshold, lc.anchor_min_pairs)
    return {"true_model": true_c, "biased_model": report.concordance, "biased_passes": report.passed,
            "threshold": lc.anchor_threshold, "n_pairs": len(pairs)}


def reproduce_amplification(seed: Optional[int] = None) -> Reproduction:
    cfg = scenarios.amplification(0 if seed is None else seed)
    sim, records, truth = simulate_files(cfg)
    cat = truth.catalog
    naive = train(records, cfg, cat, "naive")
    trained = train(records, cfg, cat, "kappa", _proxies(truth))
    conc = amplification_concordances(records, truth, cfg)
    checks = {
        "true_model_beats_biased": conc["true_model"] > conc["biased_model"],
        "biased_model_rejected": not conc["biased_passes"],
    }
    verdict = {
        "scenario": "amplification", "seed": cfg.seed, "checks": checks, "anchor": conc,
        "trained_kappa_anchor": trained.summary["anchor"], "trained_kappa_reinits": trained.summary.get("reinits"),
        "naive_anchor": naive.summary["anchor"],
        "verdict": "PASS" if all(checks.values()) else "FAIL",
    }
    files = {
        **_prefixed("simulate", sim),
        **_prefixed("train_naive", train_files(naive)),
        **_prefixed("train_kappa", train_files(trained)),
    }
    return Reproduction("amplification", verdict, files)


REPRODUCERS = {
    "fig1": reproduce_fig1,
    "identifiability": reproduce_identifiability,
    "flywheel": reproduce_flywheel,
    "stacking": reproduce_stacking,
    "amplification": reproduce_amplification,
}


def reproduce(name: str, seed: Optional[int] = None) -> Reproduction:
    try:
        fn = REPRODUCERS[name]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(REPRODUCIBLE)}") from None
    rep = fn(seed)
    rep.files["verdict.json"] = io.to_json(rep.verdict)
    return rep
