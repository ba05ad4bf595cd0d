"""Convergence metrics and failure-mode monitors over interaction streams.

All functions are pure: identical inputs give identical reports.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import entropy

from .classifier import TypePosterior
from .config import OVERRIDE_TYPES
from .kernel import DecisionKind, InteractionRecord

COUNTERFACTUAL_SOURCE = "simulator"


# --- stratified override rates -------------------------------------------------


def band_labels(n_edges: int) -> list[str]:
    if n_edges == 2:
        return ["low", "mid", "high"]
    if n_edges == 1:
        return ["low", "high"]
    return [f"band{i}" for i in range(n_edges + 1)]


def kappa_band(kappa: float, edges: Sequence[float]) -> str:
    return band_labels(len(edges))[int(np.searchsorted(edges, kappa, side="right"))]


@dataclass
class StratifiedRates:
    edges: tuple[float, ...]
    window: int
    # (band, domain, window) -> (overrides, interactions)
    counts: dict[tuple[str, str, int], tuple[int, int]]

    def rate(self, band: str, domain: str, window: int) -> Optional[float]:
        c = self.counts.get((band, domain, window))
        return None if c is None else c[0] / c[1]

    @property
    def windows(self) -> list[int]:
        return sorted({w for _, _, w in self.counts})

    @property
    def domains(self) -> list[str]:
        return sorted({d for _, d, _ in self.counts})

    @property
    def gaps(self) -> dict[tuple[str, int], float]:
        """(domain, window) -> top-band rate minus bottom-band rate, where both exist."""
        labels = band_labels(len(self.edges))
        lo, hi = labels[0], labels[-1]
        out = {}
        for d in self.domains:
            for w in self.windows:
                r_hi, r_lo = self.rate(hi, d, w), self.rate(lo, d, w)
                if r_hi is not None and r_lo is not None:
                    out[(d, w)] = r_hi - r_lo
        return out

    def total(self, domain: Optional[str] = None, window: Optional[int] = None) -> int:
        return sum(
            n for (b, d, w), (_, n) in self.counts.items()
            if (domain is None or d == domain) and (window is None or w == window)
        )

    def rows(self) -> list[dict]:
        out = []
        for (b, d, w), (o, n) in sorted(self.counts.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
            out.append({"domain": d, "window": w, "band": b, "overrides": o, "interactions": n, "rate": o / n})
        return out

    def gap_rows(self) -> list[dict]:
        return [{"domain": d, "window": w, "gap": g} for (d, w), g in sorted(self.gaps.items())]


def stratified_override_rates(
    records: Sequence[InteractionRecord],
    kappa: Mapping[tuple[str, str], float],
    band_edges: Sequence[float] = (0.4, 0.7),
    window: int = 13,
    time_varying: bool = False,
) -> StratifiedRates:
    """Override rate per (capability band, domain, time window).

    ``kappa`` maps (clinician, domain) to a scalar, or to a per-step sequence
    when ``time_varying`` is set. Strata with no records are absent.
    """
    edges = tuple(float(e) for e in band_edges)
    if not edges or any(not 0.0 <= e <= 1.0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"band edges must be strictly increasing within [0, 1], got {edges}")
    if window < 1:
        raise ValueError("window must be >= 1")
    counts: dict[tuple[str, str, int], list[int]] = defaultdict(lambda: [0, 0])
    for r in records:
        k = kappa[(r.clinician_id, r.domain_id)]
        if time_varying:
            k = k[min(r.time_index, len(k) - 1)]
        c = counts[(kappa_band(float(k), edges), r.domain_id, r.time_index // window)]
        c[0] += r.decision.is_override
        c[1] += 1
    return StratifiedRates(edges, window, {k: (v[0], v[1]) for k, v in counts.items()})


# --- outcome concordance by override type ------------------------------------------


def concordance_by_type(
    records: Sequence[InteractionRecord],
    posteriors: Sequence[Optional[TypePosterior]],
    min_outcomes: int = 30,
) -> dict[str, Optional[dict]]:
    """Posterior-weighted share of overrides whose executed action beat the
    counterfactual arm. Ties count one half. Types with less weighted
    evidence than ``min_outcomes`` are reported as ``None``.

    Accepted recommendations are reported under ``"ACCEPT"`` for reference.
    """
    if len(records) != len(posteriors):
        raise ValueError("one posterior per record is required")
    wins = defaultdict(float)
    weight = defaultdict(float)
    for r, post in zip(records, posteriors):
        o, cf = r.outcome, r.counterfactual
        if o is None or cf is None or not (o.observed and cf.observed):
            continue
        if r.decision.is_override and r.executed == r.recommendation:
            continue
        score = 1.0 if o.quality > cf.quality else (0.5 if o.quality == cf.quality else 0.0)
        if r.decision.kind is DecisionKind.ACCEPT:
            wins["ACCEPT"] += score
            weight["ACCEPT"] += 1.0
            continue
        if post is None:
            continue
        for t, p in zip(OVERRIDE_TYPES, post.probs):
            wins[t] += p * score
            weight[t] += p
    out: dict[str, Optional[dict]] = {}
    for t in (*OVERRIDE_TYPES, "ACCEPT"):
        n = weight.get(t, 0.0)
        out[t] = None if n < min_outcomes or n == 0 else {
            "concordance": wins[t] / n, "n": n, "counterfactual_source": COUNTERFACTUAL_SOURCE,
        }
    return out


# --- automation bias -------------------------------------------------------------------


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p) variable."""
    return float(entropy([p, 1.0 - p], base=2))


@dataclass(frozen=True)
class EntropyFlag:
    clinician_id: str
    accept_rate: float
    entropy: float
    n: int
    flagged: bool


def acceptance_entropy(
    records: Sequence[InteractionRecord],
    window: Optional[tuple[int, int]] = None,
    threshold: float = 0.4,
    ceiling: float = 0.9,
) -> list[EntropyFlag]:
    """Per-clinician acceptance entropy over steps ``[start, stop)`` (all
    steps by default). Flags low entropy with an accept rate above
    ``ceiling``; uniformly rejecting clinicians are not automation-biased."""
    acc = defaultdict(int)
    n = defaultdict(int)
    for r in records:
        if window is not None and not window[0] <= r.time_index < window[1]:
            continue
        n[r.clinician_id] += 1
        acc[r.clinician_id] += r.decision.kind is DecisionKind.ACCEPT
    if not n:
        raise ValueError("no records in the window")
    out = []
    for cid in sorted(n):
        rate = acc[cid] / n[cid]
        h = binary_entropy(rate)
        out.append(EntropyFlag(cid, rate, h, n[cid], h < threshold and rate > ceiling))
    return out


# --- suppression (stacking failure) ---------------------------------------------------


@dataclass
class SuppressedAction:
    action_id: str
    first_round_below: int
    surfacing_by_round: dict[int, Optional[float]]
    floor: float
    probe_states: list[str] = field(default_factory=list)


def suppression_audit(
    records: Sequence[InteractionRecord],
    guideline_first_line: Mapping[str, Sequence[str]],
    floor: float = 0.05,
    probe_rate: float = 0.01,
    seed: int = 0,
) -> list[SuppressedAction]:
    """Guideline first-line actions whose surfacing frequency among eligible
    states fell below ``floor``.

    ``records`` span at least two training rounds (``round_index``).
    ``guideline_first_line`` maps action -> clusters where it is first-line.
    An action is listed when it is below the floor in the latest round; the
    entry records the first round of the final run below the floor. Each
    listed action gets a deterministic probe schedule: a ``probe_rate``
    share (at least one) of the eligible patient states seen in the latest
    round, where it will be force-surfaced next round.
    """
    rounds = sorted({r.round_index for r in records})
    if len(rounds) < 2:
        raise ValueError("suppression audit needs at least two rounds of recommendations")
    eligible: dict[tuple[str, int], int] = defaultdict(int)
    surfaced: dict[tuple[str, int], int] = defaultdict(int)
    latest_states: dict[str, set[str]] = defaultdict(set)
    last = rounds[-1]
    for r in records:
        for a, clusters in guideline_first_line.items():
            if r.state.cluster in clusters:
                eligible[(a, r.round_index)] += 1
                surfaced[(a, r.round_index)] += r.recommendation.action_id == a
                if r.round_index == last:
                    latest_states[a].add(r.state.patient_id)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out = []
    for a in sorted(guideline_first_line):
        freq = {
            k: (surfaced[(a, k)] / eligible[(a, k)] if eligible[(a, k)] else None) for k in rounds
        }
        if freq[last] is None or freq[last] >= floor:
            continue
        first = last
        for k in reversed(rounds):
            if freq[k] is not None and freq[k] < floor:
                first = k
            elif freq[k] is not None:
                break
        states = sorted(latest_states[a])
        n_probe = max(1, math.ceil(probe_rate * len(states))) if states else 0
        probes = sorted(rng.choice(states, size=n_probe, replace=False).tolist()) if n_probe else []
        out.append(SuppressedAction(a, first, freq, floor, probes))
    return out


# --- report ------------------------------------------------------------------------------


@dataclass
class MonitorReport:
    automation_flags: list[dict]
    suppressed_actions: list[dict]
    complexity_trend: Optional[dict]
    observability: dict[str, dict[str, float]]
    counterfactual_source: str = COUNTERFACTUAL_SOURCE

    def to_dict(self) -> dict:
        return asdict(self)


def complexity_trend(records: Sequence[InteractionRecord], window: int) -> Optional[dict]:
    """Least-squares slope of mean recommended complexity per window."""
    by_w = defaultdict(list)
    for r in records:
        by_w[r.time_index // window].append(r.recommendation.complexity)
    if len(by_w) < 2:
        return None
    ws = sorted(by_w)
    means = [float(np.mean(by_w[w])) for w in ws]
    slope = float(np.polyfit(ws, means, 1)[0])
    return {"slope": slope, "windows": ws, "mean_complexity": means}


def observability(records: Sequence[InteractionRecord]) -> dict[str, dict[str, float]]:
    """Share of matured records with an observed outcome, per contract and per domain."""
    out: dict[str, dict[str, float]] = {}
    for name, key in (("contract", lambda r: r.contract.context_id), ("domain", lambda r: r.domain_id)):
        seen = defaultdict(int)
        obs = defaultdict(int)
        for r in records:
            if r.outcome is None:
                continue
            seen[key(r)] += 1
            obs[key(r)] += r.outcome.observed
        out[name] = {k: obs[k] / seen[k] for k in sorted(seen)}
    return out


def monitor_report(
    records: Sequence[InteractionRecord],
    guideline_first_line: Mapping[str, Sequence[str]],
    window: int = 13,
    entropy_threshold: float = 0.4,
    accept_ceiling: float = 0.9,
    surfacing_floor: float = 0.05,
    probe_rate: float = 0.01,
    seed: int = 0,
) -> MonitorReport:
    flags = [asdict(f) for f in acceptance_entropy(records, None, entropy_threshold, accept_ceiling) if f.flagged]
    suppressed = []
    if len({r.round_index for r in records}) >= 2:
        suppressed = [asdict(s) for s in suppression_audit(records, guideline_first_line, surfacing_floor, probe_rate, seed)]
    return MonitorReport(flags, suppressed, complexity_trend(records, window), observability(records))
