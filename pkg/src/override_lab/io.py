"""CSV / JSON serialisation of datasets, reports and run manifests.

Serialisers return bytes so that content digests can be taken before
anything touches the disk. Floats are written with ``repr`` and therefore
round-trip exactly.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import platform
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy
import yaml

from . import __version__
from .kernel import Decision, DecisionKind, InteractionRecord, Outcome, PatientState

RECORD_COLUMNS = [
    "t", "patient", "domain", "clinician", "contract", "rec_action", "decision", "alt_action",
    "outcome_quality", "outcome_observed", "reason_code",
]
EXTRA_COLUMNS = [
    "round", "cluster", "executed_action", "outcome_lag", "event_flag", "cf_quality", "true_type",
]


class DataError(ValueError):
    """Dataset does not match the expected schema or scenario catalog."""


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: Sequence[Mapping], fieldnames: Optional[Sequence[str]] = None) -> bytes:
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fieldnames})
    return buf.getvalue().encode()


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else None
    return o


def to_json(obj) -> bytes:
    return (json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n").encode()


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --- interaction records ----------------------------------------------------------


def records_to_csv(records: Sequence[InteractionRecord], state_dim: Optional[int] = None) -> bytes:
    if state_dim is None:
        state_dim = len(records[0].state.features) if records else 0
    cols = RECORD_COLUMNS + EXTRA_COLUMNS + [f"s_{i}" for i in range(state_dim)]
    rows = []
    for r in records:
        o, cf = r.outcome, r.counterfactual
        row = {
            "t": r.time_index,
            "patient": r.state.patient_id,
            "domain": r.domain_id,
            "clinician": r.clinician_id,
            "contract": r.contract.context_id,
            "rec_action": r.recommendation.action_id,
            "decision": r.decision.kind.value,
            "alt_action": r.decision.alternative.action_id if r.decision.alternative else None,
            "outcome_quality": o.quality if o is not None else None,
            "outcome_observed": o.observed if o is not None else None,
            "reason_code": r.reason_code,
            "round": r.round_index,
            "cluster": r.state.cluster,
            "executed_action": r.executed.action_id,
            "outcome_lag": o.lag if o is not None else None,
            "event_flag": o.event_flag if o is not None else None,
            "cf_quality": cf.quality if cf is not None else None,
            "true_type": r.true_type,
        }
        for i, v in enumerate(r.state.features):
            row[f"s_{i}"] = float(v)
        rows.append(row)
    return rows_to_csv(rows, cols)


def _opt_float(s: str) -> Optional[float]:
    return None if s == "" else float(s)


def read_records(path: Path, catalog) -> list[InteractionRecord]:
    """Parse a dataset CSV against a scenario catalog."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in RECORD_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        s_cols = sorted((c for c in header if c.startswith("s_")), key=lambda c: int(c[2:]))
        state_dim = catalog.feature_map.state_dim
        if len(s_cols) != state_dim:
            raise DataError(f"{path}: {len(s_cols)} state feature columns, scenario catalog expects {state_dim}")
        rows = list(reader)
    actions = {a.action_id: a for a in catalog.actions}
    contracts = {c.context_id: c for c in catalog.contracts}

    def action(name, line):
        try:
            return actions[name]
        except KeyError:
            raise DataError(f"{path}: line {line}: action {name!r} not in the scenario catalog") from None

    out = []
    for line, row in enumerate(rows, start=2):
        if row["contract"] not in contracts:
            raise DataError(f"{path}: line {line}: contract {row['contract']!r} not in the scenario catalog")
        feats = np.array([float(row[c]) for c in s_cols])
        state = PatientState(row["patient"], row["domain"], feats, int(row["t"]), row.get("cluster") or None)
        rec = action(row["rec_action"], line)
        alt = action(row["alt_action"], line) if row["alt_action"] else None
        decision = Decision(DecisionKind(row["decision"]), alt)
        executed_name = row.get("executed_action") or ""
        if executed_name:
            executed = action(executed_name, line)
        else:
            executed = rec if decision.kind is DecisionKind.ACCEPT else (alt or catalog.default)
        r = InteractionRecord(
            state, rec, decision, executed, row["clinician"], contracts[row["contract"]],
            reason_code=row["reason_code"] or None, round_index=int(row.get("round") or 0),
            true_type=row.get("true_type") or None,
        )
        if row["outcome_observed"] != "":
            observed = row["outcome_observed"] == "1"
            lag = int(row.get("outcome_lag") or 0)
            q = _opt_float(row["outcome_quality"]) if observed else None
            flag = row.get("event_flag") == "1"
            cfq = _opt_float(row.get("cf_quality", ""))
            # counterfactual event flags are not exported
            cf = Outcome(cfq, False, lag, True) if observed and cfq is not None else None
            r.attach_outcome(Outcome(q, flag, lag, observed), cf)
        out.append(r)
    return out


# --- manifest ------------------------------------------------------------------------


def versions() -> dict:
    return {
        "override_lab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pyyaml": yaml.__version__,
        "python": platform.python_version(),
    }


def manifest(
    config_hash: str,
    seed: int,
    resolved_config: dict,
    outputs: Mapping[str, bytes],
    started: str,
    finished: str,
    command: str,
) -> dict:
    return {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "versions": versions(),
        "started": started,
        "finished": finished,
        "resolved_config": resolved_config,
        "outputs": [{"path": k, "sha256": sha256(v), "bytes": len(v)} for k, v in sorted(outputs.items())],
    }


def write_outputs(out_dir: Path, files: Mapping[str, bytes]) -> None:
    for rel, data in files.items():
        p = Path(out_dir) / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)


def read_csv_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def iter_digests(m: dict) -> Iterable[tuple[str, str]]:
    for e in m["outputs"]:
        yield e["path"], e["sha256"]
