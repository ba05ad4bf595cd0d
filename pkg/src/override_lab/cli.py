"""Command-line front end.

    override-lab simulate  --config fig1.yaml --out runs/fig1
    override-lab train     --dataset runs/fig1 --weighting kappa --out runs/fig1/train
    override-lab audit     --dataset runs/fig1 --train runs/fig1/train --out runs/fig1/audit
    override-lab reproduce --scenario fig1 --out runs/repro

Exit codes: 0 success, 2 validation error, 3 verdict or anchor failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import config as cfgmod
from . import io, pipelines, scenarios
from .world_sim import Catalog

EXIT_OK, EXIT_INVALID, EXIT_FAIL = 0, 2, 3
OUT_ENV = "OVERRIDE_LAB_OUT"

log = logging.getLogger("override_lab")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(arg: Optional[str], command: str) -> Path:
    if arg:
        return Path(arg)
    base = os.environ.get(OUT_ENV)
    if not base:
        raise cfgmod.ConfigError("--out", f"no output directory (pass --out or set {OUT_ENV})")
    return Path(base) / command


def _finish(out: Path, files: dict[str, bytes], cfg: cfgmod.ScenarioConfig, started: str, command: str) -> None:
    m = io.manifest(cfg.digest(), cfg.seed, cfgmod.resolved_defaults(cfg), files, started, _now(), command)
    io.write_outputs(out, {**files, "manifest.json": io.to_json(m)})


def _load_config(args, dataset_dir: Optional[Path] = None) -> cfgmod.ScenarioConfig:
    if getattr(args, "scenario", None):
        if args.scenario not in scenarios.SCENARIOS:
            raise cfgmod.ConfigError("--scenario", f"unknown scenario {args.scenario!r}")
        cfg = scenarios.SCENARIOS[args.scenario](0)
    elif args.config:
        cfg = cfgmod.load(args.config)
    elif dataset_dir is not None and (dataset_dir / "config.yaml").exists():
        cfg = cfgmod.load(dataset_dir / "config.yaml")
    else:
        raise cfgmod.ConfigError("--config", "no scenario config given")
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _dataset_paths(arg: str) -> tuple[Path, Path]:
    p = Path(arg)
    if p.is_dir():
        return p / "dataset.csv", p
    return p, p.parent


def _proxies(dataset_dir: Path) -> Optional[dict[str, Optional[float]]]:
    path = dataset_dir / "clinicians.csv"
    if not path.exists():
        return None
    return {r["clinician"]: (float(r["proxy_score"]) if r["proxy_score"] else None) for r in io.read_csv_rows(path)}


# --- commands ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    started = _now()
    cfg = _load_config(args)
    out = _out_dir(args.out, "simulate")
    files, records, _ = pipelines.simulate_files(cfg)
    _finish(out, files, cfg, started, "simulate")
    print(f"simulated {len(records)} interactions -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    data_path, data_dir = _dataset_paths(args.dataset)
    cfg = _load_config(args, data_dir)
    catalog = Catalog.from_config(cfg)
    records = io.read_records(data_path, catalog)
    if not records:
        raise io.DataError(f"{data_path}: no interaction records to train on")
    out = _out_dir(args.out, "train")
    proxies = _proxies(data_dir) if args.weighting == "kappa" else None
    result = pipelines.train(records, cfg, catalog, args.weighting, proxies, args.rounds)
    _finish(out, pipelines.train_files(result), cfg, started, "train")
    anchor = result.summary["anchor"]
    status = "n/a" if anchor is None else f"{anchor['concordance']:.3f} ({'pass' if anchor['passed'] else 'FAIL'})"
    print(f"trained ({args.weighting}) on {len(records)} interactions; anchor concordance {status} -> {out}")
    if args.weighting == "kappa" and result.anchor_failed:
        return EXIT_FAIL
    return EXIT_OK


def cmd_audit(args) -> int:
    started = _now()
    data_path, data_dir = _dataset_paths(args.dataset)
    cfg = _load_config(args, data_dir)
    catalog = Catalog.from_config(cfg)
    records = io.read_records(data_path, catalog)
    out = _out_dir(args.out, "audit")
    gt_path = data_dir / "ground_truth.json"
    if not records:
        kappa, source = {}, "none"
    elif args.train:
        summary = json.loads((Path(args.train) / "summary.json").read_text())
        kappa = {(r["clinician"], r["domain"]): r["mean"] for r in summary["kappa_hat"]}
        source = "estimated"
        if not kappa:
            raise io.DataError(f"{args.train}: training summary has no capability table")
    elif gt_path.exists():
        kappa = pipelines.kappa_from_ground_truth_json(json.loads(gt_path.read_text()))
        source = "ground_truth_initial"
    else:
        raise io.DataError("audit needs --train or a ground_truth.json next to the dataset")
    files, report = pipelines.audit(records, cfg, kappa, source)
    _finish(out, files, cfg, started, "audit")
    if report.get("status") == "no data":
        print(f"no data in {data_path}; wrote empty report -> {out}")
    else:
        print(f"audited {len(records)} interactions; {len(report['automation_flags'])} automation flags, "
              f"{len(report['suppressed_actions'])} suppressed actions -> {out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    started = _now()
    if args.scenario not in pipelines.REPRODUCIBLE:
        raise cfgmod.ConfigError("--scenario", f"unknown scenario {args.scenario!r}; choose from "
                                 f"{', '.join(pipelines.REPRODUCIBLE)}")
    out = _out_dir(args.out, f"reproduce/{args.scenario}")
    rep = pipelines.reproduce(args.scenario, args.seed)
    cfg = scenarios.SCENARIOS[args.scenario](0 if args.seed is None else args.seed)
    _finish(out, rep.files, cfg, started, f"reproduce {args.scenario}")
    print(f"{args.scenario}: {rep.verdict['verdict']} -> {out / 'verdict.json'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="override-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if config:
            sp.add_argument("--config", help="scenario YAML")
            sp.add_argument("--scenario", help="use a built-in scenario instead of --config")

    s = sub.add_parser("simulate", help="generate a synthetic interaction dataset")
    common(s)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit reward and capability models")
    common(t)
    t.add_argument("--dataset", required=True, help="dataset CSV or simulate output directory")
    t.add_argument("--weighting", choices=["naive", "kappa"], default="kappa")
    t.add_argument("--rounds", type=int, help="alternation rounds (0 = cold-start snapshot)")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("audit", help="stratified rates, concordance and failure-mode monitors")
    common(a)
    a.add_argument("--dataset", required=True, help="dataset CSV or simulate output directory")
    a.add_argument("--train", help="train output directory (capability bands from its estimates)")
    a.set_defaults(func=cmd_audit)

    r = sub.add_parser("reproduce", help="run a named end-to-end experiment and write a verdict")
    common(r, config=False)
    r.add_argument("--scenario", required=True, help=", ".join(pipelines.REPRODUCIBLE))
    r.set_defaults(func=cmd_reproduce)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, io.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
