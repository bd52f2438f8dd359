"""Command line entry point: ``splitpriv <subcommand> --config exp.toml``.

Exit codes: 0 on full success, 2 when some cuts failed, 1 on configuration errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, SplitPrivError
from ..modelgraph import profile
from .config import ExperimentConfig, from_mapping, load_config
from .pipeline import Experiment, RunRecord, run_pipeline
from .report import emit_report

SUBCOMMANDS = ("train-user", "profile-cuts", "defend", "measure-mi", "attack", "evaluate", "run", "report")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat dotted-key TOML config; defaults apply when omitted")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--cuts", help="comma-separated cut labels (overrides config 'cuts')")
    common.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    common.add_argument("--format", default="csv,json", help="report formats: csv,json,plots")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="splitpriv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.out:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.cuts:
        overrides["cuts"] = [c.strip() for c in args.cuts.split(",") if c.strip()]
    return from_mapping(overrides, cfg) if overrides else cfg


def _per_cut(exp: Experiment, fn) -> tuple[dict, dict]:
    results, failures = {}, {}
    for cut in exp.cuts():
        try:
            results[cut.label] = fn(cut)
        except (SplitPrivError, ArithmeticError, ValueError, KeyError) as exc:
            failures[cut.label] = f"{type(exc).__name__}: {exc}"
    return results, failures


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(path)


def _stage(command: str, exp: Experiment, formats) -> int:
    out = exp.out
    if command == "train-user":
        _, _, summary = exp.user_model
        _write_json(out / "train_user.json", {"accuracy_u": exp.accuracy_u(), **summary})
        return 0
    if command == "profile-cuts":
        path = out / "profile.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cut", "index", "flops_ratio", "params_ratio"])
            for row in exp.profile_cuts():
                w.writerow([row["cut"], row["index"], repr(row["flops_ratio"]), repr(row["params_ratio"])])
        with open(out / "layers.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "params", "flops", "output_shape"])
            for lp in profile(exp.graph):
                w.writerow([lp.name, lp.params, lp.flops, "x".join(map(str, lp.output_spec.shape))])
        print(path)
        return 0
    if command == "defend":
        def one(cut):
            d = exp.defense(cut)
            calib = d.calibration
            return {"strategy": d.config.strategy, "sigma": d.bank.sigma, "bank_size": d.bank.size,
                    "calibrated_pa": calib.achieved_pa if calib else None}
        results, failures = _per_cut(exp, one)
        _write_json(out / "defend.json", {"defenses": results, "failures": failures})
    elif command == "measure-mi":
        results, failures = _per_cut(exp, exp.mi)
        _write_json(out / "mi.json", {"mi": results, "failures": failures})
    elif command == "attack":
        base = exp.baseline()
        results, failures = _per_cut(exp, exp.attack)
        _write_json(out / "attack.json", {**base, "accuracy_a_prime": results, "failures": failures})
    elif command == "evaluate":
        results, failures = _per_cut(exp, exp.accuracy_u_prime)
        _write_json(out / "evaluate.json", {"accuracy_u": exp.accuracy_u(), "accuracy_u_prime": results,
                                            "failures": failures})
    else:  # report
        record = RunRecord(exp.digest)
        results, failures = _per_cut(exp, exp.report)
        record.reports = list(results.values())
        record.failures = failures
        for p in emit_report(record, out, formats):
            print(p)
    return 2 if failures else 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    try:
        cfg = _config(args)
        if args.command == "run":
            record = run_pipeline(cfg)
            for p in emit_report(record, cfg.out, formats):
                print(p)
            for cut, err in record.failures.items():
                print(f"cut {cut} failed: {err}", file=sys.stderr)
            return record.exit_code
        exp = Experiment(cfg, reuse=True)
        exp.cuts()  # validates explicit cut labels early
        return _stage(args.command, exp, formats)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
