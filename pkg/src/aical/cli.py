"""Command-line entry point: simulate | score | fit | calibrate | evaluate | report.

Each stage reads the previous stage's artifacts from the work directory, one
subdirectory per seed:

    <work>/seed-<s>/logs/*.jsonl, manifest.json          simulate
    <work>/seed-<s>/stats.json, scored/*.jsonl           score
    <work>/seed-<s>/params.json                          fit
    <work>/seed-<s>/calibrated/*.npz                     calibrate
    <work>/eval_report.json                              evaluate
    <report dir>/...                                     report

Exit codes: 0 ok, 1 usage, 2 data error, 3 convergence warning under --strict.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .anomaly import NormalizationStats, StatsError
from .config import RunConfig, apply_overrides, dump_config, load_config
from .datamodel import DataError, read_sequences, write_sequences
from .sim import emit_protocol_suite

log = logging.getLogger("aical")

REPORT_DIR_ENV = "AICAL_REPORT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class MissingArtifact(DataError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run `aical {stage}` first")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _seed_dir(cfg: RunConfig, seed: int) -> Path:
    return Path(cfg.work_dir) / f"seed-{seed}"


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_split(path: Path, manifest: dict) -> list:
    seqs = read_sequences(path)
    meta = manifest.get("anomalies", {})
    for s in seqs:
        s.meta = dict(meta.get(s.seq_id, {"kind": "nominal", "severity": 0}))
    return seqs


def _split_names(manifest: dict) -> list[str]:
    return sorted(manifest["splits"])


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(cfg: RunConfig, args) -> int:
    for seed in cfg.seeds:
        bundle = emit_protocol_suite(cfg.sim_config(seed))
        d = _seed_dir(cfg, seed)
        bundle.save(d)
        log.info("seed %d: wrote %d splits to %s", seed, len(bundle.splits), d)
    return EXIT_OK


def cmd_score(cfg: RunConfig, args) -> int:
    for seed in cfg.seeds:
        d = _seed_dir(cfg, seed)
        manifest = json.loads(_require(d / "manifest.json", "simulate").read_text())
        splits = {name: _read_split(_require(d / "logs" / f"{name}.jsonl", "simulate"), manifest)
                  for name in _split_names(manifest)}
        stats_path = Path(args.stats) if args.stats else d / "stats.json"
        if args.fit_stats:
            stats = pl.fit_stats(splits["in_cal"], cfg)
            stats.save(stats_path)
        else:
            stats = NormalizationStats.load(_require(stats_path, "score --fit-stats"))
        scored, skipped = pl.score_splits(splits, stats)
        for name, seqs in scored.items():
            write_sequences(seqs, d / "scored" / f"{name}.jsonl")
        _write_json(d / "scored" / "summary.json", {
            "frames_without_context": skipped,
            "frames_scored": {k: int(sum(len(s) for s in v)) for k, v in scored.items()},
        })
    return EXIT_OK


def _read_scored(d: Path, name: str, manifest: dict):
    return pl.Block.from_sequences(_read_split(_require(d / "scored" / f"{name}.jsonl", "score"), manifest))


def cmd_fit(cfg: RunConfig, args) -> int:
    code = EXIT_OK
    for seed in cfg.seeds:
        d = _seed_dir(cfg, seed)
        manifest = json.loads(_require(d / "manifest.json", "simulate").read_text())
        cal = _read_scored(d, "in_cal", manifest)
        aug = _read_scored(d, "aug", manifest)
        fm = pl.fit_methods(cal, aug, cfg, seed)
        _write_json(d / "params.json", fm.to_json())
        for w in fm.warnings():
            log.warning("seed %d: %s", seed, w)
            if args.strict:
                code = EXIT_CONVERGENCE
    return code


def cmd_calibrate(cfg: RunConfig, args) -> int:
    hs = cfg.calib.horizons
    for seed in cfg.seeds:
        d = _seed_dir(cfg, seed)
        fm = pl.FittedMethods.from_json(json.loads(_require(d / "params.json", "fit").read_text()))
        manifest = json.loads(_require(d / "manifest.json", "simulate").read_text())
        out = d / "calibrated"
        out.mkdir(parents=True, exist_ok=True)
        for proto in pl.EVAL_PROTOCOLS:
            block = _read_scored(d, proto, manifest)
            cal = pl.calibrate_block(fm, block, hs)
            np.savez(out / f"{proto}.npz", labels=block.labels, rho=block.rho, delta=block.delta,
                     severity=block.severity, horizons=np.asarray(hs), **{f"p_{m}": v for m, v in cal.items()})
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    results, inputs = [], {}
    work = Path(cfg.work_dir)
    for seed in cfg.seeds:
        d = _seed_dir(cfg, seed)
        params = _require(d / "params.json", "fit")
        fm = pl.FittedMethods.from_json(json.loads(params.read_text()))
        inputs[str(params.relative_to(work))] = pl.file_sha256(params)
        calibrated, labels = {}, {}
        for proto in pl.EVAL_PROTOCOLS:
            path = _require(d / "calibrated" / f"{proto}.npz", "calibrate")
            inputs[str(path.relative_to(work))] = pl.file_sha256(path)
            with np.load(path) as z:
                labels[proto] = z["labels"]
                calibrated[proto] = {m: z[f"p_{m}"] for m in pl.ALL_METHODS}
        results.append(pl.SeedResult(seed, calibrated, labels, fm.warnings()))
    rep = pl.evaluate(results, cfg.calib.horizons, cfg.eval.eval_horizons, cfg.eval.n_bins)
    rep.provenance = {"config_sha256": cfg.digest(), "inputs": dict(sorted(inputs.items()))}
    _write_json(work / "eval_report.json", rep.to_json())
    if rep.warnings:
        for w in rep.warnings:
            log.warning(w)
        if args.strict:
            return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    work = Path(cfg.work_dir)
    src = _require(work / "eval_report.json", "evaluate")
    rep = pl.EvalReport.from_json(json.loads(src.read_text()))
    rep.provenance = dict(rep.provenance, eval_report_sha256=pl.file_sha256(src))
    out = cfg.reports
    files = pl.write_report(rep, out)
    (out / "config.ini").write_text(dump_config(cfg, include_paths=False))
    log.info("wrote %d report files to %s", len(files) + 1, out)
    if rep.warnings and args.strict:
        return EXIT_CONVERGENCE
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "score": cmd_score, "fit": cmd_fit, "calibrate": cmd_calibrate,
            "evaluate": cmd_evaluate, "report": cmd_report}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aical", description="Anomaly-aware confidence calibration pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--work-dir")
        s.add_argument("--seed", type=int, action="append", dest="seeds",
                       help="seed to process; repeat for several (default from config)")
        s.add_argument("--strict", action="store_true", help="exit 3 on optimizer convergence warnings")
        if name == "simulate":
            s.add_argument("--n-sequences", type=int)
            s.add_argument("--n-aug-sequences", type=int)
            s.add_argument("--n-ood-sequences", type=int)
            s.add_argument("--frames", type=int)
        if name == "score":
            s.add_argument("--fit-stats", action="store_true", help="fit normalisation stats on in_cal first")
            s.add_argument("--stats", help="stats JSON path (default <seed dir>/stats.json)")
        if name == "report":
            s.add_argument("--report-dir", help=f"output directory (env {REPORT_DIR_ENV} also works)")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    env_dir = os.environ.get(REPORT_DIR_ENV)
    over = {
        "work_dir": args.work_dir,
        "seeds": tuple(args.seeds) if args.seeds else None,
        "report_dir": getattr(args, "report_dir", None) or env_dir,
        "sim.n_sequences": getattr(args, "n_sequences", None),
        "sim.n_aug_sequences": getattr(args, "n_aug_sequences", None),
        "sim.n_ood_sequences": getattr(args, "n_ood_sequences", None),
        "sim.frames_per_sequence": getattr(args, "frames", None),
    }
    return apply_overrides(cfg, over)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"aical: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            code = COMMANDS[args.command](cfg, args)
    except (DataError, StatsError) as e:
        print(f"aical: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as e:
        print(f"aical: error: {e}", file=sys.stderr)
        return EXIT_USAGE if isinstance(e, ValueError) else EXIT_DATA
    # wall-clock goes to its own file so the report itself stays byte-stable
    timing = Path(cfg.work_dir) / "timing.json"
    if timing.parent.exists():
        prev = json.loads(timing.read_text()) if timing.exists() else {}
        prev[args.command] = round(time.perf_counter() - t0, 3)
        timing.write_text(json.dumps(prev, indent=1, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
