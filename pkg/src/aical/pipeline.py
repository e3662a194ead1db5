"""End-to-end orchestration: score, fit every method, calibrate, evaluate, report.

Functions here are pure in-memory stages; the CLI wraps each with file IO.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .anomaly import NormalizationStats, attach_scores, fit_normalization
from .baselines import BASELINES, apply_baseline, baseline_from_json, baseline_to_json, fit_baseline
from .calib import CalibratorParams, apply_calibrator, fit_calibrator
from .config import RunConfig
from .datamodel import SequenceLog
from .metrics import ace, all_metrics, horizon_averaged_ece, reliability_bins, sce, wilcoxon_signed_rank
from .sim import TEST_KINDS, emit_protocol_suite

OURS = "ours"
# anomaly-conditioned variants: name -> (mode, use_rho, use_delta, tta inputs)
VARIANTS = {
    "ours": ("temperature", True, True, True),
    "tta_rho": ("temperature", True, False, True),
    "tta_delta": ("temperature", False, True, True),
    "shrinkage": ("shrinkage", True, True, True),
    "logit": ("temperature", True, True, False),
}
MAIN_METHODS = ("uncalibrated",) + BASELINES + (OURS,)
ABLATION_METHODS = ("shrinkage", "logit", "tta", "tta_delta", "tta_rho", OURS)
ALL_METHODS = MAIN_METHODS + tuple(m for m in ABLATION_METHODS if m not in MAIN_METHODS)
OOD_PROTOCOLS = tuple(f"ood_{k}" for k in TEST_KINDS)
EVAL_PROTOCOLS = ("in_test",) + OOD_PROTOCOLS


# ---------------------------------------------------------------------------
# data blocks


@dataclass
class Block:
    """Scored frames of one split, stacked across sequences."""

    p_raw: np.ndarray  # (n, H)
    p_tta: np.ndarray  # (n, H)
    labels: np.ndarray  # (n, H)
    rho: np.ndarray
    delta: np.ndarray
    severity: np.ndarray
    embedding: np.ndarray | None = None

    @classmethod
    def from_sequences(cls, seqs: Sequence[SequenceLog]) -> "Block":
        if not seqs:
            raise ValueError("empty split")
        if any(s.rho is None for s in seqs):
            raise ValueError("sequences must be scored first")
        emb = None
        if all(s.embedding is not None for s in seqs):
            emb = np.concatenate([s.embedding for s in seqs])
        return cls(
            p_raw=np.concatenate([s.raw_conf for s in seqs]),
            p_tta=np.concatenate([s.tta_mean() for s in seqs]),
            labels=np.concatenate([s.labels for s in seqs]).astype(float),
            rho=np.concatenate([s.rho for s in seqs]),
            delta=np.concatenate([s.delta for s in seqs]),
            severity=np.concatenate([np.full(len(s), s.meta.get("severity", 0)) for s in seqs]),
            embedding=emb,
        )

    def __len__(self):
        return len(self.labels)


def fit_stats(cal_seqs: Sequence[SequenceLog], cfg: RunConfig) -> NormalizationStats:
    a = cfg.anomaly
    return fit_normalization(cal_seqs, a.features(), alpha=a.alpha, lam=a.lam)


def score_splits(splits: dict[str, list[SequenceLog]], stats: NormalizationStats):
    """Scored copies of every sequence plus the count of frames dropped for lack of context."""
    out, skipped = {}, {}
    for name, seqs in splits.items():
        scored = [attach_scores(s, stats) for s in seqs]
        out[name] = [s for s, _ in scored if len(s)]
        skipped[name] = int(sum(k for _, k in scored))
    return out, skipped


# ---------------------------------------------------------------------------
# fitting and applying


@dataclass
class FittedMethods:
    variants: dict[str, CalibratorParams]
    baselines: dict[str, object]

    def to_json(self) -> dict:
        return {"variants": {k: v.to_json() for k, v in self.variants.items()},
                "baselines": {k: baseline_to_json(v) for k, v in self.baselines.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "FittedMethods":
        return cls({k: CalibratorParams.from_json(v) for k, v in d["variants"].items()},
                   {k: baseline_from_json(v) for k, v in d["baselines"].items()})

    def warnings(self) -> list[str]:
        return [f"{k}: anomaly-weight fit did not converge" for k, v in self.variants.items()
                if not v.fit_info.get("converged", True)]


def fit_methods(cal: Block, aug: Block, cfg: RunConfig, seed: int) -> FittedMethods:
    c = cfg.calib
    hs = c.horizons
    variants = {}
    for name, (mode, use_rho, use_delta, tta) in VARIANTS.items():
        p_id, p_aug = (cal.p_tta, aug.p_tta) if tta else (cal.p_raw, aug.p_raw)
        variants[name] = fit_calibrator(
            p_id, cal.labels, p_aug, aug.labels, cal.rho, cal.delta, aug.rho, aug.delta, hs,
            seed=seed, mode=mode, use_rho=use_rho, use_delta=use_delta, w_bounds=(0.0, c.w_max),
            gtol=c.gtol, maxiter=c.maxiter, balance_ratio=c.balance_ratio)
    baselines = {}
    for kind in BASELINES:
        baselines[kind] = fit_baseline(kind, cal.p_tta, cal.labels, hs, embedding=cal.embedding,
                                       knn_k=c.knn_k, modulation=c.dac_modulation, n_bins=c.hist_bins)
    return FittedMethods(variants, baselines)


def calibrate_block(fm: FittedMethods, block: Block, horizons: Sequence[int]) -> dict[str, np.ndarray]:
    out = {"uncalibrated": block.p_raw}
    for kind, params in fm.baselines.items():
        out[kind] = apply_baseline(params, block.p_tta, horizons, embedding=block.embedding)
    # TTA-only ablation: base temperatures on TTA-averaged confidences, no anomaly terms
    out["tta"] = out["ts"]
    for name, params in fm.variants.items():
        p = block.p_tta if VARIANTS[name][3] else block.p_raw
        out[name] = apply_calibrator(params, p, block.rho, block.delta, horizons)
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SeedResult:
    seed: int
    calibrated: dict[str, dict[str, np.ndarray]]  # protocol -> method -> (n, H)
    labels: dict[str, np.ndarray]  # protocol -> (n, H)
    warnings: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    horizons: tuple[int, ...]
    eval_horizons: tuple[int, ...]
    seeds: tuple[int, ...]
    cells: list[dict]  # one per (seed, protocol, method, horizon)
    hece: dict  # method -> protocol -> list over seeds
    ace_avg: dict  # method -> protocol -> list over seeds (horizon-averaged ACE)
    sce_avg: dict
    reliability: dict  # method -> protocol (or "ood_pooled") -> bins
    wilcoxon: list[dict]
    warnings: list[str]
    provenance: dict = field(default_factory=dict)

    def hece_mean(self, method: str, protocols: Sequence[str] = OOD_PROTOCOLS) -> float:
        """Mean horizon-averaged ECE over the given protocols and all seeds."""
        return float(np.mean([self.hece[method][p] for p in protocols]))

    def to_json(self) -> dict:
        return {
            "horizons": list(self.horizons), "eval_horizons": list(self.eval_horizons),
            "seeds": list(self.seeds), "methods": list(ALL_METHODS), "protocols": list(EVAL_PROTOCOLS),
            "horizon_averaged_ece": self.hece, "horizon_averaged_ace": self.ace_avg,
            "horizon_averaged_sce": self.sce_avg, "reliability": self.reliability,
            "wilcoxon": self.wilcoxon, "warnings": self.warnings, "provenance": self.provenance,
            "cells": self.cells,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        return cls(tuple(d["horizons"]), tuple(d["eval_horizons"]), tuple(d["seeds"]), d["cells"],
                   d["horizon_averaged_ece"], d["horizon_averaged_ace"], d["horizon_averaged_sce"],
                   d["reliability"], d["wilcoxon"], d["warnings"], d.get("provenance", {}))


def _bins_json(p, y, n_bins):
    rb = reliability_bins(p, y, n_bins)
    return {"edges": rb.edges.tolist(), "count": rb.count.tolist(),
            "mean_conf": [None if np.isnan(v) else float(v) for v in rb.mean_conf],
            "accuracy": [None if np.isnan(v) else float(v) for v in rb.accuracy],
            "ece": rb.ece}


def evaluate(results: Sequence[SeedResult], horizons: Sequence[int], eval_horizons: Sequence[int],
             n_bins: int = 15) -> EvalReport:
    hs = [int(k) for k in horizons]
    ehs = [k for k in eval_horizons if k in hs]
    eidx = [hs.index(k) for k in ehs]
    results = sorted(results, key=lambda r: r.seed)
    cells = []
    hece = {m: {p: [] for p in EVAL_PROTOCOLS} for m in ALL_METHODS}
    ace_avg = {m: {p: [] for p in EVAL_PROTOCOLS} for m in ALL_METHODS}
    sce_avg = {m: {p: [] for p in EVAL_PROTOCOLS} for m in ALL_METHODS}
    for r in results:
        for proto in EVAL_PROTOCOLS:
            y = r.labels[proto]
            for m in ALL_METHODS:
                p = r.calibrated[proto][m]
                per_h = {}
                for j, k in enumerate(hs):
                    met = all_metrics(p[:, j], y[:, j], n_bins)
                    cells.append({"seed": r.seed, "protocol": proto, "method": m, "horizon": k, **met})
                    per_h[k] = met["ece"]
                hece[m][proto].append(horizon_averaged_ece(per_h, ehs))
                ace_avg[m][proto].append(horizon_averaged_ece(
                    {k: ace(p[:, hs.index(k)], y[:, hs.index(k)], n_bins) for k in ehs}, ehs))
                sce_avg[m][proto].append(horizon_averaged_ece(
                    {k: sce(p[:, hs.index(k)], y[:, hs.index(k)], n_bins) for k in ehs}, ehs))

    # reliability: pooled over seeds and evaluation horizons with equal frame weight
    reliability = {}
    for m in ALL_METHODS:
        reliability[m] = {}
        pooled_p, pooled_y = [], []
        for proto in EVAL_PROTOCOLS:
            p = np.concatenate([r.calibrated[proto][m][:, eidx].ravel() for r in results])
            y = np.concatenate([r.labels[proto][:, eidx].ravel() for r in results])
            reliability[m][proto] = _bins_json(p, y, n_bins)
            if proto in OOD_PROTOCOLS:
                pooled_p.append(p)
                pooled_y.append(y)
        reliability[m]["ood_pooled"] = _bins_json(np.concatenate(pooled_p), np.concatenate(pooled_y), n_bins)

    # paired test over (OOD protocol, seed) of horizon-averaged ECE
    tests = []
    for m in ALL_METHODS:
        if m in (OURS, "tta"):
            continue
        a = [hece[OURS][p][i] for p in OOD_PROTOCOLS for i in range(len(results))]
        b = [hece[m][p][i] for p in OOD_PROTOCOLS for i in range(len(results))]
        w = wilcoxon_signed_rank(a, b)
        tests.append({"a": OURS, "b": m, "n_pairs": len(a), "n_nonzero": w.n, "statistic": w.statistic,
                      "p_value": w.p_value, "method": w.method,
                      "mean_difference": float(np.mean(np.subtract(a, b)))})
    warns = sorted({w for r in results for w in r.warnings})
    return EvalReport(tuple(hs), tuple(ehs), tuple(r.seed for r in results), cells, hece, ace_avg,
                      sce_avg, reliability, tests, warns)


# ---------------------------------------------------------------------------
# in-memory driver


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    """Simulate, score, fit and calibrate one seed without touching the disk."""
    bundle = emit_protocol_suite(cfg.sim_config(seed))
    stats = fit_stats(bundle.splits["in_cal"], cfg)
    scored, _ = score_splits(bundle.splits, stats)
    fm = fit_methods(Block.from_sequences(scored["in_cal"]), Block.from_sequences(scored["aug"]), cfg, seed)
    hs = cfg.calib.horizons
    calibrated, labels = {}, {}
    for proto in EVAL_PROTOCOLS:
        b = Block.from_sequences(scored[proto])
        calibrated[proto] = calibrate_block(fm, b, hs)
        labels[proto] = b.labels
    return SeedResult(seed, calibrated, labels, fm.warnings())


def run_pipeline(cfg: RunConfig, seeds: Sequence[int] | None = None) -> EvalReport:
    seeds = cfg.seeds if seeds is None else seeds
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        results = [run_seed(cfg, s) for s in seeds]
    rep = evaluate(results, cfg.calib.horizons, cfg.eval.eval_horizons, cfg.eval.n_bins)
    rep.provenance = {"config_sha256": cfg.digest()}
    return rep


# ---------------------------------------------------------------------------
# report files


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6f}"


def _mean_std(v):
    v = np.asarray(v, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _method_table(rep: EvalReport, methods, path: Path, source: dict) -> None:
    protos = list(EVAL_PROTOCOLS)
    header = ["method"] + [f"{p}_{s}" for p in protos for s in ("mean", "std")] + ["ood_mean", "ood_std"]
    rows = []
    for m in methods:
        row = [m]
        for p in protos:
            mu, sd = _mean_std(source[m][p])
            row += [_fmt(mu), _fmt(sd)]
        # per-seed OOD average, then spread across seeds
        per_seed = np.mean([source[m][p] for p in OOD_PROTOCOLS], axis=0)
        mu, sd = _mean_std(per_seed)
        rows.append(row + [_fmt(mu), _fmt(sd)])
    _write_csv(path, header, rows)


def reliability_svg(bins: dict, title: str) -> str:
    """Standalone reliability diagram; fixed-precision coordinates keep output byte-stable."""
    W, H, pad = 320, 340, 40
    side = W - 2 * pad
    top = 40

    def X(v):
        return pad + v * side

    def Y(v):
        return top + (1 - v) * side

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="20" font-family="sans-serif" font-size="12" text-anchor="middle">{title}</text>',
        f'<rect x="{pad}" y="{top}" width="{side}" height="{side}" fill="none" stroke="black"/>',
    ]
    edges = bins["edges"]
    for b, (cnt, acc, conf) in enumerate(zip(bins["count"], bins["accuracy"], bins["mean_conf"])):
        if not cnt:
            continue
        x0, x1 = X(edges[b]), X(edges[b + 1])
        parts.append(f'<rect x="{x0:.2f}" y="{Y(acc):.2f}" width="{x1 - x0:.2f}" height="{Y(0) - Y(acc):.2f}" '
                     'fill="#4a78b5" stroke="white" stroke-width="0.5"/>')
        lo, hi = sorted((acc, conf))
        parts.append(f'<rect x="{x0:.2f}" y="{Y(hi):.2f}" width="{x1 - x0:.2f}" height="{Y(lo) - Y(hi):.2f}" '
                     'fill="#d9534f" fill-opacity="0.35" stroke="#d9534f" stroke-width="0.5"/>')
    parts.append(f'<line x1="{X(0):.2f}" y1="{Y(0):.2f}" x2="{X(1):.2f}" y2="{Y(1):.2f}" '
                 'stroke="gray" stroke-dasharray="4 3"/>')
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{X(v):.2f}" y="{top + side + 14}" font-family="sans-serif" font-size="10" '
                     f'text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{pad - 6}" y="{Y(v) + 3:.2f}" font-family="sans-serif" font-size="10" '
                     f'text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{W / 2:.1f}" y="{H - 8}" font-family="sans-serif" font-size="11" '
                 f'text-anchor="middle">confidence (ECE {100 * bins["ece"]:.1f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(rep: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    # discrimination of the raw predictor per protocol and horizon
    cols = [k for k in (5, 15, 30, 50) if k in rep.horizons]
    rows = []
    for p in EVAL_PROTOCOLS:
        vals = {}
        for k in rep.horizons:
            a = [c["auroc"] for c in rep.cells
                 if c["protocol"] == p and c["method"] == "uncalibrated" and c["horizon"] == k and c["auroc"] is not None]
            vals[k] = float(np.mean(a)) if a else None
        ev = [vals[k] for k in rep.eval_horizons if vals[k] is not None]
        rows.append([p] + [_fmt(vals[k]) for k in cols] + [_fmt(float(np.mean(ev)) if ev else None)])
    path = out / "table_predictor_auroc.csv"
    _write_csv(path, ["protocol"] + [f"k{k}" for k in cols] + ["mean"], rows)
    written.append(path)

    for name, methods, src in [("table_calibration_ece.csv", MAIN_METHODS, rep.hece),
                               ("table_ablation_ece.csv", ABLATION_METHODS, rep.hece),
                               ("table_calibration_ace.csv", MAIN_METHODS, rep.ace_avg),
                               ("table_calibration_sce.csv", MAIN_METHODS, rep.sce_avg)]:
        path = out / name
        _method_table(rep, methods, path, src)
        written.append(path)

    # ECE against horizon, averaged over seeds
    rows = []
    for m in ALL_METHODS:
        for p in EVAL_PROTOCOLS:
            for k in rep.horizons:
                v = [c["ece"] for c in rep.cells if c["method"] == m and c["protocol"] == p and c["horizon"] == k]
                rows.append([m, p, k, _fmt(float(np.mean(v)))])
    path = out / "ece_vs_horizon.csv"
    _write_csv(path, ["method", "protocol", "horizon", "ece"], rows)
    written.append(path)

    path = out / "wilcoxon.csv"
    _write_csv(path, ["a", "b", "n_pairs", "n_nonzero", "statistic", "p_value", "test", "mean_difference"],
               [[t["a"], t["b"], t["n_pairs"], t["n_nonzero"], _fmt(t["statistic"]), f'{t["p_value"]:.6g}',
                 t["method"], _fmt(t["mean_difference"])] for t in rep.wilcoxon])
    written.append(path)

    rows = []
    for m, per in rep.reliability.items():
        for p, bins in per.items():
            e = bins["edges"]
            for b, cnt in enumerate(bins["count"]):
                rows.append([m, p, b, f"{e[b]:.6f}", f"{e[b + 1]:.6f}", cnt,
                             _fmt(bins["mean_conf"][b]), _fmt(bins["accuracy"][b])])
    path = out / "reliability_bins.csv"
    _write_csv(path, ["method", "protocol", "bin", "lo", "hi", "count", "mean_conf", "accuracy"], rows)
    written.append(path)

    svg_dir = out / "reliability"
    svg_dir.mkdir(exist_ok=True)
    for m, per in rep.reliability.items():
        for p, bins in per.items():
            path = svg_dir / f"{m}__{p}.svg"
            path.write_text(reliability_svg(bins, f"{m} / {p}"))
            written.append(path)

    path = out / "report.json"
    path.write_text(json.dumps(rep.to_json(), indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written
