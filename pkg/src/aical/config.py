"""Run configuration: one INI file with sections, every key defaulted.

Precedence is defaults < config file < command-line flags.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from io import StringIO
from pathlib import Path

from .anomaly import FeatureParams
from .calib import TtaConfig
from .datamodel import DEFAULT_HORIZONS
from .metrics import EVAL_HORIZONS
from .sim import SimConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnomalyConfig:
    m_w: int = 100
    alpha: float = 2.0
    lam: float = 1e-6
    freeze_threshold: float = 0.02
    active_threshold: float = 0.15
    max_lag: int = 20
    hf_cutoff: float = 0.25

    def features(self) -> FeatureParams:
        return FeatureParams(m_w=self.m_w, freeze_threshold=self.freeze_threshold,
                             active_threshold=self.active_threshold, max_lag=self.max_lag,
                             hf_cutoff=self.hf_cutoff)


@dataclass(frozen=True)
class CalibConfig:
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    w_max: float = 10.0
    gtol: float = 1e-6
    maxiter: int = 500
    balance_ratio: float = 2.0
    knn_k: int = 10
    dac_modulation: float = 2.0
    hist_bins: int = 15


@dataclass(frozen=True)
class TtaSection:
    n_views: int = 9
    contrast_lo: float = 0.7
    contrast_hi: float = 1.3
    saturation_lo: float = 0.7
    saturation_hi: float = 1.3
    noise_lo: float = 0.0
    noise_hi: float = 0.05
    jitter: float = 0.3  # fraction of the photometric jitter reaching the predictor input

    def tta(self, seed: int) -> TtaConfig:
        return TtaConfig(M=self.n_views, contrast=(self.contrast_lo, self.contrast_hi),
                         saturation=(self.saturation_lo, self.saturation_hi),
                         noise_sigma=(self.noise_lo, self.noise_hi), seed=seed)


@dataclass(frozen=True)
class SimSection:
    n_sequences: int = 25
    n_aug_sequences: int = 16
    n_ood_sequences: int = 5
    frames_per_sequence: int = 750
    dt: float = 0.1
    kp: float = 0.6
    kd: float = 1.2
    process_noise: float = 0.03
    cte_threshold: float = 0.055
    pred_gamma: float = 1.4
    pred_noise: float = 0.3


@dataclass(frozen=True)
class EvalConfig:
    n_bins: int = 15
    eval_horizons: tuple[int, ...] = EVAL_HORIZONS


@dataclass(frozen=True)
class RunConfig:
    work_dir: str = "runs/default"
    report_dir: str = ""  # empty: <work_dir>/report
    seeds: tuple[int, ...] = (0,)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    tta: TtaSection = field(default_factory=TtaSection)
    sim: SimSection = field(default_factory=SimSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def reports(self) -> Path:
        return Path(self.report_dir) if self.report_dir else Path(self.work_dir) / "report"

    def sim_config(self, seed: int) -> SimConfig:
        s = self.sim
        return SimConfig(
            seed=seed, n_sequences=s.n_sequences, n_aug_sequences=s.n_aug_sequences,
            n_ood_sequences=s.n_ood_sequences, frames_per_sequence=s.frames_per_sequence,
            dt=s.dt, kp=s.kp, kd=s.kd, process_noise=s.process_noise,
            cte_threshold=s.cte_threshold, pred_gamma=s.pred_gamma, pred_noise=s.pred_noise,
            horizons=self.calib.horizons, tta=self.tta.tta(seed), tta_jitter=self.tta.jitter,
            m_w=self.anomaly.m_w,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form; paths are excluded so moved runs hash the same."""
        d = self.to_dict()
        d.pop("work_dir")
        d.pop("report_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_SECTIONS = {"anomaly": AnomalyConfig, "calib": CalibConfig, "tta": TtaSection, "sim": SimSection,
             "eval": EvalConfig}


def _parse(value: str, default):
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _update(obj, items: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, raw in items.items():
        if key not in known or key in _SECTIONS:
            raise ValueError(f"unknown config key {where}.{key}")
        changes[key] = _parse(raw, getattr(obj, key))
    return replace(obj, **changes)


def load_config(path=None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        cp.read_file(fh)
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "run":
            cfg = _update(cfg, items, "run")
        elif section in _SECTIONS:
            cfg = replace(cfg, **{section: _update(getattr(cfg, section), items, section)})
        else:
            raise ValueError(f"unknown config section [{section}]")
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """CLI values win over file values; each override that changes a value is logged."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.rpartition(".")
        target = getattr(cfg, section) if section else cfg
        old = getattr(target, key)
        if old != value:
            log.info("command line overrides %s: %r -> %r", dotted, old, value)
        if section:
            cfg = replace(cfg, **{section: replace(target, **{key: value})})
        else:
            cfg = replace(cfg, **{key: value})
    return cfg


def dump_config(cfg: RunConfig, include_paths: bool = True) -> str:
    cp = configparser.ConfigParser(interpolation=None)

    def fmt(v):
        return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    keys = ("work_dir", "report_dir", "seeds") if include_paths else ("seeds",)
    cp["run"] = {k: fmt(getattr(cfg, k)) for k in keys}
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: fmt(getattr(sec, f.name)) for f in fields(sec)}
    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()
