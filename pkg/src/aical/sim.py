"""Seeded closed-loop lane-keeping simulator with graded anomaly injection.

Toy plant (per step, dt):

    cte'     = cte + dt * v * heading
    heading' = heading + dt * g * u + process noise
    u        = sat(-kp * cte_obs - kd * heading_obs)

The controller and the safety predictor both see the *observed* state, so
observation-channel corruptions (dark, blur, aug_jpeg_proxy, aug_fog_proxy)
degrade both. Action-channel corruptions (bias, latency, aug_speed_mismatch,
aug_action_substitution, aug_action_offset) change what is executed.

The synthetic predictor evaluates the nominal linear-Gaussian closed-loop
model from the observed state: P(|cte_{t+k}| <= tau), sharpened by an
overconfidence factor and perturbed by a per-frame logit nuisance, both of
which grow with anomaly severity. TTA views re-evaluate it on jittered
observations. The frame label at horizon k is 1[|cte_{t+k}| <= tau].
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .calib import TtaConfig, safe_logit
from .datamodel import DEFAULT_HORIZONS, SequenceLog, check_disjoint, split_sequences, write_sequences, DatasetSplit

TEST_KINDS = ("dark", "blur", "bias", "latency")
AUG_KINDS = ("aug_jpeg_proxy", "aug_fog_proxy", "aug_speed_mismatch",
             "aug_action_substitution", "aug_action_offset")
VISUAL_KINDS = ("dark", "blur", "aug_jpeg_proxy", "aug_fog_proxy")
ALL_KINDS = TEST_KINDS + AUG_KINDS


@dataclass(frozen=True)
class InjectorParams:
    """Per-kind corruption strengths; every effect is strictly increasing in severity."""

    # reconstruction-error multiplier 1 + c * severity
    recon: dict = field(default_factory=lambda: {
        "dark": 0.3, "blur": 0.06, "aug_jpeg_proxy": 0.08, "aug_fog_proxy": 0.10})
    # observation noise multiplier 1 + c * severity
    obs_noise: dict = field(default_factory=lambda: {
        "dark": 1.0, "blur": 0.6, "aug_jpeg_proxy": 0.3, "aug_fog_proxy": 0.5})
    jpeg_quant: float = 0.02  # observation quantisation step per severity
    fog_shrink: float = 0.06  # observed-state contrast loss per severity
    # latent-std multiplier 1 + c * severity
    latent: dict = field(default_factory=lambda: {
        "bias": 0.08, "latency": 0.08, "aug_speed_mismatch": 0.08,
        "aug_action_substitution": 0.08, "aug_action_offset": 0.08})
    bias_noise: float = 0.01  # executed-steering noise std per severity
    bias_offset: float = 0.002  # executed-steering offset per severity
    throttle_noise: float = 0.02
    latency_period: int = 50
    latency_freeze: int = 2  # frozen frames per severity
    latency_delay: int = 1  # action delay frames per severity
    speed_step: float = 0.2  # subsampling ratio 1 + c * severity
    substitution: float = 0.1  # blend weight of a foreign action stream per severity
    action_offset: float = 0.05  # constant executed-steering offset per severity
    embed_shift: dict = field(default_factory=lambda: {
        "dark": 0.6, "blur": 0.4, "aug_jpeg_proxy": 0.4, "aug_fog_proxy": 0.5})
    # predictor degradation per severity: overconfidence and logit-noise growth
    pred_inflation: float = 0.10
    pred_noise_growth: float = 0.15


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_sequences: int = 25  # nominal (in-distribution) sequences
    n_aug_sequences: int = 16
    n_ood_sequences: int = 5  # per test protocol
    frames_per_sequence: int = 750
    dt: float = 0.1
    speed: float = 1.0
    steer_gain: float = 1.0
    kp: float = 0.6
    kd: float = 1.2
    process_noise: float = 0.03
    obs_noise: tuple[float, float] = (0.02, 0.01)
    light_obs_coupling: float = 1.0  # observation noise scales with exp(c * lighting drift)
    cte_threshold: float = 0.055
    pred_gamma: float = 1.4  # in-distribution overconfidence of the predictor
    pred_noise: float = 0.3  # logit nuisance std
    recon_mean: float = 0.01
    recon_shape: float = 8.0
    light_ar: float = 0.99
    light_std: float = 0.25
    latent_base: float = 0.05
    latent_ar: float = 0.95
    latent_std_noise: float = 0.3
    embedding_dim: int = 16
    tta_jitter: float = 0.3  # fraction of photometric jitter reaching the predictor input
    horizons: tuple[int, ...] = DEFAULT_HORIZONS
    tta: TtaConfig = TtaConfig()
    injector: InjectorParams = InjectorParams()
    split_fractions: tuple[float, float, float] = (0.68, 0.16, 0.16)
    m_w: int = 100

    def __post_init__(self):
        if self.frames_per_sequence < self.m_w + max(self.horizons):
            raise ValueError("frames_per_sequence must be >= m_w + K_max")
        if not self.cte_threshold > 0:
            raise ValueError("cte_threshold must be positive")

    @property
    def k_max(self) -> int:
        return max(self.horizons)

    def to_json(self) -> dict:
        d = asdict(self)
        d["tta"] = asdict(self.tta)
        d["injector"] = asdict(self.injector)
        return d


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    severity: int
    onset: int = 0
    duration: int | None = None  # None: until the end of the sequence

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must be in 0..5")
        if self.onset < 0:
            raise ValueError("onset must be >= 0")

    def active(self, n: int) -> np.ndarray:
        a = np.zeros(n, dtype=bool)
        end = n if self.duration is None else min(n, self.onset + self.duration)
        a[self.onset:end] = True
        return a


@dataclass
class GroundTruth:
    cte: np.ndarray  # per logged frame, including the K_max look-ahead frames
    heading: np.ndarray
    u_cmd: np.ndarray
    u_exec: np.ndarray
    observed: np.ndarray  # (n, 2) state seen by controller and predictor
    frozen: np.ndarray  # observation held from an earlier frame
    freeze_runs: list[tuple[int, int]]  # (start frame, length) of injected freezes
    p_nominal: np.ndarray  # (n, H) nominal-model safety probability from the true state


# ---------------------------------------------------------------------------
# nominal closed-loop model used by the predictor


class NominalModel:
    """Linear-Gaussian k-step forecast of the unsaturated closed loop."""

    def __init__(self, cfg: SimConfig):
        dt, v, g = cfg.dt, cfg.speed, cfg.steer_gain
        K = np.array([cfg.kp, cfg.kd])
        A = np.array([[1.0, dt * v], [0.0, 1.0]])
        B = np.array([0.0, dt * g])
        self.A = A - np.outer(B, K)
        obs_var = np.asarray(cfg.obs_noise, dtype=float) ** 2
        Q = np.diag([0.0, cfg.process_noise**2 + (dt * g) ** 2 * float(K**2 @ obs_var)])
        hs = cfg.horizons
        rows, sds = [], []
        P = np.eye(2)
        S = np.zeros((2, 2))
        for k in range(1, max(hs) + 1):
            S = self.A @ S @ self.A.T + Q
            P = self.A @ P
            if k in hs:
                rows.append(P[0].copy())
                sds.append(np.sqrt(S[0, 0]))
        self.C = np.array(rows)  # (H, 2): mean cte_{t+k} = C[k] @ x
        self.sd = np.maximum(np.array(sds), 1e-9)
        self.tau = cfg.cte_threshold

    def safe_prob(self, x: np.ndarray) -> np.ndarray:
        """P(|cte_{t+k}| <= tau) for states x (..., 2) -> (..., H)."""
        m = x @ self.C.T
        return norm.cdf((self.tau - m) / self.sd) - norm.cdf((-self.tau - m) / self.sd)


# ---------------------------------------------------------------------------
# one sequence


def _sat(u):
    return min(1.0, max(-1.0, u))


def _ar1(rng, n, phi, std):
    e = rng.normal(0.0, std * np.sqrt(1 - phi**2), n)
    x = np.empty(n)
    x[0] = rng.normal(0.0, std)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    return x


def _freeze_mask(n: int, spec: AnomalySpec | None, inj: InjectorParams) -> np.ndarray:
    if spec is None or spec.kind != "latency" or spec.severity == 0:
        return np.zeros(n, dtype=bool)
    length = inj.latency_freeze * spec.severity
    rel = np.arange(n) - spec.onset
    return spec.active(n) & (rel % inj.latency_period < length)


def _plant(cfg: SimConfig, spec: AnomalySpec | None, rng: np.random.Generator, n_steps: int,
           obs_scale: np.ndarray, foreign_u: np.ndarray | None):
    """Integrate the closed loop for n_steps; returns per-step arrays."""
    inj = cfg.injector
    kind = spec.kind if spec else None
    sev = spec.severity if spec else 0
    act = spec.active(n_steps) if spec else np.zeros(n_steps, dtype=bool)
    dt, v, g = cfg.dt, cfg.speed, cfg.steer_gain

    w_head = rng.normal(0.0, cfg.process_noise, n_steps)
    n_obs = rng.normal(0.0, 1.0, (n_steps, 2)) * np.asarray(cfg.obs_noise, dtype=float) * obs_scale[:, None]
    n_bias = rng.normal(0.0, 1.0, n_steps)
    offset_sign = 1.0 if rng.random() < 0.5 else -1.0

    obs_mult = 1.0 + inj.obs_noise.get(kind, 0.0) * sev
    freeze = _freeze_mask(n_steps, spec, inj)
    delay = inj.latency_delay * sev if kind == "latency" else 0
    beta = inj.substitution * sev if kind == "aug_action_substitution" else 0.0

    cte = np.empty(n_steps + 1)
    head = np.empty(n_steps + 1)
    cte[0] = rng.normal(0.0, cfg.cte_threshold)
    head[0] = rng.normal(0.0, 0.05)
    observed = np.empty((n_steps, 2))
    u_cmd = np.empty(n_steps)
    u_exec = np.empty(n_steps)
    u_log = np.empty(n_steps)
    held = None
    for t in range(n_steps):
        on = act[t]
        if freeze[t] and held is not None:
            o = held
        else:
            m = obs_mult if on else 1.0
            o = (cte[t] + m * n_obs[t, 0], head[t] + m * n_obs[t, 1])
            if on and kind == "aug_fog_proxy":
                s = 1.0 - inj.fog_shrink * sev
                o = (s * o[0], s * o[1])
            elif on and kind == "aug_jpeg_proxy":
                q = inj.jpeg_quant * sev
                o = (q * round(o[0] / q), q * round(o[1] / q))
            held = o
        observed[t] = o
        uc = _sat(-cfg.kp * o[0] - cfg.kd * o[1])
        u_cmd[t] = uc
        ue, ul = uc, uc
        if on:
            if kind == "bias":
                ue = _sat(uc + offset_sign * inj.bias_offset * sev + inj.bias_noise * sev * n_bias[t])
                ul = ue
            elif kind == "latency":
                ue = u_cmd[t - delay] if t >= delay else 0.0
            elif kind == "aug_action_substitution" and foreign_u is not None:
                ue = _sat((1 - beta) * uc + beta * foreign_u[t % len(foreign_u)])
                ul = ue
            elif kind == "aug_action_offset":
                ue = _sat(uc + offset_sign * inj.action_offset * sev)
                ul = ue
        u_exec[t] = ue
        u_log[t] = ul
        head[t + 1] = head[t] + dt * g * ue + w_head[t]
        cte[t + 1] = cte[t] + dt * v * head[t]
    return {
        "cte": cte[:-1], "heading": head[:-1], "observed": observed,
        "u_cmd": u_cmd, "u_exec": u_exec, "u_log": u_log, "frozen": freeze,
    }


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    out = []
    i, n = 0, len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            out.append((i, j - i))
            i = j
        else:
            i += 1
    return out


def _embedding_basis(cfg: SimConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 7777])
    W = rng.normal(0.0, 1.0, (cfg.embedding_dim, 4)) / 2.0
    shift = rng.normal(0.0, 1.0, cfg.embedding_dim)
    return W, shift / np.linalg.norm(shift)


STATE_SCALE = np.array([0.2, 0.1])  # typical |cte|, |heading| for jitter and embedding


def simulate(cfg: SimConfig, spec: AnomalySpec | None = None, seq_id: str = "seq-000",
             seed=None, model: NominalModel | None = None) -> tuple[SequenceLog, GroundTruth]:
    """Simulate one logged sequence of ``cfg.frames_per_sequence`` frames.

    ``seed`` defaults to ``cfg.seed``; any numpy seed spec is accepted.
    """
    inj = cfg.injector
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    model = model or NominalModel(cfg)
    H = len(cfg.horizons)
    K = cfg.k_max
    n = cfg.frames_per_sequence
    if spec is not None and spec.onset >= n:
        raise ValueError(f"anomaly onset {spec.onset} beyond sequence length {n}")
    kind = spec.kind if spec else None
    sev = spec.severity if spec else 0

    # logged frame i observes plant step frame_step[i]
    ratio = 1.0 + inj.speed_step * sev if kind == "aug_speed_mismatch" else 1.0
    n_log = n + K
    frame_step = np.floor(np.arange(n_log) * ratio).astype(np.int64)
    n_steps = int(frame_step[-1]) + 1
    # slow lighting drift: raises reconstruction error and perception noise together
    light = _ar1(rng, n_steps, cfg.light_ar, cfg.light_std)
    obs_scale = np.exp(cfg.light_obs_coupling * light)
    foreign = None
    if kind == "aug_action_substitution":
        # steering stream of an unrelated nominal drive
        frng = np.random.default_rng(rng.integers(2**63))
        foreign = _plant(cfg, None, frng, n_steps, np.ones(n_steps), None)["u_cmd"]
    plant_spec = spec
    if spec is not None and ratio != 1.0:
        plant_spec = replace(spec, onset=int(frame_step[min(spec.onset, n_log - 1)]),
                             duration=None if spec.duration is None else int(np.ceil(spec.duration * ratio)))
    P = _plant(cfg, plant_spec, rng, n_steps, obs_scale, foreign)
    sel = frame_step
    light = light[sel]
    act = spec.active(n_log) if spec else np.zeros(n_log, dtype=bool)
    s_eff = np.where(act, sev, 0).astype(float)
    frozen = P["frozen"][sel]
    obs = P["observed"][sel]

    gam = rng.gamma(cfg.recon_shape, 1.0 / cfg.recon_shape, n_log)
    recon = cfg.recon_mean * np.exp(light - cfg.light_std**2 / 2) * gam
    recon *= 1.0 + inj.recon.get(kind, 0.0) * s_eff
    # latent-std traces: rollout spread grows along the horizon, inflated by action-channel faults
    lat_level = cfg.latent_base * np.exp(_ar1(rng, n_log, cfg.latent_ar, cfg.latent_std_noise))
    lat_level *= 1.0 + inj.latent.get(kind, 0.0) * s_eff
    steps = np.arange(1, K + 1)
    latent = lat_level[:, None] * (1.0 + 0.02 * steps)[None, :] * np.exp(0.05 * rng.normal(size=(n_log, K)))
    src = np.arange(n_log)
    for start, length in _runs(frozen):
        # a frozen camera feed repeats the held frame
        src[start:start + length] = max(start - 1, 0)
    recon = recon[src]

    # predictor: sharpened nominal probability + per-frame nuisance, degraded with severity
    gamma = cfg.pred_gamma * (1.0 + inj.pred_inflation * s_eff)
    noise_sd = cfg.pred_noise * (1.0 + inj.pred_noise_growth * s_eff)
    nuis_common = rng.normal(size=n_log)
    nuis = (0.7 * nuis_common[:, None] + 0.71 * rng.normal(size=(n_log, H))) * noise_sd[:, None]
    nuis = nuis[src]
    jit = cfg.tta.sample(rng, n_log)
    c = 1.0 + cfg.tta_jitter * (jit["contrast"] - 1.0)
    s = 1.0 + cfg.tta_jitter * (jit["saturation"] - 1.0)
    mult = np.stack([c, s], axis=-1)  # (n, M, 2)
    views = obs[:, None, :] * mult + jit["noise_sigma"][..., None] * rng.normal(size=mult.shape) * STATE_SCALE
    p_nom_views = np.clip(model.safe_prob(views), 1e-4, 1 - 1e-4)  # (n, M, H)
    logits = gamma[:, None, None] * safe_logit(p_nom_views) + nuis[:, None, :]
    tta = expit(logits).transpose(0, 2, 1)  # (n, H, M)

    W, shift_dir = _embedding_basis(cfg)
    feats = np.column_stack([obs / STATE_SCALE, light / cfg.light_std, nuis_common[src]])
    emb = feats @ W.T + 0.3 * rng.normal(size=(n_log, cfg.embedding_dim))
    emb += (inj.embed_shift.get(kind, 0.0) * s_eff)[:, None] * shift_dir[None, :]

    # labels from the realised trajectory
    cte_log = P["cte"][sel]
    safe_now = np.abs(cte_log) <= cfg.cte_threshold
    hs = np.asarray(cfg.horizons)
    labels = np.stack([safe_now[np.arange(n) + k] for k in hs], axis=1).astype(np.int8)

    throttle = 0.5 + 0.05 * np.tanh(_ar1(rng, n_log, 0.98, 1.0))
    if kind == "bias":
        throttle = throttle + inj.throttle_noise * s_eff * rng.normal(size=n_log)
    throttle = np.clip(throttle, 0.0, 1.0)

    seq = SequenceLog(
        seq_id=seq_id, horizons=tuple(int(k) for k in hs),
        t=np.arange(n, dtype=np.int64),
        steering=np.clip(P["u_log"][sel][:n], -1.0, 1.0),
        throttle=throttle[:n],
        recon_error=recon[:n],
        latent_std=latent[:n],
        raw_conf=tta[:n, :, 0].copy(),
        labels=labels,
        tta_conf=tta[:n],
        embedding=emb[:n],
        meta={"kind": kind or "nominal", "severity": int(sev)},
    )
    truth = GroundTruth(
        cte=cte_log, heading=P["heading"][sel],
        u_cmd=P["u_cmd"][sel], u_exec=P["u_exec"][sel], observed=obs, frozen=frozen,
        freeze_runs=_runs(frozen[:n]),
        p_nominal=model.safe_prob(np.column_stack([cte_log, P["heading"][sel]]))[:n],
    )
    return seq, truth


def true_safety_probability(cfg: SimConfig, state, k: int, n_rollouts: int = 2000, seed: int = 0) -> float:
    """Monte-Carlo P(|cte_{t+k}| <= tau) from a true state under nominal closed-loop dynamics."""
    rng = np.random.default_rng(seed)
    dt, v, g = cfg.dt, cfg.speed, cfg.steer_gain
    obs_sd = np.asarray(cfg.obs_noise, dtype=float)
    x = np.tile(np.asarray(state, dtype=float), (n_rollouts, 1))
    for _ in range(k):
        o = x + rng.normal(size=x.shape) * obs_sd
        u = np.clip(-cfg.kp * o[:, 0] - cfg.kd * o[:, 1], -1, 1)
        c2 = x[:, 0] + dt * v * x[:, 1]
        h2 = x[:, 1] + dt * g * u + rng.normal(0, cfg.process_noise, n_rollouts)
        x = np.column_stack([c2, h2])
    return float(np.mean(np.abs(x[:, 0]) <= cfg.cte_threshold))


# ---------------------------------------------------------------------------
# protocol suite


@dataclass
class Bundle:
    splits: dict[str, list[SequenceLog]]  # in_train, in_cal, in_test, aug, ood_<kind>
    manifest: dict
    truths: dict[str, GroundTruth] = field(default_factory=dict, repr=False)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        for name, seqs in self.splits.items():
            write_sequences(seqs, out / "logs" / f"{name}.jsonl")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=1, sort_keys=True))


def _seq_seed(cfg: SimConfig, group: int, idx: int):
    return np.random.SeedSequence([cfg.seed, group, idx])


def _aug_plan(n: int) -> list[AnomalySpec]:
    nk = len(AUG_KINDS)
    return [AnomalySpec(AUG_KINDS[i % nk], (i // nk + i) % 5 + 1) for i in range(n)]


def emit_protocol_suite(cfg: SimConfig, keep_truth: bool = False) -> Bundle:
    """Nominal drives split 68/16/16 by sequence, augmented drives, four OOD protocols."""
    model = NominalModel(cfg)
    truths = {}

    def run(spec, sid, group, idx):
        seq, truth = simulate(cfg, spec, sid, _seq_seed(cfg, group, idx), model)
        if keep_truth:
            truths[sid] = truth
        return seq

    nominal = [run(None, f"id-{i:03d}", 0, i) for i in range(cfg.n_sequences)]
    fr = dict(zip(("train", "cal", "test"), cfg.split_fractions))
    sp_train, sp_cal, sp_test = split_sequences([s.seq_id for s in nominal], fr, seed=cfg.seed)
    by_id = {s.seq_id: s for s in nominal}
    splits = {sp.role: [by_id[i] for i in sp.sequences] for sp in (sp_train, sp_cal, sp_test)}

    aug_specs = _aug_plan(cfg.n_aug_sequences)
    assert not {s.kind for s in aug_specs} & set(TEST_KINDS)
    splits["aug"] = [run(sp, f"aug-{i:03d}", 1, i) for i, sp in enumerate(aug_specs)]
    ood_specs = {}
    for g, kind in enumerate(TEST_KINDS):
        specs = [AnomalySpec(kind, i % 5 + 1) for i in range(cfg.n_ood_sequences)]
        ood_specs[kind] = specs
        splits[f"ood_{kind}"] = [run(sp, f"{kind}-{i:03d}", 2 + g, i) for i, sp in enumerate(specs)]
    check_disjoint([sp_train, sp_cal, sp_test,
                    DatasetSplit("aug", tuple(s.seq_id for s in splits["aug"])),
                    DatasetSplit("ood", tuple(s.seq_id for k in TEST_KINDS for s in splits[f"ood_{k}"]))])

    def safe_frac(seqs):
        # frame-level safety: the label one step ahead of the previous frame is the current state
        vals = np.concatenate([s.labels[:, 0] for s in seqs]) if seqs else np.empty(0)
        return float(vals.mean()) if vals.size else None

    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_json(),
        "splits": {name: [s.seq_id for s in seqs] for name, seqs in splits.items()},
        "counts": {name: {"sequences": len(seqs), "frames": int(sum(len(s) for s in seqs))}
                   for name, seqs in splits.items()},
        "safe_fraction": {name: safe_frac(seqs) for name, seqs in splits.items()},
        "anomalies": {s.seq_id: s.meta for seqs in splits.values() for s in seqs if s.meta["kind"] != "nominal"},
        "test_kinds": list(TEST_KINDS),
        "aug_kinds": sorted({s.kind for s in aug_specs}),
    }
    return Bundle(splits, manifest, truths)
