"""Core value types, sequence-level splits and the on-disk log format.

A log is JSON-lines, one frame per line::

    {"seq_id": "id-000", "t": 0, "steering": 0.1, "throttle": 0.5,
     "raw_conf": {"1": 0.93, "5": 0.88}, "recon_error": 0.011,
     "latent_std_trace": [...], "embedding": [...],
     "labels": {"1": 1, "5": 1}}

Optional extra keys: ``tta_conf`` (horizon -> list of per-view confidences,
view 0 is the identity view) and ``rho`` / ``delta`` once a log has been scored.
CSV logs carry only the flat fields (``conf_<k>`` / ``label_<k>`` columns).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_HORIZONS = (1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
SPLIT_ROLES = ("in_train", "in_cal", "in_test", "aug", "ood")


class DataError(ValueError):
    """Base class for problems with input data."""


class LogParseError(DataError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


@dataclass(frozen=True)
class HorizonSet:
    horizons: tuple[int, ...] = DEFAULT_HORIZONS

    def __post_init__(self):
        hs = tuple(int(h) for h in self.horizons)
        if not hs:
            raise ValueError("horizon set is empty")
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise ValueError(f"horizons must be strictly increasing: {hs}")
        if hs[0] < 1:
            raise ValueError("horizons must be positive")
        object.__setattr__(self, "horizons", hs)

    @property
    def k_max(self) -> int:
        return self.horizons[-1]

    def __len__(self):
        return len(self.horizons)

    def __iter__(self):
        return iter(self.horizons)

    def index(self, k: int) -> int:
        try:
            return self.horizons.index(int(k))
        except ValueError:
            raise KeyError(f"unknown horizon {k}; known: {self.horizons}") from None


@dataclass(frozen=True)
class FrameRecord:
    seq_id: str
    t: int
    steering: float
    throttle: float
    raw_conf: Mapping[int, float]
    recon_error: float
    latent_std_trace: tuple[float, ...]
    labels: Mapping[int, int]
    embedding: tuple[float, ...] | None = None
    tta_conf: Mapping[int, tuple[float, ...]] | None = None
    rho: float | None = None
    delta: float | None = None

    def __post_init__(self):
        if self.t < 0:
            raise SchemaError(f"{self.seq_id}: negative frame index {self.t}")
        if set(self.raw_conf) != set(self.labels):
            raise SchemaError(
                f"{self.seq_id}@{self.t}: raw_conf and labels keyed by different horizons"
            )
        if not (self.recon_error >= 0):
            raise SchemaError(f"{self.seq_id}@{self.t}: recon_error must be >= 0")
        if any(not (v >= 0) for v in self.latent_std_trace):
            raise SchemaError(f"{self.seq_id}@{self.t}: negative latent std")
        if abs(self.steering) > 1:
            raise SchemaError(f"{self.seq_id}@{self.t}: |steering| > 1")

    @property
    def horizons(self) -> tuple[int, ...]:
        return tuple(sorted(self.raw_conf))

    def to_json(self) -> dict:
        d = {
            "seq_id": self.seq_id,
            "t": self.t,
            "steering": self.steering,
            "throttle": self.throttle,
            "raw_conf": {str(k): v for k, v in self.raw_conf.items()},
            "recon_error": self.recon_error,
            "latent_std_trace": list(self.latent_std_trace),
            "labels": {str(k): v for k, v in self.labels.items()},
        }
        if self.embedding is not None:
            d["embedding"] = list(self.embedding)
        if self.tta_conf is not None:
            d["tta_conf"] = {str(k): list(v) for k, v in self.tta_conf.items()}
        if self.rho is not None:
            d["rho"] = self.rho
            d["delta"] = self.delta
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FrameRecord":
        emb = d.get("embedding")
        tta = d.get("tta_conf")
        return cls(
            seq_id=str(d["seq_id"]),
            t=int(d["t"]),
            steering=float(d["steering"]),
            throttle=float(d["throttle"]),
            raw_conf={int(k): float(v) for k, v in d["raw_conf"].items()},
            recon_error=float(d["recon_error"]),
            latent_std_trace=tuple(float(v) for v in d.get("latent_std_trace", ())),
            labels={int(k): int(v) for k, v in d["labels"].items()},
            embedding=None if emb is None else tuple(float(v) for v in emb),
            tta_conf=None if tta is None else {int(k): tuple(float(x) for x in v) for k, v in tta.items()},
            rho=None if d.get("rho") is None else float(d["rho"]),
            delta=None if d.get("delta") is None else float(d["delta"]),
        )


@dataclass
class SequenceLog:
    """Column view of one sequence; what the numeric code works on.

    Rows are frames (sorted by ``t``); horizon axes follow ``horizons``.
    """

    seq_id: str
    horizons: tuple[int, ...]
    t: np.ndarray
    steering: np.ndarray
    throttle: np.ndarray
    recon_error: np.ndarray
    latent_std: np.ndarray  # (n, K_max); zero columns when the log had no traces
    raw_conf: np.ndarray  # (n, H)
    labels: np.ndarray  # (n, H) int8
    tta_conf: np.ndarray | None = None  # (n, H, M)
    embedding: np.ndarray | None = None  # (n, D)
    rho: np.ndarray | None = None
    delta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def has_traces(self) -> bool:
        return self.latent_std.shape[1] > 0

    def tta_mean(self) -> np.ndarray:
        """TTA-averaged confidence per frame and horizon; raw confidence without views."""
        if self.tta_conf is None:
            return self.raw_conf
        return self.tta_conf.mean(axis=-1)

    def subset(self, idx) -> "SequenceLog":
        def pick(a):
            return None if a is None else a[idx]

        return SequenceLog(
            seq_id=self.seq_id, horizons=self.horizons, t=self.t[idx],
            steering=self.steering[idx], throttle=self.throttle[idx],
            recon_error=self.recon_error[idx], latent_std=self.latent_std[idx],
            raw_conf=self.raw_conf[idx], labels=self.labels[idx],
            tta_conf=pick(self.tta_conf), embedding=pick(self.embedding),
            rho=pick(self.rho), delta=pick(self.delta), meta=dict(self.meta),
        )

    def records(self) -> list[FrameRecord]:
        hs = self.horizons
        out = []
        for i in range(len(self.t)):
            out.append(FrameRecord(
                seq_id=self.seq_id,
                t=int(self.t[i]),
                steering=float(self.steering[i]),
                throttle=float(self.throttle[i]),
                raw_conf={k: float(v) for k, v in zip(hs, self.raw_conf[i])},
                recon_error=float(self.recon_error[i]),
                latent_std_trace=tuple(self.latent_std[i].tolist()),
                labels={k: int(v) for k, v in zip(hs, self.labels[i])},
                embedding=None if self.embedding is None else tuple(self.embedding[i].tolist()),
                tta_conf=None if self.tta_conf is None else {
                    k: tuple(self.tta_conf[i, j].tolist()) for j, k in enumerate(hs)
                },
                rho=None if self.rho is None or np.isnan(self.rho[i]) else float(self.rho[i]),
                delta=None if self.delta is None or np.isnan(self.delta[i]) else float(self.delta[i]),
            ))
        return out

    @classmethod
    def from_records(cls, records: Sequence[FrameRecord]) -> "SequenceLog":
        if not records:
            raise DataError("cannot build a sequence from zero records")
        hs = records[0].horizons
        n = len(records)
        k_max = max(len(r.latent_std_trace) for r in records)
        lat = np.zeros((n, k_max))
        for i, r in enumerate(records):
            if len(r.latent_std_trace) != k_max:
                raise SchemaError(f"{r.seq_id}@{r.t}: latent_std_trace length differs within sequence")
            if k_max:
                lat[i] = r.latent_std_trace
        has_emb = records[0].embedding is not None
        has_tta = records[0].tta_conf is not None
        has_rho = any(r.rho is not None for r in records)
        return cls(
            seq_id=records[0].seq_id,
            horizons=hs,
            t=np.array([r.t for r in records], dtype=np.int64),
            steering=np.array([r.steering for r in records]),
            throttle=np.array([r.throttle for r in records]),
            recon_error=np.array([r.recon_error for r in records]),
            latent_std=lat,
            raw_conf=np.array([[r.raw_conf[k] for k in hs] for r in records]),
            labels=np.array([[r.labels[k] for k in hs] for r in records], dtype=np.int8),
            tta_conf=np.array([[r.tta_conf[k] for k in hs] for r in records]) if has_tta else None,
            embedding=np.array([r.embedding for r in records]) if has_emb else None,
            rho=np.array([np.nan if r.rho is None else r.rho for r in records]) if has_rho else None,
            delta=np.array([np.nan if r.delta is None else r.delta for r in records]) if has_rho else None,
        )


@dataclass(frozen=True)
class DatasetSplit:
    role: str
    sequences: tuple[str, ...]

    def __post_init__(self):
        if self.role not in SPLIT_ROLES:
            raise ValueError(f"unknown split role {self.role!r}")


def check_disjoint(splits: Iterable[DatasetSplit]) -> None:
    seen: dict[str, str] = {}
    for sp in splits:
        for s in sp.sequences:
            if s in seen:
                raise IntegrityError(f"sequence {s} appears in both {seen[s]} and {sp.role}")
            seen[s] = sp.role


# ---------------------------------------------------------------------------
# log IO


def _finalize(by_seq: dict[str, list[FrameRecord]], required: set[int]) -> dict[str, list[FrameRecord]]:
    out = {}
    for sid, recs in by_seq.items():
        recs.sort(key=lambda r: r.t)
        ts = [r.t for r in recs]
        for a, b in zip(ts, ts[1:]):
            if a == b:
                raise IntegrityError(f"duplicate frame ({sid}, t={a})")
            if b != a + 1:
                raise IntegrityError(f"gap in sequence {sid} between t={a} and t={b}")
        out[sid] = recs
    return out


def _check_horizons(rec: FrameRecord, expected: set[int] | None, lineno: int) -> None:
    if expected is None:
        return
    got = set(rec.raw_conf)
    missing = sorted(expected - got)
    extra = sorted(got - expected)
    if missing:
        raise SchemaError(f"line {lineno}: record {rec.seq_id}@{rec.t} missing horizon(s) {missing}")
    if extra:
        raise SchemaError(f"line {lineno}: record {rec.seq_id}@{rec.t} has unexpected horizon(s) {extra}")


def load_log(path, fmt: str = "jsonl", horizons: Sequence[int] | None = None) -> dict[str, list[FrameRecord]]:
    """Parse a frame log and group it by sequence.

    Without ``horizons`` the expected set is the union over the file, so a
    record lacking any horizon another record carries is a schema error.
    """
    path = Path(path)
    if fmt == "jsonl":
        rows = _read_jsonl(path)
    elif fmt == "csv":
        rows = _read_csv(path)
    else:
        raise ValueError(f"unsupported log format {fmt!r}")

    expected = set(horizons) if horizons is not None else set()
    if horizons is None:
        for _, rec in rows:
            expected |= set(rec.raw_conf) | set(rec.labels)
    by_seq: dict[str, list[FrameRecord]] = {}
    for lineno, rec in rows:
        _check_horizons(rec, expected, lineno)
        by_seq.setdefault(rec.seq_id, []).append(rec)
    return _finalize(by_seq, expected)


def _read_jsonl(path: Path) -> list[tuple[int, FrameRecord]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise LogParseError(lineno, f"malformed JSON ({e.msg})") from None
            try:
                rows.append((lineno, FrameRecord.from_json(d)))
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, DataError):
                    raise LogParseError(lineno, str(e)) from None
                raise LogParseError(lineno, f"bad record: {e!r}") from None
    return rows


def _read_csv(path: Path) -> list[tuple[int, FrameRecord]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, 2):
            try:
                conf = {int(c[5:]): float(v) for c, v in row.items() if c.startswith("conf_") and v != ""}
                lab = {int(c[6:]): int(v) for c, v in row.items() if c.startswith("label_") and v != ""}
                rows.append((lineno, FrameRecord(
                    seq_id=row["seq_id"], t=int(row["t"]),
                    steering=float(row["steering"]), throttle=float(row["throttle"]),
                    raw_conf=conf, recon_error=float(row["recon_error"]),
                    latent_std_trace=(), labels=lab,
                )))
            except (KeyError, TypeError, ValueError) as e:
                raise LogParseError(lineno, f"bad CSV row: {e}") from None
    return rows


def dump_log(records: Iterable[FrameRecord], path, fmt: str = "jsonl") -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r.to_json(), separators=(",", ":")))
                fh.write("\n")
                n += 1
    elif fmt == "csv":
        records = list(records)
        hs = records[0].horizons if records else ()
        cols = ["seq_id", "t", "steering", "throttle", "recon_error"]
        cols += [f"conf_{k}" for k in hs] + [f"label_{k}" for k in hs]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in records:
                w.writerow([r.seq_id, r.t, repr(r.steering), repr(r.throttle), repr(r.recon_error)]
                           + [repr(r.raw_conf[k]) for k in hs] + [r.labels[k] for k in hs])
                n += 1
    else:
        raise ValueError(f"unsupported log format {fmt!r}")
    return n


def write_sequences(seqs: Iterable[SequenceLog], path) -> int:
    return dump_log((r for s in seqs for r in s.records()), path)


def read_sequences(path, fmt: str = "jsonl") -> list[SequenceLog]:
    return [SequenceLog.from_records(recs) for recs in load_log(path, fmt).values()]


# ---------------------------------------------------------------------------
# splits


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(x)) for x in raw]
    rem = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def split_sequences(
    seq_ids: Iterable[str],
    fractions: Mapping[str, float] | None = None,
    seed: int = 0,
) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Sequence-level train/cal/test split with largest-remainder rounding."""
    fractions = dict(fractions or {"train": 0.68, "cal": 0.16, "test": 0.16})
    fr = [fractions["train"], fractions["cal"], fractions["test"]]
    if abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {sum(fr)}")
    ids = sorted(set(seq_ids))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 sequences to split, got {len(ids)}")
    counts = _largest_remainder(len(ids), fr)
    # every role needs at least one sequence
    for i in range(3):
        if counts[i] == 0:
            j = max(range(3), key=lambda j: counts[j])
            counts[j] -= 1
            counts[i] += 1
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    a, b = counts[0], counts[0] + counts[1]
    return (
        DatasetSplit("in_train", tuple(sorted(shuffled[:a]))),
        DatasetSplit("in_cal", tuple(sorted(shuffled[a:b]))),
        DatasetSplit("in_test", tuple(sorted(shuffled[b:]))),
    )
