"""Transaction rows -> per-wafer stage sequences -> fixed-length windows.

Raw data arrive as one row per mod execution (meta, program, sensor and
measurement columns). Rows of one wafer that share (process, step, stage)
merge into a single stage record; records are ordered by their earliest
timestamp. Missing sensor cells are split into systematic gaps (a tool that
lacks the sensor) which are zero-filled and flagged, and environmental gaps
which are filled by KNN imputation.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .errors import ContractError, RowError, SchemaError, SplitError
from .stage_modules import Batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

META_ROLES = ("wafer_id", "timestamp", "process", "step", "stage_type", "mod_label")
PROGRAM_ROLES = ("recipe", "tool", "product_type", "product_group")


@dataclass
class SchemaConfig:
    """Column roles of a transaction file.

    ``columns`` maps each meta/program role to its header name; ``sensors`` and
    ``measurements`` list the header names of the D sensor and K KQI columns.
    """

    sensors: list[str]
    measurements: list[str]
    columns: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for role in META_ROLES + PROGRAM_ROLES:
            self.columns.setdefault(role, role)
        unknown = set(self.columns) - set(META_ROLES + PROGRAM_ROLES)
        if unknown:
            raise SchemaError(f"unknown column roles: {sorted(unknown)}")

    @property
    def header(self) -> list[str]:
        return ([self.columns[r] for r in META_ROLES + PROGRAM_ROLES]
                + list(self.sensors) + list(self.measurements))

    @classmethod
    def load(cls, path) -> "SchemaConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        try:
            return cls(sensors=list(raw["sensors"]), measurements=list(raw["measurements"]),
                       columns=dict(raw.get("columns") or {}))
        except KeyError as exc:
            raise SchemaError(f"schema config lacks {exc.args[0]!r}") from None

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump({"columns": self.columns, "sensors": list(self.sensors),
                            "measurements": list(self.measurements)}, fh, sort_keys=False)


@dataclass(frozen=True)
class Transaction:
    wafer_id: str
    timestamp: int
    process: str
    step: str
    stage_type: str
    mod_label: str
    recipe: str
    tool: str
    product_type: str
    product_group: str
    sensors: tuple      # floats or None
    measurements: tuple  # 0 (pass), 1 (fail) or None


@dataclass(frozen=True)
class StageRecord:
    stage_type: str
    mod_sequence: tuple
    sensors: tuple
    sensor_presence: tuple
    labels: tuple
    label_mask: tuple
    process: str = ""
    step: str = ""
    tool: str = ""
    timestamp: int = 0

    def to_dict(self) -> dict:
        return {
            "stage_type": self.stage_type, "process": self.process, "step": self.step,
            "tool": self.tool, "timestamp": self.timestamp,
            "mod_sequence": list(self.mod_sequence),
            "sensors": [None if math.isnan(v) else v for v in self.sensors],
            "sensor_presence": list(self.sensor_presence),
            "labels": list(self.labels), "label_mask": list(self.label_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageRecord":
        return cls(
            stage_type=d["stage_type"], mod_sequence=tuple(d["mod_sequence"]),
            sensors=tuple(math.nan if v is None else float(v) for v in d["sensors"]),
            sensor_presence=tuple(int(v) for v in d["sensor_presence"]),
            labels=tuple(int(v) for v in d["labels"]),
            label_mask=tuple(int(v) for v in d["label_mask"]),
            process=d.get("process", ""), step=d.get("step", ""), tool=d.get("tool", ""),
            timestamp=int(d.get("timestamp", 0)),
        )


@dataclass(frozen=True)
class WaferSequence:
    wafer_id: str
    product_type: str
    product_group: str
    stages: tuple

    @property
    def T(self) -> int:
        return len(self.stages)


@dataclass(frozen=True)
class WindowedSample:
    wafer_id: str
    product_type: str
    product_group: str
    start: int
    stages: tuple


# parsing -----------------------------------------------------------------

def _parse_float(cell: str, line: int, col: str):
    cell = cell.strip()
    if cell == "":
        return None
    try:
        return float(cell)
    except ValueError:
        raise RowError(line, f"column {col!r}: cannot parse {cell!r} as a number") from None


def _parse_label(cell: str, line: int, col: str):
    cell = cell.strip().lower()
    if cell == "":
        return None
    if cell in ("0", "0.0", "pass"):
        return 0
    if cell in ("1", "1.0", "fail"):
        return 1
    raise RowError(line, f"column {col!r}: expected 0/1 (pass/fail), got {cell!r}")


def parse_transactions(stream, schema: SchemaConfig) -> list[Transaction]:
    """Read comma-delimited rows with a header; blank cells become ``None``."""
    if isinstance(stream, (str, Path)):
        with open(stream, newline="") as fh:
            return parse_transactions(fh, schema)
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaError("empty input: missing header row") from None
    expected = set(schema.header)
    for col in header:
        if col not in expected:
            raise SchemaError(f"unknown column {col!r}")
    missing = [c for c in schema.header if c not in header]
    if missing:
        raise SchemaError(f"missing columns: {missing}")
    pos = {c: i for i, c in enumerate(header)}
    cols = schema.columns
    out = []
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise RowError(line, f"expected {len(header)} cells, got {len(row)}")
        get = lambda role: row[pos[cols[role]]].strip()  # noqa: E731
        wafer = get("wafer_id")
        if not wafer:
            raise RowError(line, "empty wafer_id")
        ts = _parse_float(get("timestamp"), line, cols["timestamp"])
        if ts is None:
            raise RowError(line, "empty timestamp")
        out.append(Transaction(
            wafer_id=wafer, timestamp=int(ts), process=get("process"), step=get("step"),
            stage_type=get("stage_type"), mod_label=get("mod_label"), recipe=get("recipe"),
            tool=get("tool"), product_type=get("product_type"),
            product_group=get("product_group"),
            sensors=tuple(_parse_float(row[pos[c]], line, c) for c in schema.sensors),
            measurements=tuple(_parse_label(row[pos[c]], line, c) for c in schema.measurements),
        ))
    return out


def write_transactions(path_or_stream, rows: Iterable[Transaction], schema: SchemaConfig) -> None:
    if isinstance(path_or_stream, (str, Path)):
        with open(path_or_stream, "w", newline="") as fh:
            return write_transactions(fh, rows, schema)
    w = csv.writer(path_or_stream, lineterminator="\n")
    w.writerow(schema.header)
    for t in rows:
        w.writerow([t.wafer_id, t.timestamp, t.process, t.step, t.stage_type, t.mod_label,
                    t.recipe, t.tool, t.product_type, t.product_group]
                   + ["" if v is None else repr(float(v)) for v in t.sensors]
                   + ["" if v is None else int(v) for v in t.measurements])


# sequence building ---------------------------------------------------------

def build_sequences(transactions: Sequence[Transaction]) -> list[WaferSequence]:
    """Group rows per wafer, merge rows of the same procedure, order by time.

    Sensor slots keep the last observed value; measurements are unioned with
    the last value winning on conflict. Absent sensors stay NaN with presence 0.
    """
    by_wafer: dict[str, list] = defaultdict(list)
    for i, t in enumerate(transactions):
        by_wafer[t.wafer_id].append((t.timestamp, i, t))
    sequences = []
    for wafer in sorted(by_wafer):
        rows = [t for _, _, t in sorted(by_wafer[wafer], key=lambda r: (r[0], r[1]))]
        groups: dict[tuple, list] = {}
        for t in rows:
            groups.setdefault((t.process, t.step, t.stage_type), []).append(t)
        stages = []
        for (process, step, stage_type), grp in groups.items():
            D, K = len(grp[0].sensors), len(grp[0].measurements)
            sensors = [math.nan] * D
            labels, lmask = [0] * K, [0] * K
            for t in grp:
                for d, v in enumerate(t.sensors):
                    if v is not None:
                        sensors[d] = float(v)
                for k, v in enumerate(t.measurements):
                    if v is None:
                        continue
                    if lmask[k] and labels[k] != v:
                        log.warning("wafer %s stage %s/%s/%s: conflicting measurement %d, "
                                    "keeping the later value", wafer, process, step,
                                    stage_type, k)
                    labels[k], lmask[k] = int(v), 1
            stages.append(StageRecord(
                stage_type=stage_type, mod_sequence=tuple(t.mod_label for t in grp),
                sensors=tuple(sensors),
                sensor_presence=tuple(0 if math.isnan(v) else 1 for v in sensors),
                labels=tuple(labels), label_mask=tuple(lmask), process=process, step=step,
                tool=grp[-1].tool, timestamp=grp[0].timestamp))
        stages.sort(key=lambda s: s.timestamp)
        first = rows[0]
        sequences.append(WaferSequence(wafer, first.product_type, first.product_group,
                                       tuple(stages)))
    return sequences


def make_windows(seq: WaferSequence, w: int) -> list[WindowedSample]:
    if w < 1:
        raise ContractError(f"window size must be >= 1, got {w}")
    return [WindowedSample(seq.wafer_id, seq.product_type, seq.product_group, s,
                           seq.stages[s:s + w])
            for s in range(max(0, seq.T - w + 1))]


# missing values ------------------------------------------------------------

def systematic_gaps(transactions: Sequence[Transaction], threshold: float = 0.95) -> dict:
    """Per tool, the sensor slots absent in at least ``threshold`` of its rows."""
    counts: dict[str, np.ndarray] = {}
    totals: dict[str, int] = defaultdict(int)
    for t in transactions:
        absent = np.array([v is None for v in t.sensors], dtype=np.int64)
        counts[t.tool] = counts.get(t.tool, 0) + absent
        totals[t.tool] += 1
    return {tool: frozenset(np.nonzero(c / totals[tool] >= threshold)[0].tolist())
            for tool, c in counts.items()}


def knn_impute(rows, k: int = 5, skip=None) -> np.ndarray:
    """Fill NaN cells from the k nearest rows that observe the column.

    Distances use per-column z-scores over mutually observed coordinates,
    scaled by sqrt(D / shared). Rows sharing no observed coordinate are never
    neighbours. Ties break by ascending row index. Cells flagged in ``skip``
    count as unobserved but are left as NaN; so are columns with no observed
    value at all (dropped with a warning).
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    X = np.array(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("knn_impute expects a 2-D table")
    obs = ~np.isnan(X)
    targets = ~obs if skip is None else (~obs & ~np.asarray(skip, dtype=bool))
    live = obs.any(axis=0)
    for c in np.nonzero(~live)[0]:
        log.warning("sensor column %d is never observed; excluded from imputation", c)
    targets &= live[None, :]
    if not targets.any():
        return X
    Xl, Ol = X[:, live], obs[:, live]
    D = Xl.shape[1]
    mu = np.array([Xl[Ol[:, c], c].mean() for c in range(D)])
    sd = np.array([Xl[Ol[:, c], c].std() for c in range(D)])
    sd[sd == 0] = 1.0
    Z = np.where(Ol, (Xl - mu) / sd, 0.0)
    Of = Ol.astype(np.float64)
    col_index = np.nonzero(live)[0]
    out = X.copy()
    order_idx = np.arange(X.shape[0])
    for i in np.nonzero(targets.any(axis=1))[0]:
        shared_mask = Of * Of[i]
        shared = shared_mask.sum(axis=1)
        d2 = (((Z - Z[i]) ** 2) * shared_mask).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(shared > 0, np.sqrt(d2 * (D / shared)), np.inf)
        dist[i] = np.inf
        ranked = np.lexsort((order_idx, dist))
        for c_full in np.nonzero(targets[i])[0]:
            c = int(np.searchsorted(col_index, c_full))
            cand = ranked[Ol[ranked, c] & np.isfinite(dist[ranked])]
            if cand.size == 0:
                out[i, c_full] = mu[c]
            else:
                out[i, c_full] = Xl[cand[:k], c].mean()
    return out


def ingest(transactions: Sequence[Transaction], k: int = 5,
           systematic_threshold: float = 0.95) -> list[WaferSequence]:
    """Full pipeline: sequences with imputed sensors and presence flags."""
    seqs = build_sequences(transactions)
    gaps = systematic_gaps(transactions, systematic_threshold)
    records = [(si, ti) for si, s in enumerate(seqs) for ti in range(s.T)]
    if not records:
        return seqs
    table = np.array([seqs[si].stages[ti].sensors for si, ti in records], dtype=np.float64)
    skip = np.zeros_like(table, dtype=bool)
    for r, (si, ti) in enumerate(records):
        for d in gaps.get(seqs[si].stages[ti].tool, ()):
            skip[r, d] = True
    filled = knn_impute(table, k=k, skip=skip)
    absent = np.isnan(filled)
    filled[absent] = 0.0
    new_stages = [list(s.stages) for s in seqs]
    for r, (si, ti) in enumerate(records):
        st = new_stages[si][ti]
        new_stages[si][ti] = replace(
            st, sensors=tuple(float(v) for v in filled[r]),
            sensor_presence=tuple(int(not a) for a in absent[r]))
    return [replace(s, stages=tuple(new_stages[i])) for i, s in enumerate(seqs)]


# sequence files --------------------------------------------------------------

def sequence_to_json(seq: WaferSequence) -> str:
    return json.dumps({
        "format_version": FORMAT_VERSION, "wafer_id": seq.wafer_id,
        "product_type": seq.product_type, "product_group": seq.product_group,
        "stages": [s.to_dict() for s in seq.stages],
    }, sort_keys=True)


def sequence_from_json(line: str) -> WaferSequence:
    d = json.loads(line)
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported sequence format_version {version!r}")
    return WaferSequence(d["wafer_id"], d["product_type"], d["product_group"],
                         tuple(StageRecord.from_dict(s) for s in d["stages"]))


def write_sequences(path, seqs: Iterable[WaferSequence]) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(sequence_to_json(s) + "\n")


def read_sequences(path) -> list[WaferSequence]:
    with open(path) as fh:
        return [sequence_from_json(line) for line in fh if line.strip()]


# splitting -----------------------------------------------------------------

def split_dataset(sequences: Sequence[WaferSequence], mode: str = "standard",
                  holdout=0.2, seed: int = 0):
    """(train, eval) by random wafer split or by held-out product pools.

    ``holdout`` is the eval fraction in standard mode and a collection of
    product types (groups) in the generalized modes.
    """
    if mode == "standard":
        frac = float(holdout)
        if not 0.0 < frac < 1.0:
            raise SplitError(f"standard split needs a fraction in (0, 1), got {holdout}")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(sequences))
        n_eval = int(round(frac * len(sequences)))
        eval_idx = set(order[:n_eval].tolist())
        train = [s for i, s in enumerate(sequences) if i not in eval_idx]
        ev = [s for i, s in enumerate(sequences) if i in eval_idx]
    elif mode in ("by_product_type", "by_product_group"):
        key = "product_type" if mode == "by_product_type" else "product_group"
        pool = {holdout} if isinstance(holdout, str) else set(holdout)
        present = {getattr(s, key) for s in sequences}
        unknown = pool - present
        if unknown:
            raise SplitError(f"holdout values not present in data: {sorted(unknown)}")
        train = [s for s in sequences if getattr(s, key) not in pool]
        ev = [s for s in sequences if getattr(s, key) in pool]
        train_keys = {getattr(s, key) for s in train}
        eval_keys = {getattr(s, key) for s in ev}
        assert train_keys.isdisjoint(eval_keys), "generalized split leaked holdout keys"
    else:
        raise SplitError(f"unknown split mode {mode!r}")
    if not train:
        raise SplitError("train side of the split is empty")
    if not ev:
        raise SplitError("eval side of the split is empty")
    return train, ev


# encoding for the model ------------------------------------------------------

@dataclass
class Vocab:
    stage_types: list[str]
    mods: list[str]

    @classmethod
    def from_sequences(cls, seqs: Iterable[WaferSequence]) -> "Vocab":
        st, md = set(), set()
        for s in seqs:
            for r in s.stages:
                st.add(r.stage_type)
                md.update(r.mod_sequence)
        return cls(sorted(st), sorted(md))

    def stage_id(self, name: str) -> int:
        try:
            return self.stage_types.index(name)
        except ValueError:
            return len(self.stage_types)  # rejected downstream as a missing module

    def to_dict(self) -> dict:
        return {"stage_types": list(self.stage_types), "mods": list(self.mods)}


@dataclass
class SensorScaler:
    """Per-sensor z-score statistics over observed training cells."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, seqs: Iterable[WaferSequence]) -> "SensorScaler":
        rows, pres = [], []
        for s in seqs:
            for r in s.stages:
                rows.append(r.sensors)
                pres.append(r.sensor_presence)
        X = np.array(rows, dtype=np.float64)
        P = np.array(pres, dtype=bool)
        n = np.maximum(P.sum(axis=0), 1)
        mean = np.where(P, X, 0.0).sum(axis=0) / n
        var = np.where(P, (X - mean) ** 2, 0.0).sum(axis=0) / n
        std = np.sqrt(var)
        std[std == 0] = 1.0
        return cls(mean, std)

    def transform(self, x: np.ndarray, presence: np.ndarray) -> np.ndarray:
        return np.where(presence > 0, (x - self.mean) / self.std, 0.0)


def encode_windows(windows: Sequence[WindowedSample], vocab: Vocab,
                   scaler: SensorScaler) -> Batch:
    B = len(windows)
    T = len(windows[0].stages)
    D = len(windows[0].stages[0].sensors)
    K = len(windows[0].stages[0].labels)
    R = max(len(st.mod_sequence) for w in windows for st in w.stages)
    mod_index = {m: i for i, m in enumerate(vocab.mods)}
    stage_index = {s: i for i, s in enumerate(vocab.stage_types)}
    x = np.zeros((B, T, D))
    pres = np.zeros((B, T, D))
    stage = np.zeros((B, T), dtype=np.intp)
    mods = np.zeros((B, T, R), dtype=np.intp)
    mod_mask = np.zeros((B, T, R))
    labels = np.zeros((B, T, K))
    lmask = np.zeros((B, T, K))
    for b, w in enumerate(windows):
        for t, st in enumerate(w.stages):
            x[b, t] = st.sensors
            pres[b, t] = st.sensor_presence
            stage[b, t] = stage_index.get(st.stage_type, len(vocab.stage_types))
            for r, m in enumerate(st.mod_sequence):
                mods[b, t, r] = mod_index[m]
                mod_mask[b, t, r] = 1.0
            labels[b, t] = st.labels
            lmask[b, t] = st.label_mask
    return Batch(scaler.transform(x, pres), stage, mods, mod_mask, labels, lmask)


def windows_of(seqs: Iterable[WaferSequence], w: int) -> list[WindowedSample]:
    out = []
    for s in seqs:
        out.extend(make_windows(s, w))
    return out
