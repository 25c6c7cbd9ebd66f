"""Ablation grids and the route-weight similarity analysis."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import pearsonr

from ..core_math import Tape
from ..data_pipeline import Vocab, WaferSequence, encode_windows, windows_of
from ..errors import ContractError, ModfabError
from ..losses import LossConfig
from ..stage_modules import ModelTensors, forward
from .train import TrainConfig, TrainResult, evaluate, train

log = logging.getLogger(__name__)

# rows in the order of the usual loss-combination table: all three first,
# then the pairs, then the singles
LOSS_GRID = [
    (True, True, True),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
]

# (prototypes, stage modules): prototypes off means a single prototype,
# stage modules off means one module shared by every stage type
COMPONENT_GRID = [
    (True, True),
    (True, False),
    (False, True),
    (False, False),
]


def mark(flag: bool) -> str:
    return "✓" if flag else "-"


@dataclass
class Cell:
    values: list = field(default_factory=list)   # mean AUC per successful seed
    failures: list = field(default_factory=list)  # (seed, message)

    @property
    def mean(self) -> float | None:
        return float(np.mean(self.values)) if self.values else None

    @property
    def std(self) -> float | None:
        # only reported with at least two seeds
        return float(np.std(self.values, ddof=1)) if len(self.values) >= 2 else None

    def fmt(self) -> str:
        if self.mean is None:
            return "failed"
        if self.std is None:
            return f"{self.mean:.3f}"
        return f"{self.mean:.3f}±{self.std:.3f}"

    def to_dict(self) -> dict:
        return {"values": self.values, "mean": self.mean, "std": self.std,
                "n": len(self.values), "failures": [list(f) for f in self.failures]}


@dataclass
class AblationTable:
    headers: list          # flag column names
    splits: list           # split names (value columns)
    rows: list             # (flags tuple, {split: Cell})
    seeds: list

    def row(self, flags) -> dict:
        for f, cells in self.rows:
            if tuple(f) == tuple(flags):
                return cells
        raise KeyError(flags)

    def to_tsv(self) -> str:
        lines = ["\t".join(list(self.headers) + list(self.splits))]
        for flags, cells in self.rows:
            lines.append("\t".join([mark(f) for f in flags] + [cells[s].fmt() for s in self.splits]))
        lines.append(f"# mean±std over seeds {list(self.seeds)}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"headers": self.headers, "splits": self.splits, "seeds": list(self.seeds),
                "rows": [{"flags": list(f), "cells": {s: c.to_dict() for s, c in cells.items()}}
                         for f, cells in self.rows]}


def loss_variant(cfg: TrainConfig, flags) -> TrainConfig:
    l1, l2, l3 = flags
    return replace(cfg, loss=replace(cfg.loss, use_l1=l1, use_l2=l2, use_l3=l3))


def component_variant(cfg: TrainConfig, flags) -> TrainConfig:
    protos, modules = flags
    return replace(cfg, I=cfg.I if protos else 1, C=cfg.C if protos else 1,
                   shared_stage_module=not modules)


def _run_cell(args):
    cfg, train_seqs, eval_seqs, vocab = args
    try:
        res = train(train_seqs, cfg, vocab)
        report = evaluate(res, eval_seqs)
        if report.mean_auc is None:
            return None, "no defined AUC"
        return report.mean_auc, None
    except (ModfabError, ValueError, FloatingPointError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("MODFAB_THREADS", "1")))
    except ValueError:
        return 1


def ablate(splits: dict, cfg: TrainConfig, grid=None, seeds=(0, 1, 2), kind: str = "loss",
           vocab: Vocab | None = None, workers: int | None = None) -> AblationTable:
    """Train one model per (grid row, split, seed) and tabulate mean AUC.

    ``splits`` maps a split name to (train sequences, eval sequences).
    ``kind`` is "loss" (rows are (l1, l2, l3) flags) or "component" (rows are
    (prototypes, stage modules) flags). Failed cells are recorded, not raised.
    """
    if kind == "loss":
        grid = LOSS_GRID if grid is None else grid
        headers, variant = ["l1", "l2", "l3"], loss_variant
    elif kind == "component":
        grid = COMPONENT_GRID if grid is None else grid
        headers, variant = ["prototypes", "stage_modules"], component_variant
    else:
        raise ContractError(f"unknown ablation kind {kind!r}")
    if not grid:
        raise ContractError("ablation grid is empty")
    if vocab is None:
        everything = [s for tr, ev in splits.values() for s in list(tr) + list(ev)]
        vocab = Vocab.from_sequences(everything)
    jobs, keys = [], []
    for flags in grid:
        for name, (tr, ev) in splits.items():
            for seed in seeds:
                try:
                    cell_cfg = replace(variant(cfg, flags), seed=seed)
                except ModfabError as exc:
                    jobs.append(None)
                    keys.append((tuple(flags), name, seed, str(exc)))
                    continue
                jobs.append((cell_cfg, tr, ev, vocab))
                keys.append((tuple(flags), name, seed, None))
    workers = workers or worker_count()
    todo = [j for j in jobs if j is not None]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = iter(list(pool.map(_run_cell, todo)))
    else:
        done = iter([_run_cell(j) for j in todo])
    table = {tuple(f): {name: Cell() for name in splits} for f in grid}
    for job, (flags, name, seed, err) in zip(jobs, keys):
        value, err2 = (None, err) if job is None else next(done)
        cell = table[flags][name]
        if value is None:
            log.warning("ablation cell %s/%s seed %d failed: %s", flags, name, seed, err2)
            cell.failures.append((seed, err2))
        else:
            cell.values.append(value)
    return AblationTable(headers, list(splits), [(tuple(f), table[tuple(f)]) for f in grid],
                         list(seeds))


# similarity analysis --------------------------------------------------------------

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def route_profiles(result: TrainResult, seqs: Sequence[WaferSequence], key: str = "product_type",
                   chunk: int = 256) -> dict:
    """Per product (or group): mean applied prototype weights, blocked by stage type.

    For every stage in every window the weight column of each executed mod is
    taken from the softmaxed inter-prototype weights. These I-vectors are
    averaged per (key value, stage type) and laid out as one J*I vector, with
    zeros for stage types the product never runs.
    """
    model = result.model
    d = model.dims
    windows = windows_of(seqs, result.cfg.window)
    if not windows:
        raise ContractError("no windows to analyse")
    sums: dict = {}
    counts: dict = {}
    for s in range(0, len(windows), chunk):
        part = windows[s:s + chunk]
        batch = encode_windows(part, result.vocab, result.scaler)
        trace = forward(ModelTensors(model, Tape()), batch)
        for t, w in enumerate(trace.route_weights):
            wv = w.value                                        # (B, I, M)
            mods, mm = batch.mods[:, t, :], batch.mod_mask[:, t, :]
            picked = np.take_along_axis(wv, mods[:, None, :], axis=2)  # (B, I, R)
            mean_w = (picked * mm[:, None, :]).sum(axis=2) / mm.sum(axis=1, keepdims=True)
            for b, win in enumerate(part):
                k = getattr(win, key)
                j = int(batch.stage[b, t])
                if k not in sums:
                    sums[k] = np.zeros((d.J, d.I))
                    counts[k] = np.zeros(d.J)
                sums[k][j] += mean_w[b]
                counts[k][j] += 1
    return {k: (sums[k] / np.maximum(counts[k], 1)[:, None]).ravel() for k in sorted(sums)}


def stage_sets(seqs: Sequence[WaferSequence], key: str = "product_type") -> dict:
    out: dict = {}
    for s in seqs:
        out.setdefault(getattr(s, key), set()).update(st.stage_type for st in s.stages)
    return out


def jaccard(a: set, b: set) -> float:
    return len(a & b) / len(a | b) if a | b else 0.0


@dataclass
class SimilarityReport:
    names: list
    attention: list       # averaged cosine matrix
    truth: list           # ground-truth similarity matrix
    statistic: float | None
    pvalue: float | None
    per_seed: list        # [(statistic, pvalue)] per model
    level: str = "product_type"

    def to_dict(self) -> dict:
        return {"level": self.level, "names": self.names, "attention": self.attention,
                "truth": self.truth, "statistic": self.statistic, "pvalue": self.pvalue,
                "per_seed": [list(p) for p in self.per_seed]}

    def to_tsv(self) -> str:
        """Upper triangle: ground truth; lower triangle: attention cosine."""
        lines = ["\t".join([""] + self.names)]
        n = len(self.names)
        for i in range(n):
            cells = []
            for j in range(n):
                v = self.truth[i][j] if j > i else (self.attention[i][j] if j < i else 1.0)
                cells.append(f"{v:.2f}")
            lines.append("\t".join([self.names[i]] + cells))
        stat = "undefined" if self.statistic is None else f"{self.statistic:.3f}"
        p = "undefined" if self.pvalue is None else f"{self.pvalue:.3g}"
        lines.append(f"# Pearson statistic={stat} pvalue={p}")
        return "\n".join(lines) + "\n"


def _pearson(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.size < 3 or np.std(x) == 0 or np.std(y) == 0:
        log.info("Pearson correlation undefined (degenerate variance or too few pairs)")
        return None, None
    r = pearsonr(x, y)
    return float(r.statistic), float(r.pvalue)


def similarity_analysis(results: Sequence[TrainResult], seqs: Sequence[WaferSequence],
                        level: str = "product_type", truth: dict | None = None) -> SimilarityReport:
    """Correlate route-weight cosine similarity with stage-set overlap.

    ``results`` are models (typically one per seed); cosine matrices are
    averaged over them before the correlation, and each model's own
    correlation is reported too. ``truth`` maps pairs of names to a
    ground-truth similarity; it defaults to the Jaccard overlap of the stage
    types each product (group) runs in ``seqs``.
    """
    if not results:
        raise ContractError("need at least one trained model")
    groups = {s.product_group for s in seqs}
    if len(groups) < 3:
        raise ContractError(f"similarity analysis needs >= 3 product groups, got {len(groups)}")
    sets = stage_sets(seqs, level)
    names = sorted(sets)
    n = len(names)
    T = np.eye(n)
    for i in range(n):
        for j in range(n):
            if i != j:
                T[i, j] = (truth[(names[i], names[j])] if truth is not None
                           else jaccard(sets[names[i]], sets[names[j]]))
    mats, per_seed = [], []
    iu = np.triu_indices(n, 1)
    for res in results:
        prof = route_profiles(res, seqs, level)
        A = np.array([[_cosine(prof[a], prof[b]) for b in names] for a in names])
        mats.append(A)
        per_seed.append(_pearson(A[iu], T[iu]))
    A = np.mean(mats, axis=0)
    stat, p = _pearson(A[iu], T[iu])
    return SimilarityReport(names, A.tolist(), T.tolist(), stat, p, per_seed, level)


def default_loss_config() -> LossConfig:
    return LossConfig()
