"""Mini-batch training, evaluation and checkpoints for both model kinds."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .. import core_math as cm
from ..core_math import Tape
from ..data_pipeline import (SensorScaler, Vocab, WaferSequence, encode_windows,
                             windows_of)
from ..errors import ConfigError, ContractError, NumericError
from ..losses import LossConfig, measurement_loss, objective
from ..prototypes import clamp_masks
from ..stage_modules import (Batch, ModelDims, ModelOptions, ModelParams, ModelTensors,
                             forward, init_model)
from .baseline import BaselineDims, BaselineParams, baseline_forward, init_baseline
from .metrics import auc, mean_defined

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODEL_KINDS = ("modular", "recurrent_baseline")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    window: int = 5
    H: int = 32
    I: int = 8
    C: int | None = None
    mlp_hidden: int | None = None
    seed: int = 0
    model_kind: str = "modular"
    patience: int = 10
    val_fraction: float = 0.1
    modstep_recompute: bool = True
    shared_stage_module: bool = False
    use_bias: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        for name in ("epochs", "batch_size", "window", "H", "I", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class Adam:
    """Adaptive moment estimation over a dict of float arrays (in-place)."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        if self.lr == 0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: object
    history: list
    vocab: Vocab
    scaler: SensorScaler
    cfg: TrainConfig


def build_model(cfg: TrainConfig, vocab: Vocab, D: int, K: int):
    if cfg.model_kind == "recurrent_baseline":
        return init_baseline(BaselineDims(D, cfg.H, K), seed=cfg.seed)
    dims = ModelDims(D=D, H=cfg.H, I=cfg.I, M=max(1, len(vocab.mods)), K=K,
                     J=max(1, len(vocab.stage_types)), C=cfg.C, hidden=cfg.mlp_hidden)
    if dims.C > dims.I:
        dims.C = dims.I
    if dims.I % dims.C:
        dims.C = 1
    opts = ModelOptions(use_bias=cfg.use_bias, modstep_recompute=cfg.modstep_recompute,
                        shared_stage_module=cfg.shared_stage_module,
                        soft_attention=cfg.loss.label_mode == "soft_attention")
    return init_model(dims, opts, seed=cfg.seed)


def batch_loss(model, tape: Tape, batch: Batch, loss_cfg: LossConfig):
    """(total loss tensor, parts dict) for either model kind."""
    if isinstance(model, BaselineParams):
        trace = baseline_forward(model, tape, batch)
        l1 = measurement_loss(trace.probs, batch.labels, batch.label_mask)
        return l1, {"l1": l1}
    mt = ModelTensors(model, tape)
    trace = forward(mt, batch)
    return objective(mt, trace, batch, loss_cfg)


def predict(model, batch: Batch, chunk: int = 256) -> np.ndarray:
    """Stage-level KQI probabilities (B, T, K)."""
    out = []
    for s in range(0, batch.size, chunk):
        sub = batch.subset(slice(s, s + chunk))
        tape = Tape()
        if isinstance(model, BaselineParams):
            out.append(baseline_forward(model, tape, sub).probs.value)
        else:
            out.append(forward(ModelTensors(model, tape), sub).probs.value)
    return np.concatenate(out, axis=0)


def _param_norms(model) -> str:
    return ", ".join(f"{k}={np.linalg.norm(v):.3g}" for k, v in sorted(model.values.items()))


def _split_val(seqs, fraction, seed):
    if fraction <= 0 or len(seqs) < 10:
        return list(seqs), []
    rng = np.random.default_rng(seed + 7919)
    order = rng.permutation(len(seqs))
    n_val = max(1, int(round(fraction * len(seqs))))
    val = set(order[:n_val].tolist())
    return ([s for i, s in enumerate(seqs) if i not in val],
            [s for i, s in enumerate(seqs) if i in val])


def _mean_loss(model, batch: Batch, loss_cfg, chunk=256) -> float:
    total, n = 0.0, 0
    for s in range(0, batch.size, chunk):
        sub = batch.subset(slice(s, s + chunk))
        loss, _ = batch_loss(model, Tape(), sub, loss_cfg)
        total += float(loss.value) * sub.size
        n += sub.size
    return total / max(n, 1)


def train(train_seqs: Sequence[WaferSequence], cfg: TrainConfig,
          vocab: Vocab | None = None, model=None) -> TrainResult:
    """Fit a model with Adam on ``train_seqs``; early-stops on a held-out slice.

    ``vocab`` should cover every stage type and mod the model will meet at
    evaluation time; it defaults to the training vocabulary.
    """
    if not train_seqs:
        raise ContractError("training set is empty")
    vocab = vocab or Vocab.from_sequences(train_seqs)
    fit_seqs, val_seqs = _split_val(list(train_seqs), cfg.val_fraction, cfg.seed)
    scaler = SensorScaler.fit(fit_seqs)
    windows = windows_of(fit_seqs, cfg.window)
    if not windows:
        raise ContractError(f"no training windows of length {cfg.window}")
    data = encode_windows(windows, vocab, scaler)
    val_windows = windows_of(val_seqs, cfg.window)
    val = encode_windows(val_windows, vocab, scaler) if val_windows else None
    D, K = data.x.shape[2], data.labels.shape[2]
    if model is None:
        model = build_model(cfg, vocab, D, K)
    opt = Adam(model.values, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    best, best_loss, stale = model.copy(), np.inf, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.size)
        sums = {"l1": 0.0, "l2": 0.0, "l3": 0.0, "total": 0.0}
        n_batches = 0
        for b, s in enumerate(range(0, data.size, cfg.batch_size)):
            batch = data.subset(order[s:s + cfg.batch_size])
            tape = Tape()
            loss, parts = batch_loss(model, tape, batch, cfg.loss)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch} batch {b}; "
                                   f"parameter norms: {_param_norms(model)}")
            grads = cm.backward(tape, loss)
            opt.step(model.values, grads)
            if "proto.mask" in model.values:
                clamp_masks(model.values["proto.mask"])
            for k in ("l1", "l2", "l3"):
                if k in parts:
                    sums[k] += float(parts[k].value)
            sums["total"] += value
            n_batches += 1
        rec = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
        if val is not None:
            rec["val"] = _mean_loss(model, val, cfg.loss)
        history.append(rec)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in rec.items()})
        monitor = rec.get("val", rec["total"])
        if monitor < best_loss - 1e-9:
            best, best_loss, stale = model.copy(), monitor, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d", epoch)
                break
    final = best if val is not None else model
    return TrainResult(final, history, vocab, scaler, cfg)


# evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    auc: list                      # per KQI, None when undefined
    n_pos: list
    n_neg: list
    fingerprint: str = ""
    seed: int = 0
    history: list = field(default_factory=list)

    @property
    def mean_auc(self) -> float | None:
        return mean_defined(self.auc)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def pooled_predictions(model, seqs, vocab, scaler, window):
    windows = windows_of(seqs, window)
    if not windows:
        raise ContractError(f"no evaluation windows of length {window}")
    batch = encode_windows(windows, vocab, scaler)
    return predict(model, batch), batch


def evaluate(result: TrainResult, eval_seqs: Sequence[WaferSequence]) -> EvalReport:
    """Per-KQI AUC over all stage-level predictions with a measured label."""
    probs, batch = pooled_predictions(result.model, eval_seqs, result.vocab, result.scaler,
                                      result.cfg.window)
    aucs, npos, nneg = [], [], []
    for k in range(probs.shape[2]):
        m = batch.label_mask[:, :, k] > 0
        y = batch.labels[:, :, k][m]
        aucs.append(auc(probs[:, :, k][m], y))
        npos.append(int(y.sum()))
        nneg.append(int(y.size - y.sum()))
    return EvalReport(aucs, npos, nneg, result.cfg.fingerprint(), result.cfg.seed,
                      result.history)


# checkpoints ------------------------------------------------------------------

def save_checkpoint(path, result: TrainResult) -> None:
    """Single .npz file: parameter arrays plus a JSON header."""
    model = result.model
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "recurrent_baseline" if isinstance(model, BaselineParams) else "modular",
        "model": model.describe(),
        "train_config": result.cfg.to_dict(),
        "fingerprint": result.cfg.fingerprint(),
        "vocab": result.vocab.to_dict(),
        "history": result.history,
    }
    arrays = {f"param/{k}": v for k, v in model.values.items()}
    arrays["scaler/mean"] = result.scaler.mean
    arrays["scaler/std"] = result.scaler.std
    if not isinstance(model, BaselineParams):
        arrays["class_of"] = model.class_of
    buf = io.BytesIO()
    np.savez(buf, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TrainResult:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {header.get('version')!r}")
        values = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
        scaler = SensorScaler(z["scaler/mean"].copy(), z["scaler/std"].copy())
        class_of = z["class_of"].copy() if "class_of" in z.files else None
    cfg = TrainConfig(**header["train_config"])
    vocab = Vocab(**header["vocab"])
    if header["kind"] == "recurrent_baseline":
        model = BaselineParams(BaselineDims(**header["model"]["dims"]), values)
    else:
        dims = ModelDims(**header["model"]["dims"])
        opts = ModelOptions(**header["model"]["options"])
        model = ModelParams(dims, opts, values, class_of)
    return TrainResult(model, header["history"], vocab, scaler, cfg)
