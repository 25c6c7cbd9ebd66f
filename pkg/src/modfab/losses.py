"""Training objective: KQI cross-entropy, prototype proximity, prototype distinction."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import core_math as cm
from .core_math import Tensor
from .errors import ConfigError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.01
    margin: float = 1.0
    gamma: float = 1.0
    label_mode: str = "hard_crop"   # or "soft_attention"
    use_l1: bool = True
    use_l2: bool = True
    use_l3: bool = True
    paper_sign: bool = False        # literal leading minus on the distinction term
    attention_reg: float = 0.1

    def __post_init__(self):
        if not (self.use_l1 or self.use_l2 or self.use_l3):
            raise ConfigError("at least one loss term must be enabled")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.margin <= 0 or self.gamma <= 0:
            raise ConfigError("margin and gamma must be positive")
        if self.label_mode not in ("hard_crop", "soft_attention"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")

    @property
    def flags(self) -> tuple[bool, bool, bool]:
        return self.use_l1, self.use_l2, self.use_l3


def measurement_loss(probs: Tensor, labels: np.ndarray, mask) -> Tensor:
    """Masked binary cross-entropy averaged over max(1, sum(mask)) entries.

    ``mask`` is an array or a tensor of per-entry weights in [0, 1].
    """
    tape = probs.tape
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != probs.shape:
        raise ValueError(f"labels shape {labels.shape} != probs shape {probs.shape}")
    mval = mask.value if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    total = float(mval.sum())
    if total == 0.0:
        return tape.const(0.0)
    p = cm.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = cm.log(p) * labels + cm.log(1.0 - p) * (1.0 - labels)
    return cm.tsum(ll * mask) * (-1.0 / max(1.0, total))


def class_targets(labels: np.ndarray, label_mask: np.ndarray, n_classes: int) -> np.ndarray:
    """Label bits read as a binary number (first KQI most significant), mod C.

    Unmeasured bits count as 0.
    """
    bits = (np.asarray(labels) * np.asarray(label_mask) > 0.5).astype(np.int64)
    K = bits.shape[-1]
    code = bits @ (1 << np.arange(K - 1, -1, -1))
    return code % n_classes


def class_centroid_matrix(class_of: np.ndarray, n_classes: int) -> np.ndarray:
    """(I, C) averaging matrix: column c holds 1/n_c on prototypes of class c."""
    A = np.zeros((len(class_of), n_classes))
    A[np.arange(len(class_of)), class_of] = 1.0
    return A / np.maximum(A.sum(axis=0, keepdims=True), 1.0)


def proximity_loss(hidden: Tensor, proto_outputs: Tensor, labels: np.ndarray,
                   label_mask: np.ndarray, class_of: np.ndarray, cfg: LossConfig,
                   n_classes: int | None = None) -> Tensor:
    """Distance cross-entropy plus margin hinge between h_t and class centroids.

    hidden: (..., H); proto_outputs: (..., I, H); labels, label_mask: (..., K).
    Stages with no measured label are skipped.
    """
    tape = hidden.tape
    H = hidden.shape[-1]
    I = proto_outputs.shape[-2]
    C = int(n_classes if n_classes is not None else class_of.max() + 1)
    h = cm.reshape(hidden, (-1, H))
    P = cm.reshape(proto_outputs, (-1, I, H))
    lab = np.asarray(labels).reshape(h.shape[0], -1)
    lmask = np.asarray(label_mask).reshape(h.shape[0], -1)
    keep = np.nonzero(lmask.sum(axis=1) > 0)[0]
    if keep.size == 0:
        return tape.const(0.0)
    if keep.size < h.shape[0]:
        h, P = cm.gather(h, keep), cm.gather(P, keep)
        lab, lmask = lab[keep], lmask[keep]
    n = keep.size
    target = class_targets(lab, lmask, C)
    mu = cm.einsum("nih,ic->nch", P, tape.const(class_centroid_matrix(class_of, C)))
    diff = cm.reshape(h, (n, 1, H)) - mu
    dist = cm.tsum(cm.square(diff), axis=2)                    # (n, C)
    rows = np.arange(n)
    d_true = dist[rows, target]
    # -log softmax(-gamma d)[c*], with a constant shift for stability
    neg = dist * (-cfg.gamma)
    shift = neg.value.max(axis=1, keepdims=True)
    lse = cm.log(cm.tsum(cm.exp(neg - shift), axis=1)) + shift[:, 0]
    dce = cm.mean(d_true * cfg.gamma + lse)
    if C == 1:
        log.warning("single proximity class: margin term undefined, using distance CE only")
        return dce
    blocked = np.zeros((n, C))
    blocked[rows, target] = 1e12
    rival = cm.amin(dist + blocked, axis=1)
    mcl = cm.mean(cm.relu(d_true + cfg.margin - rival))
    return dce + mcl


def distinction_loss(mask: Tensor, weights: Tensor, paper_sign: bool = False) -> Tensor:
    """Mean pairwise cosine similarity of prototype weights plus that of masks."""
    tape = mask.tape
    I = mask.shape[0]
    if I < 2:
        return tape.const(0.0)
    off = tape.const(1.0 - np.eye(I))
    cw = cm.cosine_matrix(cm.reshape(weights, (I, -1)))
    cmk = cm.cosine_matrix(mask)
    total = cm.tsum((cw + cmk) * off) * (1.0 / (I * (I - 1)))
    return total * -1.0 if paper_sign else total


def total_loss(cfg: LossConfig, parts: dict) -> Tensor:
    """Weighted sum of the enabled parts ('l1', 'l2', 'l3', optional 'attn')."""
    terms = []
    for key, on, lam in (("l1", cfg.use_l1, cfg.lambda1), ("l2", cfg.use_l2, cfg.lambda2),
                         ("l3", cfg.use_l3, cfg.lambda3)):
        if on and key in parts:
            terms.append(parts[key] * lam)
    if "attn" in parts:
        terms.append(parts["attn"] * cfg.attention_reg)
    if not terms:
        any_part = next(iter(parts.values()))
        return any_part.tape.const(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def objective(mt, trace, batch, cfg: LossConfig) -> tuple[Tensor, dict]:
    """Total loss for one forward trace plus the individual parts.

    ``mt`` is the :class:`~modfab.stage_modules.ModelTensors` the trace came from.
    """
    model = mt.model
    parts = {}
    if cfg.use_l1:
        if cfg.label_mode == "soft_attention":
            if trace.attention is None:
                raise ConfigError("soft_attention needs a model built with soft_attention=True")
            weights = cm.detach(trace.attention) * batch.label_mask
            parts["l1"] = measurement_loss(trace.probs, batch.labels, weights)
            measured = batch.label_mask.sum()
            if measured > 0:
                parts["attn"] = cm.tsum((1.0 - trace.attention) * batch.label_mask) * (1.0 / measured)
        else:
            parts["l1"] = measurement_loss(trace.probs, batch.labels, batch.label_mask)
    if cfg.use_l2:
        parts["l2"] = proximity_loss(trace.hidden, trace.proto_outputs, batch.labels,
                                     batch.label_mask, model.class_of, cfg, model.dims.C)
    if cfg.use_l3:
        parts["l3"] = distinction_loss(mt.t["proto.mask"], mt.t["proto.W"], cfg.paper_sign)
    return total_loss(cfg, parts), parts
