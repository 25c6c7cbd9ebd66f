"""Gated recurrent (LSTM-style) baseline over per-stage sensor vectors.

It sees the same windows as the modular model but ignores stage types and
mod sequences, and shares its classifier head shape (affine + sigmoid).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .. import core_math as cm
from ..core_math import Tape, Tensor
from ..stage_modules import Batch


@dataclass
class BaselineDims:
    D: int
    H: int
    K: int


@dataclass
class BaselineParams:
    dims: BaselineDims
    values: dict

    def copy(self) -> "BaselineParams":
        return BaselineParams(self.dims, {k: v.copy() for k, v in self.values.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.values):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.values[k]).tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {"dims": vars(self.dims)}


def init_baseline(dims: BaselineDims, seed: int = 0) -> BaselineParams:
    rng = np.random.default_rng(seed)
    D, H, K = dims.D, dims.H, dims.K
    a = np.sqrt(6.0 / (D + H + 4 * H))
    b = np.zeros(4 * H)
    b[H:2 * H] = 1.0  # forget gate starts open
    c = np.sqrt(6.0 / (H + K))
    return BaselineParams(dims, {
        "lstm.Wx": rng.uniform(-a, a, size=(4 * H, D)),
        "lstm.Wh": rng.uniform(-a, a, size=(4 * H, H)),
        "lstm.b": b,
        "clf.W": rng.uniform(-c, c, size=(K, H)),
        "clf.b": np.zeros(K),
    })


@dataclass
class BaselineTrace:
    probs: Tensor
    hidden: Tensor


def baseline_forward(params: BaselineParams, tape: Tape, batch: Batch,
                     tensors: dict | None = None) -> BaselineTrace:
    t = tensors if tensors is not None else tape.params_from(params.values)
    H = params.dims.H
    B, T = batch.stage.shape
    h = tape.const(np.zeros((B, H)))
    c = tape.const(np.zeros((B, H)))
    hs = []
    for step in range(T):
        x = tape.const(batch.x[:, step, :])
        gates = cm.affine(t["lstm.Wx"], x, t["lstm.b"]) + cm.affine(t["lstm.Wh"], h)
        i = cm.sigmoid(gates[:, :H])
        f = cm.sigmoid(gates[:, H:2 * H])
        o = cm.sigmoid(gates[:, 2 * H:3 * H])
        g = cm.tanh(gates[:, 3 * H:])
        c = f * c + i * g
        h = o * cm.tanh(c)
        hs.append(cm.reshape(h, (B, 1, H)))
    hidden = cm.concat(hs, axis=1)
    probs = cm.sigmoid(cm.affine(t["clf.W"], hidden, t["clf.b"]))
    return BaselineTrace(probs, hidden)
