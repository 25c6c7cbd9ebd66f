"""Stage modules: per-stage-type routing over the shared prototype bank.

Every stage type j owns a small MLP f_j that reads (x_t || h_{t-1}) and emits
an I x M table of inter-prototype weights, softmaxed over the prototype axis.
A stage instance runs its mod sequence step by step; each step picks the
weight column of its mod and mixes the prototype outputs into a new hidden
state. The classifier f_c turns each stage's hidden state into K KQI
probabilities.

The model works on batches of windows (see :class:`Batch`); the single-sample
functions at the bottom wrap the batched path with B = 1.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import core_math as cm
from .core_math import Tape, Tensor
from .errors import ContractError, DimensionError, EncodingError, MissingModuleError
from .prototypes import PrototypeBank, assign_classes, bank_forward, split_weights


@dataclass
class ModelDims:
    D: int          # sensors
    H: int          # hidden width
    I: int          # prototypes
    M: int          # mod types
    K: int          # KQIs
    J: int          # stage types
    C: int | None = None       # proximity classes, defaults to K
    hidden: int | None = None  # f_j hidden width, defaults to 2 (D + H)

    def __post_init__(self):
        if self.C is None:
            self.C = self.K
        if self.hidden is None:
            self.hidden = 2 * (self.D + self.H)


@dataclass
class ModelOptions:
    use_bias: bool = True
    modstep_recompute: bool = True
    shared_stage_module: bool = False
    soft_attention: bool = False


@dataclass
class StageModuleParams:
    stage_type: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    M: int


@dataclass
class ModSelector:
    S: np.ndarray  # (M, R), one-hot columns

    @property
    def R(self) -> int:
        return self.S.shape[1]


@dataclass
class ModelParams:
    dims: ModelDims
    options: ModelOptions
    values: dict[str, np.ndarray]
    class_of: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.class_of is None:
            self.class_of = assign_classes(self.dims.I, self.dims.C)

    @property
    def n_modules(self) -> int:
        return 1 if self.options.shared_stage_module else self.dims.J

    @property
    def bank(self) -> PrototypeBank:
        v = self.values
        return PrototypeBank(v["proto.mask"], v["proto.W"], v["proto.b"], self.class_of)

    def stage_module(self, j: int) -> StageModuleParams:
        k = self._module_index(j)
        v = self.values
        return StageModuleParams(j, v["stage.W1"][k], v["stage.b1"][k],
                                 v["stage.W2"][k], v["stage.b2"][k], self.dims.M)

    def _module_index(self, j: int) -> int:
        if not 0 <= j < self.dims.J:
            raise MissingModuleError(f"no stage module for stage type {j}")
        return 0 if self.options.shared_stage_module else j

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.options,
                           {k: v.copy() for k, v in self.values.items()}, self.class_of.copy())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.values):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.values[k]).tobytes())
        return h.hexdigest()

    def describe(self) -> dict:
        return {"dims": asdict(self.dims), "options": asdict(self.options)}


def _glorot(rng, fan_out, fan_in, shape):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_model(dims: ModelDims, options: ModelOptions | None = None,
               seed: int = 0) -> ModelParams:
    options = options or ModelOptions()
    rng = np.random.default_rng(seed)
    D, H, I, M, K, F = dims.D, dims.H, dims.I, dims.M, dims.K, dims.hidden
    J = 1 if options.shared_stage_module else dims.J
    a = np.sqrt(6.0 / (D + 2 * H))
    values = {
        "proto.mask": rng.uniform(0.4, 0.6, size=(I, D)),
        "proto.W": rng.uniform(-a, a, size=(I, H, D + H)),
        "proto.b": np.zeros((I, H)),
        "stage.W1": _glorot(rng, F, D + H, (J, F, D + H)),
        "stage.b1": np.zeros((J, F)),
        "stage.W2": _glorot(rng, I * M, F, (J, I * M, F)),
        "stage.b2": np.zeros((J, I * M)),
        "clf.W": _glorot(rng, K, H, (K, H)),
        "clf.b": np.zeros(K),
    }
    if options.soft_attention:
        values["attn.W"] = np.zeros((K, H))
        values["attn.b"] = np.full(K, 2.0)
    return ModelParams(dims, options, values)


def build_selector(mod_sequence, M: int) -> ModSelector:
    mods = [int(m) for m in mod_sequence]
    for m in mods:
        if not 0 <= m < M:
            raise EncodingError(f"mod id {m} outside vocabulary of size {M}")
    S = np.zeros((M, len(mods)))
    S[mods, np.arange(len(mods))] = 1.0
    return ModSelector(S)


@dataclass
class Batch:
    """Windows packed into arrays; mod steps are right-padded.

    x: (B, T, D); stage: (B, T) int; mods: (B, T, R) int; mod_mask: (B, T, R)
    with 1 for real steps; labels, label_mask: (B, T, K).
    """

    x: np.ndarray
    stage: np.ndarray
    mods: np.ndarray
    mod_mask: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.stage[idx], self.mods[idx], self.mod_mask[idx],
                     self.labels[idx], self.label_mask[idx])


@dataclass
class Trace:
    probs: Tensor               # (B, T, K)
    hidden: Tensor              # (B, T, H)
    proto_outputs: Tensor       # (B, T, I, H), prototype outputs at stage entry
    route_weights: list         # per stage: (B, I, M) softmaxed inter-prototype weights
    attention: Tensor | None = None   # (B, T, K) soft label weights


class ModelTensors:
    """Parameters of one model registered on a tape, with derived views."""

    def __init__(self, model: ModelParams, tape: Tape, tensors: dict[str, Tensor] | None = None):
        self.model = model
        self.tape = tape
        self.t = tensors if tensors is not None else tape.params_from(model.values)
        self.folded = split_weights(self.t["proto.mask"], self.t["proto.W"])
        self.bias = self.t["proto.b"] if model.options.use_bias else None


def _module_ids(model: ModelParams, stage_ids: np.ndarray, t: int | None = None) -> np.ndarray:
    stage_ids = np.asarray(stage_ids, dtype=np.intp)
    bad = (stage_ids < 0) | (stage_ids >= model.dims.J)
    if bad.any():
        j = int(stage_ids[bad][0])
        where = "" if t is None else f" at stage index {t}"
        raise MissingModuleError(f"no stage module for stage type {j}{where}")
    if model.options.shared_stage_module:
        return np.zeros_like(stage_ids)
    return stage_ids


def inter_prototype_weights(mt: ModelTensors, module_ids: np.ndarray,
                            x: Tensor, h_prev: Tensor) -> Tensor:
    """Softmaxed (B, I, M) weights from each sample's stage MLP."""
    d = mt.model.dims
    t = mt.t
    z = cm.concat([x, h_prev], axis=-1)
    hid = cm.tanh(cm.einsum("bfk,bk->bf", cm.gather(t["stage.W1"], module_ids), z)
                  + cm.gather(t["stage.b1"], module_ids))
    logits = (cm.einsum("bof,bf->bo", cm.gather(t["stage.W2"], module_ids), hid)
              + cm.gather(t["stage.b2"], module_ids))
    return cm.softmax(cm.reshape(logits, (x.shape[0], d.I, d.M)), axis=1)


def stage_step(mt: ModelTensors, x: Tensor, h_prev: Tensor, module_ids, mods, mod_mask):
    """One stage for a batch. Returns (h_t, entry prototype outputs, weights).

    mods/mod_mask: (B, R) padded mod ids and step validity.
    """
    d = mt.model.dims
    tape = mt.tape
    B, R = mods.shape
    if (mod_mask[:, 0] == 0).any():
        raise ContractError("every stage must run at least one mod")
    weights = inter_prototype_weights(mt, module_ids, x, h_prev)
    sel = np.zeros((B, d.M, R))
    bi, ri = np.nonzero(mod_mask)
    sel[bi, mods[bi, ri], ri] = 1.0
    step_w = cm.einsum("bim,bmr->bri", weights, tape.const(sel))  # (B, R, I)
    entry = bank_forward(mt.folded, mt.bias, x, h_prev)
    h = h_prev
    protos = entry
    for r in range(R):
        if r > 0 and mt.model.options.modstep_recompute:
            protos = bank_forward(mt.folded, mt.bias, x, h)
        h_new = cm.tanh(cm.einsum("bi,bih->bh", step_w[:, r, :], protos))
        m = mod_mask[:, r]
        if m.all():
            h = h_new
        else:
            keep = tape.const(m[:, None])
            h = h_new * keep + h * tape.const(1.0 - m[:, None])
    return h, entry, weights


def classify(mt: ModelTensors, h: Tensor) -> Tensor:
    return cm.sigmoid(cm.affine(mt.t["clf.W"], h, mt.t["clf.b"]))


def forward(mt: ModelTensors, batch: Batch) -> Trace:
    """Run every window in ``batch`` from a zero hidden state."""
    d = mt.model.dims
    tape = mt.tape
    B, T = batch.stage.shape
    if batch.x.shape[2] != d.D:
        raise DimensionError(f"model expects {d.D} sensors, batch has {batch.x.shape[2]}")
    h = tape.const(np.zeros((B, d.H)))
    hs, entries, routes = [], [], []
    for t in range(T):
        ids = _module_ids(mt.model, batch.stage[:, t], t)
        x = tape.const(batch.x[:, t, :])
        h, entry, w = stage_step(mt, x, h, ids, batch.mods[:, t, :], batch.mod_mask[:, t, :])
        hs.append(cm.reshape(h, (B, 1, d.H)))
        entries.append(cm.reshape(entry, (B, 1, d.I, d.H)))
        routes.append(w)
    hidden = cm.concat(hs, axis=1)
    probs = classify(mt, hidden)
    attention = None
    if mt.model.options.soft_attention:
        attention = cm.sigmoid(cm.affine(mt.t["attn.W"], hidden, mt.t["attn.b"]))
    return Trace(probs, hidden, cm.concat(entries, axis=1), routes, attention)


# single-sample API ---------------------------------------------------------

def _single_batch(stage_types, mod_sequences, xs) -> Batch:
    T = len(stage_types)
    R = max(len(m) for m in mod_sequences)
    mods = np.zeros((1, T, R), dtype=np.intp)
    mask = np.zeros((1, T, R))
    for t, seq in enumerate(mod_sequences):
        mods[0, t, :len(seq)] = seq
        mask[0, t, :len(seq)] = 1.0
    x = np.asarray(xs, dtype=np.float64)[None]
    zeros = np.zeros((1, T, 1))
    return Batch(x, np.asarray(stage_types, dtype=np.intp)[None], mods, mask, zeros, zeros)


def stage_forward(model: ModelParams, stage_type: int, mod_sequence, x, h_prev,
                  tape: Tape | None = None) -> Tensor:
    """h_t for one stage instance; returns an (H,) tensor."""
    if len(mod_sequence) == 0:
        raise ContractError("a stage performs at least one mod")
    for m in mod_sequence:
        if not 0 <= m < model.dims.M:
            raise EncodingError(f"mod id {m} outside vocabulary of size {model.dims.M}")
    tape = tape or Tape()
    mt = ModelTensors(model, tape)
    ids = _module_ids(model, np.array([stage_type]))
    mods = np.asarray([mod_sequence], dtype=np.intp)
    h, _, _ = stage_step(mt, tape.const(np.asarray(x, float)[None]),
                         tape.const(np.asarray(h_prev, float)[None]), ids, mods,
                         np.ones(mods.shape))
    return h[0]


def classify_single(model: ModelParams, h, tape: Tape | None = None) -> Tensor:
    tape = tape or Tape()
    mt = ModelTensors(model, tape)
    return classify(mt, tape.const(np.asarray(h, float)))


def sequence_forward(model: ModelParams, stage_types, mod_sequences, xs,
                     tape: Tape | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-stage probabilities (T, K) and hidden states (T, H) for one window."""
    tape = tape or Tape()
    trace = forward(ModelTensors(model, tape), _single_batch(stage_types, mod_sequences, xs))
    return trace.probs.value[0], trace.hidden.value[0]
