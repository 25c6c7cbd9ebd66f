"""Finite-difference checks of every differentiable piece on random toys."""
from __future__ import annotations

import numpy as np

from .. import core_math as cm
from ..losses import LossConfig, objective
from ..prototypes import prototype_forward
from ..stage_modules import Batch, ModelDims, ModelTensors, forward, init_model, stage_step

EPS = 1e-5


def primitive_errors(rng) -> dict:
    A = rng.normal(size=(3, 4))
    P = rng.uniform(0.5, 2.0, size=(3, 4))
    cases = {
        "affine": (lambda t, p: cm.tsum(cm.square(cm.affine(p["W"], p["x"], p["b"]))),
                   {"W": A, "x": rng.normal(size=(2, 4)), "b": rng.normal(size=3)}),
        "tanh": (lambda t, p: cm.tsum(cm.tanh(p["a"]) * t.const(P)), {"a": A}),
        "sigmoid": (lambda t, p: cm.tsum(cm.sigmoid(p["a"]) * t.const(P)), {"a": A}),
        "hadamard": (lambda t, p: cm.tsum(cm.square(cm.hadamard(p["a"], p["c"]))),
                     {"a": A, "c": P}),
        "concat": (lambda t, p: cm.tsum(cm.square(cm.concat([p["a"], p["c"]], axis=1)) * 0.5),
                   {"a": A, "c": rng.normal(size=(3, 2))}),
        "softmax": (lambda t, p: cm.tsum(cm.softmax(p["a"], axis=1) * t.const(P)), {"a": A}),
        "exp_log": (lambda t, p: cm.tsum(cm.log(p["q"]) * cm.exp(p["a"] * 0.3)),
                    {"q": P, "a": A}),
        "einsum": (lambda t, p: cm.tsum(cm.tanh(cm.einsum("ij,kj->ik", p["a"], p["c"]))),
                   {"a": A, "c": rng.normal(size=(2, 4))}),
        "cosine": (lambda t, p: cm.tsum(cm.cosine_matrix(p["a"]) * t.const(np.tril(P[:, :3]))),
                   {"a": A}),
    }
    return {k: cm.grad_check(f, params, EPS) for k, (f, params) in cases.items()}


def prototype_error(rng) -> float:
    D, H = 3, 2
    params = {"m": rng.uniform(0, 1, D), "W": rng.normal(size=(H, D + H)),
              "b": rng.normal(size=H), "x": rng.normal(size=D), "h": rng.uniform(-1, 1, H)}

    def f(tape, p):
        out = prototype_forward(p["m"], p["W"], p["b"], p["x"], p["h"])
        return cm.tsum(out * tape.const(np.arange(1.0, H + 1)))
    return cm.grad_check(f, params, EPS)


def toy_model(seed: int, **dims):
    base = dict(D=2, H=2, I=2, M=2, K=2, J=2, hidden=3)
    base.update(dims)
    model = init_model(ModelDims(**base), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for key in ("proto.b", "stage.b1", "stage.b2", "clf.b"):
        model.values[key] = rng.normal(size=model.values[key].shape) * 0.3
    return model


def stage_error(seed: int, R: int = 3) -> float:
    model = toy_model(seed, hidden=2)
    rng = np.random.default_rng(seed + 2)
    x = rng.normal(size=(1, model.dims.D))
    h0 = rng.uniform(-0.5, 0.5, size=(1, model.dims.H))
    mods = rng.integers(0, model.dims.M, size=(1, R))
    weights = rng.normal(size=model.dims.H)

    def f(tape, p):
        mt = ModelTensors(model, tape, p)
        h, _, _ = stage_step(mt, tape.const(x), tape.const(h0), np.array([1]), mods,
                             np.ones((1, R)))
        return cm.tsum(h * tape.const(weights))
    return cm.grad_check(f, model.values, EPS)


def toy_batch(rng, model, T: int = 2, R: int = 2) -> Batch:
    d = model.dims
    mods = rng.integers(0, d.M, size=(1, T, R))
    mod_mask = np.ones((1, T, R))
    mod_mask[0, 0, 1:] = 0.0
    return Batch(rng.normal(size=(1, T, d.D)), rng.integers(0, d.J, size=(1, T)), mods,
                 mod_mask, rng.integers(0, 2, size=(1, T, d.K)).astype(float),
                 np.ones((1, T, d.K)))


def full_loss_error(seed: int) -> float:
    model = toy_model(seed, J=1, hidden=2)
    batch = toy_batch(np.random.default_rng(seed + 3), model)
    cfg = LossConfig()

    def f(tape, p):
        mt = ModelTensors(model, tape, p)
        return objective(mt, forward(mt, batch), batch, cfg)[0]
    return cm.grad_check(f, model.values, EPS)


def run_suite(seed: int) -> dict:
    """Max relative error per check for one seed."""
    rng = np.random.default_rng(seed)
    out = {f"primitive.{k}": v for k, v in primitive_errors(rng).items()}
    out["prototype_forward"] = prototype_error(rng)
    out["stage_forward_R3"] = stage_error(seed)
    out["sequence_forward_total_loss"] = full_loss_error(seed)
    return out
