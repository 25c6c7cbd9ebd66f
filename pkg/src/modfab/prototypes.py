"""Implicit prototypes: masked affine+tanh maps shared by every stage module."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core_math as cm
from .core_math import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class Prototype:
    index: int
    mask: np.ndarray     # (D,) in [0, 1]
    weights: np.ndarray  # (H, D + H)
    bias: np.ndarray     # (H,)


@dataclass
class PrototypeBank:
    """I prototypes stored as stacked arrays.

    ``class_of[i]`` is the proximity class of prototype i; classes own equal
    shares of the bank.
    """

    mask: np.ndarray     # (I, D)
    weights: np.ndarray  # (I, H, D + H)
    bias: np.ndarray     # (I, H)
    class_of: np.ndarray

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def D(self) -> int:
        return self.mask.shape[1]

    @property
    def H(self) -> int:
        return self.bias.shape[1]

    def __getitem__(self, i: int) -> Prototype:
        return Prototype(i, self.mask[i], self.weights[i], self.bias[i])

    def permuted(self, order) -> "PrototypeBank":
        order = np.asarray(order)
        return PrototypeBank(self.mask[order], self.weights[order], self.bias[order],
                             self.class_of[order])


def assign_classes(n_prototypes: int, n_classes: int) -> np.ndarray:
    if n_classes < 1 or n_prototypes % n_classes:
        raise ConfigError(
            f"{n_prototypes} prototypes cannot be split evenly into {n_classes} classes")
    return np.repeat(np.arange(n_classes), n_prototypes // n_classes)


def init_bank(D: int, H: int, I: int, n_classes: int, rng: np.random.Generator) -> PrototypeBank:
    a = np.sqrt(6.0 / (D + 2 * H))
    mask = rng.uniform(0.4, 0.6, size=(I, D))
    weights = rng.uniform(-a, a, size=(I, H, D + H))
    bias = np.zeros((I, H))
    return PrototypeBank(mask, weights, bias, assign_classes(I, n_classes))


def clamp_masks(mask: np.ndarray) -> np.ndarray:
    """Project mask values onto [0, 1] in place and return the array."""
    np.clip(mask, 0.0, 1.0, out=mask)
    return mask


def prototype_forward(mask: Tensor, weights: Tensor, bias: Tensor | None,
                      x: Tensor, h_prev: Tensor) -> Tensor:
    """tanh(W (x * mask || h_prev) + b) for one prototype and one input."""
    D, H = mask.shape[0], weights.shape[0]
    if x.shape != (D,) or h_prev.shape != (H,):
        raise DimensionError(
            f"prototype expects x of shape ({D},) and h of shape ({H},), "
            f"got {x.shape} and {h_prev.shape}")
    z = cm.concat([cm.hadamard(x, mask), h_prev], axis=0)
    return cm.tanh(cm.affine(weights, z, bias))


def split_weights(mask: Tensor, weights: Tensor) -> tuple[Tensor, Tensor]:
    """Fold the sensor mask into the sensor half of every W_i.

    Returns (masked sensor weights (I, H, D), recurrent weights (I, H, H)).
    Doing this once per forward pass lets every mod step reuse it.
    """
    I, D = mask.shape
    w_x = weights[:, :, :D]
    w_h = weights[:, :, D:]
    return w_x * cm.reshape(mask, (I, 1, D)), w_h


def bank_forward(folded: tuple[Tensor, Tensor], bias: Tensor | None,
                 x: Tensor, h_prev: Tensor) -> Tensor:
    """All prototype outputs for a batch: x (B, D), h_prev (B, H) -> (B, I, H)."""
    w_xm, w_h = folded
    if x.shape[-1] != w_xm.shape[2] or h_prev.shape[-1] != w_h.shape[2]:
        raise DimensionError(
            f"bank expects sensors of width {w_xm.shape[2]} and hidden of width "
            f"{w_h.shape[2]}, got {x.shape} and {h_prev.shape}")
    pre = cm.einsum("ihd,bd->bih", w_xm, x) + cm.einsum("ihk,bk->bih", w_h, h_prev)
    if bias is not None:
        pre = pre + bias
    return cm.tanh(pre)


def bank_forward_single(tape: cm.Tape, bank: PrototypeBank, x, h_prev) -> Tensor:
    """Unbatched convenience wrapper returning an (I, H) tensor."""
    t = tape.params_from({"mask": bank.mask, "W": bank.weights, "b": bank.bias})
    xv = np.asarray(x, dtype=np.float64)[None, :]
    hv = np.asarray(h_prev, dtype=np.float64)[None, :]
    out = bank_forward(split_weights(t["mask"], t["W"]), t["b"],
                       tape.const(xv), tape.const(hv))
    return out[0]
