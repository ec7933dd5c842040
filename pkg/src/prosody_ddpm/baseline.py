"""Deterministic variance-predictor baseline trained with MSE.

Three independent convolutional heads (pitch, energy, log-duration) read
the shared condition vectors; each is two blocks of non-causal kernel-3
convolution, a smooth nonlinearity, layer normalization and dropout,
followed by a linear projection to one value per token.  At inference
dropout is off and the mapping is a pure function of the condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Gradients, Rng, Tape, Tensor

HEADS = ("pitch", "energy", "log_duration")


@dataclass(frozen=True)
class BaselineConfig:
    cond_dim: int = 64
    width: int = 256
    kernel_size: int = 3
    dropout: float = 0.5


class BaselineNet:
    def __init__(self, config: BaselineConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: BaselineConfig, rng: Rng) -> "BaselineNet":
        c = config
        k, w = c.kernel_size, c.width
        params: dict[str, Tensor] = {}
        for head in HEADS:
            params[f"{head}.conv1.w"] = nm.uniform_fanin(rng, (k, c.cond_dim, w), k * c.cond_dim)
            params[f"{head}.conv1.b"] = nm.zeros(w)
            params[f"{head}.ln1.g"] = Tensor(np.ones(w))
            params[f"{head}.ln1.b"] = nm.zeros(w)
            params[f"{head}.conv2.w"] = nm.uniform_fanin(rng, (k, w, w), k * w)
            params[f"{head}.conv2.b"] = nm.zeros(w)
            params[f"{head}.ln2.g"] = Tensor(np.ones(w))
            params[f"{head}.ln2.b"] = nm.zeros(w)
            params[f"{head}.out.w"] = nm.uniform_fanin(rng, (w, 1), w)
            params[f"{head}.out.b"] = nm.zeros(1)
        return cls(c, params)

    def head_forward(self, head: str, cond: Tensor, rng: Rng | None, training: bool) -> Tensor:
        p = self.params
        rate = self.config.dropout
        if training and rate > 0.0 and rng is None:
            raise ValueError("training forward with dropout needs an rng")
        h = nm.silu(nm.conv1d_dilated(cond, p[f"{head}.conv1.w"], p[f"{head}.conv1.b"]))
        h = nm.layer_norm(h, p[f"{head}.ln1.g"], p[f"{head}.ln1.b"])
        h = nm.dropout(h, rate, rng, training)
        h = nm.silu(nm.conv1d_dilated(h, p[f"{head}.conv2.w"], p[f"{head}.conv2.b"]))
        h = nm.layer_norm(h, p[f"{head}.ln2.g"], p[f"{head}.ln2.b"])
        h = nm.dropout(h, rate, rng, training)
        return nm.add(nm.matmul(h, p[f"{head}.out.w"]), p[f"{head}.out.b"])


def baseline_predict(model: BaselineNet, cond: Tensor) -> np.ndarray:
    """Single deterministic prediction ``(..., length, 3)``; dropout off."""
    outs = [model.head_forward(h, cond, None, training=False).data for h in HEADS]
    return np.concatenate(outs, axis=-1)


def baseline_loss_graph(
    model: BaselineNet,
    cond: Tensor,
    target: np.ndarray,
    mask: np.ndarray | None = None,
    rng: Rng | None = None,
    training: bool = True,
) -> Tensor:
    """Mean squared error over unmasked elements, recorded on the active tape."""
    target = np.asarray(target, dtype=np.float64)
    if cond.shape[:-1] != target.shape[:-1] or target.shape[-1] != len(HEADS):
        raise nm.ShapeError(
            "baseline_loss", f"target {target.shape} does not match condition {cond.shape}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != target.shape[:-1]:
            raise nm.ShapeError("baseline_loss", f"mask {mask.shape} does not match target")
        count = float(mask.sum())
        if count == 0:
            raise ValueError("baseline_loss: mask excludes every position")
        m1 = Tensor(mask[..., None])
    else:
        count = float(np.prod(target.shape[:-1]))
    total = None
    for d, head in enumerate(HEADS):
        pred = model.head_forward(head, cond, rng, training)
        diff = nm.sub(pred, Tensor(target[..., d : d + 1]))
        sq = nm.mul(diff, diff)
        if mask is not None:
            sq = nm.mul(sq, m1)
        part = nm.sum(sq)
        total = part if total is None else nm.add(total, part)
    return nm.mul(total, 1.0 / (count * len(HEADS)))


def baseline_train_step(
    model: BaselineNet,
    cond: Tensor,
    target: np.ndarray,
    mask: np.ndarray | None = None,
    rng: Rng | None = None,
) -> tuple[float, Gradients]:
    """Loss plus gradients for all baseline parameters."""
    with Tape() as tape:
        loss = baseline_loss_graph(model, cond, target, mask, rng, training=True)
    return loss.item(), nm.backward(tape, loss)
