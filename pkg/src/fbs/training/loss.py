"""Classification loss, the saliency Lasso, and plain SGD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..layers import GateRecord
from ..tensor import ShapeError


class NumericalError(ArithmeticError):
    """A NaN or Inf appeared in a loss or gradient."""


@dataclass
class LossReport:
    task_loss: float
    lasso_loss: float
    accuracy: float

    @property
    def total(self) -> float:
        return self.task_loss + self.lasso_loss


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax at ``labels`` and its gradient ``(softmax - onehot) / N``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_z - shifted[rows, labels]))
    grad = np.exp(shifted - log_z[:, None])
    grad[rows, labels] -= 1.0
    return loss, grad / n


def lasso_saliency(records: Sequence[GateRecord], lam: float) -> tuple[float, list[np.ndarray]]:
    """``lam * sum_l mean_n ||g_l(x_n)||_1`` on the pre-wta saliencies, with gradients.

    Saliencies are non-negative, so the gradient is ``lam / N`` where
    ``g > 0`` and exactly zero where ``g == 0``.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    loss = 0.0
    grads = []
    for rec in records:
        g = rec.saliency
        n = g.shape[0]
        loss += float(np.abs(g).sum(axis=1).mean())
        grads.append(lam * np.sign(g) / n)
    return lam * loss, grads


def mean_saliency_l1(records: Sequence[GateRecord]) -> float:
    """``sum_l mean_n ||g_l||_1`` (the Lasso without its weight)."""
    return float(sum(np.abs(r.saliency).sum(axis=1).mean() for r in records))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.0, velocity: Optional[dict[str, np.ndarray]] = None) -> None:
    """In-place ``p -= lr * grad``; ``momentum > 0`` uses heavy-ball velocity buffers."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name}")
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match {p.shape}")
        if momentum:
            if velocity is None:
                raise ValueError("momentum needs a velocity dict")
            v = velocity.setdefault(name, np.zeros_like(p))
            v *= momentum
            v += g
            g = v
        p -= lr * g
