"""Minibatch SGD training and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .. import cost
from ..data import AugmentConfig, Dataset, augment_batch
from ..layers import GateRecord
from ..models.network import Network
from ..models.usage import LayerUsage, UsageStats
from ..tensor import ChannelMask
from .loss import NumericalError, cross_entropy, lasso_saliency, mean_saliency_l1, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings; ``density_schedule`` lists ``(density, epochs)`` steps for sweeps.

    Defaults: lr 0.01 divided by 10 every 10 epochs, 30 epochs per step.
    """

    lr: float = 0.01
    batch_size: int = 256
    epochs: int = 30
    lr_decay_factor: float = 0.1
    lr_decay_every_epochs: int = 10
    lambda_: float = 1e-8
    seed: int = 0
    density_schedule: tuple[tuple[float, int], ...] = ((1.0, 30),)
    momentum: float = 0.0
    augment: bool = False
    method: str = "gemm"

    def __post_init__(self):
        object.__setattr__(self, "density_schedule",
                           tuple((float(d), int(e)) for d, e in self.density_schedule))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_decay_every_epochs < 1 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr decay needs an interval >= 1 and a factor in (0, 1]")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        ds = [d for d, _ in self.density_schedule]
        if not ds:
            raise ValueError("density schedule is empty")
        if any(not 0 < d <= 1 for d in ds):
            raise ValueError(f"schedule densities must lie in (0, 1]: {ds}")
        if any(b > a for a, b in zip(ds, ds[1:])):
            raise ValueError(f"schedule densities must be non-increasing: {ds}")
        if any(e < 0 for _, e in self.density_schedule):
            raise ValueError("schedule epoch counts must be >= 0")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


@dataclass
class EpochLog:
    epoch: int
    density: float
    task_loss: float
    lasso_loss: float
    top1: float
    mean_saliency_l1: float
    lr: float
    usage: Optional[UsageStats] = field(default=None, repr=False)


LOG_COLUMNS = ("epoch", "d", "task_loss", "lasso_loss", "top1", "mean_saliency_l1")


def log_to_csv(rows: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.epoch] + [repr(float(v)) for v in (r.density, r.task_loss, r.lasso_loss, r.top1,
                                                      r.mean_saliency_l1)])
    return buf.getvalue()


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values in {name}")


def train(net: Network, dataset: Dataset, config: TrainConfig, density: Optional[float] = None,
          augment_config: AugmentConfig = AugmentConfig(),
          on_epoch: Optional[Callable[[Network, EpochLog], None]] = None) -> tuple[Network, list[EpochLog]]:
    """Shuffled minibatch SGD for ``config.epochs`` epochs, in place.

    ``on_epoch`` is called with the network and the log row after every epoch.

    Shuffling and augmentation draw from ``net.rng``, so a run is fully
    determined by the network's initial state, the config and the data.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    d = net.density if density is None else density
    net.density = d
    n = len(dataset)
    classes = dataset.class_count
    onehot = np.eye(classes, dtype=np.int64)
    velocity: dict[str, np.ndarray] = {}
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = net.rng.permutation(n)
        sums = np.zeros(4)  # task, lasso, correct, saliency
        selected = None
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if config.augment:
                x = augment_batch(x, net.rng, augment_config)
            res = net.forward(x, d, training=True, method=config.method)
            task, dlogits = cross_entropy(res.logits, y)
            lasso, dgs = lasso_saliency(res.records, config.lambda_)
            _check_finite("loss", np.array([task, lasso]))
            grads = net.backward(dlogits, res, dgs)
            params = net.parameters()
            _check_finite("gradients", *(grads[k] for k in params))
            sgd_step(params, grads, lr, config.momentum, velocity)
            net.step += 1
            m = len(idx)
            sums += (task * m, lasso * m, float((res.logits.argmax(axis=1) == y).sum()),
                     mean_saliency_l1(res.records) * m)
            if selected is None:
                selected = [np.zeros((classes, r.active.channel_count), dtype=np.int64) for r in res.records]
            for acc, rec in zip(selected, res.records):
                acc += onehot[y].T @ rec.active.bits.astype(np.int64)
        class_samples = np.bincount(dataset.labels, minlength=classes).astype(np.int64)
        usage = UsageStats(d, [LayerUsage(s.sum(axis=0), s, class_samples.copy()) for s in selected or []])
        row = EpochLog(epoch, float(d), *(float(v) for v in sums / n), float(lr), usage)
        log.info("epoch %d d=%.2f task=%.4f lasso=%.3g top1=%.4f", epoch, d, row.task_loss,
                 row.lasso_loss, row.top1)
        history.append(row)
        if on_epoch is not None:
            on_epoch(net, row)
    return net, history


@dataclass
class EvalResult:
    top1: float
    top5: float
    report: cost.CostReport
    records: list[GateRecord] = field(repr=False, default_factory=list)
    logits: Optional[np.ndarray] = field(repr=False, default=None)


def evaluate(net: Network, dataset: Dataset, density: Optional[float] = None, method: str = "sparse",
             batch_size: int = 128) -> EvalResult:
    """Inference-mode accuracy and mean per-sample cost over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    d = net.density if density is None else density
    logits, bits, sal = [], None, None
    for start in range(0, len(dataset), batch_size):
        res = net.forward(dataset.images[start : start + batch_size], d, training=False, method=method)
        logits.append(res.logits)
        if bits is None:
            bits = [[] for _ in res.records]
            sal = [[] for _ in res.records]
        for b, s, r in zip(bits, sal, res.records):
            b.append(r.active.bits)
            s.append(r.saliency)
    out = np.concatenate(logits)
    _check_finite("logits", out)
    labels = dataset.labels
    top1 = float(np.mean(out.argmax(axis=1) == labels))
    k = min(5, out.shape[1])
    top5 = float(np.mean((np.argsort(-out, axis=1, kind="stable")[:, :k] == labels[:, None]).any(axis=1)))
    ks = [l.k_for(d) for l in net.fbs_layers()]
    records = [GateRecord(np.concatenate(s), ChannelMask(np.concatenate(b)), kk)
               for b, s, kk in zip(bits or [], sal or [], ks)]
    return EvalResult(top1, top5, cost.layer_costs(net.spec, records), records, out)
