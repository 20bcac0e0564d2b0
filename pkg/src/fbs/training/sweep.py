"""Iterative density reduction with fine-tuning at every step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

from ..data import Dataset
from ..models.network import Network
from .loop import EpochLog, TrainConfig, evaluate, train


@dataclass
class SweepPoint:
    density: float
    network: Network = field(repr=False)
    accuracy: float
    macs: float
    history: list[EpochLog] = field(repr=False, default_factory=list)


def step_schedule(start: float = 1.0, stop: float = 0.5, step: float = 0.1,
                  epochs: int = 30) -> tuple[tuple[float, int], ...]:
    """``((1.0, e), (0.9, e), ..., (stop, e))``; the last step is floored at ``stop``."""
    out = []
    d = start
    i = 0
    while d > stop + 1e-12:
        out.append((d, epochs))
        i += 1
        d = round(start - i * step, 10)
    out.append((stop, epochs))
    return tuple(out)


def parse_schedule(text: str) -> tuple[tuple[float, int], ...]:
    """Parse ``"1.0:30,0.9:30"``; raises ``ValueError`` on malformed input."""
    out = []
    for item in text.split(","):
        item = item.strip()
        parts = item.split(":")
        if len(parts) != 2:
            raise ValueError(f"schedule entry {item!r} is not 'density:epochs'")
        try:
            out.append((float(parts[0]), int(parts[1])))
        except ValueError:
            raise ValueError(f"schedule entry {item!r} is not 'density:epochs'") from None
    TrainConfig(density_schedule=tuple(out))
    return tuple(out)


def density_sweep(net: Network, dataset: Dataset, config: TrainConfig,
                  eval_dataset: Optional[Dataset] = None, eval_method: str = "gemm") -> list[SweepPoint]:
    """Fine-tune at each scheduled density, each step starting from the previous model.

    The learning-rate schedule restarts at every step.  Accuracy is
    measured in inference mode on ``eval_dataset`` (default: the
    training set) and MACs are the mean dynamic total including gating.
    """
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    points = []
    for d, epochs in config.density_schedule:
        _, history = train(net, dataset, replace(config, epochs=epochs), density=d)
        res = evaluate(net, eval_dataset, d, method=eval_method)
        points.append(SweepPoint(d, net.copy(), res.top1, res.report.dynamic_total, history))
    return points
