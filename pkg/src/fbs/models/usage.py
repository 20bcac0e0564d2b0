"""Channel selection statistics and class-conditional skip probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass
class LayerUsage:
    """Selection counts of one FBS layer over an evaluation set.

    ``class_selected[y, c]`` counts class-``y`` samples for which
    channel ``c`` survived the gate.
    """

    selection_count: np.ndarray  # (C,)
    class_selected: np.ndarray  # (classes, C)
    class_samples: np.ndarray  # (classes,)

    @property
    def sample_count(self) -> int:
        return int(self.class_samples.sum())

    @property
    def channels(self) -> int:
        return self.selection_count.shape[0]

    def skip_matrix(self) -> np.ndarray:
        """(classes, C) probability that a channel is suppressed for a class.

        Rows of classes absent from the evaluation set are zero.
        """
        counts = self.class_samples[:, None]
        frac = np.divide(self.class_selected, counts, out=np.zeros(self.class_selected.shape),
                         where=counts > 0)
        return np.where(counts > 0, 1.0 - frac, 0.0)

    def selection_frequency(self) -> np.ndarray:
        return self.selection_count / max(self.sample_count, 1)

    def sorted_order(self) -> np.ndarray:
        """Channel order with the least frequently evaluated first."""
        return np.argsort(self.selection_count, kind="stable")

    def unused(self) -> np.ndarray:
        return np.flatnonzero(self.selection_count == 0)


@dataclass
class UsageStats:
    density: float
    layers: list[LayerUsage]

    @property
    def sample_count(self) -> int:
        return self.layers[0].sample_count if self.layers else 0


def collect_usage(net: Network, dataset, density: float, method: str = "sparse",
                  batch_size: int = 64) -> UsageStats:
    """Count, per FBS layer and per class, how often every channel is kept."""
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("cannot collect usage on an empty dataset")
    classes = dataset.class_count
    fbs = net.fbs_layers()
    selected = [np.zeros((classes, l.conv.out_channels), dtype=np.int64) for l in fbs]
    class_samples = np.bincount(dataset.labels, minlength=classes).astype(np.int64)
    for start in range(0, n, batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        res = net.forward(images, density, training=False, method=method)
        onehot = np.eye(classes, dtype=np.int64)[labels]
        for acc, rec in zip(selected, res.records):
            acc += onehot.T @ rec.active.bits.astype(np.int64)
    layers = [LayerUsage(s.sum(axis=0), s, class_samples.copy()) for s in selected]
    return UsageStats(density=density, layers=layers)
