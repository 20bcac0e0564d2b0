"""Reparameterization probe: a Lasso on an unnormalized gate versus FBS.

The unnormalized layer is ``relu(conv(x, theta)) * relu(ss(x) @ phi.T)``.
For any ``a > 0`` the pair ``(theta / a, a * phi)`` gives the same output,
and the gate penalty scales with ``a``, so gradient descent can lower the
penalty for free by letting ``phi`` drift towards zero.  Normalizing the
convolution output, as the FBS layer does, makes the output invariant to
the scale of ``theta`` and closes that direction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from ..data import Dataset, make_rng, synthetic_dataset
from ..layers import (
    ConvParams,
    conv2d_backward,
    conv2d_dense,
    global_avg_pool,
    global_avg_pool_backward,
    linear,
    linear_backward,
    subsample_ss,
    subsample_ss_backward,
)
from ..models.network import Network
from ..models.spec import LayerSpec, NetworkSpec
from .loop import TrainConfig, evaluate, train
from .loss import cross_entropy, sgd_step


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 15
    lambda_: float = 1e-2
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    n_per_class: int = 12
    classes: int = 10
    widths: tuple[int, ...] = (8, 16)


class UnnormalizedGatedNet:
    """Gated conv layers without normalization or saliency offset, then pool and fc."""

    def __init__(self, widths, classes, rng: np.random.Generator, in_channels: int = 3):
        self.convs = []
        self.phis = []
        c_in = in_channels
        for c in widths:
            theta = rng.standard_normal((c, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in))
            self.convs.append(ConvParams(theta, stride=2, padding=1))
            # positive start so every gate is open
            self.phis.append(np.abs(rng.standard_normal((c, c_in))) * np.sqrt(2.0 / c_in))
            c_in = c
        self.fc_w = rng.standard_normal((classes, c_in)) * np.sqrt(1.0 / c_in)
        self.fc_b = np.zeros(classes)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (p, phi) in enumerate(zip(self.convs, self.phis)):
            out[f"{i}.theta"] = p.theta
            out[f"{i}.phi"] = phi
        out["fc.weight"] = self.fc_w
        out["fc.bias"] = self.fc_b
        return out

    def forward(self, x):
        caches, gates = [], []
        for p, phi in zip(self.convs, self.phis):
            z = conv2d_dense(x, p, "gemm")
            f = np.maximum(z, 0.0)
            s = subsample_ss(x, "l1")
            a = s @ phi.T
            pi = np.maximum(a, 0.0)
            caches.append((x, z, f, s, a, pi))
            gates.append(pi)
            x = f * pi[:, :, None, None]
        pooled = global_avg_pool(x)
        return linear(pooled, self.fc_w, self.fc_b), gates, (caches, x.shape, pooled)

    def backward(self, dlogits, cache, dgates):
        caches, pre_pool_shape, pooled = cache
        grads = {}
        dpool, grads["fc.weight"], grads["fc.bias"] = linear_backward(dlogits, pooled, self.fc_w)
        dy = global_avg_pool_backward(dpool, pre_pool_shape)
        for i in range(len(self.convs) - 1, -1, -1):
            x, z, f, s, a, pi = caches[i]
            dpi = (dy * f).sum(axis=(2, 3)) + dgates[i]
            df = dy * pi[:, :, None, None]
            dx_conv, grads[f"{i}.theta"] = conv2d_backward(df * (z > 0), x, self.convs[i])
            da = dpi * (a > 0)
            grads[f"{i}.phi"] = da.T @ s
            dy = dx_conv + subsample_ss_backward(da @ self.phis[i], x, "l1")
        return grads

    def phi_inf(self) -> float:
        return float(max(np.abs(phi).max() for phi in self.phis))


@dataclass
class ProbeReport:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("variant", "epoch", "phi_inf", "mean_saliency", "mean_g_l1", "top1", "task_loss")

    def series(self, variant: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["variant"] == variant])

    def decreasing_fraction(self, variant: str, key: str = "phi_inf") -> float:
        """Fraction of epoch-to-epoch transitions where ``key`` strictly drops."""
        s = self.series(variant, key)
        return float(np.mean(np.diff(s) < 0)) if s.size > 1 else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r["variant"], r["epoch"]] + [repr(float(r[c])) for c in self.COLUMNS[2:]])
        return buf.getvalue()


def _probe_spec(widths, classes) -> NetworkSpec:
    layers = [LayerSpec("fbs_conv", c, 3, 2, 1, "l1") for c in widths]
    layers += [LayerSpec("global_avg_pool"), LayerSpec("fc", classes)]
    return NetworkSpec(tuple(layers), (3, 32, 32), classes, name="probe-fbs")


def _run_unnormalized(data: Dataset, cfg: ProbeConfig, report: ProbeReport, tag: str) -> None:
    rng = make_rng(cfg.seed)
    net = UnnormalizedGatedNet(cfg.widths, cfg.classes, rng)
    shuffle = make_rng(cfg.seed + 1)
    n = len(data)

    def record(epoch, task, correct, gates_sum, gates_mean):
        report.rows.append(dict(variant=tag, epoch=epoch, phi_inf=net.phi_inf(),
                                mean_saliency=gates_mean, mean_g_l1=gates_sum,
                                top1=correct, task_loss=task))

    logits, gates, _ = net.forward(data.images)
    task, _ = cross_entropy(logits, data.labels)
    record(0, task, float(np.mean(logits.argmax(1) == data.labels)),
           float(sum(g.sum(axis=1).mean() for g in gates)), float(np.mean([g.mean() for g in gates])))
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            logits, gates, cache = net.forward(data.images[idx])
            _, dlogits = cross_entropy(logits, data.labels[idx])
            dgates = [cfg.lambda_ * np.sign(g) / len(idx) for g in gates]
            sgd_step(net.parameters(), net.backward(dlogits, cache, dgates), cfg.lr)
        logits, gates, _ = net.forward(data.images)
        task, _ = cross_entropy(logits, data.labels)
        record(epoch, task, float(np.mean(logits.argmax(1) == data.labels)),
               float(sum(g.sum(axis=1).mean() for g in gates)), float(np.mean([g.mean() for g in gates])))


def _run_fbs(data: Dataset, cfg: ProbeConfig, report: ProbeReport, tag: str) -> None:
    net = Network.initialize(_probe_spec(cfg.widths, cfg.classes), seed=cfg.seed)
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch_size, epochs=1, lambda_=cfg.lambda_,
                       lr_decay_every_epochs=10**6, lr_decay_factor=1.0)

    def record(epoch):
        res = evaluate(net, data, 1.0, method="gemm")
        g = [r.saliency for r in res.records]
        task, _ = cross_entropy(res.logits, data.labels)
        phi_inf = float(max(np.abs(l.saliency.phi).max() for l in net.fbs_layers()))
        report.rows.append(dict(variant=tag, epoch=epoch, phi_inf=phi_inf,
                                mean_saliency=float(np.mean([x.mean() for x in g])),
                                mean_g_l1=float(sum(x.sum(axis=1).mean() for x in g)),
                                top1=res.top1, task_loss=task))

    # running statistics are meaningless before the first step; measure in training mode once
    net.forward(data.images, 1.0, training=True, method="gemm")
    record(0)
    for epoch in range(1, cfg.epochs + 1):
        train(net, data, tcfg, density=1.0)
        record(epoch)


def reparam_probe(cfg: ProbeConfig = ProbeConfig(), control: bool = True) -> ProbeReport:
    """Train both variants with the same Lasso weight; with ``control`` also at lambda = 0.

    Variants are tagged ``unnormalized``, ``fbs`` and, for the control,
    ``unnormalized_l0`` and ``fbs_l0``.
    """
    data = synthetic_dataset(cfg.seed, cfg.n_per_class, cfg.classes)
    report = ProbeReport()
    _run_unnormalized(data, cfg, report, "unnormalized")
    _run_fbs(data, cfg, report, "fbs")
    if control:
        from dataclasses import replace

        zero = replace(cfg, lambda_=0.0)
        _run_unnormalized(data, zero, report, "unnormalized_l0")
        _run_fbs(data, zero, report, "fbs_l0")
    return report
