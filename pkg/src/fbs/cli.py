"""Command-line front end.

Every command takes ``--config FILE`` with ``key = value`` lines.  Keys
are the long flag names without the leading dashes (``-`` and ``_`` are
interchangeable); ``#`` starts a comment; blank lines are ignored.
Values use the same syntax as on the command line, booleans accept
``true``/``false``/``1``/``0``.  Flags given on the command line win over
the file, unknown keys are rejected.

All outputs are written below ``--out``.  Exit codes: 0 success,
1 usage error, 2 data or I/O failure, 3 non-finite numbers.

Results are reproducible bit for bit at ``--threads 1``; more BLAS
threads may change summation order in the fast convolution path.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import cost
from .data import DataFormatError, Dataset, load_cifar10, synthetic_dataset
from .layers import FORWARD_METHODS, Reducer
from .models import (
    CheckpointError,
    Network,
    SpecError,
    build_mcifarnet,
    collect_usage,
    compact,
    load,
    save,
)
from .training import (
    NumericalError,
    ProbeConfig,
    TrainConfig,
    density_sweep,
    evaluate,
    log_to_csv,
    parse_schedule,
    reparam_probe,
    step_schedule,
    train,
)
from .training.loop import EpochLog

log = logging.getLogger("fbs")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _density(text: str) -> float:
    d = float(text)
    if not 0 < d <= 1:
        raise argparse.ArgumentTypeError(f"density must lie in (0, 1], got {text}")
    return d


# ---------------------------------------------------------------- config file


def read_config_file(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


# ---------------------------------------------------------------- arguments


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value config file (default: none)")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="weight and shuffle seed (default: %(default)s)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default: %(default)s)")
    p.add_argument("--verbose", type=_bool, default=False, help="log progress (default: %(default)s)")


def _data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", choices=("synthetic", "cifar10"), default="synthetic",
                   help="dataset (default: %(default)s)")
    p.add_argument("--data-dir", default=None, help="CIFAR-10 binary directory (default: none)")
    p.add_argument("--data-seed", type=int, default=0, help="synthetic data seed (default: %(default)s)")
    p.add_argument("--per-class", type=int, default=20,
                   help="synthetic images per class (default: %(default)s)")
    p.add_argument("--split", choices=("train", "test"), default="train",
                   help="split used by evaluation-type commands (default: %(default)s)")


def _model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width-divisor", type=int, default=1,
                   help="divide M-CifarNet channel counts (default: %(default)s)")
    p.add_argument("--reducer", choices=[r.value for r in Reducer], default="l1",
                   help="saliency subsampler (default: %(default)s)")
    p.add_argument("--no-fbs", type=_bool, default=False,
                   help="plain conv layers without gating (default: %(default)s)")


def _optim(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lr", type=float, default=d.lr, help="learning rate (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="minibatch size (default: %(default)s)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=d.lambda_,
                   help="Lasso weight on saliencies (default: %(default)s)")
    p.add_argument("--momentum", type=float, default=d.momentum, help="SGD momentum (default: %(default)s)")
    p.add_argument("--lr-decay-factor", type=float, default=d.lr_decay_factor,
                   help="lr multiplier per decay (default: %(default)s)")
    p.add_argument("--lr-decay-every", type=int, default=d.lr_decay_every_epochs,
                   help="epochs between decays (default: %(default)s)")
    p.add_argument("--augment", type=_bool, default=d.augment,
                   help="flip and colour jitter (default: %(default)s)")
    p.add_argument("--method", choices=FORWARD_METHODS, default=d.method,
                   help="training forward path (default: %(default)s)")


def _eval_method(p: argparse.ArgumentParser, default: str = "sparse") -> None:
    p.add_argument("--eval-method", choices=FORWARD_METHODS, default=default,
                   help="inference forward path (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="fbs", description="Gated channel-skipping CNN experiments.")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train from scratch or continue a checkpoint")
    _common(p)
    _data(p)
    _model(p)
    _optim(p)
    p.add_argument("--epochs", type=int, default=TrainConfig().epochs, help="epochs (default: %(default)s)")
    p.add_argument("--density", type=_density, default=1.0, help="gate density (default: %(default)s)")
    p.add_argument("--init", default=None, help="start from this checkpoint (default: fresh weights)")
    p.add_argument("--checkpoint", default="model.fbs", help="output checkpoint name (default: %(default)s)")
    p.add_argument("--log", default="train_log.csv", help="training log name (default: %(default)s)")
    p.add_argument("--epoch-checkpoints", type=_bool, default=False,
                   help="also save epochs/epoch_NNN.fbs after every epoch (default: %(default)s)")

    p = sub.add_parser("eval", help="accuracy and cost of a checkpoint")
    _common(p)
    _data(p)
    _eval_method(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--density", type=_density, default=None, help="gate density (default: stored)")
    p.add_argument("--report", default="cost.csv", help="cost report name (default: %(default)s)")

    p = sub.add_parser("sweep", help="iterative density reduction with fine-tuning")
    _common(p)
    _data(p)
    _model(p)
    _optim(p)
    _eval_method(p, "gemm")
    p.add_argument("--init", default=None, help="start from this checkpoint (default: fresh weights)")
    p.add_argument("--schedule", default=None,
                   help="'d:epochs,...' (default: 1.0 down to 0.5 in 0.1 steps, 30 epochs each)")
    p.add_argument("--table", default="tradeoff.csv", help="trade-off CSV name (default: %(default)s)")

    p = sub.add_parser("heatmap", help="per-class channel skip probabilities")
    _common(p)
    _data(p)
    _eval_method(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file, or a directory of them for a series")
    p.add_argument("--density", type=_density, default=None, help="gate density (default: stored)")
    p.add_argument("--pgm", type=_bool, default=False, help="also write P2 PGM images (default: %(default)s)")

    p = sub.add_parser("compact", help="drop channels the gate never selects")
    _common(p)
    _data(p)
    _eval_method(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint to compact")
    p.add_argument("--density", type=_density, default=None, help="gate density (default: stored)")
    p.add_argument("--output", default="compact.fbs", help="compacted checkpoint name (default: %(default)s)")
    p.add_argument("--report", default="compact.csv", help="reduction report name (default: %(default)s)")

    p = sub.add_parser("probe", help="Lasso on an unnormalized gate versus the normalized one")
    _common(p)
    d = ProbeConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="epochs (default: %(default)s)")
    p.add_argument("--lambda", dest="lambda_", type=float, default=d.lambda_,
                   help="Lasso weight (default: %(default)s)")
    p.add_argument("--lr", type=float, default=d.lr, help="learning rate (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="minibatch size (default: %(default)s)")
    p.add_argument("--per-class", type=int, default=d.n_per_class,
                   help="synthetic images per class (default: %(default)s)")
    p.add_argument("--control", type=_bool, default=True,
                   help="also run both variants at lambda = 0 (default: %(default)s)")
    p.add_argument("--report", default="probe.csv", help="report name (default: %(default)s)")

    p = sub.add_parser("report-cost", help="analytic MAC and memory table at a uniform density")
    _common(p)
    _model(p)
    p.add_argument("--checkpoint", default=None, help="take the architecture from a checkpoint (default: none)")
    p.add_argument("--density", type=_density, default=1.0, help="gate density (default: %(default)s)")
    p.add_argument("--report", default="cost.csv", help="cost report name (default: %(default)s)")
    return root


def _config_path(argv: Sequence[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    path = _config_path(argv)
    commands = parser._subparsers._group_actions[0].choices
    if path is not None and argv and argv[0] in commands:
        try:
            values = read_config_file(path)
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        sub = commands[argv[0]]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        unknown = sorted(set(values) - set(actions))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for key, raw in values.items():
            a = actions[key]
            try:
                values[key] = a.type(raw) if a.type is not None else raw
            except (argparse.ArgumentTypeError, ValueError) as e:
                raise UsageError(f"config key {key}: {e}") from None
            if a.choices is not None and values[key] not in a.choices:
                raise UsageError(f"config key {key}: {raw!r} not in {list(a.choices)}")
            a.required = False
        sub.set_defaults(**values)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers


def _load_data(args) -> tuple[Dataset, Dataset]:
    if args.data == "cifar10":
        if not args.data_dir:
            raise UsageError("--data cifar10 needs --data-dir")
        return load_cifar10(args.data_dir)
    if args.per_class < 1:
        raise UsageError("--per-class must be >= 1")
    return (synthetic_dataset(args.data_seed, args.per_class),
            synthetic_dataset(args.data_seed + 1, max(1, args.per_class // 2)))


def _split(args) -> Dataset:
    train_set, test_set = _load_data(args)
    return train_set if args.split == "train" else test_set


def _train_config(args, epochs: int = 30, schedule=((1.0, 30),)) -> TrainConfig:
    try:
        return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=epochs, lambda_=args.lambda_,
                           seed=args.seed, momentum=args.momentum, lr_decay_factor=args.lr_decay_factor,
                           lr_decay_every_epochs=args.lr_decay_every, augment=args.augment,
                           method=args.method, density_schedule=schedule)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _network(args, init: Optional[str]) -> Network:
    if init:
        return load(init)
    spec = build_mcifarnet(fbs=not args.no_fbs, width_divisor=args.width_divisor, reducer=args.reducer)
    return Network.initialize(spec, seed=args.seed)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _name(name: str) -> str:
    """Output names are plain file names so nothing escapes ``--out``."""
    base = Path(name).name
    if not base or base in (".", ".."):
        raise UsageError(f"invalid output name {name!r}")
    return base


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, newline="")
    tmp.replace(path)


def _matrix_csv(m: np.ndarray, channels: Optional[np.ndarray] = None) -> str:
    channels = np.arange(m.shape[1]) if channels is None else channels
    head = ",".join(["class"] + [f"ch{j}" for j in channels])
    rows = [",".join([str(i)] + [repr(float(v)) for v in row]) for i, row in enumerate(m)]
    return "\n".join([head] + rows) + "\n"


def pgm_text(m: np.ndarray) -> str:
    """Plain P2 grayscale; 255 is a skip probability of 1."""
    pix = np.rint(np.clip(m, 0.0, 1.0) * 255).astype(int)
    lines = ["P2", f"{m.shape[1]} {m.shape[0]}", "255"] + [" ".join(map(str, r)) for r in pix]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    train_set, _ = _load_data(args)
    net = _network(args, args.init)
    cfg = _train_config(args, epochs=args.epochs)
    out = _out(args)
    hook = None
    if args.epoch_checkpoints:
        (out / "epochs").mkdir(exist_ok=True)

        def hook(n: Network, row: EpochLog) -> None:
            save(n, out / "epochs" / f"epoch_{row.epoch:03d}.fbs")

    _, history = train(net, train_set, cfg, density=args.density, on_epoch=hook)
    save(net, out / _name(args.checkpoint))
    _write_text(out / _name(args.log), log_to_csv(history))
    print(f"saved {out / _name(args.checkpoint)} after {args.epochs} epochs")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load(args.checkpoint)
    data = _split(args)
    res = evaluate(net, data, args.density, method=args.eval_method)
    _write_text(_out(args) / _name(args.report), res.report.to_csv())
    print(f"top1={res.top1!r} top5={res.top5!r} macs={res.report.dynamic_total!r}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        schedule = parse_schedule(args.schedule) if args.schedule else step_schedule()
    except ValueError as e:
        raise UsageError(f"--schedule: {e}") from None
    train_set, test_set = _load_data(args)
    eval_set = train_set if args.split == "train" else test_set
    net = _network(args, args.init)
    cfg = _train_config(args, schedule=schedule)
    out = _out(args)
    points = density_sweep(net, train_set, cfg, eval_dataset=eval_set, eval_method=args.eval_method)
    for p in points:
        save(p.network, out / f"sweep_d{p.density:.2f}.fbs")
    _write_text(out / _name(args.table), cost.tradeoff_table([(p.density, p.macs, p.accuracy) for p in points]))
    print(f"{len(points)} sweep points written to {out / _name(args.table)}")
    return EXIT_OK


def _heatmaps(net: Network, data: Dataset, density, method) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per FBS layer: skip matrix and channel order, least often evaluated first."""
    d = net.density if density is None else density
    return [(u.skip_matrix(), u.sorted_order()) for u in collect_usage(net, data, d, method=method).layers]


def cmd_heatmap(args) -> int:
    src = Path(args.checkpoint)
    if src.is_dir():
        files = sorted(src.glob("*.fbs"))
        if not files:
            raise FileNotFoundError(f"no checkpoints in {src}")
    else:
        files = [src]
    data = _split(args)
    out = _out(args)
    for f in files:
        prefix = "heatmap" if len(files) == 1 and not src.is_dir() else f"heatmap_{f.stem}"
        for i, (m, order) in enumerate(_heatmaps(load(f), data, args.density, args.eval_method)):
            _write_text(out / f"{prefix}_layer{i}.csv", _matrix_csv(m))
            _write_text(out / f"{prefix}_layer{i}_sorted.csv", _matrix_csv(m[:, order], order))
            if args.pgm:
                _write_text(out / f"{prefix}_layer{i}.pgm", pgm_text(m))
                _write_text(out / f"{prefix}_layer{i}_sorted.pgm", pgm_text(m[:, order]))
    print(f"heatmaps for {len(files)} checkpoint(s) written to {out}")
    return EXIT_OK


def cmd_compact(args) -> int:
    net = load(args.checkpoint)
    data = _split(args)
    d = net.density if args.density is None else args.density
    small, rep = compact(net, collect_usage(net, data, d, method=args.eval_method))
    out = _out(args)
    save(small, out / _name(args.output))
    rows = ["layer,original_channels,kept_channels"]
    rows += [f"{i},{a},{b}" for i, (a, b) in enumerate(zip(rep.original_channels, rep.kept_channels))]
    rows.append(f"params_before,{rep.params_before},")
    rows.append(f"params_after,{rep.params_after},")
    rows.append(f"ratio,{rep.ratio!r},")
    _write_text(out / _name(args.report), "\n".join(rows) + "\n")
    print(f"params {rep.params_before} -> {rep.params_after} (ratio {rep.ratio!r})")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = ProbeConfig(epochs=args.epochs, lambda_=args.lambda_, lr=args.lr, batch_size=args.batch_size,
                      seed=args.seed, n_per_class=args.per_class)
    report = reparam_probe(cfg, control=args.control)
    out = _out(args)
    _write_text(out / _name(args.report), report.to_csv())
    print(f"unnormalized phi shrinks on {report.decreasing_fraction('unnormalized'):.0%} of epochs")
    return EXIT_OK


def cmd_report_cost(args) -> int:
    spec = load(args.checkpoint).spec if args.checkpoint else build_mcifarnet(
        fbs=not args.no_fbs, width_divisor=args.width_divisor, reducer=args.reducer)
    report = cost.layer_costs(spec, cost.uniform_records(spec, args.density))
    _write_text(_out(args) / _name(args.report), report.to_csv())
    print(f"static={report.static_macs} dynamic={report.dynamic_total!r}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
    "compact": cmd_compact,
    "probe": cmd_probe,
    "report-cost": cmd_report_cost,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataFormatError, CheckpointError, SpecError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
