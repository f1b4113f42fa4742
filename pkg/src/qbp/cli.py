"""Command-line interface: ``qbp {train,eval,count,histogram,sweep-bits,curves}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .data import DataError, IdxError
from .instrument import count_step, format_table, histogram_activations, histograms_csv, multiplication_table, table_json
from .layers import ForwardMode
from .network import CheckpointError, NumericAbort, load_checkpoint
from .tensor import Prng, ShapeError
from .train import (
    EVAL_STREAM,
    ConfigError,
    Datasets,
    RunConfig,
    bit_sweep,
    make_config,
    metrics_csv,
    parse_arch,
    prepare_data,
    read_config_file,
    sweep_csv,
    train,
    evaluate,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

CURVE_RUNS = (
    ("full", "full", "full"),
    ("binary", "binary", "full"),
    ("binary_qbp", "binary", "qbp"),
    ("ternary_qbp", "ternary", "qbp"),
)

log = logging.getLogger("qbp")


def _run_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("run options (override --config, which overrides defaults)")
    g.add_argument("--config", type=Path, help="key = value run config file")
    g.add_argument("--arch", help="layer widths, e.g. 784-1024-1024-1024-10")
    g.add_argument("--mode", choices=["full", "binary", "ternary"])
    g.add_argument("--backward", choices=["full", "qbp"])
    g.add_argument("--backward-weights", choices=["sampled", "full"], dest="backward_weights")
    g.add_argument("--shift-right", type=int, dest="shift_right")
    g.add_argument("--shift-left", type=int, dest="shift_left")
    g.add_argument("--epochs", type=int)
    g.add_argument("--eta", type=float)
    g.add_argument("--eta-decay", type=float, dest="eta_decay")
    g.add_argument("--lr-scale", choices=["none", "glorot"], dest="lr_scale")
    g.add_argument("--batch-size", "--batch", type=int, dest="batch_size")
    g.add_argument("--seed", type=int)
    g.add_argument("--bn", action=argparse.BooleanOptionalAction, dest="use_batch_norm", default=None)
    g.add_argument(
        "--test-time-sampling", action=argparse.BooleanOptionalAction, dest="test_time_sampling", default=None
    )
    g.add_argument("--train-count", type=int, dest="train_count")
    g.add_argument("--valid-count", type=int, dest="valid_count")
    g.add_argument("--split-seed", type=int, dest="split_seed")
    g.add_argument("--wallclock", action=argparse.BooleanOptionalAction, dest="log_wallclock", default=None)
    g.add_argument("--data", help=f"MNIST directory ('fixture' for the bundled subset; default ${data_mod.DATA_ENV})")
    g.add_argument("--out", type=Path, default=Path("qbp-out"), help="output directory")
    return p


_OVERRIDE_KEYS = (
    "arch",
    "mode",
    "backward",
    "backward_weights",
    "shift_right",
    "shift_left",
    "epochs",
    "eta",
    "eta_decay",
    "lr_scale",
    "batch_size",
    "seed",
    "use_batch_norm",
    "test_time_sampling",
    "train_count",
    "valid_count",
    "split_seed",
    "log_wallclock",
)


def _budget_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        elif part.strip():
            out.append(int(part))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qbp", description="Multiplication-light neural network training (binary/ternary connect + QBP)."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run_opts = _run_options()

    sub.add_parser("train", parents=[run_opts], help="train a model and log per-epoch metrics")

    p = sub.add_parser("eval", help="error rate of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=["test", "valid", "train"], default="test")
    p.add_argument("--sampling", action="store_true", help="evaluate with one ternary weight sample")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("count", help="analytic multiplication counts per mini-batch")
    p.add_argument("--arch", default="784-1024-1024-1024-10")
    p.add_argument("--batch", "--batch-size", type=int, default=200, dest="batch_size")
    p.add_argument("--mode", choices=["full", "binary", "ternary"], default="ternary")
    p.add_argument("--backward", choices=["full", "qbp"], default="qbp")
    p.add_argument("--backward-weights", choices=["sampled", "full"], default="sampled", dest="backward_weights")
    p.add_argument("--json", action="store_true", help="print JSON instead of a text table")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("histogram", help="log2 histograms of every layer's input")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data")
    p.add_argument("--examples", type=int, default=200)
    p.add_argument("--out", type=Path, default=Path("qbp-out"))

    p = sub.add_parser("sweep-bits", parents=[run_opts], help="final error vs. symmetric shift budget")
    p.add_argument("--budgets", type=_budget_list, default=list(range(2, 11)), help="e.g. 2-10 or 2,4,8")
    p.add_argument("--repeats", type=int, default=10)

    sub.add_parser("curves", parents=[run_opts], help="per-epoch curves for the four training methods")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    if getattr(args, "backward", None) == "qbp" and getattr(args, "mode", None) == "full":
        log.warning("quantized backward with a real-valued forward is an ablation; the standard pairing is a sampled forward with qbp")
    return args


def _data_dir(arg) -> Path:
    if arg == "fixture":
        return data_mod.fixture_dir()
    return Path(arg) if arg else data_mod.default_data_dir()


def _config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if getattr(args, k, None) is not None}
    return make_config(file_values, overrides)


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text)
    return path


def cmd_train(args) -> int:
    cfg = _config(args)
    data = prepare_data(_data_dir(args.data), cfg)
    _write(args.out, "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    res = train(cfg, data, args.out)
    print(f"best epoch {res.best_epoch}: valid {res.best.valid_err:.4f} test {res.best.test_err:.4f}")
    print(f"metrics: {args.out / 'metrics.csv'}  checkpoint: {args.out / 'metrics.ckpt.npz'}")
    return EXIT_OK


def _eval_dataset(args, meta: dict):
    full, test = data_mod.load_mnist(_data_dir(args.data))
    if args.split == "test":
        return test
    c = meta.get("config", {})
    spec = data_mod.SplitSpec(c.get("train_count", 40000), c.get("valid_count", 10000), c.get("split_seed", 0))
    tr, va = data_mod.split(full, spec)
    return va if args.split == "valid" else tr


def cmd_eval(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    ds = _eval_dataset(args, meta)
    prng = Prng(args.seed, (EVAL_STREAM,)) if args.sampling else None
    err = evaluate(net, ds, args.sampling, prng, ForwardMode.TERNARY)
    result = {"checkpoint": str(args.checkpoint), "split": args.split, "sampling": args.sampling, "error": err}
    print(f"{args.split} error {err:.4f}" + (" (ternary-sampled weights)" if args.sampling else ""))
    if args.out:
        _write(args.out, "eval.json", json.dumps(result, indent=2))
    return EXIT_OK


def cmd_count(args) -> int:
    try:
        arch = parse_arch(args.arch)
        step = count_step(arch, args.batch_size, args.mode, args.backward, False, args.backward_weights)
        step_bn = count_step(arch, args.batch_size, args.mode, args.backward, True, args.backward_weights)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = multiplication_table(arch, args.batch_size, args.mode, args.backward)
    if args.json:
        text = table_json(rows)
    else:
        head = f"arch {'-'.join(map(str, arch))}, batch {args.batch_size}, {args.mode} forward + {args.backward} backward"
        text = head + "\nmultiplications per mini-batch update:\n" + format_table(rows)
    print(text)
    if args.out:
        _write(args.out, "counts.txt", text + "\n")
        detail = {"without_bn": step.as_dict(), "with_bn": step_bn.as_dict(), "table": json.loads(table_json(rows))}
        _write(args.out, "counts.json", json.dumps(detail, indent=2))
    return EXIT_OK


def cmd_histogram(args) -> int:
    net, _ = load_checkpoint(args.checkpoint)
    _, test = data_mod.load_mnist(_data_dir(args.data))
    sub = test.subset(slice(0, args.examples))
    if sub.n_features != net.arch[0]:
        raise ShapeError(f"model expects {net.arch[0]} features, data has {sub.n_features}")
    hists = histogram_activations(net, sub.images.T)
    path = _write(args.out, "histograms.csv", histograms_csv(hists))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    data = prepare_data(_data_dir(args.data), cfg)
    rows = bit_sweep(cfg, args.budgets, data, args.repeats, args.out / "runs")
    text = sweep_csv(rows)
    _write(args.out, "sweep.csv", text)
    print(text, end="")
    return EXIT_OK


def run_curves(cfg: RunConfig, data: Datasets, out: Path) -> dict:
    results = {}
    for name, mode, backward in CURVE_RUNS:
        c = cfg.replace(mode=mode, backward=backward, eta=cfg.eta)
        results[name] = train(c, data, out, stem=name)
    lines = ["method,epoch,test_err"]
    for name, res in results.items():
        lines += [f"{name},{r.epoch},{r.test_err!r}" for r in res.records]
    _write(out, "curves.csv", "\n".join(lines) + "\n")
    return results


def cmd_curves(args) -> int:
    cfg = _config(args)
    data = prepare_data(_data_dir(args.data), cfg)
    results = run_curves(cfg, data, args.out)
    for name, res in results.items():
        print(f"{name:<12} final test error {res.records[-1].test_err:.4f}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "count": cmd_count,
    "histogram": cmd_histogram,
    "sweep-bits": cmd_sweep,
    "curves": cmd_curves,
}


def run(args: argparse.Namespace) -> int:
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxError, DataError, ShapeError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.verbose:
        logging.getLogger().setLevel(logging.INFO)
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
