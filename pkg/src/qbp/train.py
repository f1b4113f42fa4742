"""SGD training loop, evaluation, bit-budget sweeps and run logging."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import Dataset, SplitSpec, eval_batches, load_mnist, minibatches, split
from .instrument import MultCounter
from .layers import BackwardMode, ForwardMode
from .network import Network, NumericAbort, save_checkpoint
from .quantize import ShiftBudget
from .tensor import Prng

log = logging.getLogger(__name__)

DESK_ARCH = (784, 256, 256, 10)
FULL_ARCH = (784, 1024, 1024, 1024, 10)
METRIC_COLUMNS = ("epoch", "train_loss", "valid_err", "test_err", "mults_fwd", "mults_bwd", "mults_bn", "seconds")

EVAL_STREAM = 4
CALIBRATION_EXAMPLES = 10000


class ConfigError(ValueError):
    pass


def default_eta(mode: ForwardMode, backward: BackwardMode) -> float:
    # Sampled +-1 weights make pre-activations ~sqrt(N) larger than real-valued
    # ones, so batch norm shrinks the weight gradients by about that factor.
    return 0.03 if mode is ForwardMode.FULL else 1.0


def parse_arch(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(a) for a in text)
    try:
        return tuple(int(a) for a in str(text).strip().split("-"))
    except ValueError as exc:
        raise ConfigError(f"bad architecture {text!r}; expected e.g. 784-1024-1024-1024-10") from exc


@dataclass(frozen=True)
class RunConfig:
    arch: tuple[int, ...] = DESK_ARCH
    mode: ForwardMode = ForwardMode.TERNARY
    backward: BackwardMode = BackwardMode.QBP
    backward_weights: str = "sampled"
    shift_right: int = 3
    shift_left: int = 4
    batch_size: int = 200
    epochs: int = 20
    eta: float | None = None
    eta_decay: float = 0.98
    lr_scale: str = "glorot"
    use_batch_norm: bool = True
    seed: int = 0
    test_time_sampling: bool = False
    train_count: int = 40000
    valid_count: int = 10000
    split_seed: int = 0
    log_wallclock: bool = True

    def __post_init__(self):
        object.__setattr__(self, "arch", parse_arch(self.arch))
        object.__setattr__(self, "mode", ForwardMode(getattr(self.mode, "value", self.mode)))
        object.__setattr__(self, "backward", BackwardMode(getattr(self.backward, "value", self.backward)))
        self.validate()

    def validate(self) -> None:
        if len(self.arch) < 2 or min(self.arch) < 1:
            raise ConfigError(f"architecture {self.arch} needs at least two positive widths")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.eta is not None and not self.eta > 0:
            raise ConfigError("eta must be positive")
        if not 0 < self.eta_decay <= 1:
            raise ConfigError("eta_decay must lie in (0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.lr_scale not in ("none", "glorot"):
            raise ConfigError("lr_scale must be 'none' or 'glorot'")
        if self.backward_weights not in ("sampled", "full"):
            raise ConfigError("backward_weights must be 'sampled' or 'full'")
        if self.train_count < self.batch_size or self.valid_count < 1:
            raise ConfigError("split counts too small for the batch size")
        try:
            self.budget
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def budget(self) -> ShiftBudget:
        return ShiftBudget(self.shift_right, self.shift_left)

    @property
    def learning_rate(self) -> float:
        return self.eta if self.eta is not None else default_eta(self.mode, self.backward)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = "-".join(map(str, self.arch))
        d["mode"] = self.mode.value
        d["backward"] = self.backward.value
        return d


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    kind = _FIELD_TYPES[key]
    v = value.strip()
    if key == "arch":
        return parse_arch(v)
    if kind == "bool":
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if kind == "int":
        return int(v)
    if kind in ("float", "float | None"):
        return None if v.lower() == "none" else float(v)
    return v


def read_config_file(path) -> dict:
    """Read ``key = value`` lines (an optional ``[run]`` header is allowed)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    parser = configparser.ConfigParser()
    try:
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    section = parser["run"] if parser.has_section("run") else parser.defaults()
    return {k.replace("-", "_"): v for k, v in section.items()}


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then config-file values, then explicit overrides."""
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if v is None:
                continue
            if k not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                merged[k] = _coerce(k, v)
            except ValueError as exc:
                raise ConfigError(f"{k}: {exc}") from exc
    try:
        return RunConfig(**merged)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True)
class Datasets:
    train: Dataset
    valid: Dataset
    test: Dataset


def prepare_data(directory, config: RunConfig) -> Datasets:
    full, test = load_mnist(directory)
    tr, va = split(full, SplitSpec(config.train_count, config.valid_count, config.split_seed))
    return Datasets(tr, va, test)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_err: float
    test_err: float
    counter: MultCounter
    seconds: float
    eta: float = 0.0

    def row(self) -> list:
        c = self.counter
        return [
            self.epoch,
            repr(self.train_loss),
            repr(self.valid_err),
            repr(self.test_err),
            c.forward_mults,
            c.backward_total,
            c.bn_mults,
            repr(round(self.seconds, 3)),
        ]

    def as_json(self) -> dict:
        d = dict(zip(METRIC_COLUMNS, self.row()))
        for k in ("train_loss", "valid_err", "test_err", "seconds"):
            d[k] = float(d[k])
        d["eta"] = self.eta
        d["counts"] = self.counter.as_dict()
        return d


@dataclass
class TrainResult:
    model: Network
    records: list[EpochRecord]
    best_epoch: int
    final_model: Network = field(repr=False, default=None)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    @property
    def test_err(self) -> float:
        return self.best.test_err


def metrics_csv(records: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def evaluate(
    net: Network,
    dataset: Dataset,
    sampling: bool = False,
    prng: Prng | None = None,
    sampling_mode: ForwardMode = ForwardMode.TERNARY,
    batch_size: int = 1000,
) -> float:
    """Classification error rate.

    ``sampling=False`` runs the real-valued weights; ``sampling=True`` draws
    one weight sample for the whole pass.
    """
    if dataset.n_features != net.arch[0]:
        from .tensor import ShapeError

        raise ShapeError(f"model expects {net.arch[0]} features, dataset has {dataset.n_features}")
    weights = None
    if sampling:
        if prng is None:
            raise ValueError("sampled evaluation needs a Prng")
        weights = net.sample(sampling_mode, prng)
    wrong = 0
    for x, y in eval_batches(dataset, batch_size):
        scores = net.predict_scores(x, weights)
        wrong += int(np.count_nonzero(scores.argmax(axis=0) != y))
    return wrong / len(dataset)


def calibrate(net: Network, dataset: Dataset) -> None:
    sub = dataset.subset(slice(0, min(len(dataset), CALIBRATION_EXAMPLES)))
    net.calibrate(x for x, _ in eval_batches(sub, 1000))


def _eval_pair(net, config, data, epoch):
    if config.test_time_sampling:
        mode = config.mode if config.mode.sampled else ForwardMode.TERNARY
        va = evaluate(net, data.valid, True, Prng(config.seed, (EVAL_STREAM, epoch, 0)), mode)
        te = evaluate(net, data.test, True, Prng(config.seed, (EVAL_STREAM, epoch, 1)), mode)
        return va, te
    return evaluate(net, data.valid), evaluate(net, data.test)


class RunLog:
    """Appends one CSV row and one JSON line per epoch under ``out_dir``."""

    def __init__(self, out_dir, stem: str = "metrics"):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.csv_path = self.dir / f"{stem}.csv"
        self.jsonl_path = self.dir / f"{stem}.jsonl"
        with open(self.csv_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(METRIC_COLUMNS)
        self.jsonl_path.write_text("")

    def append(self, rec: EpochRecord) -> None:
        with open(self.csv_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(rec.row())
        with open(self.jsonl_path, "a") as f:
            f.write(json.dumps(rec.as_json(), sort_keys=True) + "\n")


def train(
    config: RunConfig,
    data: Datasets,
    out_dir=None,
    stem: str = "metrics",
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train per ``config``; keeps the snapshot with the best validation error."""
    config.validate()
    if data.train.n_features != config.arch[0]:
        raise ConfigError(f"architecture input {config.arch[0]} does not match {data.train.n_features} features")
    net = Network.build(config.arch, config.use_batch_norm, config.seed, lr_scale=config.lr_scale)
    runlog = RunLog(out_dir, stem) if out_dir is not None else None
    records: list[EpochRecord] = []
    best, best_valid = None, np.inf
    step = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        eta = config.learning_rate * config.eta_decay ** (epoch - 1)
        counter = MultCounter()
        losses = []
        for x, y in minibatches(data.train, config.batch_size, config.seed, epoch):
            step += 1
            try:
                loss = net.train_step(
                    x, y, eta, config.mode, config.backward, config.budget, counter, config.backward_weights
                )
            except NumericAbort as exc:
                raise NumericAbort(f"{exc} (epoch {epoch}, step {step})") from exc
            losses.append(loss)
        calibrate(net, data.train)
        valid_err, test_err = _eval_pair(net, config, data, epoch)
        seconds = time.perf_counter() - t0 if config.log_wallclock else 0.0
        rec = EpochRecord(epoch, float(np.mean(losses)), valid_err, test_err, counter, seconds, eta)
        records.append(rec)
        log.info(
            "epoch %d loss %.4f valid %.4f test %.4f (%.1fs)", epoch, rec.train_loss, valid_err, test_err, seconds
        )
        if runlog is not None:
            runlog.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if valid_err < best_valid:
            best_valid, best = valid_err, (epoch, net.snapshot())
    result = TrainResult(best[1], records, best[0], final_model=net)
    if out_dir is not None:
        save_checkpoint(result.model, Path(out_dir) / f"{stem}.ckpt.npz", {"config": config.to_dict(), "epoch": best[0]})
    return result


@dataclass(frozen=True)
class SweepRow:
    budget: int
    errors: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def min(self) -> float:
        return float(np.min(self.errors))

    @property
    def max(self) -> float:
        return float(np.max(self.errors))


def bit_sweep(
    config: RunConfig, budgets, data: Datasets, repeats: int = 10, out_dir=None
) -> list[SweepRow]:
    """Final test error for each symmetric shift budget over ``repeats`` seeds."""
    budgets = list(budgets)
    if not budgets:
        raise ConfigError("bit sweep needs at least one budget")
    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    rows = []
    for b in budgets:
        errs = []
        for r in range(repeats):
            cfg = config.replace(shift_right=b, shift_left=b, seed=config.seed + r)
            res = train(cfg, data, out_dir, stem=f"bits{b}_seed{cfg.seed}" if out_dir is not None else "metrics")
            errs.append(res.test_err)
            log.info("budget %d repeat %d: test error %.4f", b, r, res.test_err)
        rows.append(SweepRow(b, tuple(errs)))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["budget", "mean_err", "min_err", "max_err", "repeats"])
    for r in rows:
        w.writerow([r.budget, repr(r.mean), repr(r.min), repr(r.max), len(r.errors)])
    return buf.getvalue()
