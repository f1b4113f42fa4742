"""Multiplication accounting and log2 activation histograms.

Counting model (per mini-batch of size B, per dense layer with N inputs and
M outputs):

* real-valued forward product: N*M*B multiplications; sampled forward: none
  (sign changes and additions only);
* full backward: M*N*B for the weight-gradient outer product plus M*N*B for
  propagating the error through real-valued weights, i.e. (2MN + 3M) per
  sample together with the 3M element-wise products;
* quantized backward: the outer product becomes M*N*B shifts; 3M*B
  element-wise products remain; propagating the error through sampled
  weights needs no multiplications (M*N*B more if it goes through the
  real-valued weights instead);
* each batch-norm layer: 3BM + 3M forward and twice that backward, counting
  divisions as multiplications.

Loss-layer arithmetic and learning-rate decay are not counted.
"""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

import numpy as np

MULT_FIELDS = ("forward_mults", "backward_mults", "elementwise_mults", "bn_mults")
ANALYTIC_FIELDS = MULT_FIELDS + ("shifts",)


@dataclass
class MultCounter:
    forward_mults: int = 0
    backward_mults: int = 0
    elementwise_mults: int = 0
    bn_mults: int = 0
    shifts: int = 0
    adds: int = 0
    saturations: int = 0

    def record(self, category: str, amount: int) -> None:
        if amount < 0:
            raise ValueError(f"cannot record a negative amount ({amount}) for {category}")
        if category not in self._names():
            raise KeyError(f"unknown counter category {category!r}")
        setattr(self, category, getattr(self, category) + int(amount))

    @classmethod
    def _names(cls):
        return {f.name for f in fields(cls)}

    def merge(self, other: "MultCounter") -> "MultCounter":
        return MultCounter(**{k: getattr(self, k) + getattr(other, k) for k in self._names()})

    __add__ = merge

    @property
    def total_mults(self) -> int:
        return sum(getattr(self, k) for k in MULT_FIELDS)

    @property
    def backward_total(self) -> int:
        return self.backward_mults + self.elementwise_mults

    def analytic_view(self) -> dict:
        return {k: getattr(self, k) for k in ANALYTIC_FIELDS}

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total_mults"] = self.total_mults
        return d


def record_runtime(counter: MultCounter | None, category: str, amount: int) -> None:
    if counter is not None:
        counter.record(category, amount)


def _mode_value(mode) -> str:
    return getattr(mode, "value", mode)


def count_step(
    arch,
    batch_size: int,
    mode="full",
    backward="full",
    use_bn: bool = False,
    backward_weights: str = "sampled",
) -> MultCounter:
    """Analytic per-mini-batch counts for one training step."""
    arch = [int(a) for a in arch]
    if len(arch) < 2 or min(arch) < 1:
        raise ValueError(f"invalid architecture {arch}")
    mode, backward = _mode_value(mode), _mode_value(backward)
    sampled = mode in ("binary", "ternary")
    real_delta = not sampled or backward_weights == "full"
    B = batch_size
    c = MultCounter()
    for n, m in zip(arch[:-1], arch[1:]):
        if not sampled:
            c.forward_mults += n * m * B
        c.elementwise_mults += 3 * m * B
        if backward == "qbp":
            c.shifts += m * n * B
        else:
            c.backward_mults += m * n * B
        if real_delta:
            c.backward_mults += m * n * B
        if use_bn:
            c.bn_mults += 3 * (3 * B * m + 3 * m)
    return c


@dataclass(frozen=True)
class Table2Row:
    label: str
    full_precision: int
    reduced: int

    @property
    def ratio(self) -> float:
        return self.reduced / self.full_precision


def multiplication_table(arch, batch_size: int = 200, mode="ternary", backward="qbp") -> list[Table2Row]:
    """Full precision vs. reduced-precision totals, without and with BN."""
    rows = []
    for label, bn in (("without BN", False), ("with BN", True)):
        full = count_step(arch, batch_size, "full", "full", bn).total_mults
        red = count_step(arch, batch_size, mode, backward, bn).total_mults
        rows.append(Table2Row(label, full, red))
    return rows


def format_table(rows: list[Table2Row]) -> str:
    lines = [f"{'':<12}{'full precision':>16}{'reduced':>16}{'ratio':>12}"]
    for r in rows:
        lines.append(f"{r.label:<12}{r.full_precision:>16.4e}{r.reduced:>16.4e}{r.ratio:>12.6f}")
    return "\n".join(lines)


def table_json(rows: list[Table2Row]) -> str:
    return json.dumps(
        [{"label": r.label, "full_precision": r.full_precision, "reduced": r.reduced, "ratio": r.ratio} for r in rows],
        indent=2,
    )


@dataclass
class ExponentHistogram:
    """Counts of round(log2|x|) per layer; exact zeros go to ``zeros``."""

    counts: Counter = field(default_factory=Counter)
    zeros: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts.values()) + self.zeros

    def add(self, values: np.ndarray) -> None:
        from .quantize import log2_round

        v = np.asarray(values).ravel()
        nz = v[v != 0]
        self.zeros += int(v.size - nz.size)
        if nz.size:
            exps, cnt = np.unique(log2_round(nz), return_counts=True)
            for e, k in zip(exps.tolist(), cnt.tolist()):
                self.counts[e] += k


def histogram_activations(net, x: np.ndarray) -> list[ExponentHistogram]:
    """Histogram the input of every dense layer for one inference pass."""
    hists = []
    for layer_input in net.layer_inputs(x):
        h = ExponentHistogram()
        h.add(layer_input)
        hists.append(h)
    return hists


def histograms_csv(hists: list[ExponentHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "exponent", "count"])
    for i, h in enumerate(hists):
        w.writerow([i, "zero", h.zeros])
        for e in sorted(h.counts):
            w.writerow([i, e, h.counts[e]])
    return buf.getvalue()
