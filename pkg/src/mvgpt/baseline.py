"""Quantile-bin discretization baseline.

Each numeric class (the time class included) is cut into equal-mass bins at
the ``k / n_bins`` quantiles of its training values, using linear
interpolation between order statistics (``numpy.quantile`` default). A bin
decodes to the median of the training values that fall in it. The discrete
model is the same transformer with every class categorical, so only the
class loss trains it.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import DataError
from .schema import EventRecord, Vocabulary, time_deltas
from .tokenizer import Token, TokenSequence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassBins:
    requested: int
    edges: np.ndarray
    representative: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.representative)

    @property
    def collapsed(self) -> int:
        """Bins lost to repeated quantile edges."""
        return self.requested - self.n_bins

    def width(self, i: int) -> float:
        return float(self.edges[i + 1] - self.edges[i])


def _encode(edges: np.ndarray, v):
    n = len(edges) - 1
    return np.clip(np.searchsorted(edges, v, side="right") - 1, 0, n - 1)


def fit_class_bins(values: Sequence[float], n_bins: int, name: str = "?") -> ClassBins:
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if n_bins < 1:
        raise DataError("n_bins must be >= 1")
    distinct = len(np.unique(arr))
    if distinct < n_bins:
        raise DataError(f"class {name!r} has {distinct} distinct values, fewer than n_bins={n_bins}")
    edges = np.unique(np.quantile(arr, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(edges) == 1:
        # a single distinct value: one zero-width bin
        edges = np.array([edges[0], edges[0]])
    idx = _encode(edges, arr)
    reps = np.empty(len(edges) - 1)
    for i in range(len(reps)):
        members = arr[idx == i]
        reps[i] = np.median(members) if len(members) else 0.5 * (edges[i] + edges[i + 1])
    bins = ClassBins(n_bins, edges, reps)
    if bins.collapsed:
        logger.warning("class %r: %d repeated quantile edges collapsed, %d bins remain", name, bins.collapsed, bins.n_bins)
    return bins


@dataclass(frozen=True)
class BinTable:
    classes: Mapping[str, ClassBins]

    def __getitem__(self, name: str) -> ClassBins:
        try:
            return self.classes[name]
        except KeyError:
            raise DataError(f"class {name!r} is not in the bin table") from None

    def __contains__(self, name: str) -> bool:
        return name in self.classes

    def to_dict(self) -> dict:
        return {
            name: {
                "requested": b.requested,
                "edges": [float(x) for x in b.edges],
                "representative": [float(x) for x in b.representative],
            }
            for name, b in sorted(self.classes.items())
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BinTable":
        return cls(
            {
                name: ClassBins(int(b["requested"]), np.asarray(b["edges"], float), np.asarray(b["representative"], float))
                for name, b in d.items()
            }
        )

    def write_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "bin", "lo", "hi", "representative"])
            for name, b in sorted(self.classes.items()):
                for i in range(b.n_bins):
                    w.writerow([name, i, repr(float(b.edges[i])), repr(float(b.edges[i + 1])), repr(float(b.representative[i]))])


def fit_quantile_bins(values: Mapping[str, Sequence[float]], n_bins: int) -> BinTable:
    """Fit per-class quantile bins on training values."""
    return BinTable({name: fit_class_bins(v, n_bins, name) for name, v in sorted(values.items())})


def bin_encode(v: float, class_name: str, table: BinTable) -> int:
    """Bin index ``i`` with ``edges[i] <= v < edges[i+1]``; out-of-range values clamp."""
    return int(_encode(table[class_name].edges, v))


def bin_decode(bin_id: int, class_name: str, table: BinTable) -> float:
    bins = table[class_name]
    if not 0 <= bin_id < bins.n_bins:
        raise DataError(f"bin {bin_id} out of range for class {class_name!r} with {bins.n_bins} bins")
    return float(bins.representative[bin_id])


def training_values(records: Iterable[EventRecord], vocab: Vocabulary) -> dict[str, list[float]]:
    """Raw training values per numeric vocabulary class, time deltas included."""
    records = list(records)
    out: dict[str, list[float]] = {c.name: [] for c in vocab.classes if c.is_numeric}
    for r in records:
        if r.is_numeric:
            out[vocab.resolve(r.class_name, r.raw_value).name].append(float(r.raw_value))
    out[vocab.time_class.name] = time_deltas(records)
    return out


def fit_from_records(records: Iterable[EventRecord], vocab: Vocabulary, n_bins: int) -> BinTable:
    """Fit a table for every numeric class of ``vocab``.

    Classes with fewer distinct values than ``n_bins`` (e.g. uniformly spaced
    time deltas) get one bin per distinct value instead.
    """
    table = {}
    for name, vals in training_values(records, vocab).items():
        if not vals:
            raise DataError(f"class {name!r} has no training values to bin")
        n = min(n_bins, len(set(vals)))
        table[name] = fit_class_bins(vals, n, name)
    return BinTable(table)


class DiscreteCodec:
    """Maps multivariate tokens to all-categorical bin tokens and back.

    Discrete class ids enumerate the vocabulary in order, expanding each
    numeric class into its bins.
    """

    def __init__(self, vocab: Vocabulary, table: BinTable):
        self.vocab = vocab
        self.table = table
        self.offsets: list[int] = []
        self.names: list[str] = []
        self.source: list[tuple[int, int]] = []
        for spec in vocab.classes:
            self.offsets.append(len(self.names))
            if spec.is_numeric:
                for i in range(table[spec.name].n_bins):
                    self.names.append(f"{spec.name}#{i}")
                    self.source.append((spec.class_id, i))
            else:
                self.names.append(spec.name)
                self.source.append((spec.class_id, -1))

    @property
    def d_c(self) -> int:
        return len(self.names)

    @property
    def numeric_mask(self) -> list[bool]:
        return [False] * self.d_c

    def bins_of(self, class_id: int) -> range:
        spec = self.vocab[class_id]
        n = self.table[spec.name].n_bins if spec.is_numeric else 1
        return range(self.offsets[class_id], self.offsets[class_id] + n)

    def encode_token(self, tok: Token) -> Token:
        spec = self.vocab[tok.class_id]
        if not spec.is_numeric:
            return Token(self.offsets[tok.class_id])
        raw = spec.norm.inverse(tok.value)
        return Token(self.offsets[tok.class_id] + bin_encode(raw, spec.name, self.table))

    def encode(self, seq: TokenSequence) -> TokenSequence:
        return seq.with_tokens(self.encode_token(t) for t in seq.tokens)

    def decode_token(self, tok: Token) -> Token:
        class_id, b = self.source[tok.class_id]
        spec = self.vocab[class_id]
        if b < 0:
            return Token(class_id)
        return Token(class_id, spec.norm.forward(bin_decode(b, spec.name, self.table)))

    def decode(self, seq: TokenSequence) -> TokenSequence:
        return seq.with_tokens(self.decode_token(t) for t in seq.tokens)

    def interval(self, discrete_id: int) -> tuple[float, float]:
        """Raw ``[lo, hi]`` edges of the bin behind a discrete class id."""
        class_id, b = self.source[discrete_id]
        if b < 0:
            raise DataError(f"discrete class {self.names[discrete_id]!r} is categorical")
        edges = self.table[self.vocab[class_id].name].edges
        return float(edges[b]), float(edges[b + 1])
