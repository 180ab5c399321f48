"""Flatten event records into class-value token sequences and back.

Records are sorted by time and grouped by identical timestamps. Every group
after the first is preceded by one time-delta token whose value is the
normalized gap to the previous group, so the delta conditions the group it
opens. Inside a group tokens follow the lexicographic order of their class
names; raw classes registered as *ordered* keep their input order instead.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .errors import DataError
from .schema import EventRecord, Vocabulary

CSV_HEADER = ("seq_id", "time", "class", "value")
TOKEN_HEADER = ("seq_id", "position", "class_name", "value")


@dataclass(frozen=True)
class Token:
    class_id: int
    value: Optional[float] = None

    @property
    def is_numeric(self) -> bool:
        return self.value is not None


@dataclass(frozen=True)
class TokenSequence:
    seq_id: str
    tokens: tuple[Token, ...]
    base_time: float = 0.0

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, idx):
        return self.tokens[idx]

    def with_tokens(self, tokens: Iterable[Token]) -> "TokenSequence":
        return TokenSequence(self.seq_id, tuple(tokens), self.base_time)

    @property
    def class_ids(self) -> list[int]:
        return [t.class_id for t in self.tokens]

    @property
    def values(self) -> list[float]:
        return [0.0 if t.value is None else t.value for t in self.tokens]


def validate_sequence(seq: TokenSequence, vocab: Vocabulary) -> None:
    """Check the token invariants; raise :class:`DataError` on the first violation."""
    prev_time = False
    for pos, tok in enumerate(seq.tokens):
        if not 0 <= tok.class_id < vocab.d_c:
            raise DataError(f"position {pos}: class_id {tok.class_id} outside vocabulary of size {vocab.d_c}")
        spec = vocab[tok.class_id]
        if spec.is_numeric:
            if tok.value is None or not math.isfinite(tok.value):
                raise DataError(f"position {pos}: numeric class {spec.name!r} needs a finite value")
        elif tok.value is not None:
            raise DataError(f"position {pos}: categorical class {spec.name!r} carries a value")
        is_time = tok.class_id == vocab.time_class_id
        if is_time and prev_time:
            raise DataError(f"position {pos}: consecutive time-delta tokens")
        prev_time = is_time


def _sort_key(record: EventRecord, vocab: Vocabulary) -> str:
    spec = vocab.resolve(record.class_name, record.raw_value)
    if spec.raw_name in vocab.ordered_classes:
        return spec.raw_name
    return spec.name


def encode_sequence(records: Iterable[EventRecord], vocab: Vocabulary) -> TokenSequence:
    """Encode the records of one sequence into a :class:`TokenSequence`."""
    records = list(records)
    if not records:
        raise DataError("cannot encode an empty record set")
    seq_ids = {r.seq_id for r in records}
    if len(seq_ids) != 1:
        raise DataError(f"records span several sequences: {sorted(seq_ids)}")
    (seq_id,) = seq_ids

    # stable sort: ties keep their input order
    ordered = sorted(records, key=lambda r: r.time)
    time_spec = vocab.time_class
    tokens: list[Token] = []
    prev_time: Optional[float] = None
    for t, group in groupby(ordered, key=lambda r: r.time):
        group = sorted(group, key=lambda r: _sort_key(r, vocab))
        specs = [vocab.resolve(r.class_name, r.raw_value) for r in group]
        counts = Counter(s.class_id for s in specs if s.raw_name not in vocab.ordered_classes)
        dupes = sorted(vocab[c].name for c, n in counts.items() if n > 1)
        if dupes:
            raise DataError(f"sequence {seq_id!r}: duplicate classes {dupes} at time {t}")
        if prev_time is not None:
            tokens.append(Token(vocab.time_class_id, time_spec.norm.forward(t - prev_time)))
        for r, spec in zip(group, specs):
            if spec.is_numeric:
                tokens.append(Token(spec.class_id, spec.norm.forward(float(r.raw_value))))
            else:
                tokens.append(Token(spec.class_id))
        prev_time = t
    return TokenSequence(seq_id, tuple(tokens), ordered[0].time)


def encode_records(records: Iterable[EventRecord], vocab: Vocabulary) -> list[TokenSequence]:
    """Encode a record stream holding many sequences, ordered by ``seq_id``."""
    by_seq: dict[str, list[EventRecord]] = defaultdict(list)
    for r in records:
        by_seq[r.seq_id].append(r)
    return [encode_sequence(by_seq[k], vocab) for k in sorted(by_seq)]


def decode_sequence(seq: TokenSequence, vocab: Vocabulary) -> list[EventRecord]:
    """Inverse of :func:`encode_sequence` up to intra-group ordering."""
    out = []
    t = seq.base_time
    for pos, tok in enumerate(seq.tokens):
        spec = vocab[tok.class_id]
        if tok.class_id == vocab.time_class_id:
            delta = spec.norm.inverse(tok.value)
            if not delta > 0:
                raise DataError(f"position {pos}: time delta {delta} is not positive")
            t = t + delta
        elif spec.is_numeric:
            out.append(EventRecord(seq.seq_id, t, spec.raw_name, spec.norm.inverse(tok.value)))
        else:
            out.append(EventRecord(seq.seq_id, t, spec.raw_name, spec.level))
    return out


def group_starts(seq: TokenSequence, vocab: Vocabulary) -> list[int]:
    """Token index where each timestamp group begins (its time token, if any)."""
    starts = [0] if seq.tokens else []
    starts += [i for i, tok in enumerate(seq.tokens) if tok.class_id == vocab.time_class_id and i > 0]
    return starts


def prefix_groups(seq: TokenSequence, vocab: Vocabulary, n_groups: int) -> TokenSequence:
    """Leading ``n_groups`` timestamp groups of ``seq``."""
    if n_groups < 1:
        raise DataError("a prefix needs at least one timestamp group")
    starts = group_starts(seq, vocab)
    end = starts[n_groups] if n_groups < len(starts) else len(seq.tokens)
    return seq.with_tokens(seq.tokens[:end])


# ---------------------------------------------------------------------------
# file formats


def _parse_value(text: str, class_name: str, categorical: frozenset) -> Union[float, str]:
    if class_name in categorical:
        return text
    try:
        return float(text)
    except ValueError:
        return text


def read_records(path: Union[str, Path], categorical: Iterable[str] = ()) -> list[EventRecord]:
    """Read long-format records from CSV (``seq_id,time,class,value``) or JSON lines.

    Values parse as floats unless their class is listed in ``categorical`` or
    the text is not a number.
    """
    path = Path(path)
    cat = frozenset(categorical)
    rows = []
    try:
        if path.suffix in (".jsonl", ".ndjson"):
            with path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    d = json.loads(line)
                    missing = set(CSV_HEADER) - set(d)
                    if missing:
                        raise DataError(f"{path}:{lineno}: missing keys {sorted(missing)}")
                    value = d["value"]
                    if isinstance(value, str):
                        value = _parse_value(value, d["class"], cat)
                    elif d["class"] in cat:
                        value = str(value)
                    rows.append(EventRecord(str(d["seq_id"]), float(d["time"]), str(d["class"]), value))
        else:
            with path.open(newline="", encoding="utf-8") as fh:
                reader = csv.DictReader(fh)
                if tuple(reader.fieldnames or ()) != CSV_HEADER:
                    raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}")
                for row in reader:
                    rows.append(
                        EventRecord(
                            row["seq_id"],
                            float(row["time"]),
                            row["class"],
                            _parse_value(row["value"], row["class"], cat),
                        )
                    )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed record ({exc})") from exc
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed record ({exc})") from exc
    return rows


def format_float(x: float) -> str:
    return repr(float(x))


def write_records(path: Union[str, Path], records: Iterable[EventRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            value = r.raw_value if isinstance(r.raw_value, str) else format_float(r.raw_value)
            w.writerow([r.seq_id, format_float(r.time), r.class_name, value])


def write_tokens(
    path: Union[str, Path],
    sequences: Sequence[TokenSequence],
    vocab: Union[Vocabulary, Sequence[str]],
    *,
    mus: Optional[Sequence[Sequence[Optional[float]]]] = None,
    sigmas: Optional[Sequence[Sequence[Optional[float]]]] = None,
) -> None:
    """Dump tokens as ``seq_id,position,class_name,value`` (plus ``mu,sigma``).

    ``vocab`` may also be a plain list of class names indexed by class id.
    """
    names = [c.name for c in vocab.classes] if isinstance(vocab, Vocabulary) else list(vocab)
    header = list(TOKEN_HEADER)
    if mus is not None:
        header += ["mu", "sigma"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, seq in enumerate(sequences):
            for pos, tok in enumerate(seq.tokens):
                row = [seq.seq_id, pos, names[tok.class_id], "" if tok.value is None else format_float(tok.value)]
                if mus is not None:
                    mu, sd = mus[i][pos], sigmas[i][pos]
                    row += ["" if mu is None else format_float(mu), "" if sd is None else format_float(sd)]
                w.writerow(row)
