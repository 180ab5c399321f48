"""Class registry, value normalization and categorical expansion.

Raw events are ``(seq_id, time, class_name, raw_value)`` records. Numeric raw
classes map to one vocabulary class each; a categorical raw class with ``L``
observed levels expands into ``L`` single-valued classes named
``"<class>=<level>"``. A reserved numeric ``time`` class carrying the elapsed
time since the previous timestamp group is always appended last.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from .errors import DataError

TIME_CLASS_NAME = "time"

RawValue = Union[float, str]


class Kind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class ZScore:
    mean: float
    std: float
    kind = "zscore"

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise DataError(f"zscore std must be > 0, got {self.std}")

    def forward(self, v: float) -> float:
        return (v - self.mean) / self.std

    def inverse(self, z: float) -> float:
        return z * self.std + self.mean


@dataclass(frozen=True)
class LogZScore:
    """z-score of ``log(v)``; used for heavy-tailed positive quantities."""

    mean: float
    std: float
    kind = "logzscore"

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise DataError(f"logzscore std must be > 0, got {self.std}")

    def forward(self, v: float) -> float:
        if v <= 0:
            raise DataError(f"logzscore needs a positive value, got {v}")
        return (math.log(v) - self.mean) / self.std

    def inverse(self, z: float) -> float:
        return math.exp(z * self.std + self.mean)


@dataclass(frozen=True)
class Logistic:
    """Logistic squashing ``1/(1+exp(-(v-center)/scale))`` followed by a z-score.

    ``mean``/``std`` describe the squashed training values so that the model
    still sees roughly unit-scale inputs.
    """

    center: float
    scale: float
    mean: float = 0.0
    std: float = 1.0
    kind = "logistic"

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DataError(f"logistic scale must be > 0, got {self.scale}")
        if not (self.std > 0 and math.isfinite(self.std)):
            raise DataError(f"logistic std must be > 0, got {self.std}")

    def squash(self, v: float) -> float:
        x = (v - self.center) / self.scale
        # split by sign so exp never overflows
        if x >= 0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)

    def forward(self, v: float) -> float:
        return (self.squash(v) - self.mean) / self.std

    def inverse(self, z: float) -> float:
        u = z * self.std + self.mean
        if not 0.0 < u < 1.0:
            raise DataError(f"logistic inverse undefined at squashed value {u} (must lie in (0, 1))")
        return self.center + self.scale * math.log(u / (1.0 - u))


@dataclass(frozen=True)
class Identity:
    kind = "identity"

    def forward(self, v: float) -> float:
        return v

    def inverse(self, z: float) -> float:
        return z


Normalization = Union[ZScore, LogZScore, Logistic, Identity]


def norm_to_dict(norm: Normalization) -> dict:
    out = {"kind": norm.kind}
    if isinstance(norm, (ZScore, LogZScore)):
        out.update(mean=norm.mean, std=norm.std)
    elif isinstance(norm, Logistic):
        out.update(center=norm.center, scale=norm.scale, mean=norm.mean, std=norm.std)
    return out


def norm_from_dict(d: Mapping) -> Normalization:
    kind = d["kind"]
    if kind == "zscore":
        return ZScore(float(d["mean"]), float(d["std"]))
    if kind == "logzscore":
        return LogZScore(float(d["mean"]), float(d["std"]))
    if kind == "logistic":
        return Logistic(float(d["center"]), float(d["scale"]), float(d["mean"]), float(d["std"]))
    if kind == "identity":
        return Identity()
    raise DataError(f"unknown normalization kind {kind!r}")


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    name: str
    kind: Kind
    norm: Normalization = Identity()
    origin: Optional[tuple[str, Optional[str]]] = None

    def __post_init__(self):
        if self.class_id < 0:
            raise DataError(f"class_id must be non-negative, got {self.class_id}")
        if self.kind is Kind.CATEGORICAL and not isinstance(self.norm, Identity):
            raise DataError(f"categorical class {self.name!r} must use identity normalization")

    @property
    def is_numeric(self) -> bool:
        return self.kind is Kind.NUMERIC

    @property
    def raw_name(self) -> str:
        return self.origin[0] if self.origin else self.name

    @property
    def level(self) -> Optional[str]:
        return self.origin[1] if self.origin else None

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "name": self.name,
            "kind": self.kind.value,
            "norm": norm_to_dict(self.norm),
            "origin": list(self.origin) if self.origin else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassSpec":
        origin = tuple(d["origin"]) if d.get("origin") else None
        return cls(int(d["class_id"]), d["name"], Kind(d["kind"]), norm_from_dict(d["norm"]), origin)


@dataclass(frozen=True)
class EventRecord:
    seq_id: str
    time: float
    class_name: str
    raw_value: RawValue

    def __post_init__(self):
        if not math.isfinite(self.time):
            raise DataError(f"non-finite time {self.time} in sequence {self.seq_id!r}")
        if isinstance(self.raw_value, bool):
            raise DataError("boolean values are not supported; encode them as categorical strings")
        if isinstance(self.raw_value, (int, float)) and not math.isfinite(self.raw_value):
            raise DataError(
                f"non-finite value {self.raw_value} for class {self.class_name!r} in sequence {self.seq_id!r}"
            )

    @property
    def is_numeric(self) -> bool:
        return not isinstance(self.raw_value, str)


@dataclass(frozen=True)
class Vocabulary:
    classes: tuple[ClassSpec, ...]
    time_class_id: int
    ordered_classes: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise DataError("class_ids must be dense 0..d_c-1 in order")
        names = [c.name for c in self.classes]
        if len(set(names)) != len(names):
            raise DataError("class names must be unique")
        origins = [c.origin for c in self.classes if c.origin is not None]
        if len(set(origins)) != len(origins):
            raise DataError("(raw_class_name, level) pairs must be unique")
        if not 0 <= self.time_class_id < len(self.classes):
            raise DataError("time_class_id out of range")
        if not self.classes[self.time_class_id].is_numeric:
            raise DataError("the time class must be numeric")
        object.__setattr__(self, "_by_name", {c.name: c for c in self.classes})
        object.__setattr__(self, "_by_origin", {c.origin: c for c in self.classes if c.origin})

    @property
    def d_c(self) -> int:
        return len(self.classes)

    @property
    def time_class(self) -> ClassSpec:
        return self.classes[self.time_class_id]

    @property
    def numeric_mask(self) -> list[bool]:
        return [c.is_numeric for c in self.classes]

    def __len__(self) -> int:
        return len(self.classes)

    def __getitem__(self, class_id: int) -> ClassSpec:
        return self.classes[class_id]

    def by_name(self, name: str) -> ClassSpec:
        try:
            return self._by_name[name]
        except KeyError:
            raise DataError(f"unknown class {name!r}") from None

    def resolve(self, class_name: str, raw_value: RawValue) -> ClassSpec:
        """Map a raw ``(class, value)`` pair to its vocabulary class."""
        if isinstance(raw_value, str):
            spec = self._by_origin.get((class_name, raw_value))
            if spec is None:
                if any(o[0] == class_name for o in self._by_origin):
                    raise DataError(f"unseen level {raw_value!r} for categorical class {class_name!r}")
                raise DataError(f"unknown categorical class {class_name!r}")
            return spec
        spec = self._by_name.get(class_name)
        if spec is None or not spec.is_numeric or spec.class_id == self.time_class_id:
            raise DataError(f"unknown numeric class {class_name!r}")
        return spec

    def to_dict(self) -> dict:
        return {
            "time_class_id": self.time_class_id,
            "ordered_classes": sorted(self.ordered_classes),
            "classes": [c.to_dict() for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Vocabulary":
        return cls(
            tuple(ClassSpec.from_dict(c) for c in d["classes"]),
            int(d["time_class_id"]),
            frozenset(d.get("ordered_classes", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        return cls.from_dict(json.loads(text))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _mean_std(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(var)


def _fit_numeric(name: str, values: list[float], option) -> Normalization:
    if isinstance(option, Mapping):
        kind = option.get("kind", "zscore")
    else:
        kind = option or "zscore"
    if kind == "identity":
        return Identity()
    if kind == "zscore":
        mean, std = _mean_std(values)
        if not std > 0:
            raise DataError(f"numeric class {name!r} has zero variance; std must be > 0")
        return ZScore(mean, std)
    if kind in ("log", "logzscore"):
        if min(values) <= 0:
            raise DataError(f"log normalization for class {name!r} needs positive values")
        mean, std = _mean_std([math.log(v) for v in values])
        if not std > 0:
            raise DataError(f"numeric class {name!r} has zero variance; std must be > 0")
        return LogZScore(mean, std)
    if kind == "logistic":
        center = option.get("center") if isinstance(option, Mapping) else None
        scale = option.get("scale") if isinstance(option, Mapping) else None
        if center is None:
            s = sorted(values)
            mid = len(s) // 2
            center = s[mid] if len(s) % 2 else 0.5 * (s[mid - 1] + s[mid])
        if scale is None:
            scale = _mean_std(values)[1]
            if not scale > 0:
                raise DataError(f"numeric class {name!r} has zero variance; std must be > 0")
        base = Logistic(float(center), float(scale))
        mean, std = _mean_std([base.squash(v) for v in values])
        if not std > 0:
            raise DataError(f"logistic-scaled class {name!r} has zero variance")
        return Logistic(float(center), float(scale), mean, std)
    raise DataError(f"unknown normalization option {kind!r} for class {name!r}")


def _fit_time(deltas: list[float], transform: str) -> Normalization:
    # Constant deltas (uniform sampling) are legal; fall back to a unit that
    # keeps the delta itself as the scale.
    if not deltas:
        return ZScore(0.0, 1.0)
    if transform in ("log", "logzscore"):
        mean, std = _mean_std([math.log(d) for d in deltas])
        return LogZScore(mean, std if std > 0 else 1.0)
    if transform != "zscore":
        raise DataError(f"unknown time transform {transform!r}")
    mean, std = _mean_std(deltas)
    return ZScore(mean, std if std > 0 else abs(mean))


def time_deltas(records: Iterable[EventRecord]) -> list[float]:
    """Positive gaps between consecutive distinct timestamps of each sequence."""
    by_seq: dict[str, set[float]] = defaultdict(set)
    for r in records:
        by_seq[r.seq_id].add(r.time)
    out = []
    for seq_id in sorted(by_seq):
        times = sorted(by_seq[seq_id])
        out.extend(b - a for a, b in zip(times, times[1:]))
    return out


def build_vocabulary(
    records: Iterable[EventRecord],
    options: Optional[Mapping[str, Union[str, Mapping]]] = None,
    *,
    time_transform: str = "zscore",
    ordered_classes: Iterable[str] = (),
) -> Vocabulary:
    """Fit a :class:`Vocabulary` on training records.

    ``options`` maps raw class names to a normalization choice: ``"zscore"``
    (default), ``"log"``, ``"identity"``, ``"logistic"`` or a mapping such as
    ``{"kind": "logistic", "center": 95, "scale": 5}``. Class ids follow the
    lexicographic order of ``(raw_class_name, level)`` with the time class last.
    Population (``ddof=0``) standard deviations are used throughout.
    """
    records = list(records)
    if not records:
        raise DataError("cannot build a vocabulary from zero records")
    options = dict(options or {})

    numeric: dict[str, list[float]] = defaultdict(list)
    levels: dict[str, set[str]] = defaultdict(set)
    for r in records:
        if r.class_name == TIME_CLASS_NAME:
            raise DataError(f"class name {TIME_CLASS_NAME!r} is reserved for time deltas")
        if r.is_numeric:
            numeric[r.class_name].append(float(r.raw_value))
        else:
            levels[r.class_name].add(r.raw_value)
    mixed = sorted(set(numeric) & set(levels))
    if mixed:
        raise DataError(f"classes mix numeric and categorical values: {mixed}")
    unknown = sorted(set(options) - set(numeric) - set(levels))
    if unknown:
        raise DataError(f"normalization options given for unseen classes: {unknown}")

    keyed: list[tuple[tuple[str, str], Kind, Optional[str]]] = []
    for name in numeric:
        keyed.append(((name, ""), Kind.NUMERIC, None))
    for name, lv in levels.items():
        for level in lv:
            keyed.append(((name, level), Kind.CATEGORICAL, level))
    keyed.sort(key=lambda item: item[0])

    classes = []
    for class_id, ((name, _), kind, level) in enumerate(keyed):
        if kind is Kind.NUMERIC:
            norm = _fit_numeric(name, numeric[name], options.get(name))
            classes.append(ClassSpec(class_id, name, kind, norm, None))
        else:
            classes.append(ClassSpec(class_id, f"{name}={level}", kind, Identity(), (name, level)))
    time_id = len(classes)
    classes.append(ClassSpec(time_id, TIME_CLASS_NAME, Kind.NUMERIC, _fit_time(time_deltas(records), time_transform)))
    return Vocabulary(tuple(classes), time_id, frozenset(ordered_classes))


def normalize_value(v: float, spec: ClassSpec, direction: str = "forward") -> float:
    """Apply (``forward``) or undo (``inverse``) the class normalization."""
    if not spec.is_numeric:
        raise DataError(f"class {spec.name!r} is categorical and has no numeric value")
    if not math.isfinite(v):
        raise DataError(f"non-finite value {v} for class {spec.name!r}")
    if direction == "forward":
        return spec.norm.forward(v)
    if direction == "inverse":
        return spec.norm.inverse(v)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
