"""Evaluation metrics: scaled MSE, QQ calibration points, interval coverage, accuracy."""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch.nn import functional as F

from .baseline import DiscreteCodec
from .errors import DataError
from .model import MultivariateGPT
from .schema import Vocabulary
from .tokenizer import Token, TokenSequence

logger = logging.getLogger(__name__)

Z95 = 1.96
_STD_NORMAL = NormalDist()


def mse_scaled(predictions, truths, classes: Optional[Sequence] = None) -> float:
    """Pooled MSE after per-class min-max scaling fitted on the truths.

    The scaling fitted on each class's ground truth is applied unchanged to its
    predictions. Classes whose truths are constant are skipped with a warning.
    """
    pred = np.asarray(predictions, dtype=np.float64)
    true = np.asarray(truths, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1 or len(pred) == 0:
        raise DataError("mse_scaled needs aligned, non-empty 1-d predictions and truths")
    labels = np.zeros(len(true), dtype=int) if classes is None else np.asarray(classes)
    if len(labels) != len(true):
        raise DataError("class labels are not aligned with the values")
    errors = []
    for label in sorted(set(labels.tolist()), key=str):
        sel = labels == label
        lo, hi = true[sel].min(), true[sel].max()
        if hi == lo:
            logger.warning("class %r has constant ground truth; excluded from scaled MSE", label)
            continue
        errors.append(((pred[sel] - lo) / (hi - lo) - (true[sel] - lo) / (hi - lo)) ** 2)
    if not errors:
        return math.nan
    return float(np.concatenate(errors).mean())


def standard_normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


def qq_points(truths, mus, sigmas) -> list[tuple[float, float]]:
    """``(theoretical, sample)`` quantile pairs of standardized residuals.

    Residuals ``(y - mu) / sigma`` are sorted; rank ``i`` (1-based) pairs with
    the standard normal quantile at the Hazen position ``(i - 0.5) / n``.
    """
    y, mu, sd = (np.asarray(a, dtype=np.float64) for a in (truths, mus, sigmas))
    if not (y.shape == mu.shape == sd.shape) or y.ndim != 1:
        raise DataError("qq_points needs aligned 1-d inputs")
    n = len(y)
    if n < 2:
        raise DataError("qq_points needs at least two residuals")
    if np.any(sd <= 0):
        raise DataError("sigmas must be > 0")
    z = (y - mu) / sd
    bad = np.flatnonzero(~np.isfinite(z))
    if len(bad):
        raise DataError(f"non-finite standardized residuals at indices {bad.tolist()}")
    z.sort()
    return [(standard_normal_quantile((i + 0.5) / n), float(z[i])) for i in range(n)]


def qq_max_deviation(points, limit: float = Z95) -> float:
    """Largest ``|sample - theoretical|`` over points with ``|theoretical| <= limit``."""
    devs = [abs(s - t) for t, s in points if abs(t) <= limit]
    return max(devs) if devs else math.nan


def coverage_fraction(truths, mus, sigmas) -> float:
    """Share of truths inside ``mu +- 1.96 sigma``."""
    y, mu, sd = (np.asarray(a, dtype=np.float64) for a in (truths, mus, sigmas))
    if len(y) == 0:
        raise DataError("coverage_fraction needs at least one value")
    if np.any(sd <= 0):
        raise DataError("sigmas must be > 0")
    return float(np.mean(np.abs(y - mu) <= Z95 * sd))


# ---------------------------------------------------------------------------
# teacher-forced predictions


@torch.no_grad()
def teacher_forced_outputs(model: MultivariateGPT, seq: TokenSequence):
    """Head outputs predicting tokens ``1..L-1`` of ``seq`` from their true prefixes.

    Sequences longer than the context are covered by windows advancing half a
    context at a time, so every prediction past the first window sees at least
    ``context // 2`` tokens of history. Returns float64 arrays
    ``(logits, mu, sigma)`` of shape ``(L-1, d_c)``.
    """
    L = len(seq)
    if L < 2:
        raise DataError("teacher forcing needs at least two tokens")
    model.eval()
    ctx = model.config.context
    half = max(1, ctx // 2)
    dtype = model.class_emb.weight.dtype
    ids = torch.tensor(seq.class_ids, dtype=torch.long)
    vals = torch.tensor(seq.values, dtype=dtype)
    d_c = model.config.d_c
    out = [np.empty((L - 1, d_c)) for _ in range(3)]
    done, start = 0, 0
    while done < L - 1:
        end = min(start + ctx, L - 1)
        res = model(ids[start:end].unsqueeze(0), vals[start:end].unsqueeze(0))
        for arr, r in zip(out, res):
            arr[done:end] = r[0, done - start : end - start].double().numpy()
        done = end
        start = end - half
    return tuple(out)


@dataclass
class PositionPrediction:
    """Prediction for one target token, in the multivariate vocabulary."""

    class_id: int
    value: Optional[float]  # normalized truth, None if categorical
    pred_class: int
    mu: Optional[float]
    sigma: Optional[float]


def multivariate_predictions(model: MultivariateGPT, seqs: Sequence[TokenSequence]) -> list[PositionPrediction]:
    out = []
    for seq in seqs:
        if len(seq) < 2:
            continue
        logits, mu, sigma = teacher_forced_outputs(model, seq)
        for j, tok in enumerate(seq.tokens[1:]):
            c = tok.class_id
            numeric = tok.value is not None
            out.append(
                PositionPrediction(
                    c,
                    tok.value,
                    int(np.argmax(logits[j])),
                    float(mu[j, c]) if numeric else None,
                    float(sigma[j, c]) if numeric else None,
                )
            )
    return out


def discrete_predictions(
    model: MultivariateGPT, codec: DiscreteCodec, seqs: Sequence[TokenSequence]
) -> list[PositionPrediction]:
    """Teacher-forced predictions of a bin-token model, mapped back to values.

    ``seqs`` are multivariate sequences. The predicted class sums bin
    probabilities per source class. For numeric targets the point estimate is
    the representative of the most likely bin of the true class, and ``sigma``
    is set so that ``mu +- 1.96 sigma`` spans that bin's width.
    """
    vocab = codec.vocab
    out = []
    for seq in seqs:
        if len(seq) < 2:
            continue
        logits, _, _ = teacher_forced_outputs(model, codec.encode(seq))
        probs = F.softmax(torch.from_numpy(logits), dim=-1).numpy()
        for j, tok in enumerate(seq.tokens[1:]):
            c = tok.class_id
            per_class = np.array([probs[j, list(codec.bins_of(k))].sum() for k in range(vocab.d_c)])
            mu = sigma = None
            if tok.value is not None:
                bins = codec.bins_of(c)
                best = bins.start + int(np.argmax(probs[j, bins.start : bins.stop]))
                spec = vocab[c]
                mu = codec.decode_token(Token(best)).value
                lo, hi = codec.interval(best)
                width = spec.norm.forward(hi) - spec.norm.forward(lo)
                sigma = max(width, 1e-12) / (2 * Z95)
            out.append(PositionPrediction(c, tok.value, int(np.argmax(per_class)), mu, sigma))
    return out


@dataclass
class EvalReport:
    value_mse: float
    time_mse: float
    coverage_95: dict = field(default_factory=dict)
    class_accuracy: float = math.nan
    value_mse_given_correct_class: Optional[float] = None
    qq_points: list = field(default_factory=list)
    n_predictions: int = 0

    def __post_init__(self):
        for name, cov in self.coverage_95.items():
            if not 0.0 <= cov <= 1.0:
                raise DataError(f"coverage for {name!r} outside [0, 1]")

    def rows(self) -> list[tuple[str, str, object]]:
        rows = [
            ("value_mse", "", self.value_mse),
            ("time_mse", "", self.time_mse),
            ("class_accuracy", "", self.class_accuracy),
            ("value_mse_given_correct_class", "", self.value_mse_given_correct_class),
            ("n_predictions", "", self.n_predictions),
        ]
        rows += [("coverage_95", name, cov) for name, cov in sorted(self.coverage_95.items())]
        return rows

    def write_csv(self, path: Union[str, Path], label: str = "") -> None:
        write_reports_csv(path, {label: self})

    def summary(self) -> str:
        lines = [f"{metric}{'[' + cls + ']' if cls else ''}: {_fmt(v)}" for metric, cls, v in self.rows()]
        if self.qq_points:
            lines.append(f"qq_max_deviation_central: {_fmt(qq_max_deviation(self.qq_points))}")
        return "\n".join(lines)

    def write_qq_csv(self, path: Union[str, Path]) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "theoretical", "sample"])
            for i, (t, s) in enumerate(self.qq_points, 1):
                w.writerow([i, repr(t), repr(s)])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports_csv(path: Union[str, Path], reports: dict) -> None:
    """One ``model,metric,class,value`` row per metric of each labelled report."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "metric", "class", "value"])
        for label, report in reports.items():
            for metric, cls, v in report.rows():
                w.writerow([label, metric, cls, _fmt(v)])


def build_report(preds: Sequence[PositionPrediction], vocab: Vocabulary) -> EvalReport:
    """Aggregate per-position predictions into an :class:`EvalReport`.

    Scaled MSEs compare ``mu`` with the truth in raw units; the MSE given a
    correct class stays in normalized units.
    """
    if not preds:
        raise DataError("no predictions to evaluate")
    time_id = vocab.time_class_id
    raw = defaultdict(lambda: ([], [], []))  # class_id -> normalized (truth, mu, sigma)
    for p in preds:
        if p.value is not None:
            raw[p.class_id][0].append(p.value)
            raw[p.class_id][1].append(p.mu)
            raw[p.class_id][2].append(p.sigma)

    def scaled(ids):
        truth, pred, labels = [], [], []
        for c in ids:
            spec = vocab[c]
            t, m, _ = raw[c]
            truth += [spec.norm.inverse(v) for v in t]
            pred += [spec.norm.inverse(v) for v in m]
            labels += [c] * len(t)
        return mse_scaled(pred, truth, labels) if truth else math.nan

    value_ids = [c for c in sorted(raw) if c != time_id]
    coverage = {vocab[c].name: coverage_fraction(*raw[c]) for c in sorted(raw)}
    qq = []
    if sum(len(raw[c][0]) for c in value_ids) >= 2:
        qq = qq_points(*(sum((raw[c][k] for c in value_ids), []) for k in range(3)))
    correct = [(p.mu - p.value) ** 2 for p in preds if p.value is not None and p.pred_class == p.class_id]
    return EvalReport(
        value_mse=scaled(value_ids),
        time_mse=scaled([time_id] if time_id in raw else []),
        coverage_95=coverage,
        class_accuracy=float(np.mean([p.pred_class == p.class_id for p in preds])),
        value_mse_given_correct_class=float(np.mean(correct)) if correct else None,
        qq_points=qq,
        n_predictions=len(preds),
    )


def class_accuracy_and_value_mse(model: MultivariateGPT, heldout: Sequence[TokenSequence]):
    """Teacher-forced next-class accuracy and value MSE on correctly classed numeric targets.

    The MSE is ``None`` when no numeric target was classified correctly.
    """
    if not heldout:
        raise DataError("held-out set is empty")
    preds = multivariate_predictions(model, heldout)
    acc = float(np.mean([p.pred_class == p.class_id for p in preds]))
    errs = [(p.mu - p.value) ** 2 for p in preds if p.value is not None and p.pred_class == p.class_id]
    return acc, (float(np.mean(errs)) if errs else None)
