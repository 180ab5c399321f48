"""End-to-end experiment pipelines: oscillator reconstruction and calibration.

Both pipelines train a multivariate model next to quantile-bin baselines under
the same training budget and write CSVs, checkpoints and PNG figures into one
output directory.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import plotting
from .baseline import DiscreteCodec, fit_from_records
from .checkpoint import Checkpoint, save_checkpoint
from .datagen import default_oscillator_family, gen_calibration_dataset, gen_oscillator_dataset
from .errors import DataError
from .metrics import (
    EvalReport,
    build_report,
    discrete_predictions,
    multivariate_predictions,
    qq_max_deviation,
    write_reports_csv,
)
from .model import ModelConfig, MultivariateGPT
from .sampler import SampleOptions, generate
from .schema import Vocabulary, build_vocabulary
from .tokenizer import TokenSequence, encode_records, prefix_groups, write_records, write_tokens
from .training import TrainConfig, train, write_loss_csv

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _deep_update(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


_OSC_BASE = {
    "model": {"d_e": 128, "n_head": 4, "n_layer": 4, "context": 200, "dropout": 0.0},
    "train": {
        "max_steps": 15000,
        "batch_tokens": 1000,
        "lr_max": 1e-3,
        "warmup_steps": 750,
        "min_lr": 1e-5,
        "weight_decay": 0.1,
        "grad_clip": 0.0,
        "eval_interval": 2500,
        "patience": 0,
    },
    "bins": [10],
    "fixed_sigma_ablation": False,
    "fixed_sigma": 1.0,
    "seed_points": 5,
    "seed": 0,
}

OSCILLATOR_PRESETS = {
    "default": _OSC_BASE,
    "full": _deep_update(_OSC_BASE, {"bins": [10, 100], "fixed_sigma_ablation": True}),
    "smoke": _deep_update(
        _OSC_BASE,
        {
            "model": {"d_e": 16, "n_head": 2, "n_layer": 1},
            "train": {"max_steps": 20, "warmup_steps": 2, "eval_interval": 10},
        },
    ),
}

_CAL_BASE = {
    "model": {"d_e": 32, "n_head": 2, "n_layer": 2, "context": 64, "dropout": 0.0},
    "train": {
        "max_steps": 3000,
        "batch_tokens": 1024,
        "lr_max": 1e-3,
        "warmup_steps": 100,
        "min_lr": 1e-5,
        "weight_decay": 0.1,
        "grad_clip": 1.0,
        "eval_interval": 100,
        "patience": 10,
    },
    "bins": [10, 50],
    "data": {"n_train": 256, "n_val": 16, "n_test": 160, "length": 64, "noise_std": 0.5, "ar_coef": 0.8},
    "seed": 0,
}

CALIBRATION_PRESETS = {
    "default": _CAL_BASE,
    "smoke": _deep_update(
        _CAL_BASE,
        {
            "model": {"d_e": 16, "n_layer": 1},
            "train": {"max_steps": 20, "warmup_steps": 2, "eval_interval": 10},
            "data": {"n_train": 8, "n_val": 2, "n_test": 4},
        },
    ),
}


def resolve_preset(presets: dict, name: str, overrides: Optional[dict] = None) -> dict:
    if name not in presets:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    cfg = _deep_update(presets[name], overrides or {})
    unknown = set(cfg) - set(presets[name])
    if unknown:
        raise DataError(f"unknown experiment config keys: {sorted(unknown)}")
    return cfg


# ---------------------------------------------------------------------------
# shared pieces


@dataclass
class TrainedModel:
    label: str
    model: MultivariateGPT
    history: list
    codec: Optional[DiscreteCodec] = None


def _model_config(cfg: dict, d_c: int, **extra) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "d_c": d_c, "seed": cfg["seed"], **extra})


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})


def fit_multivariate(label, train_seqs, val_seqs, vocab: Vocabulary, cfg: dict, **model_extra) -> TrainedModel:
    model = MultivariateGPT(_model_config(cfg, vocab.d_c, **model_extra), vocab.numeric_mask)
    result = train(train_seqs, model, _train_config(cfg), val_seqs or None)
    logger.info("%s: best val %.4f at step %d", label, result.best_val, result.best_step)
    return TrainedModel(label, model, result.history)


def fit_discrete(label, records, train_seqs, val_seqs, vocab: Vocabulary, n_bins: int, cfg: dict) -> TrainedModel:
    codec = DiscreteCodec(vocab, fit_from_records(records, vocab, n_bins))
    model = MultivariateGPT(_model_config(cfg, codec.d_c), codec.numeric_mask)
    val = [codec.encode(s) for s in val_seqs] if val_seqs else None
    result = train([codec.encode(s) for s in train_seqs], model, _train_config(cfg), val)
    logger.info("%s: best val %.4f at step %d", label, result.best_val, result.best_step)
    return TrainedModel(label, model, result.history, codec)


def save_trained(path: PathLike, tm: TrainedModel, vocab: Vocabulary, meta: dict) -> None:
    kind = "discrete" if tm.codec is not None else "multivariate"
    table = tm.codec.table if tm.codec is not None else None
    save_checkpoint(path, Checkpoint(tm.model, vocab, kind, table, {"label": tm.label, **meta}))


def teacher_forced_report(tm: TrainedModel, seqs: Sequence[TokenSequence], vocab: Vocabulary) -> EvalReport:
    if tm.codec is not None:
        preds = discrete_predictions(tm.model, tm.codec, seqs)
    else:
        preds = multivariate_predictions(tm.model, seqs)
    return build_report(preds, vocab)


def value_track(seq: TokenSequence, vocab: Vocabulary) -> dict[int, list[float]]:
    """Normalized values of each non-time numeric class, in sequence order."""
    out: dict[int, list[float]] = {}
    for tok in seq.tokens:
        if tok.value is not None and tok.class_id != vocab.time_class_id:
            out.setdefault(tok.class_id, []).append(tok.value)
    return out


@dataclass
class Rollout:
    seq_id: str
    generated: TokenSequence
    values: dict = field(default_factory=dict)
    mse: float = math.nan
    n_missing: int = 0


def rollout(tm: TrainedModel, seq: TokenSequence, vocab: Vocabulary, n_seed: int) -> Rollout:
    """Max-likelihood continuation of ``seq`` from its first ``n_seed`` time groups.

    The model generates as many tokens as the truth holds after the seed. The
    MSE compares generated and true values per class, in normalized units, in
    order of appearance; values the model failed to emit are filled with its
    last value of that class and counted in ``n_missing``.
    """
    seed = prefix_groups(seq, vocab, n_seed)
    n_new = len(seq) - len(seed)
    if n_new <= 0:
        raise DataError(f"sequence {seq.seq_id!r} has nothing to predict after {n_seed} seed groups")
    opts = SampleOptions(mode="max_likelihood", max_new_tokens=n_new)
    if tm.codec is not None:
        gen = generate(tm.codec.encode(seed), tm.model, opts)
        generated = tm.codec.decode(gen.sequence)
    else:
        generated = generate(seed, tm.model, opts, vocab).sequence
    truth, pred = value_track(seq, vocab), value_track(generated, vocab)
    start = value_track(seed, vocab)
    errs, missing, values = [], 0, {}
    for c, ys in truth.items():
        k = len(start.get(c, []))
        got = pred.get(c, [])[k : len(ys)]
        if len(got) < len(ys) - k:
            missing += len(ys) - k - len(got)
            fill = got[-1] if got else (ys[k - 1] if k else 0.0)
            got = got + [fill] * (len(ys) - k - len(got))
        values[c] = list(ys[:k]) + got
        errs += [(g - y) ** 2 for g, y in zip(got, ys[k:])]
    return Rollout(seq.seq_id, generated, values, float(np.mean(errs)) if errs else math.nan, missing)


def write_rollouts_csv(path: PathLike, rows: Sequence[tuple[str, str, Rollout]]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "split", "seq_id", "mse", "n_missing"])
        for label, split, r in rows:
            w.writerow([label, split, r.seq_id, repr(r.mse), r.n_missing])


def _write_json(path: PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# oscillator reconstruction and generalization


def run_oscillator_experiment(out_dir: PathLike, cfg: dict) -> dict:
    """Train multivariate and discrete models on the oscillator family and roll them out.

    Returns a summary with per-trajectory rollout MSEs for every model.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs, holdout = default_oscillator_family()
    train_recs, hold_recs = gen_oscillator_dataset(specs, holdout, cfg["seed"])
    write_records(out / "train.csv", train_recs)
    write_records(out / "holdout.csv", hold_recs)
    vocab = build_vocabulary(train_recs)
    vocab.save(out / "vocab.json")
    train_seqs = encode_records(train_recs, vocab)
    hold_seqs = encode_records(hold_recs, vocab)

    # training trajectories are the reconstruction targets, so they also serve as validation
    models = [fit_multivariate("multivariate", train_seqs, None, vocab, cfg)]
    if cfg["fixed_sigma_ablation"]:
        models.append(fit_multivariate("fixed_sigma", train_seqs, None, vocab, cfg, fixed_sigma=cfg["fixed_sigma"]))
    for n in cfg["bins"]:
        models.append(fit_discrete(f"discrete_n{n}", train_recs, train_seqs, None, vocab, n, cfg))

    n_seed = cfg["seed_points"]
    rows, reports, summary = [], {}, {"models": {}}
    rollouts: dict[str, dict[str, list[float]]] = {}
    x_id = next(c.class_id for c in vocab.classes if c.is_numeric and c.class_id != vocab.time_class_id)
    for tm in models:
        save_trained(out / f"{tm.label}.ckpt", tm, vocab, {"experiment": "oscillator"})
        write_loss_csv(out / f"loss_{tm.label}.csv", tm.history)
        per_split = {}
        for split, seqs in (("train", train_seqs), ("holdout", hold_seqs)):
            rs = [rollout(tm, s, vocab, n_seed) for s in seqs]
            rows += [(tm.label, split, r) for r in rs]
            per_split[split] = {r.seq_id: r.mse for r in rs}
            rollouts.setdefault(tm.label, {}).update({r.seq_id: r.values[x_id] for r in rs})
            write_tokens(out / f"rollout_{tm.label}_{split}.csv", [r.generated for r in rs], vocab)
        summary["models"][tm.label] = per_split
        reports[tm.label] = teacher_forced_report(tm, hold_seqs, vocab)
    write_rollouts_csv(out / "rollouts.csv", rows)
    write_reports_csv(out / "eval_report.csv", reports)
    _write_json(out / "summary.json", summary)

    truths = {s.seq_id: value_track(s, vocab)[x_id] for s in hold_seqs + train_seqs[:5]}
    plotting.plot_rollouts(out / "rollouts.png", truths, rollouts, n_seed)
    plotting.plot_losses(out / "losses.png", {tm.label: tm.history for tm in models})
    return summary


# ---------------------------------------------------------------------------
# calibration


def run_calibration_experiment(out_dir: PathLike, cfg: dict) -> dict:
    """Coverage and QQ calibration on AR(1) data with known Gaussian noise."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = cfg["data"]
    common = dict(length=d["length"], noise_std=d["noise_std"], ar_coef=d["ar_coef"])
    train_recs = gen_calibration_dataset(d["n_train"], seed=cfg["seed"], prefix="train", **common)
    val_recs = gen_calibration_dataset(d["n_val"], seed=cfg["seed"] + 1, prefix="val", **common)
    test_recs = gen_calibration_dataset(d["n_test"], seed=cfg["seed"] + 2, prefix="test", **common)
    write_records(out / "train.csv", train_recs)
    write_records(out / "test.csv", test_recs)
    vocab = build_vocabulary(train_recs)
    vocab.save(out / "vocab.json")
    train_seqs, val_seqs, test_seqs = (encode_records(r, vocab) for r in (train_recs, val_recs, test_recs))

    models = [fit_multivariate("multivariate", train_seqs, val_seqs, vocab, cfg)]
    for n in cfg["bins"]:
        models.append(fit_discrete(f"discrete_n{n}", train_recs, train_seqs, val_seqs, vocab, n, cfg))

    reports, summary, qq = {}, {}, {}
    y_name = next(c.name for c in vocab.classes if c.is_numeric and c.class_id != vocab.time_class_id)
    for tm in models:
        save_trained(out / f"{tm.label}.ckpt", tm, vocab, {"experiment": "calibration"})
        write_loss_csv(out / f"loss_{tm.label}.csv", tm.history)
        rep = teacher_forced_report(tm, test_seqs, vocab)
        reports[tm.label] = rep
        rep.write_qq_csv(out / f"qq_{tm.label}.csv")
        qq[tm.label] = rep.qq_points
        summary[tm.label] = {
            "coverage_95": rep.coverage_95[y_name],
            "qq_max_deviation": qq_max_deviation(rep.qq_points),
            "value_mse": rep.value_mse,
        }
    write_reports_csv(out / "eval_report.csv", reports)
    _write_json(out / "summary.json", summary)
    plotting.plot_qq(out / "qq.png", qq)
    plotting.plot_losses(out / "losses.png", {tm.label: tm.history for tm in models})
    return summary
