"""Command-line interface.

Settings are layered: built-in defaults, then a JSON ``--config`` file, then
command-line flags. The fully resolved settings are written to
``<out>/config.json``, which can be passed back as ``--config`` to repeat a
run. The output directory defaults to ``$MVGPT_OUT`` (or ``./mvgpt_out``).

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
failure. Every error is reported on stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiments
from .baseline import DiscreteCodec, fit_from_records
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import DataError, GenerationError, NumericalError
from .metrics import build_report, discrete_predictions, multivariate_predictions
from .model import ModelConfig, MultivariateGPT
from .sampler import SampleOptions, generate, infill_values
from .schema import Vocabulary, build_vocabulary
from .tokenizer import (
    decode_sequence,
    encode_records,
    group_starts,
    prefix_groups,
    read_records,
    write_records,
    write_tokens,
)
from .training import TrainConfig, train, write_loss_csv

OUT_ENV = "MVGPT_OUT"
DEFAULT_OUT = "mvgpt_out"

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config layering


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    return cfg


def _check_keys(cfg: dict, allowed: set, where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise DataError(f"unknown keys in {where}: {sorted(unknown)}")


def _out_dir(args, cfg: dict) -> Path:
    out = args.out or cfg.get("out") or os.environ.get(OUT_ENV) or DEFAULT_OUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(out: Path, resolved: dict) -> None:
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(value, flag: str):
    if value in (None, ""):
        raise UsageError(f"{flag} is required")
    return value


def _existing(path, flag: str) -> Path:
    p = Path(_require(path, flag))
    if not p.is_file():
        raise DataError(f"{flag} {p} does not exist")
    return p


# ---------------------------------------------------------------------------
# commands


def _vocab_options(cfg: dict) -> dict:
    v = cfg.get("vocab", {})
    _check_keys(v, {"normalization", "time_transform", "ordered_classes", "categorical"}, "vocab config")
    return v


def _build_vocab(records, cfg: dict) -> Vocabulary:
    v = _vocab_options(cfg)
    return build_vocabulary(
        records,
        v.get("normalization"),
        time_transform=v.get("time_transform", "zscore"),
        ordered_classes=v.get("ordered_classes", ()),
    )


def _records(path: Path, cfg: dict):
    return read_records(path, _vocab_options(cfg).get("categorical", ()))


def cmd_prep(args, cfg: dict) -> dict:
    _check_keys(cfg, {"command", "data", "out", "vocab"}, "config")
    data = _existing(args.data or cfg.get("data"), "--data")
    out = _out_dir(args, cfg)
    records = _records(data, cfg)
    vocab = _build_vocab(records, cfg)
    vocab.save(out / "vocab.json")
    write_tokens(out / "tokens.csv", encode_records(records, vocab), vocab)
    return {"command": "prep", "data": str(data), "out": str(out), "vocab": _vocab_options(cfg)}


def _training_inputs(args, cfg: dict, extra_keys: set):
    _check_keys(cfg, {"command", "data", "val_data", "out", "vocab", "model", "train", "seed"} | extra_keys, "config")
    data = _existing(args.data or cfg.get("data"), "--data")
    val_path = args.val_data or cfg.get("val_data")
    val = _existing(val_path, "--val-data") if val_path else None
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    return data, val, seed


def _fit(seqs, val_seqs, numeric_mask, d_c, cfg, seed):
    mcfg = ModelConfig.from_dict({**cfg.get("model", {}), "d_c": d_c, "seed": seed})
    tcfg = TrainConfig.from_dict({**cfg.get("train", {}), "seed": seed})
    model = MultivariateGPT(mcfg, numeric_mask)
    result = train(seqs, model, tcfg, val_seqs)
    return model, result, mcfg, tcfg


def cmd_train(args, cfg: dict) -> dict:
    data, val, seed = _training_inputs(args, cfg, set())
    out = _out_dir(args, cfg)
    records = _records(data, cfg)
    vocab = _build_vocab(records, cfg)
    seqs = encode_records(records, vocab)
    val_seqs = encode_records(_records(val, cfg), vocab) if val else None
    model, result, mcfg, tcfg = _fit(seqs, val_seqs, vocab.numeric_mask, vocab.d_c, cfg, seed)
    vocab.save(out / "vocab.json")
    save_checkpoint(out / "model.ckpt", Checkpoint(model, vocab, "multivariate", None, {"best_step": result.best_step}))
    write_loss_csv(out / "loss.csv", result.history)
    model_cfg = {k: v for k, v in mcfg.to_dict().items() if k not in ("d_c", "seed")}
    train_cfg = {k: v for k, v in tcfg.to_dict().items() if k != "seed"}
    resolved = {"command": "train", "data": str(data), "out": str(out), "seed": seed}
    resolved.update(vocab=_vocab_options(cfg), model=model_cfg, train=train_cfg)
    if val:
        resolved["val_data"] = str(val)
    return resolved


def cmd_train_discrete(args, cfg: dict) -> dict:
    data, val, seed = _training_inputs(args, cfg, {"bins"})
    n_bins = args.bins if args.bins is not None else cfg.get("bins", 10)
    if not isinstance(n_bins, int) or n_bins < 1:
        raise DataError(f"bins must be a positive integer, got {n_bins!r}")
    out = _out_dir(args, cfg)
    records = _records(data, cfg)
    vocab = _build_vocab(records, cfg)
    codec = DiscreteCodec(vocab, fit_from_records(records, vocab, n_bins))
    seqs = [codec.encode(s) for s in encode_records(records, vocab)]
    val_seqs = [codec.encode(s) for s in encode_records(_records(val, cfg), vocab)] if val else None
    model, result, mcfg, tcfg = _fit(seqs, val_seqs, codec.numeric_mask, codec.d_c, cfg, seed)
    vocab.save(out / "vocab.json")
    codec.table.write_csv(out / "bins.csv")
    save_checkpoint(out / "model.ckpt", Checkpoint(model, vocab, "discrete", codec.table, {"best_step": result.best_step}))
    write_loss_csv(out / "loss.csv", result.history)
    model_cfg = {k: v for k, v in mcfg.to_dict().items() if k not in ("d_c", "seed")}
    train_cfg = {k: v for k, v in tcfg.to_dict().items() if k != "seed"}
    resolved = {"command": "train-discrete", "data": str(data), "out": str(out), "seed": seed, "bins": n_bins}
    resolved.update(vocab=_vocab_options(cfg), model=model_cfg, train=train_cfg)
    if val:
        resolved["val_data"] = str(val)
    return resolved


def _load(args, cfg):
    ckpt_path = _existing(args.checkpoint or cfg.get("checkpoint"), "--checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    codec = DiscreteCodec(ckpt.vocab, ckpt.bin_table) if ckpt.kind == "discrete" else None
    return ckpt_path, ckpt, codec


def _sample_options(args, cfg: dict, seed: int) -> SampleOptions:
    opts = dict(cfg.get("sample", {}))
    if args.mode is not None:
        opts["mode"] = args.mode
    if getattr(args, "max_new_tokens", None) is not None:
        opts["max_new_tokens"] = args.max_new_tokens
    opts["rng_seed"] = seed
    return SampleOptions.from_dict(opts)


def _write_generation(out: Path, stem: str, gens, vocab: Vocabulary) -> None:
    write_tokens(out / f"{stem}_tokens.csv", [g.sequence for g in gens], vocab, mus=[g.mu for g in gens], sigmas=[g.sigma for g in gens])
    records = []
    for g in gens:
        records += decode_sequence(g.sequence, vocab)
    write_records(out / f"{stem}.csv", records)


def _seed_points(args, cfg: dict) -> int:
    k = args.seed_points if args.seed_points is not None else cfg.get("seed_points", 5)
    if not isinstance(k, int) or k < 1:
        raise DataError(f"seed points must be a positive integer, got {k!r}")
    return k


def cmd_generate(args, cfg: dict) -> dict:
    _check_keys(cfg, {"command", "data", "out", "checkpoint", "seed", "seed_points", "sample"}, "config")
    data = _existing(args.data or cfg.get("data"), "--data")
    ckpt_path, ckpt, codec = _load(args, cfg)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    k = _seed_points(args, cfg)
    opts = _sample_options(args, cfg, seed)
    out = _out_dir(args, cfg)
    vocab = ckpt.vocab
    categorical = [c.raw_name for c in vocab.classes if not c.is_numeric]
    gens = []
    for seq in encode_records(read_records(data, categorical), vocab):
        prefix = prefix_groups(seq, vocab, k)
        if codec is not None:
            g = generate(codec.encode(prefix), ckpt.model, opts)
            g.sequence = codec.decode(g.sequence)
        else:
            g = generate(prefix, ckpt.model, opts, vocab)
        gens.append(g)
    _write_generation(out, "generated", gens, vocab)
    resolved = {"command": "generate", "data": str(data), "out": str(out), "checkpoint": str(ckpt_path)}
    resolved.update(seed=seed, seed_points=k, sample={k_: v for k_, v in opts.to_dict().items() if k_ != "rng_seed"})
    return resolved


def cmd_infill(args, cfg: dict) -> dict:
    _check_keys(cfg, {"command", "data", "out", "checkpoint", "seed", "seed_points", "sample", "classes"}, "config")
    data = _existing(args.data or cfg.get("data"), "--data")
    ckpt_path, ckpt, codec = _load(args, cfg)
    if codec is not None:
        raise DataError("infill needs a multivariate checkpoint")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    k = _seed_points(args, cfg)
    opts = _sample_options(args, cfg, seed)
    out = _out_dir(args, cfg)
    vocab = ckpt.vocab
    targets = args.classes or cfg.get("classes") or [c.name for c in vocab.classes if c.is_numeric and c.class_id != vocab.time_class_id]
    ids = {vocab.by_name(name).class_id for name in targets}
    if any(not vocab[c].is_numeric for c in ids):
        raise DataError("infill classes must be numeric")
    categorical = [c.raw_name for c in vocab.classes if not c.is_numeric]
    gens = []
    for seq in encode_records(read_records(data, categorical), vocab):
        starts = group_starts(seq, vocab)
        first = starts[k] if k < len(starts) else len(seq)
        mask = [i for i in range(max(first, 1), len(seq)) if seq.tokens[i].class_id in ids]
        gens.append(infill_values(seq, mask, ckpt.model, opts, vocab))
    _write_generation(out, "infilled", gens, vocab)
    resolved = {"command": "infill", "data": str(data), "out": str(out), "checkpoint": str(ckpt_path)}
    resolved.update(seed=seed, seed_points=k, classes=sorted(targets), sample={k_: v for k_, v in opts.to_dict().items() if k_ != "rng_seed"})
    return resolved


def cmd_eval(args, cfg: dict) -> dict:
    _check_keys(cfg, {"command", "data", "out", "checkpoint"}, "config")
    data = _existing(args.data or cfg.get("data"), "--data")
    ckpt_path, ckpt, codec = _load(args, cfg)
    out = _out_dir(args, cfg)
    vocab = ckpt.vocab
    categorical = [c.raw_name for c in vocab.classes if not c.is_numeric]
    seqs = encode_records(read_records(data, categorical), vocab)
    preds = discrete_predictions(ckpt.model, codec, seqs) if codec else multivariate_predictions(ckpt.model, seqs)
    report = build_report(preds, vocab)
    report.write_csv(out / "eval_report.csv", ckpt.kind)
    if report.qq_points:
        report.write_qq_csv(out / "qq.csv")
    print(report.summary())
    return {"command": "eval", "data": str(data), "out": str(out), "checkpoint": str(ckpt_path)}


def _experiment(args, cfg: dict, presets: dict, runner, name: str) -> dict:
    allowed = {"command", "out", "preset"} | set(next(iter(presets.values())))
    _check_keys(cfg, allowed, "config")
    preset = args.preset or cfg.get("preset", "default")
    overrides = {k: v for k, v in cfg.items() if k not in ("command", "out", "preset")}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.bins:
        overrides["bins"] = list(args.bins)
    if getattr(args, "seed_points", None) is not None:
        overrides["seed_points"] = args.seed_points
    resolved = experiments.resolve_preset(presets, preset, overrides)
    out = _out_dir(args, cfg)
    _echo_config(out, {"command": name, "out": str(out), "preset": preset, **resolved})
    summary = runner(out, resolved)
    print(json.dumps(summary, sort_keys=True))
    return {"command": name, "out": str(out), "preset": preset, **resolved}


def cmd_oscillator(args, cfg):
    return _experiment(args, cfg, experiments.OSCILLATOR_PRESETS, experiments.run_oscillator_experiment, "oscillator-experiment")


def cmd_calibration(args, cfg):
    return _experiment(args, cfg, experiments.CALIBRATION_PRESETS, experiments.run_calibration_experiment, "calibration-experiment")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvgpt", description="Class-value transformer for mixed event sequences.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
        for flag in flags:
            flag(p)
        p.set_defaults(func=func)
        return p

    data = lambda p: p.add_argument("--data", help="records CSV or JSONL")
    val = lambda p: p.add_argument("--val-data", help="validation records for early stopping")
    ckpt = lambda p: p.add_argument("--checkpoint", help="model checkpoint")
    seed = lambda p: p.add_argument("--seed", type=int, help="random seed")
    kpts = lambda p: p.add_argument("--seed-points", type=int, help="leading time groups used as the prompt (default 5)")
    mode = lambda p: p.add_argument("--mode", choices=["sample", "max_likelihood"], help="decoding mode")
    new = lambda p: p.add_argument("--max-new-tokens", type=int, help="generation token budget")
    preset = lambda p: p.add_argument("--preset", help="named experiment preset")
    bins_many = lambda p: p.add_argument("--bins", type=int, nargs="+", help="quantile bin counts of the discrete baselines")

    add("prep", cmd_prep, "fit a vocabulary and dump tokens", data)
    add("train", cmd_train, "train the multivariate model", data, val, seed)
    add("train-discrete", cmd_train_discrete, "train the quantile-bin baseline", data, val, seed,
        lambda p: p.add_argument("--bins", type=int, help="bins per numeric class (default 10)"))
    add("generate", cmd_generate, "continue sequences from their first groups", data, ckpt, seed, kpts, mode, new)
    add("infill", cmd_infill, "re-predict values after the seed groups", data, ckpt, seed, kpts, mode,
        lambda p: p.add_argument("--classes", nargs="+", help="classes whose values are infilled (default: all numeric)"))
    add("eval", cmd_eval, "teacher-forced evaluation report", data, ckpt)
    add("oscillator-experiment", cmd_oscillator, "oscillator reconstruction and generalization", preset, seed, kpts, bins_many)
    add("calibration-experiment", cmd_calibration, "coverage and QQ calibration", preset, seed, bins_many)
    return parser


def _fail(kind: str, code: int, message: str) -> int:
    line = json.dumps({"error": kind, "exit_code": code, "message": " ".join(str(message).split())})
    print(line, file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(message)s")
        cfg = _load_config(args.config)
        if cfg.get("command", args.command) != args.command:
            raise DataError(f"config was written by {cfg['command']!r}, not {args.command!r}")
        resolved = args.func(args, cfg)
        _echo_config(Path(resolved["out"]), resolved)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (NumericalError, GenerationError) as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)
    except (DataError, ValueError, OSError) as exc:
        return _fail("data", EXIT_DATA, exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
