"""Training loop: windowed batches, warm-up + cosine schedule, AdamW, early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch

from .errors import DataError, NumericalError
from .loss import batch_loss
from .model import MultivariateGPT
from .tokenizer import TokenSequence

logger = logging.getLogger(__name__)

LOSS_HEADER = ("step", "split", "class_loss", "value_loss", "total")


@dataclass
class TrainConfig:
    max_steps: int = 2000
    batch_tokens: int = 1024
    lr_max: float = 1e-3
    warmup_steps: int = 100
    min_lr: float = 1e-4
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    eval_interval: int = 100
    patience: int = 10
    seed: int = 0
    value_weight: float = 1.0

    def __post_init__(self):
        if self.max_steps <= 0:
            raise DataError("max_steps must be > 0")
        if not 0 <= self.warmup_steps < self.max_steps:
            raise DataError("warmup_steps must satisfy 0 <= warmup_steps < max_steps")
        for name in ("lr_max", "min_lr", "weight_decay", "grad_clip", "value_weight"):
            if getattr(self, name) < 0:
                raise DataError(f"TrainConfig.{name} must be >= 0")
        if self.eval_interval <= 0:
            raise DataError("eval_interval must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``lr_max``, cosine decay to ``min_lr`` at ``max_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    if step >= cfg.max_steps:
        return cfg.min_lr
    progress = (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (1.0 + math.cos(math.pi * progress)) * (cfg.lr_max - cfg.min_lr)


@dataclass
class Windows:
    ids: torch.Tensor  # (N, context + 1) long
    values: torch.Tensor  # (N, context + 1) float
    valid: torch.Tensor  # (N, context + 1) bool

    def __len__(self) -> int:
        return self.ids.size(0)


def window_bounds(length: int, context: int) -> list[tuple[int, int]]:
    """``[start, end)`` token ranges of ``context + 1`` tokens with 50% overlap."""
    width = context + 1
    if length <= width:
        return [(0, length)]
    stride = max(1, context // 2)
    starts = list(range(0, length - width + 1, stride))
    if starts[-1] + width < length:
        starts.append(length - width)
    return [(s, s + width) for s in starts]


def make_windows(dataset: Sequence[TokenSequence], context: int) -> Windows:
    """Chunk sequences into right-padded training windows."""
    width = context + 1
    rows = []
    for seq in dataset:
        if len(seq) < 2:
            continue
        for s, e in window_bounds(len(seq), context):
            rows.append(seq.tokens[s:e])
    if not rows:
        raise DataError("no sequence has the two tokens needed for a next-token target")
    ids = torch.zeros(len(rows), width, dtype=torch.long)
    vals = torch.zeros(len(rows), width, dtype=torch.float32)
    valid = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, toks in enumerate(rows):
        n = len(toks)
        ids[i, :n] = torch.tensor([t.class_id for t in toks])
        vals[i, :n] = torch.tensor([0.0 if t.value is None else t.value for t in toks])
        valid[i, :n] = True
    return Windows(ids, vals, valid)


def window_loss(model: MultivariateGPT, w: Windows, idx, value_weight: float):
    ids, vals, valid = w.ids[idx], w.values[idx], w.valid[idx]
    logits, mu, sigma = model(ids[:, :-1], vals[:, :-1])
    return batch_loss(logits, mu, sigma, ids[:, 1:], vals[:, 1:], model.numeric_mask, valid[:, 1:], value_weight)


@torch.no_grad()
def evaluate_loss(model: MultivariateGPT, w: Windows, value_weight: float, batch_size: int = 64):
    """Token-weighted mean ``(class_loss, value_loss, total)`` over all windows."""
    was_training = model.training
    model.eval()
    sums = [0.0, 0.0]
    count = 0
    for start in range(0, len(w), batch_size):
        idx = torch.arange(start, min(start + batch_size, len(w)))
        lb = window_loss(model, w, idx, value_weight)
        sums[0] += float(lb.class_loss) * lb.token_count
        sums[1] += float(lb.value_loss) * lb.token_count
        count += lb.token_count
    model.train(was_training)
    c, v = sums[0] / count, sums[1] / count
    return c, v, c + v


def param_groups(model: MultivariateGPT, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if p.dim() >= 2 and not name.startswith(("class_emb", "pos_emb")):
            decay.append(p)
        else:
            no_decay.append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def make_optimizer(model: MultivariateGPT, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(param_groups(model, cfg.weight_decay), lr=cfg.lr_max, betas=(0.9, 0.95), eps=1e-8)


@dataclass
class TrainResult:
    history: list[tuple] = field(default_factory=list)
    best_val: float = math.inf
    best_step: int = -1
    steps_run: int = 0
    stopped_early: bool = False

    def val_losses(self) -> list[float]:
        return [row[4] for row in self.history if row[1] == "val"]


def train(
    dataset: Sequence[TokenSequence],
    model: MultivariateGPT,
    cfg: TrainConfig,
    val_dataset: Optional[Sequence[TokenSequence]] = None,
    on_improve: Optional[Callable[[MultivariateGPT, int, float], None]] = None,
) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-validation weights.

    Validation falls back to the training windows when ``val_dataset`` is not
    given. ``on_improve(model, step, val_loss)`` fires whenever the validation
    loss reaches a new minimum, e.g. to write a checkpoint.
    """
    if not dataset:
        raise DataError("training dataset is empty")
    context = model.config.context
    if cfg.batch_tokens < context:
        raise DataError(f"batch_tokens={cfg.batch_tokens} must be >= context={context}")
    train_w = make_windows(dataset, context)
    val_w = make_windows(val_dataset, context) if val_dataset else train_w
    batch_size = cfg.batch_tokens // context

    result = TrainResult()
    best_state = None
    bad_evals = 0
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        gen = torch.Generator().manual_seed(cfg.seed)
        opt = make_optimizer(model, cfg)
        params = [p for p in model.parameters() if p.requires_grad]
        model.train()
        for step in range(cfg.max_steps):
            lr = lr_schedule(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            idx = torch.randint(len(train_w), (batch_size,), generator=gen)
            lb = window_loss(model, train_w, idx, cfg.value_weight)
            if not torch.isfinite(lb.total):
                raise NumericalError(f"non-finite loss at step {step} (lr={lr:.3g})")
            opt.zero_grad(set_to_none=True)
            lb.total.backward()
            if cfg.grad_clip > 0:
                gnorm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            else:
                gnorm = torch.linalg.vector_norm(torch.stack([p.grad.norm() for p in params if p.grad is not None]))
            if not torch.isfinite(gnorm):
                raise NumericalError(f"non-finite gradient norm at step {step} (lr={lr:.3g}, grad_norm={float(gnorm)})")
            opt.step()
            result.history.append((step, "train", *lb.floats()))
            result.steps_run = step + 1

            if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.max_steps:
                c, v, total = evaluate_loss(model, val_w, cfg.value_weight)
                if not math.isfinite(total):
                    raise NumericalError(f"non-finite validation loss at step {step} (lr={lr:.3g}, grad_norm={float(gnorm):.3g})")
                result.history.append((step, "val", c, v, total))
                logger.info("step %d lr %.2e train %.4f val %.4f", step, lr, float(lb.total.detach()), total)
                if total < result.best_val:
                    result.best_val, result.best_step = total, step
                    best_state = copy.deepcopy(model.state_dict())
                    bad_evals = 0
                    if on_improve is not None:
                        on_improve(model, step, total)
                else:
                    bad_evals += 1
                    if cfg.patience > 0 and bad_evals >= cfg.patience:
                        result.stopped_early = True
                        break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def write_loss_csv(path: Union[str, Path], history: Sequence[tuple]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_HEADER)
        for step, split, c, v, t in history:
            w.writerow([step, split, repr(c), repr(v), repr(t)])
