"""Autoregressive generation and conditional value infilling."""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional

import torch
from torch.nn import functional as F

from .errors import DataError, GenerationError
from .model import MultivariateGPT
from .schema import Vocabulary
from .tokenizer import Token, TokenSequence

MAX_TIME_RETRIES = 100


@dataclass
class SampleOptions:
    mode: str = "sample"  # "sample" | "max_likelihood"
    fixed_sigma: Optional[float] = None
    max_new_tokens: int = 100
    stop_condition: str = "token_budget"  # "token_budget" | "elapsed_time"
    time_budget: Optional[float] = None
    temperature: float = 1.0
    rng_seed: int = 0
    # mask the time class right after a time token
    forbid_consecutive_time: bool = False

    def __post_init__(self):
        if self.mode not in ("sample", "max_likelihood"):
            raise DataError(f"mode must be 'sample' or 'max_likelihood', got {self.mode!r}")
        if self.stop_condition not in ("token_budget", "elapsed_time"):
            raise DataError(f"unknown stop_condition {self.stop_condition!r}")
        if not self.temperature > 0:
            raise DataError("temperature must be > 0")
        if self.max_new_tokens <= 0:
            raise DataError("max_new_tokens must be > 0")
        if self.stop_condition == "elapsed_time" and not (self.time_budget and self.time_budget > 0):
            raise DataError("elapsed_time stopping needs a positive time_budget")
        if self.fixed_sigma is not None and not self.fixed_sigma > 0:
            raise DataError("fixed_sigma must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleOptions":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise DataError(f"unknown sample option keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Generation:
    """A generated or infilled sequence plus the head outputs that produced it.

    ``mu``/``sigma`` align with ``sequence.tokens``; entries are ``None`` for
    tokens that were given rather than predicted, and for categorical tokens.
    """

    sequence: TokenSequence
    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    grammar_violations: int = 0


def make_generator(rng_seed: int, seq_id: str = "") -> torch.Generator:
    return torch.Generator().manual_seed(rng_seed * 1_000_003 + zlib.crc32(seq_id.encode("utf-8")))


def sample_class(logits: torch.Tensor, opts: SampleOptions, gen: torch.Generator) -> int:
    if opts.mode == "max_likelihood":
        return int(torch.argmax(logits))
    probs = F.softmax(logits.double() / opts.temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


@torch.no_grad()
def next_head(model: MultivariateGPT, tokens: list[Token]):
    """Head outputs predicting the token after ``tokens`` (last ``context`` tokens used)."""
    window = tokens[-model.config.context :]
    dtype = model.class_emb.weight.dtype
    ids = torch.tensor([[t.class_id for t in window]], dtype=torch.long)
    vals = torch.tensor([[0.0 if t.value is None else t.value for t in window]], dtype=dtype)
    logits, mu, sigma = model(ids, vals)
    return logits[0, -1].double(), mu[0, -1].double(), sigma[0, -1].double()


def _draw_value(c, mu, sigma, opts, gen, vocab: Optional[Vocabulary]) -> float:
    m, s = float(mu[c]), float(sigma[c])
    is_time = vocab is not None and c == vocab.time_class_id
    if opts.mode == "max_likelihood":
        if is_time and not vocab.time_class.norm.inverse(m) > 0:
            raise GenerationError(f"most likely time delta {vocab.time_class.norm.inverse(m)} is not positive")
        return m
    for _ in range(MAX_TIME_RETRIES if is_time else 1):
        v = m + s * float(torch.randn((), generator=gen, dtype=torch.float64))
        if not is_time or vocab.time_class.norm.inverse(v) > 0:
            return v
    raise GenerationError(f"no positive time delta after {MAX_TIME_RETRIES} draws (mu={m}, sigma={s})")


@torch.no_grad()
def generate(
    seed: TokenSequence,
    model: MultivariateGPT,
    opts: SampleOptions,
    vocab: Optional[Vocabulary] = None,
) -> Generation:
    """Extend ``seed`` token by token.

    When the sequence outgrows the context, only the most recent ``context``
    tokens are fed to the model. Time-class values are redrawn until their
    denormalized delta is positive; this needs ``vocab``.
    """
    if not 1 <= len(seed) <= model.config.context:
        raise DataError(f"seed length {len(seed)} must lie in [1, {model.config.context}]")
    model.eval()
    gen = make_generator(opts.rng_seed, seed.seq_id)
    numeric = model.numeric_mask > 0
    time_id = vocab.time_class_id if vocab is not None else None
    tokens = list(seed.tokens)
    mus: list = [None] * len(tokens)
    sigmas: list = [None] * len(tokens)
    elapsed = 0.0
    violations = 0
    for _ in range(opts.max_new_tokens):
        logits, mu, sigma = next_head(model, tokens)
        if opts.fixed_sigma is not None:
            sigma = torch.full_like(sigma, opts.fixed_sigma)
        last_is_time = time_id is not None and tokens[-1].class_id == time_id
        if opts.forbid_consecutive_time and last_is_time:
            logits = logits.clone()
            logits[time_id] = -math.inf
        c = sample_class(logits, opts, gen)
        if c == time_id and last_is_time:
            violations += 1
        if numeric[c]:
            v = _draw_value(c, mu, sigma, opts, gen, vocab)
            tokens.append(Token(c, v))
            mus.append(float(mu[c]))
            sigmas.append(float(sigma[c]))
        else:
            tokens.append(Token(c))
            mus.append(None)
            sigmas.append(None)
        if c == time_id:
            elapsed += vocab.time_class.norm.inverse(tokens[-1].value)
            if opts.stop_condition == "elapsed_time" and elapsed >= opts.time_budget:
                break
    return Generation(seed.with_tokens(tokens), mus, sigmas, violations)


@torch.no_grad()
def infill_values(
    sequence: TokenSequence,
    mask: Iterable[int],
    model: MultivariateGPT,
    opts: SampleOptions,
    vocab: Optional[Vocabulary] = None,
) -> Generation:
    """Replace the values at ``mask`` positions left to right.

    Each masked value is predicted from everything before it, using the values
    already filled in at earlier masked positions. Classes never change.
    """
    model.eval()
    positions = sorted(set(mask))
    tokens = list(sequence.tokens)
    mus: list = [None] * len(tokens)
    sigmas: list = [None] * len(tokens)
    numeric = model.numeric_mask > 0
    for k in positions:
        if not 0 <= k < len(tokens):
            raise DataError(f"mask position {k} outside sequence of length {len(tokens)}")
        if not numeric[tokens[k].class_id]:
            raise DataError(f"mask position {k} holds a categorical token")
        if k == 0:
            raise DataError("the first token has no context to infill from")
    gen = make_generator(opts.rng_seed, sequence.seq_id)
    for k in positions:
        c = tokens[k].class_id
        _, mu, sigma = next_head(model, tokens[:k])
        if opts.fixed_sigma is not None:
            sigma = torch.full_like(sigma, opts.fixed_sigma)
        v = _draw_value(c, mu, sigma, opts, gen, vocab)
        tokens[k] = Token(c, v)
        mus[k], sigmas[k] = float(mu[c]), float(sigma[c])
    return Generation(sequence.with_tokens(tokens), mus, sigmas, 0)
