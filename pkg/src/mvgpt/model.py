"""Decoder-only transformer over class-value tokens.

Token embedding is ``E[c] + positional[t]`` for categorical classes and
``E[c] + value_map(v) + positional[t]`` for numeric ones. The final hidden
state feeds a class head (next-class logits) and a value head that emits a
Gaussian mean and a softplus-positive standard deviation for every class.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.nn import functional as F

from .errors import DataError
from .tokenizer import TokenSequence

SIGMA_FLOOR = 1e-4
# softplus(SIGMA_BIAS_INIT) == 1
SIGMA_BIAS_INIT = math.log(math.e - 1.0)


@dataclass
class ModelConfig:
    d_e: int = 128
    n_head: int = 4
    n_layer: int = 4
    context: int = 64
    d_c: int = 2
    dropout: float = 0.0
    value_map_hidden: int = 32
    seed: int = 0
    # replaces the learned sigma with a constant (fixed-variance ablation)
    fixed_sigma: Optional[float] = None

    def __post_init__(self):
        for name in ("d_e", "n_head", "n_layer", "context", "d_c", "value_map_hidden"):
            if getattr(self, name) <= 0:
                raise DataError(f"ModelConfig.{name} must be > 0")
        if self.d_e % self.n_head:
            raise DataError(f"d_e={self.d_e} is not divisible by n_head={self.n_head}")
        if self.context < 2:
            raise DataError("context must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError("dropout must lie in [0, 1)")
        if self.fixed_sigma is not None and not self.fixed_sigma > 0:
            raise DataError("fixed_sigma must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PredictionHeadOutput:
    class_probs: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.c_attn = nn.Linear(cfg.d_e, 3 * cfg.d_e)
        self.c_proj = nn.Linear(cfg.d_e, cfg.d_e)
        self.attn_dropout = nn.Dropout(cfg.dropout)
        self.resid_dropout = nn.Dropout(cfg.dropout)
        self.n_head = cfg.n_head
        self.d_e = cfg.d_e
        mask = torch.tril(torch.ones(cfg.context, cfg.context, dtype=torch.bool))
        self.register_buffer("mask", mask.view(1, 1, cfg.context, cfg.context), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.size()
        q, k, v = self.c_attn(x).split(self.d_e, dim=2)
        k = k.view(B, T, self.n_head, C // self.n_head).transpose(1, 2)
        q = q.view(B, T, self.n_head, C // self.n_head).transpose(1, 2)
        v = v.view(B, T, self.n_head, C // self.n_head).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(k.size(-1)))
        att = att.masked_fill(~self.mask[:, :, :T, :T], float("-inf"))
        att = self.attn_dropout(F.softmax(att, dim=-1))
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.resid_dropout(self.c_proj(y))


class MLP(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.c_fc = nn.Linear(cfg.d_e, 4 * cfg.d_e)
        self.c_proj = nn.Linear(4 * cfg.d_e, cfg.d_e)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x):
        return self.dropout(self.c_proj(F.gelu(self.c_fc(x))))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.d_e)
        self.attn = CausalSelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.d_e)
        self.mlp = MLP(cfg)

    def forward(self, x):
        x = x + self.attn(self.ln_1(x))
        return x + self.mlp(self.ln_2(x))


class MultivariateGPT(nn.Module):
    """Transformer with a class head and a per-class Gaussian value head.

    ``numeric_mask`` flags which classes carry a value; it gates the value
    map on input and the value loss on output.
    """

    def __init__(self, config: ModelConfig, numeric_mask: Sequence[bool]):
        super().__init__()
        if len(numeric_mask) != config.d_c:
            raise DataError(f"numeric_mask has {len(numeric_mask)} entries, expected d_c={config.d_c}")
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.class_emb = nn.Embedding(config.d_c, config.d_e)
            self.pos_emb = nn.Embedding(config.context, config.d_e)
            self.value_map = nn.Sequential(
                nn.Linear(1, config.value_map_hidden),
                nn.GELU(),
                nn.Linear(config.value_map_hidden, config.d_e),
            )
            self.drop = nn.Dropout(config.dropout)
            self.blocks = nn.ModuleList(Block(config) for _ in range(config.n_layer))
            self.ln_f = nn.LayerNorm(config.d_e)
            self.class_head = nn.Linear(config.d_e, config.d_c)
            self.value_head = nn.Linear(config.d_e, 2 * config.d_c)
            self._init_weights()
        self.register_buffer("numeric_mask", torch.tensor(list(numeric_mask), dtype=torch.float32))

    def _init_weights(self):
        for name, p in self.named_parameters():
            if name.startswith("value_map"):
                continue  # default init keeps the value signal O(1)
            if name.endswith("bias"):
                nn.init.zeros_(p)
            elif p.dim() >= 2:
                std = 0.02
                if name.endswith("c_proj.weight"):
                    std = 0.02 / math.sqrt(2 * self.config.n_layer)
                nn.init.normal_(p, mean=0.0, std=std)
        with torch.no_grad():
            self.value_head.bias[self.config.d_c:] = SIGMA_BIAS_INIT

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def embed(self, class_ids: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
        """Token plus positional embedding, shape ``(B, T, d_e)``."""
        T = class_ids.size(1)
        if T > self.config.context:
            raise DataError(f"sequence length {T} exceeds context {self.config.context}")
        pos = torch.arange(T, device=class_ids.device)
        gate = self.numeric_mask[class_ids].unsqueeze(-1).to(self.class_emb.weight.dtype)
        vals = values.to(self.class_emb.weight.dtype).unsqueeze(-1)
        return self.class_emb(class_ids) + gate * self.value_map(vals) + self.pos_emb(pos)

    def forward(self, class_ids: torch.Tensor, values: torch.Tensor):
        """Return ``(logits, mu, sigma)``, each of shape ``(B, T, d_c)``."""
        if class_ids.dim() != 2 or class_ids.size(1) == 0:
            raise DataError("forward needs a non-empty (batch, time) input")
        x = self.drop(self.embed(class_ids, values))
        for block in self.blocks:
            x = block(x)
        h = self.ln_f(x)
        logits = self.class_head(h)
        mu, raw = self.value_head(h).split(self.config.d_c, dim=-1)
        if self.config.fixed_sigma is not None:
            sigma = torch.full_like(mu, self.config.fixed_sigma)
        else:
            sigma = F.softplus(raw).clamp_min(SIGMA_FLOOR)
        return logits, mu, sigma


def expected_num_parameters(cfg: ModelConfig) -> int:
    """Analytic parameter count from the layer shapes."""
    d, h, c = cfg.d_e, cfg.value_map_hidden, cfg.d_c
    embeddings = c * d + cfg.context * d
    value_map = (1 * h + h) + (h * d + d)
    block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d)
    heads = 2 * d + (d * c + c) + (d * 2 * c + 2 * c)
    return embeddings + value_map + cfg.n_layer * block + heads


@torch.no_grad()
def embed_token(model: MultivariateGPT, tok, position: int) -> torch.Tensor:
    """Embedding vector of a single token placed at ``position``."""
    if not 0 <= position < model.config.context:
        raise DataError(f"position {position} outside context {model.config.context}")
    out = model.class_emb.weight[tok.class_id] + model.pos_emb.weight[position]
    if model.numeric_mask[tok.class_id] > 0:
        v = torch.tensor([float(tok.value)], dtype=model.class_emb.weight.dtype)
        out = out + model.value_map(v)
    return out


def sequence_tensors(seq: TokenSequence, dtype=torch.float32):
    ids = torch.tensor([t.class_id for t in seq.tokens], dtype=torch.long).unsqueeze(0)
    vals = torch.tensor(seq.values, dtype=dtype).unsqueeze(0)
    return ids, vals


@torch.no_grad()
def predict(model: MultivariateGPT, seq: TokenSequence) -> list[PredictionHeadOutput]:
    """Eval-mode head outputs for every position of ``seq`` (one per token)."""
    if len(seq) == 0:
        raise DataError("cannot run the model on an empty sequence")
    if len(seq) > model.config.context:
        raise DataError(f"sequence length {len(seq)} exceeds context {model.config.context}")
    was_training = model.training
    model.eval()
    try:
        ids, vals = sequence_tensors(seq, model.class_emb.weight.dtype)
        logits, mu, sigma = model(ids, vals)
        probs = F.softmax(logits.double(), dim=-1)
    finally:
        model.train(was_training)
    return [
        PredictionHeadOutput(probs[0, t].numpy(), mu[0, t].double().numpy(), sigma[0, t].double().numpy())
        for t in range(len(seq))
    ]
