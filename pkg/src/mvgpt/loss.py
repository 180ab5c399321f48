"""Joint negative log-likelihood of the next token's class and value."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
from torch.nn import functional as F

from .errors import DataError
from .model import PredictionHeadOutput
from .tokenizer import Token

LOG_EPS = 1e-12
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class LossBreakdown:
    class_loss: torch.Tensor
    value_loss: torch.Tensor
    total: torch.Tensor
    token_count: int

    def floats(self) -> tuple[float, float, float]:
        return float(self.class_loss.detach()), float(self.value_loss.detach()), float(self.total.detach())


def gaussian_nll(v, mu, sigma):
    """``0.5*log(2*pi*sigma^2) + (v - mu)^2 / (2*sigma^2)``; works on floats and tensors."""
    if isinstance(sigma, torch.Tensor):
        return HALF_LOG_2PI + torch.log(sigma) + (v - mu) ** 2 / (2.0 * sigma**2)
    return HALF_LOG_2PI + math.log(sigma) + (v - mu) ** 2 / (2.0 * sigma**2)


def token_loss(pred: PredictionHeadOutput, target: Token, value_weight: float = 1.0) -> tuple[float, float]:
    """Per-token ``(class_loss, value_loss)``.

    The class probability is clamped at ``1e-12`` before the log. Categorical
    targets contribute zero value loss.
    """
    if value_weight < 0:
        raise DataError("value_weight must be >= 0")
    if not 0 <= target.class_id < len(pred.class_probs):
        raise DataError(f"target class {target.class_id} outside d_c={len(pred.class_probs)}")
    l_c = -math.log(max(float(pred.class_probs[target.class_id]), LOG_EPS))
    if target.value is None:
        return l_c, 0.0
    c = target.class_id
    return l_c, value_weight * gaussian_nll(float(target.value), float(pred.mu[c]), float(pred.sigma[c]))


def batch_loss(
    logits: torch.Tensor,
    mu: torch.Tensor,
    sigma: torch.Tensor,
    target_ids: torch.Tensor,
    target_values: torch.Tensor,
    numeric_mask: torch.Tensor,
    loss_mask: Optional[torch.Tensor] = None,
    value_weight: float = 1.0,
) -> LossBreakdown:
    """Mean class and value loss over the unmasked target tokens.

    ``logits``/``mu``/``sigma`` are ``(B, T, d_c)`` head outputs at positions
    ``0..T-1``; ``target_ids``/``target_values`` hold the tokens at positions
    ``1..T`` (inputs shifted left by one). Categorical targets count towards
    the token total with zero value loss.
    """
    if logits.shape[:2] != target_ids.shape or target_values.shape != target_ids.shape:
        raise DataError(f"prediction shape {tuple(logits.shape[:2])} does not match targets {tuple(target_ids.shape)}")
    if value_weight < 0:
        raise DataError("value_weight must be >= 0")
    if loss_mask is None:
        loss_mask = torch.ones_like(target_ids, dtype=logits.dtype)
    else:
        loss_mask = loss_mask.to(logits.dtype)
    n = int(loss_mask.sum().item())
    if n == 0:
        raise DataError("batch_loss needs at least one target token")

    d_c = logits.size(-1)
    ce = F.cross_entropy(logits.reshape(-1, d_c), target_ids.reshape(-1), reduction="none").view_as(loss_mask)
    ce = ce.clamp(max=-math.log(LOG_EPS))
    class_loss = (ce * loss_mask).sum() / n

    idx = target_ids.unsqueeze(-1)
    mu_t = mu.gather(-1, idx).squeeze(-1)
    sigma_t = sigma.gather(-1, idx).squeeze(-1)
    is_numeric = numeric_mask.to(logits.dtype)[target_ids]
    nll = gaussian_nll(target_values.to(logits.dtype), mu_t, sigma_t)
    value_loss = value_weight * (nll * is_numeric * loss_mask).sum() / n
    return LossBreakdown(class_loss, value_loss, class_loss + value_loss, n)
