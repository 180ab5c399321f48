import math

import numpy as np
import pytest
import torch

from mvgpt.errors import DataError
from mvgpt.loss import LOG_EPS, batch_loss, gaussian_nll, token_loss
from mvgpt.model import PredictionHeadOutput
from mvgpt.tokenizer import Token


def test_gaussian_nll_hand_values():
    assert gaussian_nll(0.0, 0.0, 1.0) == pytest.approx(0.5 * math.log(2 * math.pi))
    # one sigma off with sigma = 2
    assert gaussian_nll(3.0, 1.0, 2.0) == pytest.approx(0.5 * math.log(2 * math.pi) + math.log(2.0) + 0.5)


def test_token_loss_numeric_and_categorical():
    pred = PredictionHeadOutput(np.array([0.5, 0.25, 0.25]), np.array([1.0, 0.0, 0.0]), np.array([0.5, 1.0, 1.0]))
    lc, lv = token_loss(pred, Token(0, 1.5), value_weight=2.0)
    assert lc == pytest.approx(math.log(2))
    assert lv == pytest.approx(2.0 * gaussian_nll(1.5, 1.0, 0.5))
    assert token_loss(pred, Token(1)) == (pytest.approx(math.log(4)), 0.0)


def test_token_loss_clamps_zero_probability():
    pred = PredictionHeadOutput(np.array([1.0, 0.0]), np.zeros(2), np.ones(2))
    lc, _ = token_loss(pred, Token(1))
    assert lc == pytest.approx(-math.log(LOG_EPS))


def _random_batch(B=3, T=5, d_c=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(B, T, d_c, generator=g, dtype=torch.float64)
    mu = torch.randn(B, T, d_c, generator=g, dtype=torch.float64)
    sigma = torch.rand(B, T, d_c, generator=g, dtype=torch.float64) + 0.1
    ids = torch.randint(d_c, (B, T), generator=g)
    vals = torch.randn(B, T, generator=g, dtype=torch.float64)
    mask = torch.tensor([True, False, True, True])
    return logits, mu, sigma, ids, vals, mask


def test_batch_loss_equals_mean_of_token_losses():
    logits, mu, sigma, ids, vals, mask = _random_batch()
    loss_mask = torch.ones_like(ids)
    loss_mask[0, -2:] = 0
    lb = batch_loss(logits, mu, sigma, ids, vals, mask, loss_mask, value_weight=0.7)
    probs = torch.softmax(logits, -1)
    cs, vs, n = 0.0, 0.0, 0
    for b in range(ids.shape[0]):
        for t in range(ids.shape[1]):
            if not loss_mask[b, t]:
                continue
            c = int(ids[b, t])
            tok = Token(c, float(vals[b, t]) if mask[c] else None)
            pred = PredictionHeadOutput(probs[b, t].numpy(), mu[b, t].numpy(), sigma[b, t].numpy())
            lc, lv = token_loss(pred, tok, 0.7)
            cs, vs, n = cs + lc, vs + lv, n + 1
    assert lb.token_count == n
    assert float(lb.class_loss) == pytest.approx(cs / n, rel=1e-12)
    assert float(lb.value_loss) == pytest.approx(vs / n, rel=1e-12)
    assert float(lb.total) == pytest.approx((cs + vs) / n, rel=1e-12)


def test_categorical_targets_add_no_value_loss():
    logits, mu, sigma, ids, vals, _ = _random_batch()
    lb = batch_loss(logits, mu, sigma, ids, vals, torch.zeros(4, dtype=torch.bool))
    assert float(lb.value_loss) == 0.0
    assert float(lb.total) == float(lb.class_loss)


def test_batch_loss_errors():
    logits, mu, sigma, ids, vals, mask = _random_batch()
    with pytest.raises(DataError):
        batch_loss(logits, mu, sigma, ids[:, :-1], vals[:, :-1], mask)
    with pytest.raises(DataError):
        batch_loss(logits, mu, sigma, ids, vals, mask, torch.zeros_like(ids))
    with pytest.raises(DataError):
        batch_loss(logits, mu, sigma, ids, vals, mask, value_weight=-1)
