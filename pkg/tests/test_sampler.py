import math

import numpy as np
import pytest
import torch

from mvgpt.datagen import OscillatorSpec, gen_oscillator_dataset
from mvgpt.errors import DataError, GenerationError
from mvgpt.model import ModelConfig, MultivariateGPT
from mvgpt.sampler import SampleOptions, generate, infill_values, next_head, sample_class, make_generator
from mvgpt.schema import build_vocabulary
from mvgpt.tokenizer import Token, TokenSequence, encode_records, prefix_groups
from mvgpt.training import TrainConfig, train


def test_options_validation():
    for bad in ({"mode": "greedy"}, {"temperature": 0}, {"max_new_tokens": 0}, {"stop_condition": "elapsed_time"}, {"fixed_sigma": -1.0}):
        with pytest.raises(DataError):
            SampleOptions(**bad)
    with pytest.raises(DataError):
        SampleOptions.from_dict({"temp": 1.0})


def test_class_sampling_frequencies_match_softmax():
    logits = torch.tensor([1.0, 0.0, -1.0], dtype=torch.float64)
    p = torch.softmax(logits, 0).numpy()
    gen = make_generator(0)
    n = 10_000
    counts = np.bincount([sample_class(logits, SampleOptions(), gen) for _ in range(n)], minlength=3)
    # 4 standard errors of a binomial proportion
    assert np.all(np.abs(counts / n - p) < 4 * np.sqrt(p * (1 - p) / n))


def test_low_temperature_approaches_argmax():
    logits = torch.tensor([0.2, 0.5, 0.1], dtype=torch.float64)
    gen = make_generator(1)
    draws = {sample_class(logits, SampleOptions(temperature=1e-3), gen) for _ in range(200)}
    assert draws == {1}


def _tiny(seed=0, **kw):
    cfg = ModelConfig(d_e=16, n_head=2, n_layer=1, context=12, d_c=3, seed=seed, **kw)
    return MultivariateGPT(cfg, [True, False, True])


def test_generation_is_seeded():
    m = _tiny()
    seed = TokenSequence("s", (Token(0, 0.5),))
    a = generate(seed, m, SampleOptions(max_new_tokens=30, rng_seed=7))
    b = generate(seed, m, SampleOptions(max_new_tokens=30, rng_seed=7))
    c = generate(seed, m, SampleOptions(max_new_tokens=30, rng_seed=8))
    assert a.sequence == b.sequence
    assert a.sequence != c.sequence
    assert len(a.sequence) == 31  # longer than the context: sliding window
    assert a.mu[0] is None and len(a.mu) == 31


def test_max_likelihood_uses_mu():
    m = _tiny()
    seed = TokenSequence("s", (Token(0, 0.5),))
    g = generate(seed, m, SampleOptions(mode="max_likelihood", max_new_tokens=5))
    for tok, mu in zip(g.sequence.tokens[1:], g.mu[1:]):
        if tok.value is not None:
            assert tok.value == mu


def test_fixed_sigma_sampling_spread():
    m = _tiny()
    seed = TokenSequence("s", (Token(0, 0.5),))
    _, mu, _ = next_head(m, list(seed.tokens))
    draws = []
    for s in range(400):
        g = infill_values(
            TokenSequence("s", (Token(0, 0.5), Token(0, 0.0))), [1], m, SampleOptions(fixed_sigma=0.1, rng_seed=s)
        )
        draws.append(g.sequence.tokens[1].value)
    assert np.mean(draws) == pytest.approx(float(mu[0]), abs=0.02)
    assert np.std(draws) == pytest.approx(0.1, rel=0.15)


def test_infill_matches_step_by_step_prediction():
    m = _tiny()
    seq = TokenSequence("s", (Token(0, 0.1), Token(2, 0.4), Token(1), Token(0, -0.2), Token(2, 0.9)))
    g = infill_values(seq, [1, 4], m, SampleOptions(mode="max_likelihood"))
    _, mu1, _ = next_head(m, list(seq.tokens[:1]))
    assert g.sequence.tokens[1].value == float(mu1[2])
    filled = list(seq.tokens[:4])
    filled[1] = Token(2, float(mu1[2]))
    _, mu4, _ = next_head(m, filled)
    assert g.sequence.tokens[4].value == float(mu4[2])
    assert g.sequence.tokens[3] == seq.tokens[3]
    assert [t.class_id for t in g.sequence.tokens] == seq.class_ids
    with pytest.raises(DataError):
        infill_values(seq, [2], m, SampleOptions())
    with pytest.raises(DataError):
        infill_values(seq, [0], m, SampleOptions())


def _oscillator_vocab():
    train_recs, _ = gen_oscillator_dataset([OscillatorSpec(n_points=30)], OscillatorSpec(amplitude=0.5, n_points=30))
    vocab = build_vocabulary(train_recs)
    return vocab, encode_records(train_recs, vocab)[0]


def test_elapsed_time_stop_and_positive_deltas():
    vocab, seq = _oscillator_vocab()
    m = MultivariateGPT(ModelConfig(d_e=16, n_head=2, n_layer=1, context=64, d_c=2), vocab.numeric_mask)
    opts = SampleOptions(max_new_tokens=200, stop_condition="elapsed_time", time_budget=1.0, rng_seed=3)
    g = generate(prefix_groups(seq, vocab, 2), m, opts, vocab)
    deltas = [vocab.time_class.norm.inverse(t.value) for t in g.sequence.tokens[3:] if t.class_id == vocab.time_class_id]
    assert all(d > 0 for d in deltas)
    assert sum(deltas) >= 1.0 or len(g.sequence) == 3 + 200


def test_max_likelihood_rejects_non_positive_delta():
    vocab, seq = _oscillator_vocab()
    m = MultivariateGPT(ModelConfig(d_e=16, n_head=2, n_layer=1, context=64, d_c=2), vocab.numeric_mask)
    with torch.no_grad():
        m.class_head.weight.zero_()
        m.class_head.bias.copy_(torch.tensor([0.0, 10.0]))
        m.value_head.weight.zero_()
        m.value_head.bias[1] = -5.0  # delta = 0.25 * (1 - 5) < 0
    with pytest.raises(GenerationError):
        generate(prefix_groups(seq, vocab, 1), m, SampleOptions(mode="max_likelihood", max_new_tokens=3), vocab)


def test_memorized_trajectory_is_reproduced():
    train_recs, _ = gen_oscillator_dataset([OscillatorSpec(n_points=30)], OscillatorSpec(amplitude=0.5, n_points=30))
    vocab = build_vocabulary(train_recs)
    seq = encode_records(train_recs, vocab)[0]
    m = MultivariateGPT(ModelConfig(d_e=32, n_head=2, n_layer=2, context=64, d_c=2), vocab.numeric_mask)
    train([seq], m, TrainConfig(max_steps=600, batch_tokens=64, warmup_steps=30, lr_max=3e-3, min_lr=1e-5, eval_interval=100, patience=0, grad_clip=0.0))
    seed = prefix_groups(seq, vocab, 5)
    g = generate(seed, m, SampleOptions(mode="max_likelihood", max_new_tokens=40), vocab)
    xs_pred = [t.value for t in g.sequence.tokens[len(seed):] if t.class_id == 0][:20]
    xs_true = [t.value for t in seq.tokens[len(seed):] if t.class_id == 0][:20]
    assert len(xs_pred) == 20
    assert float(np.mean((np.array(xs_pred) - np.array(xs_true)) ** 2)) < 1e-3
