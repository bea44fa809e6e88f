"""LM-pair discriminator: scores, two-way softmax, freezing, soft scoring."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import log_softmax_by_hand
from styleforge.discriminator import (
    CnnDiscriminator,
    LmConfig,
    LmDiscriminator,
    load_discriminator,
    two_way_softmax,
)
from styleforge.errors import DataError, FrozenDiscriminatorError, NotPretrainedError
from styleforge.model import batch_to_tensors
from styleforge.styles import StyleLabel


def tiny_lm_config(vocab=12, **kw):
    defaults = dict(
        vocab_size=vocab,
        n_layers=1,
        n_heads=2,
        embed_dim=16,
        ffn_dim=24,
        dropout=0.0,
        max_positions=24,
        length_normalize=False,
    )
    defaults.update(kw)
    return LmConfig(**defaults)


def zeroed_disc(config):
    disc = LmDiscriminator(config, seed=0, dtype=torch.float64)
    with torch.no_grad():
        for p in disc.parameters():
            p.zero_()
        for lm in (disc.lm_source, disc.lm_target):
            for name, p in lm.named_parameters():
                if p.dim() == 1 and not name.endswith("bias"):
                    p.fill_(1.0)
    return disc


def set_constant_logits(lm, z):
    """Zero residual stream plus final-norm bias trick: every position emits z.

    Requires an untied output projection so the embeddings stay zero.
    """
    with torch.no_grad():
        lm.norm.bias.zero_()
        lm.norm.bias[0] = 1.0
        w = torch.zeros_like(lm.out_proj.weight)
        for v, zv in enumerate(z):
            w[v, 0] = zv
        lm.out_proj.weight.copy_(w)


class TestLmScore:
    def test_single_factor(self):
        # One token whose model probability is exactly 0.5: score = ln 0.5.
        config = tiny_lm_config(vocab=8, tie_embeddings=False)
        disc = zeroed_disc(config)
        z = [math.log(2.0), 0.0, 0.0] + [-30.0] * 5
        set_constant_logits(disc.lm_target, z)
        logp = log_softmax_by_hand(z)
        got = float(disc.lm_score([0], StyleLabel.TARGET).detach())
        assert abs(got - logp[0]) < 1e-12
        assert abs(got - math.log(0.5)) < 1e-9

    def test_half_then_quarter(self):
        # Tokens with probabilities 0.5 and 0.25: product rule gives ln 0.125.
        config = tiny_lm_config(vocab=8, tie_embeddings=False)
        disc = zeroed_disc(config)
        z = [math.log(2.0), 0.0, 0.0] + [-30.0] * 5
        set_constant_logits(disc.lm_target, z)
        two = float(disc.lm_score([0, 1], StyleLabel.TARGET).detach())
        assert abs(two - math.log(0.125)) < 1e-9

    def test_uniform_lm_scores(self):
        config = tiny_lm_config(vocab=11)
        disc = zeroed_disc(config)
        for n in (1, 2, 5, 9):
            x = [6] * n
            got = float(disc.lm_score(x, StyleLabel.SOURCE))
            assert abs(got - (-n * math.log(config.vocab_size))) < 1e-9

    def test_length_normalization(self):
        config = tiny_lm_config(vocab=11, length_normalize=True)
        disc = zeroed_disc(config)
        got = float(disc.lm_score([6, 7, 8], StyleLabel.SOURCE))
        assert abs(got - (-math.log(config.vocab_size))) < 1e-9

    def test_empty_sentence_rejected(self):
        disc = LmDiscriminator(tiny_lm_config(), seed=0)
        with pytest.raises(DataError):
            disc.lm_score([], StyleLabel.SOURCE)


class TestClassifier:
    def test_two_way_softmax_value(self):
        # e^{-1} / (e^{-1} + e^{-2}), evaluated directly
        expected = math.exp(-1.0) / (math.exp(-1.0) + math.exp(-2.0))
        got = float(two_way_softmax(torch.tensor(-1.0), torch.tensor(-2.0)))
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.7310585786300049) < 1e-9

    def test_equal_scores_give_half(self):
        got = float(two_way_softmax(torch.tensor(-3.3), torch.tensor(-3.3)))
        assert got == 0.5

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_probabilities_sum_to_one(self, seed):
        config = tiny_lm_config()
        disc = LmDiscriminator(config, seed=seed % 7)
        self._pretrain_once(disc)
        rng = torch.Generator().manual_seed(seed)
        n = int(torch.randint(1, 9, (1,), generator=rng))
        x = torch.randint(6, config.vocab_size, (n,), generator=rng).tolist()
        p_t = float(disc.prob_style(x, StyleLabel.TARGET))
        p_s = float(disc.prob_style(x, StyleLabel.SOURCE))
        assert abs(p_t + p_s - 1.0) < 1e-9

    def test_monotone_in_score_gap(self):
        gaps = torch.linspace(-4, 4, 33)
        probs = [float(two_way_softmax(g, torch.tensor(0.0))) for g in gaps]
        assert all(b > a for a, b in zip(probs, probs[1:]))

    def test_requires_pretraining(self):
        disc = LmDiscriminator(tiny_lm_config(), seed=0)
        with pytest.raises(NotPretrainedError):
            disc.prob_target([6, 7])

    @staticmethod
    def _pretrain_once(disc):
        opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
        tokens, lengths = batch_to_tensors([[6, 7, 8], [9, 6]])
        disc.pretrain_step(tokens, lengths, StyleLabel.SOURCE, opt)
        disc.pretrain_step(tokens, lengths, StyleLabel.TARGET, opt)


class TestSoftScoring:
    def test_one_hot_soft_equals_hard(self):
        config = tiny_lm_config()
        disc = LmDiscriminator(config, seed=3)
        TestClassifier._pretrain_once(disc)
        x = [6, 8, 10, 7]
        tokens, lengths = batch_to_tensors([x])
        onehot = torch.zeros(1, len(x), config.vocab_size)
        for i, t in enumerate(x):
            onehot[0, i, t] = 1.0
        for style in StyleLabel:
            hard = disc.lm_score_batch(tokens, lengths, style)
            soft = disc.lm_score_soft(onehot, lengths, style)
            assert torch.equal(hard, soft)
        hard_odds = disc.style_log_odds(tokens, lengths)
        soft_odds = disc.style_log_odds_soft(onehot, lengths)
        assert torch.equal(hard_odds, soft_odds)

    def test_soft_score_is_differentiable(self):
        config = tiny_lm_config()
        disc = LmDiscriminator(config, seed=4)
        TestClassifier._pretrain_once(disc)
        disc.freeze()
        logits = torch.randn(1, 3, config.vocab_size, requires_grad=True)
        dists = torch.softmax(logits, dim=-1)
        lengths = torch.tensor([3])
        loss = -disc.log_prob_style_soft(dists, lengths, StyleLabel.TARGET).sum()
        loss.backward()
        assert logits.grad is not None
        assert float(logits.grad.abs().sum()) > 0
        for p in disc.parameters():
            assert p.grad is None


class TestFreezeAndPersistence:
    def test_freeze_blocks_training(self):
        disc = LmDiscriminator(tiny_lm_config(), seed=1)
        opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
        tokens, lengths = batch_to_tensors([[6, 7]])
        disc.pretrain_step(tokens, lengths, StyleLabel.SOURCE, opt)
        disc.freeze()
        disc.freeze()  # idempotent
        with pytest.raises(FrozenDiscriminatorError):
            disc.pretrain_step(tokens, lengths, StyleLabel.SOURCE, opt)

    def test_hash_stable_under_scoring(self):
        disc = LmDiscriminator(tiny_lm_config(), seed=2)
        TestClassifier._pretrain_once(disc)
        disc.freeze()
        before = disc.params_hash()
        disc.prob_target([6, 7, 8])
        assert disc.params_hash() == before

    def test_save_load_roundtrip(self, tmp_path):
        disc = LmDiscriminator(tiny_lm_config(), seed=5)
        TestClassifier._pretrain_once(disc)
        disc.freeze()
        path = tmp_path / "disc.pt"
        disc.save(str(path))
        loaded = load_discriminator(str(path))
        assert loaded.frozen
        assert loaded.steps_trained == disc.steps_trained
        assert loaded.params_hash() == disc.params_hash()

    def test_cnn_variant_roundtrip(self, tmp_path):
        disc = CnnDiscriminator(vocab_size=16, seed=0)
        opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
        tokens, lengths = batch_to_tensors([[6, 7, 8], [9, 10]])
        l1 = disc.pretrain_step(tokens, lengths, StyleLabel.TARGET, opt)
        assert math.isfinite(l1)
        disc.freeze()
        path = tmp_path / "cnn.pt"
        disc.save(str(path))
        loaded = load_discriminator(str(path))
        assert loaded.params_hash() == disc.params_hash()
        probs = loaded.prob_target_batch(tokens, lengths)
        assert probs.shape == (2,)
