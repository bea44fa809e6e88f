"""Loss definitions: mixing identities, composition oracles, gradient flow."""

import math
import random

import pytest
import torch

from conftest import build_copy_model, log_softmax_by_hand
from styleforge.corpus import Batch, ParallelExample, UnlabeledPool, make_batches, make_pool_batches
from styleforge.discriminator import LmConfig, LmDiscriminator
from styleforge.errors import DataError, FrozenDiscriminatorError
from styleforge.model import ModelConfig, batch_to_tensors, build_model
from styleforge.objectives import (
    LossBreakdown,
    LossWeights,
    batch_mmi_loss,
    batch_unlabeled_losses,
    cycle_loss,
    discriminator_loss,
    mmi_translation_loss,
    total_loss,
    translation_loss,
)
from styleforge.styles import StyleLabel
from styleforge.tokenizer import EOS_ID


def tiny_model(seed=0, vocab=14, dtype=torch.float64):
    config = ModelConfig(
        vocab_size=vocab, n_layers=1, n_heads=2, embed_dim=16,
        ffn_dim=24, dropout=0.0, max_positions=32,
    )
    return build_model(config, seed=seed, dtype=dtype)


def pretrained_disc(vocab=14, seed=0):
    config = LmConfig(
        vocab_size=vocab, n_layers=1, n_heads=2, embed_dim=16,
        ffn_dim=24, dropout=0.0, max_positions=40, length_normalize=True,
    )
    disc = LmDiscriminator(config, seed=seed)
    opt = torch.optim.Adam(disc.parameters(), lr=1e-3)
    tokens, lengths = batch_to_tensors([[6, 7, 8], [9, 10]])
    disc.pretrain_step(tokens, lengths, StyleLabel.SOURCE, opt)
    disc.pretrain_step(tokens, lengths, StyleLabel.TARGET, opt)
    return disc


class PerTokenStub:
    """Scorer with a fixed per-token NLL per conditioning style."""

    def __init__(self, nll_by_style):
        self.nll = nll_by_style

    def log_prob(self, x, y, style):
        return torch.tensor(-self.nll[style] * (len(y) + 1))


class TestTranslationLoss:
    def test_perfect_model_zero_loss(self):
        stub = PerTokenStub({StyleLabel.TARGET: 0.0})
        assert float(translation_loss(stub, [6], [7, 8], StyleLabel.TARGET)) == 0.0

    def test_uniform_model_ln_v(self):
        model = tiny_model()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            for name, p in model.named_parameters():
                if p.dim() == 1 and not name.endswith("bias"):
                    p.fill_(1.0)
        loss = translation_loss(model, [6, 7], [8, 9, 10], StyleLabel.TARGET)
        assert abs(float(loss) - math.log(model.config.vocab_size)) < 1e-9

    def test_hand_weighted_model(self):
        # Constant logits z: per-token loss is a hand-computable NLL mean.
        model = tiny_model(vocab=10)
        config = model.config
        model = build_model(
            ModelConfig(**{**config.__dict__, "tie_embeddings": False}),
            seed=0,
            dtype=torch.float64,
        )
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            for name, p in model.named_parameters():
                if p.dim() == 1 and not name.endswith("bias"):
                    p.fill_(1.0)
            model.dec_norm.bias.zero_()
            model.dec_norm.bias[0] = 1.0
            for v in range(10):
                model.out_proj.weight[v, 0] = 0.4 * v - 1.7
        z = [0.4 * v - 1.7 for v in range(10)]
        logp = log_softmax_by_hand(z)
        y = [8, 6, 9]
        expected = -(logp[8] + logp[6] + logp[9] + logp[EOS_ID]) / 4
        got = float(translation_loss(model, [7], y, StyleLabel.TARGET))
        assert abs(got - expected) < 1e-9

    def test_empty_target_rejected(self):
        with pytest.raises(DataError):
            translation_loss(tiny_model(), [6], [], StyleLabel.TARGET)


class TestMixedTranslationLoss:
    def test_convex_combination_value(self):
        stub = PerTokenStub({StyleLabel.TARGET: 2.0, StyleLabel.SOURCE: 4.0})
        got = float(mmi_translation_loss(stub, [6, 7], [8, 9], lam=0.5))
        assert abs(got - 3.0) < 1e-12

    def test_lambda_one_is_plain_loss_exactly(self):
        model = tiny_model(seed=5)
        x, y = [6, 7, 8], [9, 10]
        mixed = mmi_translation_loss(model, x, y, lam=1.0)
        plain = translation_loss(model, x, y, StyleLabel.TARGET)
        assert torch.equal(mixed, plain)

    def test_lambda_zero_is_backward_exactly(self):
        model = tiny_model(seed=5)
        x, y = [6, 7, 8], [9, 10]
        mixed = mmi_translation_loss(model, x, y, lam=0.0)
        back = translation_loss(model, y, x, StyleLabel.SOURCE)
        assert torch.equal(mixed, back)

    def test_decomposition_identity(self):
        model = tiny_model(seed=9)
        rng = random.Random(0)
        for _ in range(10):
            lam = rng.random()
            x = [rng.randint(6, 13) for _ in range(rng.randint(1, 6))]
            y = [rng.randint(6, 13) for _ in range(rng.randint(1, 6))]
            mixed = float(mmi_translation_loss(model, x, y, lam))
            fwd = float(translation_loss(model, x, y, StyleLabel.TARGET))
            bwd = float(translation_loss(model, y, x, StyleLabel.SOURCE))
            assert abs(mixed - (lam * fwd + (1 - lam) * bwd)) < 1e-6

    def test_lambda_out_of_range(self):
        with pytest.raises(DataError):
            mmi_translation_loss(tiny_model(), [6], [7], lam=1.3)
        with pytest.raises(DataError):
            LossWeights(lambda_forward=-0.1)

    def test_batched_matches_single(self):
        model = tiny_model(seed=11)
        examples = [
            ParallelExample(src=[6, 7], tgt=[8, 9, 10], id=0),
            ParallelExample(src=[11], tgt=[12, 13], id=1),
            ParallelExample(src=[9, 8, 7, 6], tgt=[10], id=2),
        ]
        batch = make_batches(examples, max_tokens=64)[0]
        lam = 0.7
        batched, _, _ = batch_mmi_loss(model, batch, lam)
        singles = [
            float(mmi_translation_loss(model, ex.src, ex.tgt, lam))
            for ex in examples
        ]
        assert abs(float(batched) - sum(singles) / 3) < 1e-9


class OneHotRolloutStub:
    """Generator whose rollout emits fixed one-hot distributions."""

    def __init__(self, tokens, vocab):
        self.tokens = tokens
        self.vocab = vocab

    def rollout(self, src, src_lengths, style, max_len):
        n = len(self.tokens)
        dists = torch.zeros(1, n, self.vocab)
        for i, t in enumerate(self.tokens):
            dists[0, i, t] = 1.0
        return dists, torch.tensor([self.tokens]), torch.tensor([n])


class FixedProbDisc:
    def __init__(self, prob):
        self.frozen = True
        self.prob = prob

    def log_prob_style_soft(self, dists, lengths, style):
        return torch.log(torch.tensor([self.prob], dtype=torch.float64))


class TestDiscriminatorLoss:
    def test_confident_classifier_zero_loss(self):
        stub = OneHotRolloutStub([6, 7], vocab=14)
        loss = discriminator_loss(stub, FixedProbDisc(1.0), [8], StyleLabel.SOURCE)
        assert float(loss) == 0.0

    def test_coin_flip_classifier_ln2(self):
        stub = OneHotRolloutStub([6, 7], vocab=14)
        loss = discriminator_loss(stub, FixedProbDisc(0.5), [8], StyleLabel.SOURCE)
        assert abs(float(loss) - math.log(2.0)) < 1e-12

    def test_requires_frozen(self):
        model = tiny_model()
        disc = pretrained_disc()
        with pytest.raises(FrozenDiscriminatorError):
            discriminator_loss(model, disc, [6, 7], StyleLabel.SOURCE)

    def test_recomposition_oracle(self):
        # The composed loss equals -log of the classifier probability
        # recomputed outside the loss path on the same rollout.
        model = tiny_model(seed=21)
        disc = pretrained_disc(seed=3).freeze()
        x = [6, 7, 8]
        loss = discriminator_loss(model, disc, x, StyleLabel.SOURCE, max_len=6)
        src, src_len = batch_to_tensors([x])
        dists, _, content = model.rollout(src, src_len, StyleLabel.TARGET, 6)
        n = int(content[0])
        odds = disc.style_log_odds_soft(dists[:, :n], content)
        independent = -float(torch.nn.functional.logsigmoid(odds.double())[0])
        assert abs(float(loss) - independent) < 1e-9

    def test_gradients_reach_only_generator(self):
        model = tiny_model(seed=23, dtype=torch.float32)
        disc = pretrained_disc(seed=5).freeze()
        loss = discriminator_loss(model, disc, [6, 7, 9], StyleLabel.SOURCE)
        loss.backward()
        gen_grad = sum(
            float(p.grad.abs().sum()) for p in model.parameters() if p.grad is not None
        )
        assert gen_grad > 0
        assert all(p.grad is None for p in disc.parameters())


class TestCycleLoss:
    def test_copy_generator_reduces_to_translation_loss(self):
        model = build_copy_model()
        x = [6, 7, 8]
        cyc = cycle_loss(model, x, StyleLabel.SOURCE, max_len=8)
        trans = translation_loss(model, x, x, StyleLabel.SOURCE)
        assert torch.equal(cyc, trans)

    def test_manual_two_pass(self):
        # Constant logits: greedy repeats the argmax token to max_len, and
        # the reconstruction NLL is a sum of known log-softmax terms.
        config = ModelConfig(
            vocab_size=10, n_layers=1, n_heads=2, embed_dim=16,
            ffn_dim=24, dropout=0.0, max_positions=32, tie_embeddings=False,
        )
        model = build_model(config, seed=0, dtype=torch.float64)
        z = [0.0, -1.0, -2.0, -3.0, -1.5, -2.5, 1.0, 0.5, -0.5, -1.2]
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
            for name, p in model.named_parameters():
                if p.dim() == 1 and not name.endswith("bias"):
                    p.fill_(1.0)
            model.dec_norm.bias.zero_()
            model.dec_norm.bias[0] = 1.0
            for v in range(10):
                model.out_proj.weight[v, 0] = z[v]
        # argmax of z is token 6 (never EOS), so the rollout runs to max_len
        max_len = 5
        x = [7, 8]
        logp = log_softmax_by_hand(z)
        expected = -(logp[7] + logp[8] + logp[EOS_ID]) / 3
        got = float(cycle_loss(model, x, StyleLabel.SOURCE, max_len=max_len))
        assert abs(got - expected) < 1e-9
        # and the intermediate really was [6] * max_len
        src, src_len = batch_to_tensors([x])
        _, tokens, content = model.rollout(src, src_len, StyleLabel.TARGET, max_len)
        assert tokens[0].tolist() == [6] * max_len
        assert int(content[0]) == max_len

    def test_equals_translation_loss_on_pseudo_pair(self):
        model = tiny_model(seed=31)
        x = [6, 9, 12]
        src, src_len = batch_to_tensors([x])
        with torch.no_grad():
            _, tokens, content = model.rollout(src, src_len, StyleLabel.TARGET, 11)
        inter = tokens[0, : int(content[0])].tolist()
        if inter:
            cyc = float(cycle_loss(model, x, StyleLabel.SOURCE))
            trans = float(translation_loss(model, inter, x, StyleLabel.SOURCE))
            assert abs(cyc - trans) < 1e-12


class TestTotalLoss:
    def _batches(self, model_vocab=14):
        examples = [
            ParallelExample(src=[6, 7], tgt=[8, 9], id=0),
            ParallelExample(src=[10, 11, 6], tgt=[12], id=1),
        ]
        parallel = make_batches(examples, max_tokens=64)[0]
        pool = UnlabeledPool(
            style=StyleLabel.SOURCE, sentences=[[6, 8, 10], [7, 9]]
        )
        unlabeled = make_pool_batches(pool, max_tokens=64)[0]
        return parallel, unlabeled

    def test_weights_zero_leaves_translation_only(self):
        model = tiny_model(seed=41)
        parallel, unlabeled = self._batches()
        weights = LossWeights(lambda_forward=0.8, w_disc=0.0, w_cycle=0.0)
        total, breakdown = total_loss(model, None, parallel, unlabeled, weights)
        mmi, _, _ = batch_mmi_loss(model, parallel, 0.8)
        assert torch.allclose(total, mmi)
        assert breakdown.disc == 0.0 and breakdown.cycle == 0.0

    def test_breakdown_identity(self):
        model = tiny_model(seed=43)
        disc = pretrained_disc(seed=7).freeze()
        parallel, unlabeled = self._batches()
        weights = LossWeights(lambda_forward=0.6, w_disc=1.0, w_cycle=0.6)
        total, b = total_loss(model, disc, parallel, unlabeled, weights)
        recomposed = b.mmi_trans + weights.w_disc * b.disc + weights.w_cycle * b.cycle
        assert abs(b.total - recomposed) < 1e-6
        assert abs(float(total) - b.total) < 1e-9
        assert b.n_parallel == 2 and b.n_unlabeled == 2

    def test_mmi_breakdown_matches_direction_means(self):
        model = tiny_model(seed=47)
        parallel, _ = self._batches()
        weights = LossWeights(lambda_forward=0.3, w_disc=0.0, w_cycle=0.0)
        _, b = total_loss(model, None, parallel, None, weights)
        lam = weights.lambda_forward
        assert abs(b.mmi_trans - (lam * b.trans_fwd + (1 - lam) * b.trans_bwd)) < 1e-6

    def test_unsupervised_mode_no_parallel(self):
        model = tiny_model(seed=53)
        disc = pretrained_disc(seed=9).freeze()
        _, unlabeled = self._batches()
        weights = LossWeights(lambda_forward=0.8, w_disc=1.0, w_cycle=1.0)
        total, b = total_loss(model, disc, None, unlabeled, weights)
        assert b.mmi_trans == 0.0
        assert b.total > 0

    def test_both_empty_rejected(self):
        with pytest.raises(DataError):
            total_loss(tiny_model(), None, None, None, LossWeights())

    def test_missing_disc_rejected(self):
        model = tiny_model()
        _, unlabeled = self._batches()
        with pytest.raises(DataError):
            total_loss(model, None, None, unlabeled, LossWeights(w_disc=1.0))

    def test_all_terms_finite_and_nonnegative(self):
        model = tiny_model(seed=59)
        disc = pretrained_disc(seed=11).freeze()
        parallel, unlabeled = self._batches()
        _, b = total_loss(model, disc, parallel, unlabeled, LossWeights())
        for v in (b.trans_fwd, b.trans_bwd, b.mmi_trans, b.disc, b.cycle, b.total):
            assert math.isfinite(v) and v >= 0

    def test_gradient_flow(self):
        model = tiny_model(seed=61, dtype=torch.float32)
        disc = pretrained_disc(seed=13).freeze()
        parallel, unlabeled = self._batches()
        for weights in (
            LossWeights(0.8, 1.0, 0.0),
            LossWeights(0.8, 0.0, 1.0),
            LossWeights(1.0, 0.0, 0.0),
        ):
            model.zero_grad(set_to_none=True)
            total, _ = total_loss(model, disc, parallel, unlabeled, weights)
            total.backward()
            gen_grad = sum(
                float(p.grad.abs().sum())
                for p in model.parameters()
                if p.grad is not None
            )
            assert gen_grad > 0
            assert all(p.grad is None for p in disc.parameters())
