"""Style discriminators: a language-model pair, plus a CNN variant.

The main discriminator holds two independently trained causal LMs, one per
style. A sentence's style score is its token log-likelihood under each LM
(log-space product of locally normalized probabilities), optionally divided
by length to remove length bias, and the classifier is the two-way softmax
of the two scores. After pretraining the parameters freeze for the rest of
training.

Generated text stays differentiable through soft scoring: each step feeds
the expectation of token embeddings under the generator's distribution, and
the scored log-probability is the expectation under the same distribution.
With one-hot distributions both reduce exactly to the hard path.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, FrozenDiscriminatorError, NotPretrainedError
from .model import FeedForward, MultiHeadAttention, seeded_init_
from .styles import StyleLabel
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenSeq

# Token log-probabilities are clamped here before summing so that soft
# (expectation) and hard (gather) scoring agree even when a softmax entry
# underflows to zero probability.
LOG_PROB_FLOOR = -1.0e4


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 256
    dropout: float = 0.0
    max_positions: int = 128
    length_normalize: bool = True
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise DataError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 7:
            raise DataError("vocab must cover the six reserved ids")


class _LmLayer(nn.Module):
    def __init__(self, dim, n_heads, ffn_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, causal_blocked):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, causal_blocked))
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class CausalLM(nn.Module):
    """Decoder-only transformer scoring next-token probabilities."""

    def __init__(self, config: LmConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.token_emb = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
        self.pos = nn.Embedding(config.max_positions, d)
        self.drop = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            _LmLayer(d, config.n_heads, config.ffn_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.vocab_size, bias=False)
        if config.tie_embeddings:
            self.out_proj.weight = self.token_emb.weight

    def forward_embedded(self, x_emb: torch.Tensor) -> torch.Tensor:
        b, t, _ = x_emb.shape
        if t > self.config.max_positions:
            raise DataError(
                f"sequence of {t} positions exceeds LM limit "
                f"{self.config.max_positions}"
            )
        pos = torch.arange(t, device=x_emb.device)
        x = self.drop(x_emb + self.pos(pos)[None])
        causal = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=x_emb.device), diagonal=1
        )[None, None]
        for layer in self.layers:
            x = layer(x, causal)
        return self.out_proj(self.norm(x))

    def forward_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.forward_embedded(self.token_emb(ids))


def _frame_lm_input(tokens: torch.Tensor) -> torch.Tensor:
    b, w = tokens.shape
    ids = torch.full((b, w + 1), PAD_ID, dtype=torch.long, device=tokens.device)
    ids[:, 0] = BOS_ID
    ids[:, 1:] = tokens
    return ids


def two_way_softmax(score_a: torch.Tensor, score_b: torch.Tensor) -> torch.Tensor:
    """P(a) under a softmax over exactly {a, b}; computed in float64."""
    return torch.sigmoid(score_a.double() - score_b.double())


class LmDiscriminator:
    """Pair of per-style LMs acting as a binary style classifier."""

    def __init__(self, config: LmConfig, seed: int, dtype: torch.dtype = torch.float32):
        self.config = config
        self.lm_source = CausalLM(config).to(dtype)
        self.lm_target = CausalLM(config).to(dtype)
        seeded_init_(self.lm_source, seed * 2 + 1)
        seeded_init_(self.lm_target, seed * 2 + 2)
        self.frozen = False
        self.steps_trained = 0

    def _lm(self, style: StyleLabel) -> CausalLM:
        return self.lm_target if style is StyleLabel.TARGET else self.lm_source

    def parameters(self):
        yield from self.lm_source.parameters()
        yield from self.lm_target.parameters()

    # -- scoring -------------------------------------------------------------

    def lm_score_batch(
        self, tokens: torch.Tensor, lengths: torch.Tensor, style: StyleLabel
    ) -> torch.Tensor:
        """Sum over sentence tokens of log P(x_i | x_<i); per-token if normalizing."""
        lm = self._lm(style)
        logits = lm.forward_ids(_frame_lm_input(tokens))
        logp = F.log_softmax(logits, dim=-1).clamp_min(LOG_PROB_FLOOR)
        # position i predicts tokens[:, i]
        picked = logp[:, :-1].gather(-1, tokens[..., None]).squeeze(-1)
        width = tokens.shape[1]
        valid = torch.arange(width, device=tokens.device)[None] < lengths[:, None]
        scores = (picked * valid).sum(dim=1)
        if self.config.length_normalize:
            scores = scores / lengths.clamp_min(1)
        return scores

    def lm_score(self, x: TokenSeq, style: StyleLabel) -> torch.Tensor:
        if not x:
            raise DataError("cannot score an empty sentence")
        device = self.lm_source.token_emb.weight.device
        tokens = torch.tensor([x], dtype=torch.long, device=device)
        lengths = torch.tensor([len(x)], device=device)
        return self.lm_score_batch(tokens, lengths, style)[0]

    def lm_score_soft(
        self, dists: torch.Tensor, lengths: torch.Tensor, style: StyleLabel
    ) -> torch.Tensor:
        """Score a per-step distribution sequence via expected embeddings.

        dists: (B, L, V) rows of step distributions; steps at index >= length
        are ignored.
        """
        lm = self._lm(style)
        b, width, _ = dists.shape
        emb = dists.to(lm.token_emb.weight.dtype) @ lm.token_emb.weight
        bos = lm.token_emb.weight[BOS_ID][None, None].expand(b, 1, -1)
        logits = lm.forward_embedded(torch.cat([bos, emb], dim=1))
        logp = F.log_softmax(logits, dim=-1).clamp_min(LOG_PROB_FLOOR)
        expected = (logp[:, :-1] * dists).sum(dim=-1)
        valid = torch.arange(width, device=dists.device)[None] < lengths[:, None]
        scores = (expected * valid).sum(dim=1)
        if self.config.length_normalize:
            scores = scores / lengths.clamp_min(1)
        return scores

    # -- classification ------------------------------------------------------

    def _require_pretrained(self):
        if self.steps_trained == 0:
            raise NotPretrainedError(
                "discriminator must be pretrained before classification"
            )

    def style_log_odds(
        self, tokens: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """s_target - s_source per row (hard inputs)."""
        self._require_pretrained()
        s_t = self.lm_score_batch(tokens, lengths, StyleLabel.TARGET)
        s_s = self.lm_score_batch(tokens, lengths, StyleLabel.SOURCE)
        return s_t - s_s

    def style_log_odds_soft(
        self, dists: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        self._require_pretrained()
        s_t = self.lm_score_soft(dists, lengths, StyleLabel.TARGET)
        s_s = self.lm_score_soft(dists, lengths, StyleLabel.SOURCE)
        return s_t - s_s

    def prob_style(self, x: TokenSeq, style: StyleLabel) -> torch.Tensor:
        """P(style | x) from the two-way softmax over LM scores."""
        self._require_pretrained()
        s_t = self.lm_score(x, StyleLabel.TARGET)
        s_s = self.lm_score(x, StyleLabel.SOURCE)
        if style is StyleLabel.TARGET:
            return two_way_softmax(s_t, s_s)
        return two_way_softmax(s_s, s_t)

    def prob_target(self, x: TokenSeq) -> torch.Tensor:
        return self.prob_style(x, StyleLabel.TARGET)

    def prob_target_batch(
        self, tokens: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        return torch.sigmoid(self.style_log_odds(tokens, lengths).double())

    def log_prob_style_soft(
        self, dists: torch.Tensor, lengths: torch.Tensor, style: StyleLabel
    ) -> torch.Tensor:
        """log P(style | soft sequence); differentiable toward the generator."""
        odds = self.style_log_odds_soft(dists, lengths)
        if style is StyleLabel.SOURCE:
            odds = -odds
        return F.logsigmoid(odds.double())

    # -- training ------------------------------------------------------------

    def pretrain_loss(
        self, tokens: torch.Tensor, lengths: torch.Tensor, style: StyleLabel
    ) -> torch.Tensor:
        """Per-token next-token cross-entropy of sentences under their own
        style's LM, end marker included."""
        lm = self._lm(style)
        ids = _frame_lm_input(tokens)
        b, width = tokens.shape
        targets = torch.full_like(ids, PAD_ID)
        targets[:, :width] = tokens
        targets[torch.arange(b), lengths] = EOS_ID
        logits = lm.forward_ids(ids)
        logp = F.log_softmax(logits, dim=-1)
        picked = logp.gather(-1, targets[..., None]).squeeze(-1)
        valid = (
            torch.arange(width + 1, device=tokens.device)[None] <= lengths[:, None]
        )
        return -(picked * valid).sum() / valid.sum()

    def pretrain_step(
        self,
        tokens: torch.Tensor,
        lengths: torch.Tensor,
        style: StyleLabel,
        optimizer: torch.optim.Optimizer,
    ) -> float:
        if self.frozen:
            raise FrozenDiscriminatorError("cannot train a frozen discriminator")
        optimizer.zero_grad(set_to_none=True)
        loss = self.pretrain_loss(tokens, lengths, style)
        loss.backward()
        optimizer.step()
        self.steps_trained += 1
        return float(loss.detach())

    def freeze(self) -> "LmDiscriminator":
        """Idempotent; afterwards parameters are immutable and grad-free."""
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        return self

    # -- persistence -----------------------------------------------------------

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name, module in (("source", self.lm_source), ("target", self.lm_target)):
            for pname, p in sorted(module.state_dict().items()):
                h.update(name.encode())
                h.update(pname.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        torch.save(
            {
                "format": "styleforge-discriminator-v1",
                "kind": "lm",
                "lm_config": asdict(self.config),
                "source_state": self.lm_source.state_dict(),
                "target_state": self.lm_target.state_dict(),
                "frozen": self.frozen,
                "steps_trained": self.steps_trained,
            },
            path,
        )


class CnnDiscriminator:
    """Experimental variant: 3-layer convolutional binary style classifier."""

    def __init__(
        self,
        vocab_size: int,
        seed: int,
        embed_dim: int = 64,
        channels: int = 64,
        dtype: torch.dtype = torch.float32,
    ):
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.channels = channels
        net = nn.ModuleDict(
            {
                "emb": nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID),
                "conv1": nn.Conv1d(embed_dim, channels, 3, padding=1),
                "conv2": nn.Conv1d(channels, channels, 3, padding=1),
                "conv3": nn.Conv1d(channels, channels, 3, padding=1),
                "head": nn.Linear(channels, 1),
            }
        ).to(dtype)
        seeded_init_(net, seed)
        with torch.no_grad():
            net["emb"].weight[PAD_ID].zero_()
        self.net = net
        self.frozen = False
        self.steps_trained = 0

    def parameters(self):
        return self.net.parameters()

    def _logit_from_emb(self, emb: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        x = emb.transpose(1, 2)
        for conv in (self.net["conv1"], self.net["conv2"], self.net["conv3"]):
            x = F.relu(conv(x))
        width = emb.shape[1]
        mask = (
            torch.arange(width, device=emb.device)[None] < lengths[:, None]
        ).to(x.dtype)
        pooled = (x * mask[:, None]).sum(-1) / mask.sum(-1, keepdim=True).clamp_min(1)
        return self.net["head"](pooled)[:, 0]

    def target_logit(self, tokens: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        return self._logit_from_emb(self.net["emb"](tokens), lengths)

    def target_logit_soft(self, dists: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        emb = dists.to(self.net["emb"].weight.dtype) @ self.net["emb"].weight
        return self._logit_from_emb(emb, lengths)

    def prob_target_batch(self, tokens, lengths) -> torch.Tensor:
        self._require_pretrained()
        return torch.sigmoid(self.target_logit(tokens, lengths).double())

    def log_prob_style_soft(self, dists, lengths, style: StyleLabel) -> torch.Tensor:
        self._require_pretrained()
        logit = self.target_logit_soft(dists, lengths)
        if style is StyleLabel.SOURCE:
            logit = -logit
        return F.logsigmoid(logit.double())

    def _require_pretrained(self):
        if self.steps_trained == 0:
            raise NotPretrainedError(
                "discriminator must be pretrained before classification"
            )

    def pretrain_step(self, tokens, lengths, style, optimizer) -> float:
        if self.frozen:
            raise FrozenDiscriminatorError("cannot train a frozen discriminator")
        optimizer.zero_grad(set_to_none=True)
        logit = self.target_logit(tokens, lengths)
        label = 1.0 if style is StyleLabel.TARGET else 0.0
        loss = F.binary_cross_entropy_with_logits(
            logit, torch.full_like(logit, label)
        )
        loss.backward()
        optimizer.step()
        self.steps_trained += 1
        return float(loss.detach())

    def freeze(self) -> "CnnDiscriminator":
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        return self

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for pname, p in sorted(self.net.state_dict().items()):
            h.update(pname.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        torch.save(
            {
                "format": "styleforge-discriminator-v1",
                "kind": "cnn",
                "vocab_size": self.vocab_size,
                "embed_dim": self.embed_dim,
                "channels": self.channels,
                "state": self.net.state_dict(),
                "frozen": self.frozen,
                "steps_trained": self.steps_trained,
            },
            path,
        )


def load_discriminator(path: str):
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot load discriminator {path}: {exc}") from exc
    if payload.get("format") != "styleforge-discriminator-v1":
        raise DataError(f"{path} is not a styleforge discriminator checkpoint")
    if payload["kind"] == "lm":
        disc = LmDiscriminator(LmConfig(**payload["lm_config"]), seed=0)
        disc.lm_source.load_state_dict(payload["source_state"])
        disc.lm_target.load_state_dict(payload["target_state"])
    else:
        disc = CnnDiscriminator(
            vocab_size=payload["vocab_size"],
            seed=0,
            embed_dim=payload["embed_dim"],
            channels=payload["channels"],
        )
        disc.net.load_state_dict(payload["state"])
    disc.steps_trained = payload["steps_trained"]
    if payload["frozen"]:
        disc.freeze()
    return disc
