"""Style-conditioned transformer encoder-decoder.

One parameter set serves both transfer directions: the requested output
style is a control token prepended to the encoder input and also replaces
BOS on the decoder side, so generation is conditioned even when source
attention is uninformative. Pre-norm blocks, learned absolute positions.

Incremental decoding keeps per-layer key/value caches, which makes greedy
rollouts and beam search linear in output length; the cached path and the
full teacher-forced path compute the same function.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError
from .styles import StyleLabel
from .tokenizer import EOS_ID, PAD_ID, TokenSeq


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 128
    ffn_dim: int = 256
    dropout: float = 0.0
    max_positions: int = 128
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise DataError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 7:
            raise DataError("vocab must cover the six reserved ids")
        if min(self.n_layers, self.n_heads, self.embed_dim, self.ffn_dim) < 1:
            raise DataError("model dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"bad dropout {self.dropout}")
        if self.max_positions < 4:
            raise DataError("max_positions too small for a sentence plus markers")


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.o_proj = nn.Linear(dim, dim)
        self.attn_drop = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def project_q(self, x: torch.Tensor) -> torch.Tensor:
        return self._split(self.q_proj(x))

    def project_kv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k_proj(x)), self._split(self.v_proj(x))

    def attend(
        self,
        q: torch.Tensor,
        k: torch.Tensor,
        v: torch.Tensor,
        blocked: torch.Tensor | None,
    ) -> torch.Tensor:
        scores = torch.matmul(q, k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        weights = self.attn_drop(F.softmax(scores, dim=-1))
        out = torch.matmul(weights, v)
        b, _, t, _ = out.shape
        return self.o_proj(out.transpose(1, 2).reshape(b, t, -1))

    def forward(self, x_q, x_kv, blocked=None):
        return self.attend(self.project_q(x_q), *self.project_kv(x_kv), blocked)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.w1 = nn.Linear(dim, ffn_dim)
        self.w2 = nn.Linear(ffn_dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.w2(self.drop(F.gelu(self.w1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, dim, n_heads, ffn_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_blocked):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, key_blocked))
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, dim, n_heads, ffn_dim, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads, dropout)
        self.cross_attn = MultiHeadAttention(dim, n_heads, dropout)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, memory, causal_blocked, mem_blocked):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, causal_blocked))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, mem_blocked))
        x = x + self.drop(self.ffn(self.norm3(x)))
        return x

    def step(self, x, memory, mem_blocked, self_kv, cross_kv):
        """One-token decode. self_kv/cross_kv are per-layer cache slots."""
        h = self.norm1(x)
        k_new, v_new = self.self_attn.project_kv(h)
        if self_kv[0] is None:
            k_cat, v_cat = k_new, v_new
        else:
            k_cat = torch.cat([self_kv[0], k_new], dim=2)
            v_cat = torch.cat([self_kv[1], v_new], dim=2)
        self_kv[0], self_kv[1] = k_cat, v_cat
        x = x + self.self_attn.attend(self.self_attn.project_q(h), k_cat, v_cat, None)

        if cross_kv[0] is None:
            cross_kv[0], cross_kv[1] = self.cross_attn.project_kv(memory)
        h = self.norm2(x)
        x = x + self.cross_attn.attend(
            self.cross_attn.project_q(h), cross_kv[0], cross_kv[1], mem_blocked
        )
        x = x + self.ffn(self.norm3(x))
        return x


class DecoderState:
    """Incremental decoding cache; one slot pair per decoder layer."""

    def __init__(self, memory: torch.Tensor, mem_blocked: torch.Tensor, n_layers: int):
        self.memory = memory
        self.mem_blocked = mem_blocked
        self.self_kv = [[None, None] for _ in range(n_layers)]
        self.cross_kv = [[None, None] for _ in range(n_layers)]
        self.t = 0

    def reorder(self, idx: torch.Tensor) -> None:
        """Reindex the batch dimension (beam bookkeeping)."""
        self.memory = self.memory.index_select(0, idx)
        self.mem_blocked = self.mem_blocked.index_select(0, idx)
        for slot in self.self_kv + self.cross_kv:
            for i in (0, 1):
                if slot[i] is not None:
                    slot[i] = slot[i].index_select(0, idx)


class StyleTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.token_emb = nn.Embedding(config.vocab_size, d, padding_idx=PAD_ID)
        self.enc_pos = nn.Embedding(config.max_positions, d)
        self.dec_pos = nn.Embedding(config.max_positions, d)
        self.drop = nn.Dropout(config.dropout)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(d, config.n_heads, config.ffn_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(d, config.n_heads, config.ffn_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.vocab_size, bias=False)
        if config.tie_embeddings:
            self.out_proj.weight = self.token_emb.weight

    # -- framing -----------------------------------------------------------

    def _check_positions(self, needed: int, what: str) -> None:
        if needed > self.config.max_positions:
            raise DataError(
                f"{what} needs {needed} positions, model allows "
                f"{self.config.max_positions}"
            )

    def frame_encoder(
        self, src: torch.Tensor, src_lengths: torch.Tensor, style: StyleLabel
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, width = src.shape
        self._check_positions(width + 2, "encoder input")
        ids = torch.full((b, width + 2), PAD_ID, dtype=torch.long, device=src.device)
        ids[:, 0] = style.token_id
        ids[:, 1 : width + 1] = src
        ids[torch.arange(b), src_lengths + 1] = EOS_ID
        return ids, src_lengths + 2

    def encode(
        self, src: torch.Tensor, src_lengths: torch.Tensor, style: StyleLabel
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (memory, blocked-key mask of shape (B, 1, 1, T))."""
        ids, lengths = self.frame_encoder(src, src_lengths, style)
        b, t = ids.shape
        pos = torch.arange(t, device=ids.device)
        x = self.drop(self.token_emb(ids) + self.enc_pos(pos)[None])
        blocked = (pos[None] >= lengths[:, None])[:, None, None, :]
        for layer in self.encoder_layers:
            x = layer(x, blocked)
        return self.enc_norm(x), blocked

    def _decode_full(self, memory, mem_blocked, dec_ids):
        b, t = dec_ids.shape
        self._check_positions(t, "decoder input")
        pos = torch.arange(t, device=dec_ids.device)
        x = self.drop(self.token_emb(dec_ids) + self.dec_pos(pos)[None])
        causal = torch.triu(
            torch.ones(t, t, dtype=torch.bool, device=dec_ids.device), diagonal=1
        )[None, None]
        for layer in self.decoder_layers:
            x = layer(x, memory, causal, mem_blocked)
        return self.out_proj(self.dec_norm(x))

    # -- scoring -----------------------------------------------------------

    def sequence_log_probs(
        self,
        src: torch.Tensor,
        src_lengths: torch.Tensor,
        tgt: torch.Tensor,
        tgt_lengths: torch.Tensor,
        style: StyleLabel,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced log P(tgt | src, style) per row, EOS included.

        Returns (sum of token log-probs (B,), number of scored positions (B,)).
        """
        b, width = tgt.shape
        memory, mem_blocked = self.encode(src, src_lengths, style)
        dec_ids = torch.full(
            (b, width + 1), PAD_ID, dtype=torch.long, device=tgt.device
        )
        dec_ids[:, 0] = style.token_id
        dec_ids[:, 1:] = tgt
        targets = torch.full_like(dec_ids, PAD_ID)
        targets[:, :width] = tgt
        targets[torch.arange(b), tgt_lengths] = EOS_ID
        logits = self._decode_full(memory, mem_blocked, dec_ids)
        logp = F.log_softmax(logits, dim=-1)
        picked = logp.gather(-1, targets[..., None]).squeeze(-1)
        valid = (
            torch.arange(width + 1, device=tgt.device)[None] <= tgt_lengths[:, None]
        )
        return (picked * valid).sum(dim=1), tgt_lengths + 1

    def log_prob(self, x: TokenSeq, y: TokenSeq, style: StyleLabel) -> torch.Tensor:
        """Scalar log P(y | x, style) for one sentence pair."""
        device = self.token_emb.weight.device
        src = torch.tensor([x], dtype=torch.long, device=device)
        tgt = torch.tensor([y], dtype=torch.long, device=device)
        sums, _ = self.sequence_log_probs(
            src,
            torch.tensor([len(x)], device=device),
            tgt,
            torch.tensor([len(y)], device=device),
            style,
        )
        return sums[0]

    # -- incremental decoding ----------------------------------------------

    def start_decoder(self, memory, mem_blocked) -> DecoderState:
        return DecoderState(memory, mem_blocked, len(self.decoder_layers))

    def step(self, state: DecoderState, tokens: torch.Tensor) -> torch.Tensor:
        """Feed one token per row; returns next-token logits (B, V)."""
        self._check_positions(state.t + 1, "decoder input")
        pos = torch.tensor([state.t], device=tokens.device)
        x = self.token_emb(tokens)[:, None, :] + self.dec_pos(pos)[None]
        for layer, skv, ckv in zip(
            self.decoder_layers, state.self_kv, state.cross_kv
        ):
            x = layer.step(x, state.memory, state.mem_blocked, skv, ckv)
        state.t += 1
        return self.out_proj(self.dec_norm(x))[:, 0]

    def rollout(
        self,
        src: torch.Tensor,
        src_lengths: torch.Tensor,
        style: StyleLabel,
        max_len: int,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Greedy autoregressive generation emitting full softmax distributions.

        Each step's distribution stays differentiable; the argmax token is
        fed forward. Rows stop at EOS; finished rows keep emitting EOS and
        are excluded via the returned content lengths.

        Returns (dists (B, L, V), tokens (B, L), content_lengths (B,)).
        L counts every emitted step including the one that produced EOS.
        """
        if max_len < 1:
            raise DataError("rollout needs max_len >= 1")
        max_len = min(max_len, self.config.max_positions - 1)
        b = src.shape[0]
        device = src.device
        memory, mem_blocked = self.encode(src, src_lengths, style)
        state = self.start_decoder(memory, mem_blocked)
        tokens = torch.full((b,), style.token_id, dtype=torch.long, device=device)
        alive = torch.ones(b, dtype=torch.bool, device=device)
        dists, emitted = [], []
        for _ in range(max_len):
            logits = self.step(state, tokens)
            probs = F.softmax(logits, dim=-1)
            dists.append(probs)
            nxt = probs.argmax(dim=-1)
            nxt = torch.where(alive, nxt, torch.full_like(nxt, EOS_ID))
            emitted.append(nxt)
            alive = alive & (nxt != EOS_ID)
            if not bool(alive.any()):
                break
            tokens = nxt
        dist_stack = torch.stack(dists, dim=1)
        token_stack = torch.stack(emitted, dim=1)
        steps = token_stack.shape[1]
        is_eos = token_stack == EOS_ID
        content_lengths = torch.where(
            is_eos.any(dim=1),
            is_eos.float().argmax(dim=1),
            torch.full((b,), steps, dtype=torch.long, device=device),
        )
        return dist_stack, token_stack, content_lengths

    def rollout_single(
        self, x: TokenSeq, style: StyleLabel, max_len: int
    ) -> tuple[list[torch.Tensor], TokenSeq]:
        """Per-step distributions plus the greedy output for one sentence."""
        device = self.token_emb.weight.device
        src = torch.tensor([x], dtype=torch.long, device=device)
        lengths = torch.tensor([len(x)], device=device)
        dists, tokens, content = self.rollout(src, lengths, style, max_len)
        n = int(content[0])
        n_steps = min(n + 1, dists.shape[1])  # include the EOS step if taken
        return [dists[0, i] for i in range(n_steps)], tokens[0, :n].tolist()


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Deterministic in-place init: N(0, 0.02^2) weights, zero biases, unit gains."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.dim() >= 2:
                p.normal_(0.0, 0.02, generator=gen)
            elif name.endswith("bias"):
                p.zero_()
            else:  # LayerNorm gains
                p.fill_(1.0)


def build_model(
    config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32
) -> StyleTransformer:
    """Construct and deterministically initialize a model.

    Weight matrices and embeddings draw from N(0, 0.02^2); biases start at
    zero, LayerNorm gains at one. The PAD embedding row is zeroed.
    """
    model = StyleTransformer(config).to(dtype)
    seeded_init_(model, seed)
    with torch.no_grad():
        model.token_emb.weight[PAD_ID].zero_()
    return model


def parameter_count(model: nn.Module) -> int:
    seen = set()
    total = 0
    for p in model.parameters():
        if id(p) not in seen:  # tied tensors count once
            seen.add(id(p))
            total += p.numel()
    return total


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path: str,
    model: StyleTransformer,
    optimizer_state: dict | None,
    epoch: int,
    merge_table_hash: str,
) -> None:
    torch.save(
        {
            "format": "styleforge-checkpoint-v1",
            "model_config": asdict(model.config),
            "model_state": model.state_dict(),
            "optimizer_state": optimizer_state,
            "epoch": epoch,
            "merge_table_hash": merge_table_hash,
        },
        path,
    )


@dataclass
class Checkpoint:
    config: ModelConfig
    model_state: dict
    optimizer_state: dict | None
    epoch: int
    merge_table_hash: str

    def restore(self, dtype: torch.dtype = torch.float32) -> StyleTransformer:
        model = StyleTransformer(self.config).to(dtype)
        model.load_state_dict(self.model_state)
        return model


def load_checkpoint(path: str) -> Checkpoint:
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if payload.get("format") != "styleforge-checkpoint-v1":
        raise DataError(f"{path} is not a styleforge checkpoint")
    return Checkpoint(
        config=ModelConfig(**payload["model_config"]),
        model_state=payload["model_state"],
        optimizer_state=payload["optimizer_state"],
        epoch=payload["epoch"],
        merge_table_hash=payload["merge_table_hash"],
    )


def batch_to_tensors(
    rows: Sequence[TokenSeq], device=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad a list of token sequences into (matrix, lengths)."""
    lengths = torch.tensor([len(r) for r in rows], dtype=torch.long, device=device)
    width = max(1, int(lengths.max().item()) if len(rows) else 1)
    out = torch.full((len(rows), width), PAD_ID, dtype=torch.long, device=device)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long, device=device)
    return out, lengths
