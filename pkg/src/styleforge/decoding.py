"""Beam-search generation with length penalty, plus n-best reranking that
mixes forward and backward translation scores.

Hypotheses finishing on the end marker are set aside and compete only in
the final ranking, where cumulative log-probability is divided by
emitted-length ** alpha. Expansion itself ranks by cumulative score, so
the penalty never biases the search frontier. An unfinished hypothesis is
returned (flagged) only when nothing finished within the length limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DataError
from .model import StyleTransformer, batch_to_tensors
from .styles import StyleLabel
from .tokenizer import EOS_ID, TokenSeq


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 10
    length_penalty: float = 2.0
    max_len: int = 64
    mmi_lambda: float | None = None
    n_best: int = 1

    def __post_init__(self):
        if self.beam_size < 1:
            raise DataError(f"beam size must be >= 1, got {self.beam_size}")
        if self.length_penalty < 0:
            raise DataError(f"length penalty must be >= 0, got {self.length_penalty}")
        if not 1 <= self.n_best <= self.beam_size:
            raise DataError("n_best must lie in [1, beam_size]")
        if self.max_len < 1:
            raise DataError("max_len must be >= 1")
        if self.mmi_lambda is not None and not 0.0 <= self.mmi_lambda <= 1.0:
            raise DataError(f"reranking weight {self.mmi_lambda} outside [0, 1]")


@dataclass
class BeamHypothesis:
    tokens: TokenSeq
    log_prob: float
    finished: bool

    def emitted_length(self) -> int:
        # tokens emitted by the decoder, end marker included
        return len(self.tokens) + 1 if self.finished else max(len(self.tokens), 1)

    def penalized(self, alpha: float) -> float:
        return self.log_prob / self.emitted_length() ** alpha


def beam_search(
    model: StyleTransformer,
    x: TokenSeq,
    style: StyleLabel,
    config: DecodeConfig,
) -> list[BeamHypothesis]:
    """n_best hypotheses for one sentence, best first.

    Deterministic given (params, input, config). Every expansion of a live
    hypothesis by the end marker moves to the finished pool, so the beam
    budget constrains only unfinished prefixes.
    """
    alpha = config.length_penalty
    device = model.token_emb.weight.device
    max_len = min(config.max_len, model.config.max_positions - 1)
    with torch.no_grad():
        src, src_len = batch_to_tensors([x], device=device)
        memory, mem_blocked = model.encode(src, src_len, style)
        state = model.start_decoder(memory, mem_blocked)

        prefixes: list[tuple[int, ...]] = [()]
        scores = torch.zeros(1, dtype=torch.float64, device=device)
        tokens_in = torch.tensor([style.token_id], dtype=torch.long, device=device)
        finished: list[BeamHypothesis] = []

        for _ in range(max_len):
            logits = model.step(state, tokens_in)
            logp = F.log_softmax(logits, dim=-1).double()
            candidates = scores[:, None] + logp  # (n_live, V)

            # End-marker expansions inside the beam budget finalize; the
            # rest of the budget carries unfinished prefixes forward.
            flat = candidates.flatten()
            k = min(config.beam_size, flat.numel())
            top_scores, top_idx = torch.topk(flat, k)
            vocab = candidates.shape[1]
            live_prefixes: list[tuple[int, ...]] = []
            live_scores: list[float] = []
            live_parents: list[int] = []
            live_tokens: list[int] = []
            for s, idx in zip(top_scores.tolist(), top_idx.tolist()):
                if s == float("-inf"):
                    continue
                parent, token = divmod(idx, vocab)
                if token == EOS_ID:
                    finished.append(
                        BeamHypothesis(
                            tokens=list(prefixes[parent]),
                            log_prob=s,
                            finished=True,
                        )
                    )
                else:
                    live_prefixes.append(prefixes[parent] + (token,))
                    live_scores.append(s)
                    live_parents.append(parent)
                    live_tokens.append(token)
            if not live_prefixes:
                prefixes, scores = [], torch.zeros(0, dtype=torch.float64)
                break
            prefixes = live_prefixes
            scores = torch.tensor(live_scores, dtype=torch.float64, device=device)
            state.reorder(torch.tensor(live_parents, dtype=torch.long, device=device))
            tokens_in = torch.tensor(live_tokens, dtype=torch.long, device=device)

    if finished:
        ranked = sorted(
            range(len(finished)),
            key=lambda i: (-finished[i].penalized(alpha), i),
        )
        return [finished[i] for i in ranked[: config.n_best]]
    # length limit hit with nothing finished: best unfinished, flagged
    unfinished = [
        BeamHypothesis(tokens=list(p), log_prob=float(s), finished=False)
        for p, s in zip(prefixes, scores)
    ]
    ranked = sorted(
        range(len(unfinished)), key=lambda i: (-unfinished[i].penalized(alpha), i)
    )
    return [unfinished[i] for i in ranked[: config.n_best]]


def mmi_rerank(
    model: StyleTransformer,
    x: TokenSeq,
    candidates: list[TokenSeq],
    lam: float,
    direction: StyleLabel = StyleLabel.TARGET,
) -> TokenSeq:
    """Pick argmax of lam * log P(y|x, dir) + (1-lam) * log P(x|y, reverse).

    Scores are unnormalized sums over complete sequences. Ties keep the
    earliest candidate (the original beam rank).
    """
    if not candidates:
        raise DataError("reranking needs at least one candidate")
    if not 0.0 <= lam <= 1.0:
        raise DataError(f"reranking weight {lam} outside [0, 1]")
    device = model.token_emb.weight.device
    n = len(candidates)
    with torch.no_grad():
        total = torch.zeros(n, dtype=torch.float64)
        if lam > 0.0:
            src, src_len = batch_to_tensors([x] * n, device=device)
            tgt, tgt_len = batch_to_tensors(candidates, device=device)
            fwd, _ = model.sequence_log_probs(src, src_len, tgt, tgt_len, direction)
            total += lam * fwd.double().cpu()
        if lam < 1.0:
            src, src_len = batch_to_tensors(candidates, device=device)
            tgt, tgt_len = batch_to_tensors([x] * n, device=device)
            bwd, _ = model.sequence_log_probs(
                src, src_len, tgt, tgt_len, direction.opposite()
            )
            total += (1.0 - lam) * bwd.double().cpu()
    best = 0
    for i in range(1, n):
        if float(total[i]) > float(total[best]):
            best = i
    return list(candidates[best])


def decode_sentence(
    model: StyleTransformer,
    x: TokenSeq,
    style: StyleLabel,
    config: DecodeConfig,
) -> tuple[TokenSeq, bool]:
    """Beam decode one sentence, reranking the n-best list when configured.

    Returns (tokens, finished flag).
    """
    hyps = beam_search(model, x, style, config)
    if config.mmi_lambda is not None and len(hyps) > 1:
        chosen = mmi_rerank(
            model, x, [h.tokens for h in hyps], config.mmi_lambda, direction=style
        )
        finished = next(h.finished for h in hyps if h.tokens == chosen)
        return chosen, finished
    return list(hyps[0].tokens), hyps[0].finished


def decode_corpus(
    model: StyleTransformer,
    sentences: list[TokenSeq],
    style: StyleLabel,
    config: DecodeConfig,
    batch_rows: int = 128,
) -> list[TokenSeq]:
    """Decode a corpus. Greedy configurations use the batched rollout path."""
    greedy = (
        config.beam_size == 1
        and config.length_penalty == 0.0
        and config.mmi_lambda is None
    )
    out: list[TokenSeq] = []
    with torch.no_grad():
        if greedy:
            device = model.token_emb.weight.device
            for start in range(0, len(sentences), batch_rows):
                chunk = sentences[start : start + batch_rows]
                src, src_len = batch_to_tensors(chunk, device=device)
                _, tokens, content = model.rollout(src, src_len, style, config.max_len)
                out.extend(
                    tokens[i, : int(content[i])].tolist() for i in range(len(chunk))
                )
        else:
            for x in sentences:
                tokens, _ = decode_sentence(model, x, style, config)
                out.append(tokens)
    return out
