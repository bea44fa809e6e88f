"""Evaluation metrics and the serializable report they roll up into.

Corpus BLEU pools clipped n-gram counts (n = 1..4) over the whole corpus
before the geometric mean and brevity penalty; no smoothing is applied, so
a corpus with zero matches at any order scores 0. Scores are evaluated on
whitespace word tokens after detokenization, never on subwords.

Style accuracy uses a held-out classifier of the same LM-pair form as the
training discriminator but trained on separate pools, so a model is never
graded by its own training signal.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass

import torch

from .corpus import ParallelExample
from .errors import DataError
from .model import batch_to_tensors
from .styles import StyleLabel
from .tokenizer import TokenSeq

BLEU_MAX_ORDER = 4


@dataclass
class EvalReport:
    bleu: float
    direction: str
    n_sentences: int
    config_hash: str
    accuracy: float | None = None
    g_score: float | None = None
    perplexity: float | None = None

    def __post_init__(self):
        if (self.g_score is not None) != (self.accuracy is not None):
            raise DataError(
                "g_score is defined exactly when accuracy and bleu are both present"
            )
        for name in ("bleu", "accuracy", "g_score", "perplexity"):
            v = getattr(self, name)
            if v is not None and not math.isfinite(v):
                raise DataError(f"{name} must be finite, got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _ngrams(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[list], references: list[list]) -> float:
    """Corpus-level BLEU on a 0-100 scale, one reference per hypothesis."""
    if not hypotheses:
        raise DataError("BLEU needs a non-empty corpus")
    if len(hypotheses) != len(references):
        raise DataError(
            f"hypothesis/reference count mismatch "
            f"{len(hypotheses)} vs {len(references)}"
        )
    matched = [0] * BLEU_MAX_ORDER
    total = [0] * BLEU_MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_MAX_ORDER + 1):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(
                min(c, ref_counts[g]) for g, c in counts.items()
            )
    # Orders with no hypothesis n-grams at all (corpus shorter than n)
    # carry no evidence and drop out; zero matches among existing n-grams
    # score 0, there is no smoothing.
    present = [(m, t) for m, t in zip(matched, total) if t > 0]
    if hyp_len == 0 or not present:
        return 0.0
    if any(m == 0 for m, _ in present):
        return 0.0
    log_mean = sum(math.log(m / t) for m, t in present) / len(present)
    brevity = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(log_mean)


def style_accuracy(
    hypotheses: list[TokenSeq],
    target_style: StyleLabel,
    classifier,
    batch_rows: int = 256,
) -> float:
    """Percentage of hypotheses the classifier places in target_style.

    The decision threshold is strict: probability exactly 0.5 counts as a
    failure.
    """
    if not hypotheses:
        raise DataError("style accuracy needs at least one hypothesis")
    hits = 0
    with torch.no_grad():
        for start in range(0, len(hypotheses), batch_rows):
            chunk = hypotheses[start : start + batch_rows]
            tokens, lengths = batch_to_tensors(chunk)
            p_target = classifier.prob_target_batch(tokens, lengths)
            if target_style is StyleLabel.TARGET:
                hits += int((p_target > 0.5).sum())
            else:
                hits += int((p_target < 0.5).sum())
    return 100.0 * hits / len(hypotheses)


def g_score(accuracy: float, bleu: float) -> float:
    """Geometric mean of accuracy and BLEU, both on the 0-100 scale."""
    for name, v in (("accuracy", accuracy), ("bleu", bleu)):
        if not 0.0 <= v <= 100.0:
            raise DataError(f"{name} must lie in [0, 100], got {v}")
    return math.sqrt(accuracy * bleu)


def perplexity(model, examples: list[ParallelExample], direction: str) -> float:
    """exp(total NLL / total target tokens) under teacher forcing.

    direction "s2t" scores target given source; "t2s" the reverse. The
    end-of-sentence marker counts as a predicted token.
    """
    if not examples:
        raise DataError("perplexity needs a non-empty validation set")
    if direction not in ("s2t", "t2s"):
        raise DataError(f"direction must be s2t or t2s, got {direction!r}")
    total_nll = 0.0
    total_tokens = 0
    with torch.no_grad():
        for start in range(0, len(examples), 256):
            chunk = examples[start : start + 256]
            if direction == "s2t":
                src_rows = [e.src for e in chunk]
                tgt_rows = [e.tgt for e in chunk]
                style = StyleLabel.TARGET
            else:
                src_rows = [e.tgt for e in chunk]
                tgt_rows = [e.src for e in chunk]
                style = StyleLabel.SOURCE
            src, src_len = batch_to_tensors(src_rows)
            tgt, tgt_len = batch_to_tensors(tgt_rows)
            sums, counts = model.sequence_log_probs(src, src_len, tgt, tgt_len, style)
            total_nll += float(-sums.double().sum())
            total_tokens += int(counts.sum())
    return math.exp(total_nll / total_tokens)
