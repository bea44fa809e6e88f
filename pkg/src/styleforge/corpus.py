"""Data ingestion, batching, and the synthetic style-pair generator.

Parallel data lives in two aligned plain-text files (one sentence per
line); unlabeled pools are single files of one style. Sentences longer
than the configured token limit are dropped at load time with a warning
count rather than truncated, so BLEU references are never corrupted.

The synthetic generator produces formal sentences from a template grammar
and derives the informal side with a deterministic, invertible rewrite
(lowercasing, a fixed contraction lexicon, final-punctuation drop). The
informal-to-formal mapping is therefore a function, so a sufficiently
expressive model can solve the task exactly.
"""

from __future__ import annotations

import itertools
import logging
import random
from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import DataError
from .styles import StyleLabel
from .tokenizer import PAD_ID, MergeTable, TokenSeq, encode

logger = logging.getLogger(__name__)

DEFAULT_MAX_SENTENCE_TOKENS = 64


@dataclass(frozen=True)
class ParallelExample:
    """Aligned sentence pair: src holds the SOURCE style, tgt the TARGET style."""

    src: TokenSeq
    tgt: TokenSeq
    id: int


@dataclass(frozen=True)
class UnlabeledPool:
    style: StyleLabel
    sentences: list[TokenSeq]

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass(frozen=True)
class Batch:
    """Padded id matrices with per-row lengths. PAD appears only as a suffix.

    Parallel batches carry both sides; unlabeled batches carry src only,
    labeled with the pool style.
    """

    kind: str  # "parallel" | "unlabeled"
    src: torch.Tensor
    src_lengths: torch.Tensor
    style: StyleLabel
    example_ids: tuple[int, ...]
    tgt: torch.Tensor | None = None
    tgt_lengths: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.src.shape[0]

    def padded_cells(self) -> int:
        cells = self.src.numel()
        if self.tgt is not None:
            cells = max(cells, self.tgt.numel())
        return cells


def _read_lines(path: str) -> list[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.rstrip("\n") for line in f]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _check_lines(lines: list[str], path: str) -> None:
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            raise DataError(f"{path}: empty line {i}")


def load_parallel(
    src_path: str,
    tgt_path: str,
    table: MergeTable,
    max_len: int = DEFAULT_MAX_SENTENCE_TOKENS,
) -> list[ParallelExample]:
    """Line i of each file forms example i. Overlong pairs are dropped with a warning."""
    src_lines = _read_lines(src_path)
    tgt_lines = _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise DataError(
            f"line count mismatch {len(src_lines)} vs {len(tgt_lines)} "
            f"({src_path} vs {tgt_path})"
        )
    _check_lines(src_lines, src_path)
    _check_lines(tgt_lines, tgt_path)
    examples = []
    rejected = 0
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        src_ids = encode(s, table)
        tgt_ids = encode(t, table)
        if len(src_ids) > max_len or len(tgt_ids) > max_len:
            rejected += 1
            continue
        examples.append(ParallelExample(src=src_ids, tgt=tgt_ids, id=i))
    if rejected:
        logger.warning(
            "rejected %d of %d pairs longer than %d tokens",
            rejected,
            len(src_lines),
            max_len,
        )
    if not examples:
        raise DataError(f"no usable examples in {src_path}/{tgt_path}")
    return examples


def load_unlabeled(
    path: str,
    style: StyleLabel,
    table: MergeTable,
    max_len: int = DEFAULT_MAX_SENTENCE_TOKENS,
) -> UnlabeledPool:
    lines = _read_lines(path)
    if not lines:
        raise DataError(f"{path}: empty file")
    _check_lines(lines, path)
    sentences = []
    rejected = 0
    for line in lines:
        ids = encode(line, table)
        if len(ids) > max_len:
            rejected += 1
            continue
        sentences.append(ids)
    if rejected:
        logger.warning(
            "rejected %d of %d sentences longer than %d tokens",
            rejected,
            len(lines),
            max_len,
        )
    if not sentences:
        raise DataError(f"{path}: no usable sentences")
    return UnlabeledPool(style=style, sentences=sentences)


def _pad_matrix(rows: Sequence[TokenSeq]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(r) for r in rows], dtype=torch.long)
    width = int(lengths.max().item())
    out = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out, lengths


def _greedy_groups(
    lengths: list[int], max_tokens: int, what: str
) -> list[tuple[int, int]]:
    """Split [0, n) into consecutive groups whose padded cell count fits the budget."""
    groups = []
    start = 0
    width = 0
    for i, ln in enumerate(lengths):
        if ln > max_tokens:
            raise DataError(
                f"single {what} of length {ln} exceeds the {max_tokens}-token budget"
            )
        new_width = max(width, ln)
        if i > start and (i - start + 1) * new_width > max_tokens:
            groups.append((start, i))
            start = i
            width = ln
        else:
            width = new_width
    groups.append((start, len(lengths)))
    return groups


def make_batches(
    examples: Sequence[ParallelExample],
    max_tokens: int,
    shuffle_seed: int | None = None,
) -> list[Batch]:
    """Greedy fill in (shuffled) order; each side's padded matrix fits the budget."""
    if not examples:
        return []
    order = list(range(len(examples)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    # Constrain by the longer side so both matrices respect the budget.
    row_cost = [
        max(len(examples[i].src), len(examples[i].tgt)) for i in order
    ]
    batches = []
    for start, stop in _greedy_groups(row_cost, max_tokens, "example"):
        chunk = [examples[i] for i in order[start:stop]]
        src, src_len = _pad_matrix([ex.src for ex in chunk])
        tgt, tgt_len = _pad_matrix([ex.tgt for ex in chunk])
        batches.append(
            Batch(
                kind="parallel",
                src=src,
                src_lengths=src_len,
                style=StyleLabel.SOURCE,
                example_ids=tuple(ex.id for ex in chunk),
                tgt=tgt,
                tgt_lengths=tgt_len,
            )
        )
    return batches


def make_pool_batches(
    pool: UnlabeledPool,
    max_tokens: int,
    shuffle_seed: int | None = None,
    limit: int | None = None,
) -> list[Batch]:
    """Batch a single-style pool; optional per-epoch sentence cap."""
    if not pool.sentences:
        return []
    order = list(range(len(pool.sentences)))
    if shuffle_seed is not None:
        random.Random(shuffle_seed).shuffle(order)
    if limit is not None:
        order = order[:limit]
    lengths = [len(pool.sentences[i]) for i in order]
    batches = []
    for start, stop in _greedy_groups(lengths, max_tokens, "sentence"):
        chunk_ids = order[start:stop]
        src, src_len = _pad_matrix([pool.sentences[i] for i in chunk_ids])
        batches.append(
            Batch(
                kind="unlabeled",
                src=src,
                src_lengths=src_len,
                style=pool.style,
                example_ids=tuple(chunk_ids),
            )
        )
    return batches


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# Formal-side token sequences -> informal replacements. Applied after
# lowercasing, longest match first. The informal images are distinct and
# never appear as formal template words, so the rewrite is invertible.
_LEXICON: list[tuple[tuple[str, ...], tuple[str, ...]]] = [
    (("thank", "you"), ("thx",)),
    (("going", "to"), ("gonna",)),
    (("have", "to"), ("gotta",)),
    (("do", "not"), ("dont",)),
    (("i", "will"), ("ill",)),
    (("i", "am"), ("im",)),
    (("you",), ("u",)),
    (("are",), ("r",)),
    (("please",), ("plz",)),
    (("because",), ("cuz",)),
    (("tonight",), ("2nite",)),
    (("tomorrow",), ("tmrw",)),
    (("great",), ("gr8",)),
    (("before",), ("b4",)),
    (("really",), ("rly",)),
    (("probably",), ("prolly",)),
    (("about",), ("abt",)),
    (("very",), ("v",)),
]

_INVERSE_LEXICON: dict[str, tuple[str, ...]] = {
    inf[0]: formal for formal, inf in _LEXICON
}

_PLACES = [
    "library", "museum", "market", "cinema", "stadium", "airport", "bakery",
    "harbor", "gallery", "station", "garden", "office", "theater", "campus",
    "plaza", "workshop", "observatory", "courthouse", "embassy", "vineyard",
    "cathedral", "aquarium", "bookstore", "conservatory",
]
_TIMES = [
    "today", "tomorrow", "tonight", "shortly", "soon", "later", "afterwards",
    "eventually", "momentarily", "presently",
]
_ADJS = [
    "wonderful", "great", "pleasant", "delicious", "interesting", "beautiful",
    "generous", "helpful", "remarkable", "lovely", "thoughtful", "elegant",
    "impressive", "delightful", "charming", "gracious", "splendid", "superb",
    "marvelous", "exquisite", "admirable", "excellent", "magnificent", "refined",
]
_ADVS = [
    "definitely", "certainly", "probably", "surely", "truly", "honestly",
    "absolutely", "genuinely", "undoubtedly", "sincerely", "gladly", "really",
]
_FOODS = [
    "dinner", "soup", "salad", "bread", "coffee", "cake", "stew", "pastry",
    "casserole", "pudding", "roast", "omelette",
]
_OBJECTS = [
    "gift", "letter", "book", "painting", "advice", "invitation", "package",
    "photograph", "manuscript", "bouquet", "souvenir", "certificate",
    "recording", "sketch", "recipe", "itinerary",
]
_EVENTS = [
    "concert", "lecture", "wedding", "festival", "meeting", "exhibition",
    "ceremony", "rehearsal", "banquet", "seminar", "auction", "premiere",
    "recital", "conference",
]
_TASKS = [
    "report", "essay", "project", "assignment", "proposal", "review",
    "summary", "presentation", "translation", "application",
]
_DAYS = [
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday",
    "sunday", "noon",
]

_TEMPLATES: list[tuple[str, tuple[list[str], ...]]] = [
    ("I am {0} going to the {1} {2} .", (_ADVS, _PLACES, _TIMES)),
    ("I do not like the {0} {1} at the {2} .", (_ADJS, _FOODS, _PLACES)),
    ("Thank you for the {0} {1} you sent {2} .", (_ADJS, _OBJECTS, _TIMES)),
    (
        "We are planning to visit the {0} {1} because of the {2} .",
        (_PLACES, _TIMES, _EVENTS),
    ),
    ("I really enjoyed the {0} {1} at the {2} .", (_ADJS, _EVENTS, _PLACES)),
    (
        "Please let me know about the {0} {1} before {2} .",
        (_ADJS, _OBJECTS, _DAYS),
    ),
    ("I will {0} see you at the {1} {2} .", (_ADVS, _PLACES, _TIMES)),
    (
        "I am very happy about the {0} {1} from the {2} .",
        (_ADJS, _OBJECTS, _PLACES),
    ),
    (
        "You have to finish the {0} before {1} because of the {2} .",
        (_TASKS, _DAYS, _EVENTS),
    ),
    (
        "We should probably go to the {0} before the {1} {2} .",
        (_PLACES, _EVENTS, _TIMES),
    ),
    (
        "I am not sure about the {0} {1} from the {2} .",
        (_ADJS, _OBJECTS, _EVENTS),
    ),
    (
        "They are going to the {0} because of the {1} {2} .",
        (_PLACES, _ADJS, _EVENTS),
    ),
]


def informalize(formal: str) -> str:
    """Deterministic formal-to-informal rewrite: lowercase, contract, drop final '.'."""
    tokens = formal.split()
    if tokens and tokens[-1] == ".":
        tokens = tokens[:-1]
    tokens = [t.lower() for t in tokens]
    out: list[str] = []
    i = 0
    while i < len(tokens):
        for formal_seq, informal_seq in _LEXICON:
            if tuple(tokens[i : i + len(formal_seq)]) == formal_seq:
                out.extend(informal_seq)
                i += len(formal_seq)
                break
        else:
            out.append(tokens[i])
            i += 1
    return " ".join(out)


def formalize(informal: str) -> str:
    """Inverse of informalize on generated sentences."""
    out: list[str] = []
    for token in informal.split():
        out.extend(_INVERSE_LEXICON.get(token, (token,)))
    if out:
        out[0] = out[0].capitalize()
    out.append(".")
    return " ".join(out)


def _all_formal_sentences() -> list[str]:
    sentences = []
    for template, slots in _TEMPLATES:
        for choice in itertools.product(*slots):
            sentences.append(template.format(*choice))
    return sentences


def synth_corpus(
    seed: int, n_parallel: int, n_unlabeled_per_style: int
) -> tuple[list[tuple[str, str]], list[str], list[str]]:
    """Deterministic synthetic data: parallel (informal, formal) text pairs
    plus disjoint single-style pools.

    Pool sentences never overlap the parallel pairs, and the two pools use
    disjoint underlying sentences, mirroring genuinely unpaired data.
    """
    if n_parallel < 1 or n_unlabeled_per_style < 1:
        raise DataError("synthetic corpus sizes must be at least 1")
    space = _all_formal_sentences()
    needed = n_parallel + 2 * n_unlabeled_per_style
    if needed > len(space):
        raise DataError(
            f"requested {needed} distinct sentences but the grammar "
            f"only generates {len(space)}"
        )
    rng = random.Random(seed)
    rng.shuffle(space)
    parallel = [(informalize(s), s) for s in space[:n_parallel]]
    lo = n_parallel
    hi = n_parallel + n_unlabeled_per_style
    pool_source = [informalize(s) for s in space[lo:hi]]
    pool_target = space[hi : hi + n_unlabeled_per_style]
    return parallel, pool_source, pool_target
