"""Trainable byte-pair-encoding subword tokenizer.

Words are the whitespace-delimited chunks of a sentence; each word gets an
explicit end-of-word marker symbol appended before merging, which makes
detokenization a pure string operation. Merge selection is greedy by pair
frequency with a lexicographic tie-break, so training is deterministic
across runs and platforms. Input text is treated as whitespace-normalized:
encode/decode round-trips sentences whose words are separated by single
spaces.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError

# Reserved ids. These are never produced by merges and never change.
PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
SOURCE_STYLE_ID = 4
TARGET_STYLE_ID = 5

PAD = "<pad>"
UNK = "<unk>"
BOS = "<bos>"
EOS = "<eos>"
SOURCE_STYLE = "<source>"
TARGET_STYLE = "<target>"

SPECIAL_SYMBOLS = (PAD, UNK, BOS, EOS, SOURCE_STYLE, TARGET_STYLE)
N_SPECIALS = len(SPECIAL_SYMBOLS)

WORD_END = "</w>"

# Strings a merge is never allowed to create.
_RESERVED = frozenset(SPECIAL_SYMBOLS) | {WORD_END}

# Minimum pair frequency for a merge; singleton pairs on tiny corpora are
# noise, not structure.
MIN_PAIR_FREQUENCY = 2

_FORMAT_TAG = "styleforge-bpe"
_FORMAT_VERSION = 1

TokenSeq = list[int]


@dataclass(frozen=True)
class MergeTable:
    """Ordered merge rules plus the symbol vocabulary they induce."""

    merges: tuple[tuple[str, str], ...]
    vocab: dict[str, int]
    budget: int
    _ranks: dict[tuple[str, str], int] = field(init=False, repr=False, compare=False)
    _symbols: dict[int, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self, "_ranks", {pair: i for i, pair in enumerate(self.merges)}
        )
        object.__setattr__(
            self, "_symbols", {i: s for s, i in self.vocab.items()}
        )
        for sym, expected in zip(SPECIAL_SYMBOLS, range(N_SPECIALS)):
            if self.vocab.get(sym) != expected:
                raise DataError(f"special symbol {sym!r} must have id {expected}")
        if len(self.vocab) > self.budget:
            raise DataError(
                f"vocabulary size {len(self.vocab)} exceeds budget {self.budget}"
            )

    def __len__(self) -> int:
        return len(self.vocab)

    def symbol(self, token_id: int) -> str:
        try:
            return self._symbols[token_id]
        except KeyError:
            raise DataError(f"token id {token_id} not in vocabulary") from None


def _word_symbols(word: str) -> list[str]:
    return list(word) + [WORD_END]


def _pair_counts(word_freq: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in word_freq.items():
        for a, b in zip(symbols, symbols[1:]):
            counts[(a, b)] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    merged = pair[0] + pair[1]
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: Iterable[str], vocab_budget: int) -> MergeTable:
    """Learn merges greedily by pair frequency until the budget is spent.

    Ties between equally frequent pairs go to the lexicographically smaller
    pair. Pairs occurring fewer than MIN_PAIR_FREQUENCY times never merge,
    and no merge may produce a reserved symbol string.
    """
    word_counter: Counter = Counter()
    for sentence in corpus:
        word_counter.update(sentence.split())
    if not word_counter:
        raise DataError("empty corpus: no words to train on")

    alphabet = sorted({ch for word in word_counter for ch in word if ch != WORD_END})
    base_size = N_SPECIALS + len(alphabet) + 1  # +1 for the word-end marker
    if vocab_budget < base_size:
        raise DataError(
            f"vocab budget {vocab_budget} below base alphabet size {base_size}"
        )

    vocab: dict[str, int] = {s: i for i, s in enumerate(SPECIAL_SYMBOLS)}
    for ch in alphabet:
        vocab[ch] = len(vocab)
    vocab[WORD_END] = len(vocab)

    word_freq: dict[tuple[str, ...], int] = {
        tuple(_word_symbols(w)): c for w, c in word_counter.items()
    }

    merges: list[tuple[str, str]] = []
    while len(vocab) < vocab_budget:
        counts = _pair_counts(word_freq)
        best = None
        for pair, freq in counts.items():
            if freq < MIN_PAIR_FREQUENCY:
                continue
            if pair[0] + pair[1] in _RESERVED:
                continue
            key = (-freq, pair)
            if best is None or key < best[0]:
                best = (key, pair)
        if best is None:
            break
        pair = best[1]
        merges.append(pair)
        vocab[pair[0] + pair[1]] = len(vocab)
        word_freq = {_merge_word(sym, pair): c for sym, c in word_freq.items()}

    return MergeTable(merges=tuple(merges), vocab=vocab, budget=vocab_budget)


def _apply_merges(symbols: list[str], ranks: dict[tuple[str, str], int]) -> list[str]:
    # Repeatedly apply the lowest-ranked applicable merge. Later merges can
    # never re-enable earlier ones, so this equals applying rules in order.
    while len(symbols) > 1:
        best: tuple[int, tuple[str, str]] | None = None
        for a, b in zip(symbols, symbols[1:]):
            r = ranks.get((a, b))
            if r is not None and (best is None or r < best[0]):
                best = (r, (a, b))
        if best is None:
            break
        symbols = list(_merge_word(tuple(symbols), best[1]))
    return symbols


def encode(text: str, table: MergeTable) -> TokenSeq:
    """Segment text into token ids; characters outside the vocabulary map to UNK."""
    ids: TokenSeq = []
    for word in text.split():
        symbols = _apply_merges(_word_symbols(word), table._ranks)
        for sym in symbols:
            ids.append(table.vocab.get(sym, UNK_ID))
    return ids


def decode(tokens: TokenSeq, table: MergeTable) -> str:
    """Invert encode: concatenate symbols and restore word boundaries.

    PAD/BOS/EOS/style ids are dropped; UNK renders as its literal symbol.
    Invalid ids raise.
    """
    words: list[str] = []
    current: list[str] = []
    for tid in tokens:
        if tid in (PAD_ID, BOS_ID, EOS_ID, SOURCE_STYLE_ID, TARGET_STYLE_ID):
            continue
        sym = table.symbol(tid)
        if sym == WORD_END:
            words.append("".join(current))
            current = []
        elif sym.endswith(WORD_END):
            current.append(sym[: -len(WORD_END)])
            words.append("".join(current))
            current = []
        else:
            current.append(sym)
    if current:
        words.append("".join(current))
    return " ".join(w for w in words if w)


def save_table(table: MergeTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_table(table))


def serialize_table(table: MergeTable) -> str:
    lines = [
        f"{_FORMAT_TAG} v{_FORMAT_VERSION} budget={table.budget} "
        f"merges={len(table.merges)} vocab={len(table.vocab)}"
    ]
    for a, b in table.merges:
        lines.append(f"{a}\t{b}")
    for sym, tid in sorted(table.vocab.items(), key=lambda kv: kv[1]):
        lines.append(f"{sym}\t{tid}")
    return "\n".join(lines) + "\n"


def load_table(path: str) -> MergeTable:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return deserialize_table(text)


def deserialize_table(text: str) -> MergeTable:
    lines = text.splitlines()
    if not lines:
        raise DataError("empty merge table file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != _FORMAT_TAG or head[1] != f"v{_FORMAT_VERSION}":
        raise DataError(f"bad merge table header: {lines[0]!r}")
    try:
        budget = int(head[2].split("=", 1)[1])
        n_merges = int(head[3].split("=", 1)[1])
        n_vocab = int(head[4].split("=", 1)[1])
    except (IndexError, ValueError) as exc:
        raise DataError(f"bad merge table header: {lines[0]!r}") from exc
    if len(lines) != 1 + n_merges + n_vocab:
        raise DataError(
            f"merge table line count {len(lines)} does not match header "
            f"({1 + n_merges + n_vocab} expected)"
        )
    merges = []
    for line in lines[1 : 1 + n_merges]:
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"bad merge rule line: {line!r}")
        merges.append((parts[0], parts[1]))
    vocab: dict[str, int] = {}
    for line in lines[1 + n_merges :]:
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"bad vocabulary line: {line!r}")
        vocab[parts[0]] = int(parts[1])
    return MergeTable(merges=tuple(merges), vocab=vocab, budget=budget)


def table_hash(table: MergeTable) -> str:
    """Stable content hash used to tie checkpoints to the tokenizer."""
    return hashlib.sha256(serialize_table(table).encode("utf-8")).hexdigest()


def encode_corpus(sentences: Sequence[str], table: MergeTable) -> list[TokenSeq]:
    return [encode(s, table) for s in sentences]
