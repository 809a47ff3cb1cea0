"""Caption processing: tokenization, caption composition, and EDA-style augmentation.

Two tokenizer backends share one fixed-length output contract:

* ``BpeVocabulary`` — byte-pair encoding loaded from the common two-file
  format (``vocab.txt``: one token per line, line number = id;
  ``merges.txt``: one space-separated symbol pair per line, rank = line
  number). Word symbols start as characters with ``</w>`` appended to the
  final one.
* ``HashVocabulary`` — whitespace words mapped to stable hash buckets; no
  files needed, meant for synthetic desk-scale runs.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CONTEXT_LENGTH = 77


class OrderFlag(enum.Enum):
    """Which caption leads the composed sentence."""

    A_FIRST = "a-first"
    B_FIRST = "b-first"


@dataclass
class TokenSequence:
    """Fixed-length id sequence: start token, content, end token, padding."""

    ids: np.ndarray  # int64, length = context length
    eot_index: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)


@dataclass
class HashVocabulary:
    """Word-level tokenizer hashing each word into a fixed id range.

    Ids: pad = 0, start-of-text = 1, end-of-text = 2, words in [3, size).
    The hash (crc32) is stable across processes and platforms.
    """

    size: int = 4096
    pad_id: int = 0
    sot_id: int = 1
    eot_id: int = 2

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("hash vocabulary needs size >= 8")
        if len({self.pad_id, self.sot_id, self.eot_id}) != 3:
            raise ValueError("special token ids must be distinct")

    def encode_words(self, words: list[str]) -> list[int]:
        n_buckets = self.size - 3
        return [3 + zlib.crc32(w.encode("utf-8")) % n_buckets for w in words]


@dataclass
class BpeVocabulary:
    """Byte-pair vocabulary with merge ranks and declared special tokens."""

    token_to_id: dict[str, int]
    merge_ranks: dict[tuple[str, str], int]
    sot_id: int
    eot_id: int
    pad_id: int
    _cache: dict[str, list[int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len({self.sot_id, self.eot_id, self.pad_id}) != 3:
            raise ValueError("special token ids must be distinct")
        for (a, b) in self.merge_ranks:
            if a not in self.token_to_id or b not in self.token_to_id:
                raise ValueError(f"merge ({a!r}, {b!r}) refers to out-of-vocabulary symbols")

    @property
    def size(self) -> int:
        return len(self.token_to_id)

    def _bpe(self, word: str) -> list[str]:
        symbols = list(word[:-1]) + [word[-1] + "</w>"]
        while len(symbols) > 1:
            pairs = [(symbols[i], symbols[i + 1]) for i in range(len(symbols) - 1)]
            ranked = [(self.merge_ranks[p], i) for i, p in enumerate(pairs) if p in self.merge_ranks]
            if not ranked:
                break
            _, i = min(ranked)
            symbols = symbols[:i] + [symbols[i] + symbols[i + 1]] + symbols[i + 2:]
        return symbols

    def encode_words(self, words: list[str]) -> list[int]:
        ids: list[int] = []
        for word in words:
            if word not in self._cache:
                # symbols absent from the vocabulary are dropped silently
                self._cache[word] = [
                    self.token_to_id[s] for s in self._bpe(word) if s in self.token_to_id
                ]
            ids.extend(self._cache[word])
        return ids


Vocabulary = HashVocabulary | BpeVocabulary


def load_bpe_vocabulary(
    vocab_file: str | Path,
    merges_file: str | Path,
    sot_token: str = "<|startoftext|>",
    eot_token: str = "<|endoftext|>",
    pad_token: str = "<|pad|>",
) -> BpeVocabulary:
    """Load vocab.txt / merges.txt files; special tokens must be vocab entries."""
    token_to_id: dict[str, int] = {}
    with open(vocab_file, encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            token = line.rstrip("\n")
            if token:
                token_to_id[token] = i
    merge_ranks: dict[tuple[str, str], int] = {}
    with open(merges_file, encoding="utf-8") as fh:
        for rank, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{merges_file}: line {rank + 1}: expected two symbols")
            merge_ranks[(parts[0], parts[1])] = rank
    for name, tok in [("start", sot_token), ("end", eot_token), ("pad", pad_token)]:
        if tok not in token_to_id:
            raise ValueError(f"{name} token {tok!r} is not in the vocabulary")
    return BpeVocabulary(
        token_to_id=token_to_id,
        merge_ranks=merge_ranks,
        sot_id=token_to_id[sot_token],
        eot_id=token_to_id[eot_token],
        pad_id=token_to_id[pad_token],
    )


def normalize_text(text: str) -> str:
    """Lower-case and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def tokenize(text: str, vocab: Vocabulary, context_length: int = DEFAULT_CONTEXT_LENGTH) -> TokenSequence:
    """Encode text into a fixed-length TokenSequence.

    Content that does not fit is truncated so the end-of-text token always
    lands inside the sequence (in the final slot when truncating).
    """
    if context_length < 3:
        raise ValueError("context_length must be >= 3")
    normalized = normalize_text(text)
    if not normalized:
        raise ValueError("text is empty after normalization")
    content = vocab.encode_words(normalized.split(" "))
    max_content = context_length - 2
    if len(content) > max_content:
        content = content[:max_content]
    ids = np.full(context_length, vocab.pad_id, dtype=np.int64)
    ids[0] = vocab.sot_id
    ids[1:1 + len(content)] = content
    eot_index = 1 + len(content)
    ids[eot_index] = vocab.eot_id
    return TokenSequence(ids=ids, eot_index=eot_index)


def compose_captions(a: str, b: str, order: OrderFlag) -> str:
    """Join two captions with the conjunction "and" in the requested order."""
    if not a or not b:
        raise ValueError("cannot compose an empty caption")
    if order is OrderFlag.A_FIRST:
        return f"{a} and {b}"
    return f"{b} and {a}"


def sample_order(rng: np.random.Generator) -> OrderFlag:
    """Draw the caption order, each side leading half the time."""
    return OrderFlag.A_FIRST if rng.random() < 0.5 else OrderFlag.B_FIRST


def swap_words(words: list[str], i: int, j: int) -> list[str]:
    """Return a copy of words with positions i and j exchanged."""
    out = list(words)
    out[i], out[j] = out[j], out[i]
    return out


def eda_augment(caption: str, rng: np.random.Generator, strength: float) -> str:
    """Perturb a caption with one lexicon-free EDA operation.

    Picks one of {word swap, word deletion, word duplication-insertion} and
    applies it ceil(strength * num_words) times. Deletion never empties the
    caption; insertion only duplicates words already present.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must be in [0, 1]")
    words = caption.split()
    if not words:
        raise ValueError("caption has no words")
    n_ops = math.ceil(strength * len(words))
    if n_ops == 0:
        return caption
    op = int(rng.integers(3))
    for _ in range(n_ops):
        if op == 0 and len(words) >= 2:  # swap
            i, j = rng.choice(len(words), size=2, replace=False)
            words = swap_words(words, int(i), int(j))
        elif op == 1 and len(words) >= 2:  # delete, keep at least one word
            del words[int(rng.integers(len(words)))]
        elif op == 2:  # duplicate-insert
            w = words[int(rng.integers(len(words)))]
            words.insert(int(rng.integers(len(words) + 1)), w)
    return " ".join(words)
