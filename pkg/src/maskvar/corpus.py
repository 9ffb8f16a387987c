"""Synthetic sentences with known per-position difficulty, plus text IO.

The default grammar mixes three kinds of token:

* FUNCTION tokens are fully determined by the sentence topic and the parity
  of the position, so a model that has inferred the topic predicts them
  exactly.
* CONTENT tokens come from a per-topic Zipf-like distribution; they are
  partially predictable once the topic is known.
* NOISE tokens are uniform over their own sub-vocabulary and carry no
  information, so their loss can never drop below ``ln(num_noise)``.

Every generated sentence keeps its per-position class labels so trained
models can be inspected by difficulty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
RESERVED = (PAD, MASK, UNK)

FUNCTION, CONTENT, NOISE = 0, 1, 2
LABEL_CHARS = "FCN"


class CorpusParseError(ValueError):
    """A corpus or vocabulary file could not be parsed."""


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """One sentence as vocabulary indices, optionally with difficulty labels."""

    tokens: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", np.asarray(self.tokens, dtype=np.int64))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != self.tokens.shape:
                raise ValueError("labels must align with tokens")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def length(self) -> int:
        return len(self)

    def replace_tokens(self, tokens: np.ndarray) -> "TokenSequence":
        return TokenSequence(tokens, self.labels)

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and np.array_equal(self.labels, other.labels)
        )
        return np.array_equal(self.tokens, other.tokens) and same_labels


class Vocabulary:
    """Bijective token <-> index map; the first three indices are reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:3]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, mask_id, unk_id = 0, 1, 2
    num_reserved = 3

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(w, self.unk_id) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        for lineno, line in enumerate(lines, 1):
            if not line or any(ch.isspace() for ch in line):
                raise CorpusParseError(f"{path}:{lineno}: vocabulary entries must be single non-empty tokens")
        if tuple(lines[:3]) != RESERVED:
            raise CorpusParseError(f"{path}: first three entries must be {', '.join(RESERVED)}")
        return cls(lines)


@dataclass
class SyntheticGrammar:
    num_function: int = 16
    num_topics: int = 8
    content_per_topic: int = 12
    num_noise: int = 16
    weights: tuple[float, float, float] = (0.5, 0.35, 0.15)
    min_len: int = 12
    max_len: int = 24
    zipf_exponent: float = 1.0

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if len(self.weights) != 3 or min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("grammar weights must be three non-negative numbers summing to 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.num_function, self.num_topics, self.content_per_topic, self.num_noise) < 1:
            raise ValueError("every token class needs at least one token")

    def vocabulary(self) -> Vocabulary:
        words = [f"f{i:02d}" for i in range(self.num_function)]
        words += [f"t{t}w{j:02d}" for t in range(self.num_topics) for j in range(self.content_per_topic)]
        words += [f"n{i:02d}" for i in range(self.num_noise)]
        return Vocabulary(list(RESERVED) + words)

    @property
    def content_probs(self) -> np.ndarray:
        w = 1.0 / np.arange(1, self.content_per_topic + 1) ** self.zipf_exponent
        return w / w.sum()

    def function_id(self, topic: int, position: int) -> int:
        return Vocabulary.num_reserved + (2 * topic + position % 2) % self.num_function

    def content_id(self, topic: int, j: int) -> int:
        return Vocabulary.num_reserved + self.num_function + topic * self.content_per_topic + j

    def noise_id(self, j: int) -> int:
        return Vocabulary.num_reserved + self.num_function + self.num_topics * self.content_per_topic + j

    def bayes_loss(self, label: int) -> float:
        """Irreducible cross-entropy of a position of the given class once the topic is known."""
        if label == FUNCTION:
            return 0.0
        if label == NOISE:
            return math.log(self.num_noise)
        p = self.content_probs
        return float(-(p * np.log(p)).sum())


def generate_corpus(grammar: SyntheticGrammar, num_sentences: int, rng: np.random.Generator) -> list[TokenSequence]:
    corpus = []
    cprobs = grammar.content_probs
    for _ in range(num_sentences):
        n = int(rng.integers(grammar.min_len, grammar.max_len + 1))
        topic = int(rng.integers(grammar.num_topics))
        labels = rng.choice(3, size=n, p=grammar.weights)
        tokens = np.empty(n, dtype=np.int64)
        for i, lab in enumerate(labels):
            if lab == FUNCTION:
                tokens[i] = grammar.function_id(topic, i)
            elif lab == CONTENT:
                tokens[i] = grammar.content_id(topic, int(rng.choice(grammar.content_per_topic, p=cprobs)))
            else:
                tokens[i] = grammar.noise_id(int(rng.integers(grammar.num_noise)))
        corpus.append(TokenSequence(tokens, labels))
    return corpus


def sidecar_paths(path: str | Path) -> tuple[Path, Path]:
    """Vocabulary and label sidecars for a corpus file: ``x.txt`` -> ``x.vocab``, ``x.labels``."""
    path = Path(path)
    return path.with_suffix(".vocab"), path.with_suffix(".labels")


def save_corpus(corpus: Sequence[TokenSequence], vocab: Vocabulary, path: str | Path, vocab_path=None) -> None:
    path = Path(path)
    default_vocab, labels_path = sidecar_paths(path)
    vocab.save(vocab_path or default_vocab)
    path.write_text("".join(" ".join(vocab.decode(s.tokens)) + "\n" for s in corpus), encoding="utf-8")
    if corpus and all(s.labels is not None for s in corpus):
        labels_path.write_text(
            "".join("".join(LABEL_CHARS[int(c)] for c in s.labels) + "\n" for s in corpus), encoding="utf-8"
        )
    elif labels_path.exists():
        labels_path.unlink()


def load_corpus(path: str | Path, vocab: Vocabulary | str | Path | None = None) -> tuple[list[TokenSequence], Vocabulary]:
    """Read a whitespace-tokenized corpus; unknown words map to ``[UNK]``.

    The vocabulary comes from ``vocab`` (object or path) or the ``.vocab``
    sidecar.  A ``.labels`` sidecar, when present, restores difficulty labels.
    """
    path = Path(path)
    vocab_sidecar, labels_path = sidecar_paths(path)
    if vocab is None:
        vocab = vocab_sidecar
    if not isinstance(vocab, Vocabulary):
        vocab = Vocabulary.load(vocab)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as err:
        raise CorpusParseError(f"{path}: not valid UTF-8 ({err})") from err
    label_lines = labels_path.read_text(encoding="utf-8").splitlines() if labels_path.exists() else None
    if label_lines is not None and len(label_lines) != len(lines):
        raise CorpusParseError(f"{labels_path}: {len(label_lines)} label lines for {len(lines)} sentences")
    corpus = []
    for lineno, line in enumerate(lines, 1):
        words = line.split()
        if not words:
            raise CorpusParseError(f"{path}:{lineno}: empty sentence")
        bad = [w for w in words if w in (PAD, MASK)]
        if bad:
            raise CorpusParseError(f"{path}:{lineno}: reserved token {bad[0]} inside a sentence")
        labels = None
        if label_lines is not None:
            row = label_lines[lineno - 1]
            if len(row) != len(words) or any(c not in LABEL_CHARS for c in row):
                raise CorpusParseError(f"{labels_path}:{lineno}: labels do not match the sentence")
            labels = [LABEL_CHARS.index(c) for c in row]
        corpus.append(TokenSequence(vocab.encode(words), labels))
    return corpus, vocab


@dataclass
class Batch:
    """Sentences padded to the longest one with ``[PAD]``."""

    sentences: list[TokenSequence]
    tokens: np.ndarray = field(init=False)
    lengths: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lengths = np.array([len(s) for s in self.sentences], dtype=np.int64)
        width = int(self.lengths.max()) if len(self.sentences) else 0
        self.tokens = np.full((len(self.sentences), width), Vocabulary.pad_id, dtype=np.int64)
        for b, s in enumerate(self.sentences):
            self.tokens[b, : len(s)] = s.tokens

    def __len__(self):
        return len(self.sentences)

    @property
    def padding_mask(self) -> np.ndarray:
        """True on real tokens, False on padding."""
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]


def batch_iter(
    corpus: Sequence[TokenSequence], batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[Batch]:
    """One pass over ``corpus``; shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(corpus)) if rng is None else rng.permutation(len(corpus))
    for start in range(0, len(order), batch_size):
        yield Batch([corpus[i] for i in order[start : start + batch_size]])
