"""Vocabularies, substitution neighborhoods and perturbation sets.

File formats (UTF-8, tab separated):

* dataset: ``label<TAB>tokens`` or ``label<TAB>premise<TAB>hypothesis``
* neighbors: ``word<TAB>neighbor neighbor ...``
* vectors: ``word v1 ... vd`` (space separated)
* LM scores: ``token window<TAB>log_prob``
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from .interval import ConfigurationError


class DataError(ValueError):
    """Malformed input file or example."""


class FilteringError(RuntimeError):
    pass


class Vocabulary:
    def __init__(self, words: Iterable[str] = ()):
        self.words: list[str] = []
        self.index: dict[str, int] = {}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.index:
            self.index[word] = len(self.words)
            self.words.append(word)
        return self.index[word]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.index

    def __getitem__(self, word: str) -> int:
        return self.index[word]

    def __iter__(self):
        return iter(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.words == other.words


class NeighborTable:
    """Word -> substitute words, never listing the word itself.

    Neighbors outside ``vocab`` (when one is given) are dropped on insert.
    """

    def __init__(self, neighbors: dict[str, Sequence[str]] | None = None,
                 vocab: Vocabulary | None = None):
        self.vocab = vocab
        self._table: dict[str, tuple[str, ...]] = {}
        for w, ns in (neighbors or {}).items():
            self.set(w, ns)

    def set(self, word: str, neighbors: Sequence[str]):
        seen = []
        for n in neighbors:
            if n == word or n in seen:
                continue
            if self.vocab is not None and n not in self.vocab:
                continue
            seen.append(n)
        self._table[word] = tuple(seen)

    def get(self, word: str) -> tuple[str, ...]:
        return self._table.get(word, ())

    def words(self) -> list[str]:
        return list(self._table)

    def items(self):
        return self._table.items()

    def __len__(self):
        return len(self._table)

    def __eq__(self, other):
        return isinstance(other, NeighborTable) and self._table == other._table


@dataclass(frozen=True)
class Example:
    """A labelled example. For two-sequence tasks ``premise`` is set and
    ``tokens`` holds the hypothesis, which is the only perturbable side."""

    tokens: tuple[str, ...]
    label: int
    premise: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.premise is not None:
            object.__setattr__(self, "premise", tuple(self.premise))
        if not self.tokens:
            raise DataError("example has no tokens")
        if self.label < 0:
            raise DataError(f"negative label {self.label}")


@dataclass(frozen=True)
class SubstitutionSpec:
    """Allowed words at each position; ``candidates[i][0]`` is the original."""

    tokens: tuple[str, ...]
    candidates: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if len(self.tokens) != len(self.candidates):
            raise DataError("one candidate list per token required")
        for t, cs in zip(self.tokens, self.candidates):
            if not cs or cs[0] != t:
                raise DataError(f"candidate list for {t!r} must start with the token")

    def __len__(self):
        return len(self.tokens)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.candidates]

    def perturbable(self) -> list[int]:
        return [i for i, c in enumerate(self.candidates) if len(c) > 1]

    def enumerate(self) -> Iterator[tuple[str, ...]]:
        return itertools.product(*self.candidates)

    def sample(self, rng: np.random.Generator) -> tuple[str, ...]:
        """One perturbation with every position drawn uniformly from its set."""
        return tuple(cs[rng.integers(len(cs))] for cs in self.candidates)


def point_spec(tokens: Sequence[str]) -> SubstitutionSpec:
    return SubstitutionSpec(tuple(tokens), tuple((t,) for t in tokens))


class Scorer(Protocol):
    def __call__(self, window: Sequence[str]) -> float:
        ...


class UniformScorer:
    """Assigns every window the same score, so every substitution passes."""

    def __call__(self, window):
        return 0.0


class FileScorer:
    """Looks windows up in a table loaded from an LM score file."""

    def __init__(self, scores: dict[str, float]):
        self.scores = dict(scores)

    @classmethod
    def load(cls, path: str) -> "FileScorer":
        return cls(load_lm_scores(path))

    def __call__(self, window):
        key = " ".join(window)
        try:
            return self.scores[key]
        except KeyError:
            raise FilteringError(f"no LM score for window {key!r}") from None


@dataclass
class NeighborFilterConfig:
    window: int = 6
    threshold: float = 5.0
    scorer: Scorer = field(default_factory=UniformScorer)

    def __post_init__(self):
        if self.window < 1:
            raise ConfigurationError("window radius must be >= 1")
        if self.threshold < 0:
            raise ConfigurationError("threshold must be >= 0")


def build_substitution_spec(tokens: Sequence[str], table: NeighborTable,
                            lm_filter: NeighborFilterConfig | None = None,
                            frozen: Iterable[int] = ()) -> SubstitutionSpec:
    """S(x, i) for every position, always relative to the original tokens.

    With a filter, a neighbor survives when the windowed LM log-probability
    with it substituted is within ``threshold`` of the original window's.
    Windows are truncated at the sequence boundaries. Positions in
    ``frozen`` keep only the original word.
    """
    tokens = tuple(tokens)
    frozen = set(frozen)
    out = []
    for i, w in enumerate(tokens):
        cands = [w]
        if i not in frozen:
            neigh = table.get(w)
            if lm_filter is not None and neigh:
                lo = max(0, i - lm_filter.window)
                hi = min(len(tokens), i + lm_filter.window + 1)
                left, right = tokens[lo:i], tokens[i + 1:hi]
                try:
                    base = lm_filter.scorer(left + (w,) + right)
                    kept = [n for n in neigh
                            if lm_filter.scorer(left + (n,) + right) >= base - lm_filter.threshold]
                except FilteringError as exc:
                    raise FilteringError(f"position {i}: {exc}") from exc
                neigh = kept
            cands.extend(n for n in neigh if n != w)
        out.append(tuple(cands))
    return SubstitutionSpec(tokens, tuple(out))


def perturbation_count(spec: SubstitutionSpec) -> int:
    return math.prod(spec.sizes())


class UnionFind:
    def __init__(self):
        self.parent: dict = {}
        self.rank = Counter()

    def find(self, x):
        root = self.parent.setdefault(x, x)
        while root != self.parent[root]:
            root = self.parent[root]
        while x != root:  # path compression
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1


@dataclass
class ClassStats:
    classes: list[set[str]]
    largest: int
    neighborless: int

    def class_of(self, word: str) -> set[str]:
        for c in self.classes:
            if word in c:
                return c
        raise KeyError(word)


def equivalence_classes(table: NeighborTable, words: Iterable[str] | None = None) -> ClassStats:
    """Connected components of the symmetric closure of the neighbor relation.

    ``neighborless`` counts words that end up alone in their class.
    """
    uf = UnionFind()
    for w in words if words is not None else ():
        uf.find(w)
    for w, ns in table.items():
        uf.find(w)
        for n in ns:
            uf.union(w, n)
    groups: dict = {}
    for w in list(uf.parent):
        groups.setdefault(uf.find(w), set()).add(w)
    classes = sorted(groups.values(), key=lambda c: (-len(c), min(c)))
    largest = max((len(c) for c in classes), default=0)
    return ClassStats(classes, largest, sum(1 for c in classes if len(c) == 1))


# ---------------------------------------------------------------------------
# synthetic long-term memory task


@dataclass
class MemoryTask:
    train: list[Example]
    dev: list[Example]
    test: list[Example]
    vocab: Vocabulary
    table: NeighborTable


def memory_words(vocab_size: int) -> list[str]:
    return [f"w{i}" for i in range(vocab_size)]


def _memory_example(rng, words, len_min, len_max) -> Example:
    n = len(words)
    length = int(rng.integers(len_min, len_max + 1))
    first = int(rng.integers(n))
    middle = [int(rng.integers(n)) for _ in range(length - 2)]
    if rng.random() < 0.5:
        last = first
    else:
        last = int(rng.integers(n - 1))
        last += last >= first
    toks = [words[first]] + [words[m] for m in middle] + [words[last]]
    return Example(tuple(toks), int(first == last))


def generate_memory_task(n_train: int = 4000, n_test: int = 1000, vocab_size: int = 50,
                         len_min: int = 3, len_max: int = 10, seed: int = 0,
                         n_dev: int | None = None) -> MemoryTask:
    """Label is 1 iff the first and last token agree. Every word neighbors
    every other word; the first and last positions must be frozen when
    building substitution specs (see :func:`memory_specs`)."""
    if vocab_size < 2:
        raise ConfigurationError("vocab_size must be at least 2")
    if not 2 <= len_min <= len_max:
        raise ConfigurationError("need 2 <= len_min <= len_max")
    n_dev = n_test if n_dev is None else n_dev
    rng = np.random.default_rng(seed)
    words = memory_words(vocab_size)
    vocab = Vocabulary(words)
    table = NeighborTable({w: words for w in words}, vocab)
    make = lambda k: [_memory_example(rng, words, len_min, len_max) for _ in range(k)]
    return MemoryTask(make(n_train), make(n_dev), make(n_test), vocab, table)


def ends_frozen(tokens: Sequence[str]) -> tuple[int, int]:
    return (0, len(tokens) - 1)


# ---------------------------------------------------------------------------
# file I/O


def _lines(path: str):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def parse_example(line: str, lineno: int = 0, path: str = "<string>") -> Example:
    parts = line.split("\t")
    if len(parts) not in (2, 3):
        raise DataError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields")
    try:
        label = int(parts[0])
    except ValueError:
        raise DataError(f"{path}:{lineno}: label {parts[0]!r} is not an integer") from None
    if len(parts) == 2:
        toks = parts[1].split()
        if not toks:
            raise DataError(f"{path}:{lineno}: empty token list")
        return Example(tuple(toks), label)
    prem, hyp = parts[1].split(), parts[2].split()
    if not prem or not hyp:
        raise DataError(f"{path}:{lineno}: empty premise or hypothesis")
    return Example(tuple(hyp), label, tuple(prem))


def load_dataset(path: str) -> list[Example]:
    return [parse_example(line, n, path) for n, line in _lines(path)]


def write_dataset(path: str, examples: Iterable[Example]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            if ex.premise is None:
                fh.write(f"{ex.label}\t{' '.join(ex.tokens)}\n")
            else:
                fh.write(f"{ex.label}\t{' '.join(ex.premise)}\t{' '.join(ex.tokens)}\n")


def load_neighbors(path: str, vocab: Vocabulary | None = None) -> NeighborTable:
    table = NeighborTable(vocab=vocab)
    for n, line in _lines(path):
        parts = line.split("\t")
        if len(parts) > 2 or not parts[0].strip():
            raise DataError(f"{path}:{n}: expected 'word<TAB>neighbors'")
        table.set(parts[0].strip(), parts[1].split() if len(parts) == 2 else [])
    return table


def write_neighbors(path: str, table: NeighborTable):
    with open(path, "w", encoding="utf-8") as fh:
        for w, ns in table.items():
            fh.write(f"{w}\t{' '.join(ns)}\n")


def load_vectors(path: str) -> tuple[Vocabulary, np.ndarray]:
    words, rows, dim = [], [], None
    for n, line in _lines(path):
        parts = line.split()
        try:
            vec = [float(v) for v in parts[1:]]
        except ValueError:
            raise DataError(f"{path}:{n}: non-numeric vector entry") from None
        if dim is None:
            dim = len(vec)
            if dim == 0:
                raise DataError(f"{path}:{n}: vector has no entries")
        elif len(vec) != dim:
            raise DataError(f"{path}:{n}: expected {dim} values, got {len(vec)}")
        if parts[0] in words:
            raise DataError(f"{path}:{n}: duplicate word {parts[0]!r}")
        words.append(parts[0])
        rows.append(vec)
    if not rows:
        raise DataError(f"{path}: no vectors")
    return Vocabulary(words), np.asarray(rows, dtype=np.float64)


def write_vectors(path: str, vocab: Vocabulary, matrix: np.ndarray):
    with open(path, "w", encoding="utf-8") as fh:
        for w, row in zip(vocab, matrix):
            fh.write(w + " " + " ".join(repr(float(v)) for v in row) + "\n")


def load_lm_scores(path: str) -> dict[str, float]:
    scores = {}
    for n, line in _lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{n}: expected 'window<TAB>log_prob'")
        try:
            scores[" ".join(parts[0].split())] = float(parts[1])
        except ValueError:
            raise DataError(f"{path}:{n}: log_prob {parts[1]!r} is not a number") from None
    return scores


def drop_oov(example: Example, vocab: Vocabulary) -> Example | None:
    """Delete out-of-vocabulary tokens; None if nothing is left."""
    toks = tuple(t for t in example.tokens if t in vocab)
    prem = None
    if example.premise is not None:
        prem = tuple(t for t in example.premise if t in vocab)
        if not prem:
            return None
    if not toks:
        return None
    return Example(toks, example.label, prem)
