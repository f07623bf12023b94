"""Word vectors, the learned input transform and input interval boxes.

The transform is ``phi(w) = relu(v(w) @ W + b)`` on frozen pre-trained
vectors ``v``. Boxes are built over transformed vectors, never over the
pre-trained ones, since the transformed space can be much tighter.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph import Parameter
from .interval import IntervalTensor
from .lexicon import NeighborTable, SubstitutionSpec, Vocabulary

log = logging.getLogger(__name__)


class VectorStore:
    """Frozen pre-trained vectors aligned with a vocabulary."""

    def __init__(self, vocab: Vocabulary, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(vocab):
            raise ValueError(f"matrix shape {matrix.shape} does not match vocab of {len(vocab)}")
        self.vocab = vocab
        self.matrix = matrix

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __getitem__(self, word: str) -> np.ndarray:
        return self.matrix[self.vocab[word]]

    @classmethod
    def random(cls, vocab: Vocabulary, dim: int, seed: int = 0) -> "VectorStore":
        rng = np.random.default_rng(seed)
        return cls(vocab, rng.normal(size=(len(vocab), dim)))


class InputTransform:
    def __init__(self, in_dim: int, out_dim: int | None = None, rng=None, prefix: str = "embed"):
        out_dim = in_dim if out_dim is None else out_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Parameter(f"{prefix}.weight", rng.uniform(-scale, scale, (in_dim, out_dim)))
        self.bias = Parameter(f"{prefix}.bias", np.zeros(out_dim))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def __call__(self, vectors: np.ndarray) -> np.ndarray:
        return np.maximum(vectors @ self.weight.value + self.bias.value, 0.0)


def embed(word: str, store: VectorStore, transform: InputTransform) -> np.ndarray:
    return transform(store[word])


def input_box(spec: SubstitutionSpec, i: int, store: VectorStore,
              transform: InputTransform | None = None) -> IntervalTensor:
    """Smallest axis-aligned box around the (transformed) vectors of S(x, i)."""
    cands = spec.candidates[i]
    if not cands:
        raise ValueError(f"empty substitution set at position {i}")
    vecs = np.stack([store[w] for w in cands])
    if transform is not None:
        vecs = transform(vecs)
    return IntervalTensor(vecs.min(axis=0), vecs.max(axis=0))


def shrink_box(box: IntervalTensor, center, eps: float) -> IntervalTensor:
    """Interpolate a box toward ``center``: eps=0 gives the point, eps=1 the box."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    c = np.asarray(center, dtype=np.float64)
    return IntervalTensor(c - eps * (c - box.lower), c + eps * (box.upper - c))


@dataclass
class WidthDiagnostic:
    words: list[str]
    pretrained: np.ndarray
    transformed: np.ndarray
    skipped_coords: dict

    @property
    def fraction_tighter(self) -> float:
        """Share of words whose normalized width shrank after the transform."""
        if not self.words:
            return float("nan")
        return float(np.mean(self.transformed < self.pretrained))

    def rows(self):
        return zip(self.words, self.pretrained, self.transformed)


def normalized_width(vectors: np.ndarray, sigma: np.ndarray) -> float:
    """Mean over coordinates of box width divided by the coordinate's spread."""
    width = vectors.max(axis=0) - vectors.min(axis=0)
    keep = sigma > 0
    if not keep.any():
        return float("nan")
    return float(np.mean(width[keep] / sigma[keep]))


def bound_width_diagnostic(table: NeighborTable, transform: InputTransform,
                           store: VectorStore) -> WidthDiagnostic:
    """Normalized box width around each word's neighborhood, in both spaces.

    A word's neighborhood is the word plus its table entries; only words
    with at least one in-vocabulary neighbor are reported. Coordinates with
    zero spread across the vocabulary are skipped (and logged).
    """
    phi_all = transform(store.matrix)
    sig_pre = store.matrix.std(axis=0)
    sig_phi = phi_all.std(axis=0)
    skipped = {"pretrained": int(np.sum(sig_pre == 0)), "transformed": int(np.sum(sig_phi == 0))}
    for space, n in skipped.items():
        if n:
            log.warning("%d %s coordinates have zero spread; skipped", n, space)
    words, pre, post = [], [], []
    for w, ns in table.items():
        if w not in store.vocab:
            continue
        group = [w] + [n for n in ns if n in store.vocab]
        if len(group) < 2:
            continue
        idx = [store.vocab[x] for x in group]
        words.append(w)
        pre.append(normalized_width(store.matrix[idx], sig_pre))
        post.append(normalized_width(phi_all[idx], sig_phi))
    return WidthDiagnostic(words, np.asarray(pre), np.asarray(post), skipped)
