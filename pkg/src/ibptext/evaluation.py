"""Certified accuracy, genetic-attack accuracy and exhaustive robustness.

Certified accuracy is a lower bound on robust accuracy and attack accuracy
an upper bound; :class:`EvalReport` refuses to exist if that order is
violated. "Correct" always means a strictly positive margin for the true
class, the same convention the certificate uses.
"""
from __future__ import annotations

import itertools
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import SoundnessError
from .lexicon import Example, SubstitutionSpec, perturbation_count
from .models import (CertificationResult, Model, certify_batch, concrete_margin)


@dataclass
class AttackConfig:
    population: int = 60
    iterations: int = 40
    seed: int = 0
    temperature: float = 0.3

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


@dataclass
class AttackResult:
    success: bool
    tokens: tuple[str, ...]
    words_changed: int
    margin: float
    queries: int
    original_correct: bool


@dataclass
class ExhaustiveResult:
    robust: bool
    worst: tuple[str, ...]
    min_margin: float
    visited: int
    losses: np.ndarray | None = None


class _Oracle:
    """Memoised concrete margins for perturbations of one example."""

    def __init__(self, model: Model, example: Example, batch_size: int = 512):
        self.model = model
        self.example = example
        self.batch_size = batch_size
        self.cache: dict[tuple, float] = {}

    def margins(self, seqs: Sequence[tuple[str, ...]]) -> np.ndarray:
        todo = list(dict.fromkeys(s for s in seqs if s not in self.cache))
        for s in range(0, len(todo), self.batch_size):
            chunk = todo[s: s + self.batch_size]
            exs = [Example(t, self.example.label, self.example.premise) for t in chunk]
            value, _, _ = self.model.logits(exs, check=False)
            for t, m in zip(chunk, concrete_margin(value, [self.example.label] * len(chunk))):
                self.cache[t] = float(m)
        return np.array([self.cache[s] for s in seqs])


def _changed(a: Sequence[str], b: Sequence[str]) -> int:
    return sum(x != y for x, y in zip(a, b))


def genetic_attack(model: Model, example: Example, spec: SubstitutionSpec,
                   config: AttackConfig | None = None,
                   rng: np.random.Generator | None = None) -> AttackResult:
    """Population-based search for a misclassified member of B(z).

    Every candidate stays inside B(z): mutation redraws one position from
    its original substitution set, and crossover mixes parents position by
    position. The best member survives each generation unchanged.
    """
    config = config or AttackConfig()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    oracle = _Oracle(model, example)
    x = spec.tokens
    m0 = oracle.margins([x])[0]
    if m0 <= 0:
        return AttackResult(True, x, 0, m0, len(oracle.cache), False)
    slots = spec.perturbable()
    if not slots:
        return AttackResult(False, x, 0, m0, len(oracle.cache), True)

    def mutate(seq, keep_original=True):
        i = slots[rng.integers(len(slots))]
        cands = spec.candidates[i] if keep_original else spec.candidates[i][1:]
        seq = list(seq)
        seq[i] = cands[rng.integers(len(cands))]
        return tuple(seq)

    pop = [mutate(x, keep_original=False) for _ in range(config.population)]
    best_seq, best_margin = x, m0
    for it in range(config.iterations + 1):
        margins = oracle.margins(pop)
        k = int(np.argmin(margins))
        if margins[k] < best_margin:
            best_seq, best_margin = pop[k], float(margins[k])
        if best_margin <= 0 or it == config.iterations:
            break
        fitness = -margins / config.temperature
        probs = np.exp(fitness - fitness.max())
        probs /= probs.sum()
        children = [pop[k]]
        n = config.population - 1
        p1 = rng.choice(len(pop), size=n, p=probs)
        p2 = rng.choice(len(pop), size=n, p=probs)
        for a, b in zip(p1, p2):
            pick = rng.random(len(x)) < 0.5
            child = tuple(pop[a][j] if pick[j] else pop[b][j] for j in range(len(x)))
            children.append(mutate(child))
        pop = children
    return AttackResult(best_margin <= 0, best_seq, _changed(best_seq, x), best_margin,
                        len(oracle.cache), True)


def parallel_map(fn, items, threads: int = 1) -> list:
    """Order-preserving map, fanned out over ``threads`` workers when > 1."""
    items = list(items)
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def exhaustive_attack(model: Model, example: Example, spec: SubstitutionSpec,
                      cap: int = 10_000, with_losses: bool = False,
                      batch_size: int = 512) -> ExhaustiveResult | None:
    """Evaluate every member of B(z); ``None`` when |B(z)| exceeds ``cap``."""
    total = perturbation_count(spec)
    if total > cap:
        return None
    worst, worst_m = spec.tokens, np.inf
    losses = [] if with_losses else None
    it = spec.enumerate()
    visited = 0
    while True:
        chunk = list(itertools.islice(it, batch_size))
        if not chunk:
            break
        exs = [Example(t, example.label, example.premise) for t in chunk]
        value, _, _ = model.logits(exs, check=False)
        margins = concrete_margin(value, [example.label] * len(chunk))
        visited += len(chunk)
        k = int(np.argmin(margins))
        if margins[k] < worst_m:
            worst, worst_m = chunk[k], float(margins[k])
        if with_losses:
            losses.append(concrete_loss(value, example.label))
    return ExhaustiveResult(worst_m > 0, worst, worst_m, visited,
                            np.concatenate(losses) if with_losses else None)


def concrete_loss(logits: np.ndarray, label: int) -> np.ndarray:
    """Cross-entropy of each row of ``logits`` against one label."""
    if logits.shape[-1] == 1:
        sign = 2.0 * label - 1.0
        return np.logaddexp(0.0, -sign * logits[:, 0])
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1)) + m[:, 0]
    return lse - logits[:, label]


def certified_accuracy(model: Model, dataset: Sequence[Example],
                       specs: Sequence[SubstitutionSpec],
                       batch_size: int = 256) -> tuple[float, list[CertificationResult]]:
    """Share of examples whose full perturbation boxes are certified."""
    results: list[CertificationResult] = []
    for s in range(0, len(dataset), batch_size):
        results.extend(certify_batch(model, dataset[s: s + batch_size], specs[s: s + batch_size]))
    frac = float(np.mean([r.certified for r in results])) if results else 0.0
    return frac, results


def confidence(model: Model, example: Example) -> float:
    """Model probability of the true class on the unperturbed input."""
    value, _, _ = model.logits([example], check=False)
    z = value[0]
    if z.shape[-1] == 1:
        s = z[0] if example.label == 1 else -z[0]
        return float(1.0 / (1.0 + np.exp(-s)))
    p = np.exp(z - z.max())
    return float(p[example.label] / p.sum())


@dataclass
class ErrorProfile:
    histogram: dict[int, int]
    confident: int
    unconfident: int
    threshold: float = 0.7

    @property
    def total(self) -> int:
        return sum(self.histogram.values())


def robustness_error_profile(model: Model, dataset: Sequence[Example],
                             attacks: Sequence[AttackResult], threshold: float = 0.7) -> ErrorProfile:
    """Words changed per robustness error (correct original, successful
    attack), and how many of those errors started above ``threshold``
    confidence."""
    hist: Counter = Counter()
    conf = unconf = 0
    for ex, res in zip(dataset, attacks):
        if not (res.success and res.original_correct):
            continue
        hist[res.words_changed] += 1
        if confidence(model, ex) > threshold:
            conf += 1
        else:
            unconf += 1
    return ErrorProfile(dict(sorted(hist.items())), conf, unconf, threshold)


@dataclass
class EvalReport:
    clean: np.ndarray
    certified: np.ndarray
    attacked: np.ndarray
    words_changed: np.ndarray
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean = np.asarray(self.clean, dtype=bool)
        self.certified = np.asarray(self.certified, dtype=bool)
        self.attacked = np.asarray(self.attacked, dtype=bool)
        self.words_changed = np.asarray(self.words_changed, dtype=np.int64)
        bad = np.flatnonzero(self.certified & self.attacked)
        if bad.size:
            raise SoundnessError(f"certified examples were attacked: {bad.tolist()}")
        if np.any(self.certified & ~self.clean) or np.any(~self.clean & ~self.attacked):
            raise SoundnessError("inconsistent per-example verdicts")
        if not self.certified_accuracy <= self.attack_accuracy <= self.clean_accuracy:
            raise SoundnessError("accuracy ordering violated")

    def __len__(self):
        return len(self.clean)

    @property
    def clean_accuracy(self) -> float:
        return float(np.mean(self.clean)) if len(self) else 0.0

    @property
    def certified_accuracy(self) -> float:
        return float(np.mean(self.certified)) if len(self) else 0.0

    @property
    def attack_accuracy(self) -> float:
        return float(np.mean(~self.attacked)) if len(self) else 0.0

    def records(self) -> list[tuple[str, float]]:
        out = [("n", float(len(self))), ("clean_acc", self.clean_accuracy),
               ("attack_acc", self.attack_accuracy), ("certified_acc", self.certified_accuracy)]
        out.extend((f"time_{k}", float(v)) for k, v in self.timings.items())
        return out

    def summary(self) -> str:
        rows = [("examples", f"{len(self)}"),
                ("clean accuracy", f"{100 * self.clean_accuracy:.1f}"),
                ("attack accuracy (upper bound)", f"{100 * self.attack_accuracy:.1f}"),
                ("certified accuracy (lower bound)", f"{100 * self.certified_accuracy:.1f}")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows)

    def verdict_lines(self) -> list[str]:
        return [f"{i}\t{int(c)}\t{int(z)}\t{int(a)}\t{w}"
                for i, (c, z, a, w) in enumerate(zip(self.clean, self.certified, self.attacked,
                                                       self.words_changed))]


def evaluate(model: Model, dataset: Sequence[Example], specs: Sequence[SubstitutionSpec],
             attack: AttackConfig | None = None,
             threads: int = 1) -> tuple[EvalReport, list[AttackResult]]:
    """Clean, certified and genetic-attack verdicts for every example.

    Each example's attack draws from its own generator seeded by
    ``(attack.seed, index)``, so results do not depend on ``threads``.
    """
    attack = attack or AttackConfig()
    t0 = time.perf_counter()
    _, certs = certified_accuracy(model, dataset, specs)
    t1 = time.perf_counter()

    def run(i):
        rng = np.random.default_rng([attack.seed, i])
        return genetic_attack(model, dataset[i], specs[i], attack, rng)

    attacks = parallel_map(run, range(len(dataset)), threads)
    t2 = time.perf_counter()
    report = EvalReport(
        clean=[r.correct for r in certs],
        certified=[r.certified for r in certs],
        attacked=[a.success for a in attacks],
        words_changed=[a.words_changed if a.success else 0 for a in attacks],
        timings={"certify_s": t1 - t0, "attack_s": t2 - t1},
    )
    return report, attacks
