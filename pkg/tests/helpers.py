"""Fixture builders and oracles shared by the test modules."""
from __future__ import annotations

import numpy as np

from ibptext.embedding import VectorStore
from ibptext.lexicon import (Example, NeighborTable, SubstitutionSpec, Vocabulary,
                             build_substitution_spec, perturbation_count)
from ibptext.models import Model, ModelConfig
from ibptext.training import objective_graph

ARCHS = ("bow", "cnn", "lstm", "decomp_attn")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def report(criterion: str, ok: bool, detail: str):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def random_world(rng, n_words=8, dim=4, max_neighbors=3):
    """Vocabulary, random vectors and a random neighbor table."""
    words = [f"t{i}" for i in range(n_words)]
    vocab = Vocabulary(words)
    store = VectorStore(vocab, rng.normal(size=(n_words, dim)))
    table = {}
    for w in words:
        k = int(rng.integers(0, max_neighbors + 1))
        table[w] = list(rng.choice(words, size=k, replace=False))
    return store, NeighborTable(table, vocab)


def random_model(rng, store, arch, n_classes=2, hidden=5, **kw):
    cfg = ModelConfig(arch=arch, n_classes=n_classes, hidden=hidden,
                      init_seed=int(rng.integers(1 << 30)), **kw)
    return Model(cfg, store)


def random_example(rng, words, n_classes=2, pair=False, len_range=(2, 5)):
    n = int(rng.integers(len_range[0], len_range[1] + 1))
    toks = tuple(rng.choice(words, size=n))
    prem = None
    if pair:
        prem = tuple(rng.choice(words, size=int(rng.integers(1, 4))))
    return Example(toks, int(rng.integers(n_classes)), prem)


def random_fixture(rng, arch=None, n_classes=None, cap=5000, len_range=(2, 5)):
    """(model, example, spec) with |B(z)| <= cap."""
    arch = arch or ARCHS[int(rng.integers(len(ARCHS)))]
    n_classes = n_classes or int(rng.choice([2, 3]))
    store, table = random_world(rng)
    model = random_model(rng, store, arch, n_classes)
    while True:
        ex = random_example(rng, list(store.vocab), n_classes, model.config.pair, len_range)
        spec = build_substitution_spec(ex.tokens, table)
        if perturbation_count(spec) <= cap:
            return model, ex, spec


def objective_value(model, examples, specs, eps, kappa, record=False):
    g, obj = objective_graph(model, examples, specs, eps, kappa, check=False, record=record)
    return float(obj.value), g


def selections_match(a, b) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(model, examples, specs, eps, kappa, rng, coords_per_param=2, h=1e-6,
                   rtol=1e-4, atol=1e-8, max_tries=6):
    """Compare analytic gradients with central differences.

    A probe whose +h or -h evaluation changes any recorded kink selection
    (relu sign, corner choice, argmin/argmax) is skipped and a fresh
    coordinate is drawn. Returns (checked, worst relative error, failures).
    """
    for p in model.params.values():
        p.zero_grad()
    g, obj = objective_graph(model, examples, specs, eps, kappa, check=True, record=True)
    base_sel = g.selections
    g.backward(obj)
    grads = {k: p.grad.copy() for k, p in model.params.items()}
    checked, worst, failures = 0, 0.0, []
    for name, p in model.params.items():
        done = 0
        for _ in range(coords_per_param * max_tries):
            if done >= coords_per_param:
                break
            idx = tuple(int(rng.integers(s)) for s in p.value.shape)
            old = p.value[idx]
            p.value[idx] = old + h
            fp, gp = objective_value(model, examples, specs, eps, kappa, record=True)
            p.value[idx] = old - h
            fm, gm = objective_value(model, examples, specs, eps, kappa, record=True)
            p.value[idx] = old
            if not (selections_match(base_sel, gp.selections)
                    and selections_match(base_sel, gm.selections)):
                continue
            num = (fp - fm) / (2 * h)
            ana = grads[name][idx]
            err = abs(num - ana) / max(abs(num), abs(ana), atol / rtol)
            worst = max(worst, err)
            if abs(num - ana) > rtol * max(abs(num), abs(ana)) + atol:
                failures.append((name, idx, ana, num))
            checked += 1
            done += 1
    return checked, worst, failures


def enumerate_margins_and_losses(model, example, spec):
    from ibptext.evaluation import exhaustive_attack
    return exhaustive_attack(model, example, spec, cap=10 ** 9, with_losses=True)


def make_spec(tokens, candidates) -> SubstitutionSpec:
    return SubstitutionSpec(tuple(tokens), tuple(tuple(c) for c in candidates))
