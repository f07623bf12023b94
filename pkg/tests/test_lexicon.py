from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibptext.interval import ConfigurationError
from ibptext.lexicon import (DataError, Example, FileScorer, FilteringError,
                             NeighborFilterConfig, NeighborTable, Vocabulary,
                             build_substitution_spec, drop_oov, equivalence_classes,
                             generate_memory_task, load_dataset, load_lm_scores, load_neighbors,
                             load_vectors, perturbation_count, point_spec, write_dataset,
                             write_neighbors, write_vectors)

from helpers import make_spec


def test_spec_counts_product_of_set_sizes():
    table = NeighborTable({"a": ["x"], "b": ["y", "z"], "c": []})
    spec = build_substitution_spec(["a", "b", "c"], table)
    assert spec.sizes() == [2, 3, 1]
    assert perturbation_count(spec) == 6
    assert len(list(spec.enumerate())) == 6
    assert spec.perturbable() == [0, 1]


def test_empty_neighborhood_is_singleton():
    spec = build_substitution_spec(["q"], NeighborTable())
    assert spec.candidates == (("q",),)
    assert perturbation_count(point_spec(["a", "b"])) == 1


def test_large_count_is_exact():
    spec = make_spec(["w"] * 10, [["w"] + [f"n{j}" for j in range(8)]] * 10)
    assert perturbation_count(spec) == 9 ** 10 == 3486784401


def test_table_drops_self_duplicates_and_oov():
    t = NeighborTable({"a": ["a", "b", "b", "zz"]}, Vocabulary(["a", "b"]))
    assert t.get("a") == ("b",)


def test_frozen_positions_keep_only_original():
    table = NeighborTable({"a": ["b"], "b": ["a"]})
    spec = build_substitution_spec(["a", "b", "a"], table, frozen=[0, 2])
    assert spec.sizes() == [1, 2, 1]


def test_filter_keeps_close_scores_and_truncates_windows():
    # windows are truncated at the sentence edges: position 0 with radius 1
    scores = {"a x": -1.0, "b x": -4.0, "c x": -9.0, "a x y": 0.0, "a q y": -2.0}
    table = NeighborTable({"a": ["b", "c"], "x": ["q"]})
    flt = NeighborFilterConfig(window=1, threshold=5.0, scorer=FileScorer(scores))
    spec = build_substitution_spec(["a", "x", "y"], table, flt)
    assert spec.candidates[0] == ("a", "b")
    assert spec.candidates[1] == ("x", "q")


def test_filter_failure_names_position():
    flt = NeighborFilterConfig(window=1, scorer=FileScorer({}))
    with pytest.raises(FilteringError, match="position 1"):
        build_substitution_spec(["a", "b"], NeighborTable({"b": ["c"]}), flt)


def test_filter_config_validation():
    with pytest.raises(ConfigurationError):
        NeighborFilterConfig(window=0)
    with pytest.raises(ConfigurationError):
        NeighborFilterConfig(threshold=-1.0)


def test_spec_validation():
    with pytest.raises(DataError):
        make_spec(["a"], [["b", "a"]])
    with pytest.raises(DataError):
        make_spec(["a", "b"], [["a"]])
    with pytest.raises(DataError):
        Example((), 0)


words = st.sampled_from([f"w{i}" for i in range(8)])


@settings(max_examples=150, deadline=None)
@given(st.dictionaries(words, st.lists(words, max_size=5)), st.lists(words, min_size=1, max_size=6),
       st.floats(0, 10), st.integers(0, 2 ** 31 - 1))
def test_spec_invariants(neigh, tokens, delta, seed):
    rng = np.random.default_rng(seed)
    table = NeighborTable(neigh)
    scores = {}

    def scorer(window):
        key = " ".join(window)
        if key not in scores:
            scores[key] = float(rng.normal())
        return scores[key]

    plain = build_substitution_spec(tokens, table)
    filt = build_substitution_spec(tokens, table, NeighborFilterConfig(2, delta, scorer))
    for i, t in enumerate(tokens):
        assert plain.candidates[i][0] == t and filt.candidates[i][0] == t
        assert set(filt.candidates[i]) <= set(plain.candidates[i])
        assert set(plain.candidates[i]) == {t} | set(table.get(t))
    # a pure function of its inputs
    assert build_substitution_spec(tokens, table, NeighborFilterConfig(2, delta, scorer)) == filt


def _bfs_partition(table, extra=()):
    adj = {}
    for w, ns in table.items():
        adj.setdefault(w, set())
        for n in ns:
            adj[w].add(n)
            adj.setdefault(n, set()).add(w)
    for w in extra:
        adj.setdefault(w, set())
    seen, parts = set(), []
    for w in sorted(adj):
        if w in seen:
            continue
        comp, q = set(), deque([w])
        while q:
            x = q.popleft()
            if x in comp:
                continue
            comp.add(x)
            q.extend(adj[x] - comp)
        seen |= comp
        parts.append(frozenset(comp))
    return set(parts)


def test_equivalence_classes_match_bfs():
    rng = np.random.default_rng(3)
    vocab = [f"v{i}" for i in range(50)]
    neigh = {w: list(rng.choice(vocab, size=int(rng.integers(0, 3)), replace=False))
             for w in vocab if rng.random() < 0.7}
    table = NeighborTable(neigh)
    stats = equivalence_classes(table, vocab)
    assert {frozenset(c) for c in stats.classes} == _bfs_partition(table, vocab)
    assert stats.largest == max(len(c) for c in stats.classes)
    assert sum(len(c) for c in stats.classes) == 50


def test_equivalence_classes_empty_table():
    stats = equivalence_classes(NeighborTable(), ["a", "b"])
    assert len(stats.classes) == 2 and stats.neighborless == 2


def test_memory_task_labels_and_specs():
    task = generate_memory_task(n_train=300, n_test=100, vocab_size=10, seed=1)
    assert len(task.train) == 300 and len(task.test) == 100 and len(task.dev) == 100
    for ex in task.train:
        assert 3 <= len(ex.tokens) <= 10
        assert ex.label == int(ex.tokens[0] == ex.tokens[-1])
    frac = np.mean([ex.label for ex in task.train])
    assert 0.4 < frac < 0.6
    ex = Example(("w0", "w1", "w0"), 1)
    spec = build_substitution_spec(ex.tokens, task.table, frozen=(0, 2))
    assert perturbation_count(spec) == 10


def test_memory_task_rejects_tiny_vocab():
    with pytest.raises(ConfigurationError):
        generate_memory_task(vocab_size=1)


def test_memory_task_deterministic():
    a = generate_memory_task(n_train=50, n_test=10, seed=4)
    b = generate_memory_task(n_train=50, n_test=10, seed=4)
    assert a.train == b.train and a.test == b.test


def test_file_round_trips(tmp_path):
    data = [Example(("a", "b"), 1), Example(("c",), 0, ("a", "c"))]
    write_dataset(tmp_path / "d.tsv", data)
    assert load_dataset(str(tmp_path / "d.tsv")) == data

    table = NeighborTable({"a": ["b", "c"], "b": []})
    write_neighbors(tmp_path / "n.tsv", table)
    assert load_neighbors(str(tmp_path / "n.tsv")) == table

    vocab = Vocabulary(["a", "b"])
    mat = np.array([[0.1, -2.5], [1e-17, 3.0]])
    write_vectors(tmp_path / "v.txt", vocab, mat)
    v2, m2 = load_vectors(str(tmp_path / "v.txt"))
    assert v2 == vocab and np.array_equal(m2, mat)


def test_empty_neighbor_file(tmp_path):
    (tmp_path / "n.tsv").write_text("")
    assert len(load_neighbors(str(tmp_path / "n.tsv"))) == 0


@pytest.mark.parametrize("text,loader", [
    ("1\ta b\nx\ty\n", load_dataset),
    ("1\ta b\n2\t\n", load_dataset),
    ("a 1 2\nb 1\n", load_vectors),
    ("a 1 x\n", load_vectors),
    ("a b\t-1.0\nc\n", load_lm_scores),
])
def test_malformed_files_report_line(tmp_path, text, loader):
    path = tmp_path / "f"
    path.write_text(text)
    with pytest.raises(DataError, match=r":2:|:1:"):
        loader(str(path))


def test_drop_oov():
    vocab = Vocabulary(["a", "b"])
    assert drop_oov(Example(("a", "z", "b"), 1), vocab).tokens == ("a", "b")
    assert drop_oov(Example(("z",), 1), vocab) is None
