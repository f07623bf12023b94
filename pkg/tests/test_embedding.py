import numpy as np
import pytest

from ibptext.embedding import (InputTransform, VectorStore, bound_width_diagnostic, embed,
                               input_box, shrink_box)
from ibptext.graph import Graph, Parameter
from ibptext.interval import IntervalTensor
from ibptext.lexicon import NeighborTable, Vocabulary, build_substitution_spec


def _store(n=5, d=3, seed=0):
    vocab = Vocabulary([f"w{i}" for i in range(n)])
    return VectorStore(vocab, np.random.default_rng(seed).normal(size=(n, d)))


def test_embed_matches_hand_affine_relu():
    store = _store()
    tr = InputTransform(3, 4, np.random.default_rng(1))
    v = store["w2"]
    expect = np.array([max(0.0, sum(v[i] * tr.weight.value[i, j] for i in range(3))
                           + tr.bias.value[j]) for j in range(4)])
    np.testing.assert_allclose(embed("w2", store, tr), expect, rtol=1e-12)


def test_input_box_is_coordinatewise_min_max():
    store = _store(n=6)
    table = NeighborTable({"w0": ["w1", "w2", "w3", "w4"]})
    spec = build_substitution_spec(["w0"], table)
    box = input_box(spec, 0, store)
    vecs = store.matrix[:5]
    for j in range(3):
        assert box.lower[j] == min(v[j] for v in vecs)
        assert box.upper[j] == max(v[j] for v in vecs)


def test_input_box_in_transformed_space():
    store = _store()
    tr = InputTransform(3, 3, np.random.default_rng(2))
    spec = build_substitution_spec(["w0"], NeighborTable({"w0": ["w3"]}))
    box = input_box(spec, 0, store, tr)
    both = tr(store.matrix[[0, 3]])
    np.testing.assert_array_equal(box.lower, both.min(axis=0))


def test_shrink_worked_value():
    out = shrink_box(IntervalTensor([0.0, 0.0], [1.0, 1.0]), [0.0, 1.0], 0.5)
    np.testing.assert_allclose(out.lower, [0.0, 0.5])
    np.testing.assert_allclose(out.upper, [0.5, 1.0])


def test_shrink_endpoints():
    box = IntervalTensor([-1.0, 0.0], [2.0, 3.0])
    c = np.array([0.5, 1.0])
    z = shrink_box(box, c, 0.0)
    np.testing.assert_array_equal(z.lower, c)
    np.testing.assert_array_equal(z.upper, c)
    full = shrink_box(box, c, 1.0)
    np.testing.assert_array_equal(full.lower, box.lower)
    with pytest.raises(ValueError):
        shrink_box(box, c, 1.5)


def test_shrunk_boxes_are_nested():
    box = IntervalTensor([-1.0, 0.0], [2.0, 3.0])
    c = np.array([0.5, 1.0])
    prev = shrink_box(box, c, 0.0)
    for eps in np.linspace(0.1, 1.0, 10):
        cur = shrink_box(box, c, eps)
        assert prev.subset_of(cur, atol=1e-15)
        prev = cur


def test_graph_embed_box_matches_shrink():
    store = _store(n=4, d=3)
    table = Parameter("t", store.matrix)
    g = Graph()
    node = g.embed_box(g.param(table), np.array([1]), np.array([[1, 0, 3]]), eps=0.4)
    raw = IntervalTensor(store.matrix[[1, 0, 3]].min(0), store.matrix[[1, 0, 3]].max(0))
    ref = shrink_box(raw, store.matrix[1], 0.4)
    np.testing.assert_allclose(node.lo[0], ref.lower, rtol=1e-15)
    np.testing.assert_allclose(node.hi[0], ref.upper, rtol=1e-15)


def test_width_diagnostic_hand_computation():
    vocab = Vocabulary(["a", "b", "c"])
    pre = np.array([[0.0, 1.0], [2.0, 1.0], [4.0, 4.0]])
    store = VectorStore(vocab, pre)
    tr = InputTransform(2, 2, np.random.default_rng(0))
    tr.weight.value = np.array([[0.5, 0.0], [0.0, 1.0]])
    tr.bias.value = np.array([0.0, -2.0])
    table = NeighborTable({"a": ["b"], "c": []})
    diag = bound_width_diagnostic(table, tr, store)
    assert diag.words == ["a"]
    # pretrained: widths (2, 0); population std of columns: (1.633, 1.414)
    sig = pre.std(axis=0)
    assert diag.pretrained[0] == pytest.approx(np.mean([2 / sig[0], 0 / sig[1]]))
    # transformed rows: (0,0), (1,0), (2,2); the first column has std 0.8165
    post = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 2.0]])
    sp = post.std(axis=0)
    assert diag.transformed[0] == pytest.approx(np.mean([1 / sp[0], 0 / sp[1]]))
    assert diag.fraction_tighter == float(diag.transformed[0] < diag.pretrained[0])


def test_width_diagnostic_skips_constant_coordinates(caplog):
    vocab = Vocabulary(["a", "b"])
    store = VectorStore(vocab, np.array([[0.0, 5.0], [1.0, 5.0]]))
    tr = InputTransform(2, 2, np.random.default_rng(0))
    diag = bound_width_diagnostic(NeighborTable({"a": ["b"]}), tr, store)
    assert diag.skipped_coords["pretrained"] == 1
    assert diag.pretrained[0] == pytest.approx(1.0 / 0.5)
    assert "zero spread" in caplog.text


def test_vector_store_shape_check():
    with pytest.raises(ValueError):
        VectorStore(Vocabulary(["a"]), np.zeros((2, 3)))
