import json

import numpy as np
import pytest

from ibptext.graph import (Adam, Graph, Parameter, SoundnessError, StateError, TrainingError,
                           clip_grad_norm, forward_dual, load_checkpoint, save_checkpoint)
from ibptext.interval import ConfigurationError, IntervalTensor, affine_bounds

from helpers import selections_match


def _box_input(g, rng, shape, width=1.0):
    x = rng.normal(size=shape)
    r = width * rng.random(shape)
    t = rng.random(shape)
    return g.input(x, x - t * r, x + (1 - t) * r)


def _readout(g, node, coef):
    """sum(a*value + b*lower + c*upper) with fixed coefficients."""
    a, b, c = coef
    out = g.sum(g.reshape(g.scale(g.value_of(node), a), (-1,)), axis=0)
    if not node.is_point:
        out = g.add(out, g.sum(g.reshape(g.scale(g.lower_of(node), b), (-1,)), axis=0))
        out = g.add(out, g.sum(g.reshape(g.scale(g.upper_of(node), c), (-1,)), axis=0))
    return out


OPS = {
    "linear": lambda g, h, h2, P: g.linear(h, g.param(P["w2"])),
    "add": lambda g, h, h2, P: g.add(h, h2),
    "sub": lambda g, h, h2, P: g.sub(h, h2),
    "neg": lambda g, h, h2, P: g.neg(h),
    "scale": lambda g, h, h2, P: g.scale(h, np.array([2.0, -0.5, 1.5, -3.0])),
    "mul": lambda g, h, h2, P: g.mul(h, h2),
    "relu": lambda g, h, h2, P: g.relu(h),
    "sigmoid": lambda g, h, h2, P: g.sigmoid(h),
    "tanh": lambda g, h, h2, P: g.tanh(h),
    "exp": lambda g, h, h2, P: g.exp(h),
    "softplus": lambda g, h, h2, P: g.softplus(h),
    "log_softmax": lambda g, h, h2, P: g.log_softmax(h),
    "softmax": lambda g, h, h2, P: g.softmax(h),
    "mean": lambda g, h, h2, P: g.mean(h, axis=-1),
    "reduce_max": lambda g, h, h2, P: g.reduce_max(h, axis=-1),
    "reduce_min": lambda g, h, h2, P: g.reduce_min(h, axis=0),
    "concat": lambda g, h, h2, P: g.concat([h, h2], axis=-1),
    "stack": lambda g, h, h2, P: g.stack([h, h2], axis=0),
    "transpose": lambda g, h, h2, P: g.transpose(h, (1, 0)),
    "index": lambda g, h, h2, P: g.index(h, (np.array([0, 1, 1]), np.array([3, 0, 0]))),
    "where": lambda g, h, h2, P: g.where(np.array([[1, 0, 1, 0], [0, 0, 1, 1]], bool), h, h2),
    "embed_box": lambda g, h, h2, P: g.mul(
        g.embed_box(g.param(P["table"]), np.array([0, 2]), np.array([[0, 1, 3], [2, 2, 0]]), 0.7),
        h),
}


def _build(op, P, seed, record=False, check=True):
    rng = np.random.default_rng(seed)
    g = Graph(check=check, record=record)
    x = _box_input(g, rng, (2, 3))
    h = g.linear(x, g.param(P["w"]), g.param(P["b"]))
    h2 = g.tanh(g.linear(x, g.param(P["v"])))
    out = OPS[op](g, h, h2, P)
    return g, _readout(g, out, (0.7, -1.3, 0.9))


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(abs(hash(op)) % (2 ** 32))
    P = {"w": Parameter("w", rng.normal(size=(3, 4))), "b": Parameter("b", rng.normal(size=4)),
         "v": Parameter("v", rng.normal(size=(3, 4))), "w2": Parameter("w2", rng.normal(size=(4, 2))),
         "table": Parameter("table", rng.normal(size=(4, 4)))}
    seed = 7
    g, out = _build(op, P, seed, record=True)
    base = g.selections
    g.backward(out)
    h, checked = 1e-6, 0
    for p in P.values():
        for idx in np.ndindex(p.value.shape):
            old = p.value[idx]
            p.value[idx] = old + h
            gp, fp = _build(op, P, seed, record=True, check=False)
            p.value[idx] = old - h
            gm, fm = _build(op, P, seed, record=True, check=False)
            p.value[idx] = old
            if not (selections_match(base, gp.selections) and selections_match(base, gm.selections)):
                continue
            num = (float(fp.value) - float(fm.value)) / (2 * h)
            assert p.grad[idx] == pytest.approx(num, rel=1e-5, abs=1e-7), (p.name, idx)
            checked += 1
    assert checked > 20


def test_affine_relu_chain_bounds():
    g = Graph()
    x = g.input(np.array([1.0, 0.0]), np.array([0.0, -1.0]), np.array([2.0, 1.0]))
    w = g.param(Parameter("w", [[1.0], [-1.0]]))
    b = g.param(Parameter("b", [0.5]))
    y = g.relu(g.linear(x, w, b))
    assert (y.lo[0], y.hi[0]) == (0.0, 3.5)
    assert y.value[0] == 1.5


def test_affine_upper_bound_gradient_one_parameter():
    # u = mu + r with mu = w*c, r = |w|*rad: check d u / d w by differences
    box = IntervalTensor([0.2], [1.4])

    def upper(wv):
        return float(affine_bounds(np.array([[wv]]), None, box).upper[0])

    p = Parameter("w", [[0.8]])
    g = Graph()
    x = g.input_box(box.center, box)
    u = g.sum(g.upper_of(g.linear(x, g.param(p))), axis=0)
    g.backward(u)
    num = (upper(0.8 + 1e-6) - upper(0.8 - 1e-6)) / 2e-6
    assert abs(p.grad[0, 0] - num) / abs(num) < 1e-5


def test_point_nodes_carry_no_bounds():
    g = Graph()
    p = g.param(Parameter("w", np.ones((2, 2))))
    y = g.relu(g.linear(g.input(np.ones((1, 2))), p))
    assert y.is_point and y.lower is None and y.lo is y.value


def test_containment_violation_raises():
    g = Graph()
    with pytest.raises(SoundnessError):
        g.input(np.array([3.0]), np.array([0.0]), np.array([1.0]))


def test_nan_bound_raises():
    g = Graph()
    with pytest.raises(SoundnessError):
        g.input(np.array([0.0]), np.array([np.nan]), np.array([1.0]))


def test_check_can_be_disabled():
    Graph(check=False).input(np.array([3.0]), np.array([0.0]), np.array([1.0]))


def test_backward_state_errors():
    g = Graph()
    p = Parameter("w", [2.0, 1.0])
    y = g.sum(g.mul(g.param(p), g.param(p)), axis=0)
    with pytest.raises(StateError):
        g.backward(g.param(p))  # not a scalar
    g.backward(y)
    np.testing.assert_allclose(p.grad, [4.0, 2.0])
    with pytest.raises(StateError):
        g.backward(y)
    with pytest.raises(StateError):
        Graph().backward(y)


def test_unknown_activation():
    g = Graph()
    with pytest.raises(ConfigurationError):
        g.act("swish", g.input(np.zeros(2)))


def test_dropout_only_touches_value_track():
    g = Graph(training=True, rng=np.random.default_rng(0))
    x = g.input(np.ones(1000), np.zeros(1000), 2 * np.ones(1000))
    y = g.dropout(x, 0.5)
    assert np.array_equal(y.lower, x.lower) and np.array_equal(y.upper, x.upper)
    assert set(np.unique(y.value)) <= {0.0, 2.0}
    assert Graph(training=False).dropout(x, 0.5) is x


def test_forward_dual_rejects_outside_box():
    with pytest.raises(SoundnessError):
        forward_dual(lambda g, xs: xs[0], [np.array([5.0])], [IntervalTensor([0.0], [1.0])])
    g, out = forward_dual(lambda g, xs: g.relu(xs[0]), [np.array([0.5])],
                          [IntervalTensor([-1.0], [1.0])])
    assert (out.lo[0], out.hi[0]) == (0.0, 1.0)


def test_adam_single_step_decreases_square():
    p = Parameter("w", [1.0])
    opt = Adam([p], lr=0.1, clip=None)
    p.grad = 2 * p.value
    opt.step()
    # first Adam step moves by lr * sign(grad)
    assert p.value[0] == pytest.approx(0.9)
    assert p.value[0] ** 2 < 1.0


def test_adam_rejects_nonfinite_gradient():
    p = Parameter("w", [1.0])
    p.grad = np.array([np.inf])
    with pytest.raises(TrainingError):
        Adam([p]).step()


def test_clip_grad_norm():
    a, b = Parameter("a", [0.0, 0.0]), Parameter("b", [0.0])
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 0.25) == pytest.approx(5.0)
    total = np.sqrt(np.sum(a.grad ** 2) + np.sum(b.grad ** 2))
    assert total == pytest.approx(0.25)
    np.testing.assert_allclose(a.grad, [0.15, 0.0])


def test_checkpoint_round_trip(tmp_path):
    params = {"w": np.arange(6.0).reshape(2, 3), "b": np.array([0.5])}
    cfg = {"arch": "bow", "hidden": 3}
    save_checkpoint(str(tmp_path / "ck"), params, cfg, extra={"note": 1})
    loaded, manifest = load_checkpoint(str(tmp_path / "ck.npz"))
    for k in params:
        assert np.array_equal(loaded[k], params[k]) and loaded[k].dtype == np.float64
    assert manifest["config"] == cfg and manifest["note"] == 1


def test_checkpoint_detects_tampered_config(tmp_path):
    save_checkpoint(str(tmp_path / "ck"), {"w": np.zeros(2)}, {"hidden": 3})
    path = tmp_path / "ck.json"
    m = json.loads(path.read_text())
    m["config"]["hidden"] = 4
    path.write_text(json.dumps(m))
    with pytest.raises(ValueError):
        load_checkpoint(str(tmp_path / "ck"))
