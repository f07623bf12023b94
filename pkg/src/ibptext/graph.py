"""Dual-track computation graph with reverse-mode differentiation.

A :class:`Graph` is a tape. Every op appends a :class:`Node` holding the
concrete value and, unless the node is a *point*, a lower and upper bound.
Backward walks the tape in reverse and pushes gradients through all three
tracks; parameters are points, so their gradient collects every track.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import interval as iv


class SoundnessError(RuntimeError):
    """The concrete value escaped its interval: a bug in a bound rule."""


class StateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class Parameter:
    def __init__(self, name: str, value, trainable: bool = True):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = (
        "id", "op", "parents", "value", "lower", "upper",
        "grad", "grad_lower", "grad_upper", "_backward",
    )

    def __init__(self, op, parents, value, lower=None, upper=None):
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self.lower = lower
        self.upper = upper
        self.grad = None
        self.grad_lower = None
        self.grad_upper = None
        self._backward = None
        self.id = -1

    @property
    def is_point(self) -> bool:
        return self.lower is None

    @property
    def lo(self):
        return self.value if self.lower is None else self.lower

    @property
    def hi(self):
        return self.value if self.upper is None else self.upper

    @property
    def shape(self):
        return np.shape(self.value)

    def bounds(self) -> iv.IntervalTensor:
        return iv.IntervalTensor(self.lo, self.hi)

    def accumulate(self, gv=None, gl=None, gu=None):
        if self.lower is None:
            total = None
            for g in (gv, gl, gu):
                if g is not None:
                    total = g if total is None else total + g
            if total is not None:
                self.grad = total if self.grad is None else self.grad + total
            return
        if gv is not None:
            self.grad = gv if self.grad is None else self.grad + gv
        if gl is not None:
            self.grad_lower = gl if self.grad_lower is None else self.grad_lower + gl
        if gu is not None:
            self.grad_upper = gu if self.grad_upper is None else self.grad_upper + gu

    def __repr__(self):
        kind = "point" if self.is_point else "interval"
        return f"Node(id={self.id}, op={self.op}, shape={self.shape}, {kind})"


def _unbroadcast(grad, shape):
    if grad is None or np.shape(grad) == tuple(shape):
        return grad
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


# (function, derivative given input x and output y)
_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64)),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "exp": (np.exp, lambda x, y: y),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
}


class Graph:
    """One forward pass worth of nodes.

    Args:
        check: verify after every op that the concrete value lies inside its
            interval; a violation raises :class:`SoundnessError`.
        training: enables dropout on the concrete track.
        rng: generator for dropout masks.
        record: keep the discrete choices made by kinked ops (relu signs,
            corner indices, argmin/argmax) in ``self.selections``; used to
            detect finite-difference steps that cross a kink.
    """

    def __init__(self, check: bool = True, training: bool = False, rng=None,
                 record: bool = False, tol: float = 1e-9):
        self.nodes: list[Node] = []
        self.check = check
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.record = record
        self.selections: list[np.ndarray] = []
        self.tol = tol
        self._param_nodes: list[tuple[Node, Parameter]] = []
        self._done = False

    # -- bookkeeping -------------------------------------------------------

    def _add(self, node: Node, backward=None) -> Node:
        node.id = len(self.nodes)
        node._backward = backward
        self.nodes.append(node)
        if self.check and node.lower is not None:
            self._check_node(node)
        return node

    def _check_node(self, node: Node):
        v, lo, hi = node.value, node.lower, node.upper
        tol = self.tol * (1.0 + np.abs(v))
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise SoundnessError(f"NaN bound at node {node.id} ({node.op})")
        if np.any(lo > hi + tol) or np.any(v < lo - tol) or np.any(v > hi + tol):
            raise SoundnessError(f"value escapes interval at node {node.id} ({node.op})")

    def _sel(self, *arrays):
        if self.record:
            self.selections.extend(np.asarray(a).copy() for a in arrays)

    def _own(self, node: Node):
        if node.id < 0 or node.id >= len(self.nodes) or self.nodes[node.id] is not node:
            raise StateError("node does not belong to this graph")

    # -- leaves ------------------------------------------------------------

    def input(self, value, lower=None, upper=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        if lower is None:
            return self._add(Node("input", (), value))
        return self._add(Node("input", (), value, np.asarray(lower, np.float64),
                              np.asarray(upper, np.float64)))

    def input_box(self, value, box: iv.IntervalTensor) -> Node:
        return self.input(value, box.lower, box.upper)

    def const(self, value) -> Node:
        return self._add(Node("const", (), np.asarray(value, dtype=np.float64)))

    def param(self, p: Parameter) -> Node:
        node = self._add(Node("param", (), p.value))
        self._param_nodes.append((node, p))
        return node

    # -- affine family -----------------------------------------------------

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """``x @ w + b`` with a point weight; the interval track uses the
        centre/radius form (one product with w, one with |w|)."""
        if not w.is_point:
            raise ValueError("linear expects a point weight")
        W = w.value
        if x.shape[-1] != W.shape[0]:
            raise iv.DimensionError(f"input dim {x.shape[-1]} != weight rows {W.shape[0]}")
        bias = 0.0 if b is None else b.value
        value = x.value @ W + bias
        if x.is_point:
            def backward(out):
                g = out.grad
                if g is None:
                    return
                x.accumulate(gv=g @ W.T)
                w.accumulate(gv=_matT(x.value, g))
                if b is not None:
                    b.accumulate(gv=_sum_lead(g))
            return self._add(Node("linear", (x, w, b), value), backward)

        mid = 0.5 * (x.lower + x.upper)
        rad = 0.5 * (x.upper - x.lower)
        absW = np.abs(W)
        mu = mid @ W + bias
        r = rad @ absW
        self._sel(W > 0)

        def backward(out):
            gv, gl, gu = out.grad, out.grad_lower, out.grad_upper
            if gl is None and gu is None:
                if gv is not None:
                    x.accumulate(gv=gv @ W.T)
                    w.accumulate(gv=_matT(x.value, gv))
                    if b is not None:
                        b.accumulate(gv=_sum_lead(gv))
                return
            gl = np.zeros_like(out.value) if gl is None else gl
            gu = np.zeros_like(out.value) if gu is None else gu
            gmu = gl + gu
            gr = gu - gl
            dmid = gmu @ W.T
            drad = gr @ absW.T
            x.accumulate(gv=None if gv is None else gv @ W.T,
                         gl=0.5 * (dmid - drad), gu=0.5 * (dmid + drad))
            gw = _matT(mid, gmu) + _matT(rad, gr) * np.sign(W)
            if gv is not None:
                gw = gw + _matT(x.value, gv)
            w.accumulate(gv=gw)
            if b is not None:
                gb = _sum_lead(gmu)
                if gv is not None:
                    gb = gb + _sum_lead(gv)
                b.accumulate(gv=gb)

        return self._add(Node("linear", (x, w, b), value, mu - r, mu + r), backward)

    def add(self, a: Node, b: Node) -> Node:
        value = a.value + b.value
        point = a.is_point and b.is_point

        def backward(out):
            for n in (a, b):
                n.accumulate(gv=_unbroadcast(out.grad, n.shape),
                             gl=_unbroadcast(out.grad_lower, n.shape),
                             gu=_unbroadcast(out.grad_upper, n.shape))
        if point:
            return self._add(Node("add", (a, b), value), backward)
        return self._add(Node("add", (a, b), value, a.lo + b.lo, a.hi + b.hi), backward)

    def neg(self, a: Node) -> Node:
        def backward(out):
            a.accumulate(gv=_negate(out.grad), gl=_negate(out.grad_upper),
                         gu=_negate(out.grad_lower))
        if a.is_point:
            return self._add(Node("neg", (a,), -a.value), backward)
        return self._add(Node("neg", (a,), -a.value, -a.upper, -a.lower), backward)

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.neg(b))

    def scale(self, a: Node, c) -> Node:
        """Multiply by a constant (scalar or broadcastable array)."""
        c = np.asarray(c, dtype=np.float64)
        value = a.value * c
        if a.is_point:
            def backward(out):
                a.accumulate(gv=_unbroadcast(_mulg(out.grad, c), a.shape))
            return self._add(Node("scale", (a,), value), backward)
        pos = c >= 0
        lo = np.where(pos, a.lower * c, a.upper * c)
        hi = np.where(pos, a.upper * c, a.lower * c)

        def backward(out):
            gl = np.zeros_like(out.value) if out.grad_lower is None else out.grad_lower
            gu = np.zeros_like(out.value) if out.grad_upper is None else out.grad_upper
            to_l = np.where(pos, gl * c, gu * c)
            to_u = np.where(pos, gu * c, gl * c)
            a.accumulate(gv=_unbroadcast(_mulg(out.grad, c), a.shape),
                         gl=_unbroadcast(to_l, a.shape), gu=_unbroadcast(to_u, a.shape))
        return self._add(Node("scale", (a,), value, lo, hi), backward)

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product; interval track takes min/max of the four
        corner products, ties resolved by the fixed corner order."""
        value = a.value * b.value
        if a.is_point and b.is_point:
            def backward(out):
                g = out.grad
                if g is None:
                    return
                a.accumulate(gv=_unbroadcast(g * b.value, a.shape))
                b.accumulate(gv=_unbroadcast(g * a.value, b.shape))
            return self._add(Node("mul", (a, b), value), backward)

        A = iv.IntervalTensor(a.lo, a.hi)
        B = iv.IntervalTensor(b.lo, b.hi)
        box, sel = iv.mult_bounds(A, B)
        self._sel(sel.argmin, sel.argmax)

        def backward(out):
            g = out.grad
            ga_v = None if g is None else g * b.value
            gb_v = None if g is None else g * a.value
            ga_l = np.zeros(np.broadcast(a.lo, b.lo).shape)
            ga_u = np.zeros_like(ga_l)
            gb_l = np.zeros_like(ga_l)
            gb_u = np.zeros_like(ga_l)
            for grad, idx in ((out.grad_lower, sel.argmin), (out.grad_upper, sel.argmax)):
                if grad is None:
                    continue
                a_is_l = idx < 2          # corners ll, lu use a.lower
                b_is_l = (idx % 2) == 0   # corners ll, ul use b.lower
                bval = np.where(b_is_l, b.lo, b.hi)
                aval = np.where(a_is_l, a.lo, a.hi)
                ga = grad * bval
                gb = grad * aval
                ga_l += np.where(a_is_l, ga, 0.0)
                ga_u += np.where(a_is_l, 0.0, ga)
                gb_l += np.where(b_is_l, gb, 0.0)
                gb_u += np.where(b_is_l, 0.0, gb)
            a.accumulate(gv=_unbroadcast(ga_v, a.shape),
                         gl=_unbroadcast(ga_l, a.shape), gu=_unbroadcast(ga_u, a.shape))
            b.accumulate(gv=_unbroadcast(gb_v, b.shape),
                         gl=_unbroadcast(gb_l, b.shape), gu=_unbroadcast(gb_u, b.shape))

        return self._add(Node("mul", (a, b), value, box.lower, box.upper), backward)

    # -- monotonic ---------------------------------------------------------

    def act(self, name: str, x: Node) -> Node:
        try:
            fn, dfn = _ACTIVATIONS[name]
        except KeyError:
            raise iv.ConfigurationError(f"unknown monotonic function {name!r}") from None
        value = fn(x.value)
        if x.is_point:
            if name == "relu":
                self._sel(x.value > 0)

            def backward(out):
                if out.grad is not None:
                    x.accumulate(gv=out.grad * dfn(x.value, out.value))
            return self._add(Node(name, (x,), value), backward)

        lo, hi = fn(x.lower), fn(x.upper)
        if name == "relu":
            self._sel(x.value > 0, x.lower > 0, x.upper > 0)

        def backward(out):
            x.accumulate(
                gv=None if out.grad is None else out.grad * dfn(x.value, out.value),
                gl=None if out.grad_lower is None else out.grad_lower * dfn(x.lower, out.lower),
                gu=None if out.grad_upper is None else out.grad_upper * dfn(x.upper, out.upper),
            )
        return self._add(Node(name, (x,), value, lo, hi), backward)

    def relu(self, x):
        return self.act("relu", x)

    def sigmoid(self, x):
        return self.act("sigmoid", x)

    def tanh(self, x):
        return self.act("tanh", x)

    def exp(self, x):
        return self.act("exp", x)

    def softplus(self, x):
        return self.act("softplus", x)

    # -- softmax -----------------------------------------------------------

    def log_softmax(self, x: Node) -> Node:
        """Log-softmax over the last axis, with the stable interval rule."""
        value = x.value - iv.logsumexp(x.value, axis=-1, keepdims=True)

        def back_value(out):
            g = out.grad
            if g is None:
                return None
            p = np.exp(out.value)
            return g - p * g.sum(axis=-1, keepdims=True)

        if x.is_point:
            def backward(out):
                x.accumulate(gv=back_value(out))
            return self._add(Node("log_softmax", (x,), value), backward)

        box = iv.log_softmax_bounds_all(iv.IntervalTensor(x.lower, x.upper))
        lo_in, hi_in = x.lower, x.upper
        m = lo_in.shape[-1]
        off = ~np.eye(m, dtype=bool)

        def backward(out):
            gl_out, gu_out = out.grad_lower, out.grad_upper
            gl = np.zeros_like(lo_in)
            gu = np.zeros_like(hi_in)
            if gu_out is not None:
                # upper_c = u_c - log(e^{u_c} + sum_{j!=c} e^{l_j})
                log_norm = hi_in - out.upper
                gu += gu_out * (1.0 - np.exp(hi_in - log_norm))
                M = np.exp(lo_in[..., None, :] - log_norm[..., :, None]) * off
                gl -= np.einsum("...c,...cj->...j", gu_out, M)
            if gl_out is not None:
                # lower_c = l_c - log(e^{l_c} + sum_{j!=c} e^{u_j})
                log_norm = lo_in - out.lower
                gl += gl_out * (1.0 - np.exp(lo_in - log_norm))
                M = np.exp(hi_in[..., None, :] - log_norm[..., :, None]) * off
                gu -= np.einsum("...c,...cj->...j", gl_out, M)
            x.accumulate(gv=back_value(out), gl=gl, gu=gu)

        return self._add(Node("log_softmax", (x,), value, box.lower, box.upper), backward)

    def softmax(self, x: Node) -> Node:
        return self.exp(self.log_softmax(x))

    # -- reductions and shape ops -------------------------------------------

    def sum(self, x: Node, axis: int, keepdims: bool = False) -> Node:
        def red(a):
            return a.sum(axis=axis, keepdims=keepdims)

        def expand(g):
            if g is None:
                return None
            if not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, x.shape)

        def backward(out):
            x.accumulate(gv=expand(out.grad), gl=expand(out.grad_lower), gu=expand(out.grad_upper))
        if x.is_point:
            return self._add(Node("sum", (x,), red(x.value)), backward)
        return self._add(Node("sum", (x,), red(x.value), red(x.lower), red(x.upper)), backward)

    def mean(self, x: Node, axis: int, keepdims: bool = False) -> Node:
        return self.scale(self.sum(x, axis, keepdims), 1.0 / x.shape[axis])

    def weighted_sum(self, x: Node, weights, axis: int) -> Node:
        """Sum over ``axis`` with constant weights broadcast against x."""
        w = np.asarray(weights, dtype=np.float64)
        return self.sum(self.scale(x, w), axis=axis)

    def reduce_max(self, x: Node, axis: int) -> Node:
        return self._reduce_sel(x, axis, np.argmax, "max")

    def reduce_min(self, x: Node, axis: int) -> Node:
        return self._reduce_sel(x, axis, np.argmin, "min")

    def _reduce_sel(self, x: Node, axis: int, argf, op) -> Node:
        tracks = [x.value] if x.is_point else [x.value, x.lower, x.upper]
        idxs = [np.expand_dims(argf(t, axis=axis), axis) for t in tracks]
        outs = [np.take_along_axis(t, i, axis=axis).squeeze(axis) for t, i in zip(tracks, idxs)]
        self._sel(*idxs)

        def scatter(g, i):
            if g is None:
                return None
            full = np.zeros(x.shape)
            np.put_along_axis(full, i, np.expand_dims(g, axis), axis=axis)
            return full

        def backward(out):
            if x.is_point:
                x.accumulate(gv=scatter(out.grad, idxs[0]))
            else:
                x.accumulate(gv=scatter(out.grad, idxs[0]), gl=scatter(out.grad_lower, idxs[1]),
                             gu=scatter(out.grad_upper, idxs[2]))
        return self._add(Node(op, (x,), *outs), backward)

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        xs = list(xs)
        value = np.concatenate([n.value for n in xs], axis=axis)
        sizes = [n.shape[axis] for n in xs]
        splits = np.cumsum(sizes)[:-1]

        def backward(out):
            parts = [np.split(g, splits, axis=axis) if g is not None else [None] * len(xs)
                     for g in (out.grad, out.grad_lower, out.grad_upper)]
            for n, gv, gl, gu in zip(xs, *parts):
                n.accumulate(gv=gv, gl=gl, gu=gu)
        if all(n.is_point for n in xs):
            return self._add(Node("concat", xs, value), backward)
        lo = np.concatenate([n.lo for n in xs], axis=axis)
        hi = np.concatenate([n.hi for n in xs], axis=axis)
        return self._add(Node("concat", xs, value, lo, hi), backward)

    def stack(self, xs: Sequence[Node], axis: int = 0) -> Node:
        xs = list(xs)
        return self.concat([self.reshape(n, _insert(n.shape, axis)) for n in xs], axis=axis)

    def reshape(self, x: Node, shape) -> Node:
        def backward(out):
            x.accumulate(
                gv=None if out.grad is None else out.grad.reshape(x.shape),
                gl=None if out.grad_lower is None else out.grad_lower.reshape(x.shape),
                gu=None if out.grad_upper is None else out.grad_upper.reshape(x.shape),
            )
        if x.is_point:
            return self._add(Node("reshape", (x,), x.value.reshape(shape)), backward)
        return self._add(Node("reshape", (x,), x.value.reshape(shape),
                              x.lower.reshape(shape), x.upper.reshape(shape)), backward)

    def transpose(self, x: Node, axes) -> Node:
        inv = np.argsort(axes)

        def back(g):
            return None if g is None else np.transpose(g, inv)

        def backward(out):
            x.accumulate(gv=back(out.grad), gl=back(out.grad_lower), gu=back(out.grad_upper))
        if x.is_point:
            return self._add(Node("transpose", (x,), np.transpose(x.value, axes)), backward)
        return self._add(Node("transpose", (x,), np.transpose(x.value, axes),
                              np.transpose(x.lower, axes), np.transpose(x.upper, axes)), backward)

    def index(self, x: Node, idx) -> Node:
        """``x[idx]``; gradients scatter back with ``np.add.at``."""
        def scatter(g):
            if g is None:
                return None
            full = np.zeros(x.shape)
            np.add.at(full, idx, g)
            return full

        def backward(out):
            x.accumulate(gv=scatter(out.grad), gl=scatter(out.grad_lower),
                         gu=scatter(out.grad_upper))
        if x.is_point:
            return self._add(Node("index", (x,), x.value[idx]), backward)
        return self._add(Node("index", (x,), x.value[idx], x.lower[idx], x.upper[idx]), backward)

    def where(self, mask, a: Node, b: Node) -> Node:
        """Select ``a`` where the constant mask is true, else ``b``."""
        mask = np.asarray(mask, dtype=bool)
        value = np.where(mask, a.value, b.value)

        def split(g, shape, take_a):
            if g is None:
                return None
            return _unbroadcast(np.where(mask == take_a, g, 0.0), shape)

        def backward(out):
            for n, take in ((a, True), (b, False)):
                n.accumulate(gv=split(out.grad, n.shape, take),
                             gl=split(out.grad_lower, n.shape, take),
                             gu=split(out.grad_upper, n.shape, take))
        if a.is_point and b.is_point:
            return self._add(Node("where", (a, b), value), backward)
        lo = np.where(mask, a.lo, b.lo)
        hi = np.where(mask, a.hi, b.hi)
        return self._add(Node("where", (a, b), value, lo, hi), backward)

    def dropout(self, x: Node, p: float) -> Node:
        """Inverted dropout on the concrete track only; bounds pass through."""
        if not self.training or p <= 0.0:
            return x
        keep = (self.rng.random(x.shape) >= p) / (1.0 - p)

        def backward(out):
            x.accumulate(gv=None if out.grad is None else out.grad * keep,
                         gl=out.grad_lower, gu=out.grad_upper)
        if x.is_point:
            return self._add(Node("dropout", (x,), x.value * keep), backward)
        return self._add(Node("dropout", (x,), x.value * keep, x.lower, x.upper), backward)

    # -- bound track projections ---------------------------------------------

    def upper_of(self, x: Node) -> Node:
        """Point node whose value is the upper bound of ``x``."""
        if x.is_point:
            return x

        def backward(out):
            x.accumulate(gu=out.grad)
        return self._add(Node("upper_of", (x,), x.upper), backward)

    def lower_of(self, x: Node) -> Node:
        if x.is_point:
            return x

        def backward(out):
            x.accumulate(gl=out.grad)
        return self._add(Node("lower_of", (x,), x.lower), backward)

    def value_of(self, x: Node) -> Node:
        if x.is_point:
            return x

        def backward(out):
            x.accumulate(gv=out.grad)
        return self._add(Node("value_of", (x,), x.value), backward)

    # -- embedding boxes ---------------------------------------------------------

    def embed_box(self, table: Node, center, candidates=None, eps: float = 1.0) -> Node:
        """Look up rows of ``table`` and, given candidate rows per position,
        build the smallest axis-aligned box around them shrunk by ``eps``
        toward the centre row.

        ``center`` has shape (...,); ``candidates`` has shape (..., K) and
        should be padded with the centre index itself.
        """
        center = np.asarray(center)
        T = table.value
        c = T[center]
        if candidates is None or eps == 0.0:
            def backward(out):
                if out.grad is None:
                    return
                full = np.zeros_like(T)
                np.add.at(full, center, out.grad)
                table.accumulate(gv=full)
            return self._add(Node("embed", (table,), c), backward)

        candidates = np.asarray(candidates)
        cand = T[candidates]                      # (..., K, d)
        amin = np.argmin(cand, axis=-2)
        amax = np.argmax(cand, axis=-2)
        lo_raw = np.take_along_axis(cand, amin[..., None, :], axis=-2)[..., 0, :]
        hi_raw = np.take_along_axis(cand, amax[..., None, :], axis=-2)[..., 0, :]
        self._sel(amin, amax)
        lo = c - eps * (c - lo_raw)
        hi = c + eps * (hi_raw - c)
        rows_max = np.take_along_axis(candidates[..., None], amax[..., None, :], axis=-2)[..., 0, :]
        rows_min = np.take_along_axis(candidates[..., None], amin[..., None, :], axis=-2)[..., 0, :]
        d = T.shape[-1]
        col = np.broadcast_to(np.arange(d), rows_min.shape)

        def backward(out):
            full = np.zeros_like(T)
            gl = out.grad_lower
            gu = out.grad_upper
            gc = np.zeros(c.shape) if out.grad is None else out.grad.copy()
            if gl is not None:
                gc += (1.0 - eps) * gl
                np.add.at(full, (rows_min, col), eps * gl)
            if gu is not None:
                gc += (1.0 - eps) * gu
                np.add.at(full, (rows_max, col), eps * gu)
            np.add.at(full, center, gc)
            table.accumulate(gv=full)

        return self._add(Node("embed_box", (table,), c, lo, hi), backward)

    # -- backward ------------------------------------------------------------------

    def backward(self, output: Node):
        """Accumulate d(output)/d(parameter) into every parameter's ``grad``."""
        self._own(output)
        if np.size(output.value) != 1:
            raise StateError("backward needs a scalar output")
        if self._done:
            raise StateError("backward already ran on this graph")
        self._done = True
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.id + 1]):
            if node._backward is None:
                continue
            if node.grad is None and node.grad_lower is None and node.grad_upper is None:
                continue
            node._backward(node)
        for node, p in self._param_nodes:
            if node.grad is not None and p.trainable:
                p.grad = p.grad + node.grad


def _matT(x, g):
    """sum over leading axes of outer products: x^T g for batched x."""
    x2 = x.reshape(-1, x.shape[-1])
    g2 = g.reshape(-1, g.shape[-1])
    return x2.T @ g2


def _sum_lead(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _negate(g):
    return None if g is None else -g


def _mulg(g, c):
    return None if g is None else g * c


def _insert(shape, axis):
    shape = list(shape)
    if axis < 0:
        axis = len(shape) + axis + 1
    shape.insert(axis, 1)
    return tuple(shape)


def forward_dual(build: Callable[[Graph, list[Node]], Node], inputs: Sequence, boxes: Sequence,
                 check: bool = True) -> tuple[Graph, Node]:
    """Run ``build`` on input nodes made from concrete values and boxes.

    Returns the graph (for a later :meth:`Graph.backward`) and the output node,
    whose ``value``/``lo``/``hi`` are the concrete output and its bounds.
    """
    g = Graph(check=check)
    nodes = []
    for x, box in zip(inputs, boxes):
        if box is None:
            nodes.append(g.input(x))
        else:
            if not box.contains(x, atol=1e-12):
                raise SoundnessError("input box does not contain the concrete input")
            nodes.append(g.input_box(x, box))
    return g, build(g, nodes)


# ---------------------------------------------------------------------------
# optimisation


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm is not None and max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for p in params:
            p.grad = p.grad * factor
    return total


class Adam:
    """Adam with global-norm clipping and decoupled weight decay."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, clip: float | None = 0.25):
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {p.name!r}")
        clip_grad_norm(self.params, self.clip)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.value -= self.lr * self.weight_decay * p.value
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path: str, params: dict[str, np.ndarray], config: dict,
                    extra: dict | None = None):
    """Write ``<path>.npz`` (parameters, float64, row-major) and
    ``<path>.json`` (config, its hash and parameter shapes)."""
    base = _strip(path)
    os.makedirs(os.path.dirname(os.path.abspath(base)), exist_ok=True)
    arrays = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    np.savez(base + ".npz", **arrays)
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
    }
    if extra:
        manifest.update(extra)
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    base = _strip(path)
    with open(base + ".json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if config_hash(manifest["config"]) != manifest["config_hash"]:
        raise ValueError(f"config hash mismatch in {base}.json")
    with np.load(base + ".npz") as data:
        params = {k: data[k].copy() for k in data.files}
    for k, shape in manifest["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"shape mismatch for parameter {k}")
    return params, manifest


def _strip(path: str) -> str:
    for ext in (".npz", ".json"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path
