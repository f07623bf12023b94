"""Interval tensors and the elementary bound-propagation rules.

Every function here is pure: it takes lower/upper arrays and returns new
lower/upper arrays. The graph engine builds differentiable nodes on top of
these, so the numerics live in one place.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG2 = float(np.log(2.0))

# corner order used for tie breaking: (ll, lu, ul, uu)
CORNER_NAMES = ("ll", "lu", "ul", "uu")


class DimensionError(ValueError):
    """Raised when interval operands have incompatible shapes."""


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class IntervalTensor:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape:
            raise DimensionError(f"lower shape {lo.shape} != upper shape {hi.shape}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x) -> "IntervalTensor":
        x = np.asarray(x, dtype=np.float64)
        return cls(x, x.copy())

    @property
    def shape(self) -> tuple:
        return self.lower.shape

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def is_valid(self) -> bool:
        return bool(np.all(self.lower <= self.upper))

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def subset_of(self, other: "IntervalTensor", atol: float = 0.0) -> bool:
        return bool(
            np.all(self.lower >= other.lower - atol) and np.all(self.upper <= other.upper + atol)
        )

    def __getitem__(self, idx) -> "IntervalTensor":
        return IntervalTensor(self.lower[idx], self.upper[idx])

    def __repr__(self):
        return f"IntervalTensor(lower={self.lower!r}, upper={self.upper!r})"


@dataclass(frozen=True)
class CornerSelection:
    """Which of the four corner products attained the min and the max.

    Indices follow ``CORNER_NAMES``; ties go to the earliest corner.
    """

    argmin: np.ndarray
    argmax: np.ndarray


def _check_same_shape(a: IntervalTensor, b: IntervalTensor):
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# scalar helpers


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Stable log-sum-exp; entries equal to -inf act as the identity."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_exp_diff(u, l):
    """log(exp(u) - exp(l)) for l <= u, elementwise.

    Uses log1p when u - l > ln 2 and expm1 otherwise; u == l gives -inf.
    """
    u = np.asarray(u, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if np.any(l > u):
        raise ValueError("log_exp_diff requires l <= u")
    d = l - u
    with np.errstate(divide="ignore", invalid="ignore"):
        far = u + np.log1p(-np.exp(d))
        near = u + np.log(-np.expm1(d))
    out = np.where(u - l > LOG2, far, near)
    out = np.where(u == l, -np.inf, out)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# elementary transformers


def affine_bounds(weight, bias, box: IntervalTensor) -> IntervalTensor:
    """Bounds of ``x @ weight + bias`` for x in ``box``.

    ``weight`` has shape (in, out) and acts on the last axis of the box. A 1-d
    weight is treated as a single output column.
    """
    weight = np.asarray(weight, dtype=np.float64)
    squeeze = weight.ndim == 1
    if squeeze:
        weight = weight[:, None]
    if box.shape[-1:] != weight.shape[:1]:
        raise DimensionError(f"weight rows {weight.shape[0]} != input dim {box.shape[-1:]}")
    bias = np.zeros(weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    mid = 0.5 * (box.lower + box.upper)
    rad = 0.5 * (box.upper - box.lower)
    mu = mid @ weight + bias
    r = rad @ np.abs(weight)
    lo, hi = mu - r, mu + r
    if squeeze:
        lo, hi = lo[..., 0], hi[..., 0]
    return IntervalTensor(lo, hi)


_MONOTONIC = {
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
    "tanh": np.tanh,
    "exp": np.exp,
    "step": lambda x: (x > 0).astype(np.float64),
}


def monotonic_fn(name: str):
    try:
        return _MONOTONIC[name]
    except KeyError:
        raise ConfigurationError(f"unknown monotonic function {name!r}") from None


def monotonic_bounds(name: str, box: IntervalTensor) -> IntervalTensor:
    fn = monotonic_fn(name)
    return IntervalTensor(fn(box.lower), fn(box.upper))


def corner_products(a: IntervalTensor, b: IntervalTensor) -> np.ndarray:
    """Stack of the four endpoint products along a new leading axis."""
    return np.stack(
        [a.lower * b.lower, a.lower * b.upper, a.upper * b.lower, a.upper * b.upper]
    )


def mult_bounds(a: IntervalTensor, b: IntervalTensor) -> tuple[IntervalTensor, CornerSelection]:
    """Elementwise product bounds; broadcasting is allowed."""
    try:
        corners = corner_products(a, b)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    amin = np.argmin(corners, axis=0)
    amax = np.argmax(corners, axis=0)
    lo = np.take_along_axis(corners, amin[None], axis=0)[0]
    hi = np.take_along_axis(corners, amax[None], axis=0)[0]
    return IntervalTensor(lo, hi), CornerSelection(amin, amax)


def dot_bounds(a: IntervalTensor, b: IntervalTensor) -> IntervalTensor:
    """Bounds on the inner product over the last axis."""
    if a.shape[-1:] != b.shape[-1:]:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    prod, _ = mult_bounds(a, b)
    return IntervalTensor(prod.lower.sum(axis=-1), prod.upper.sum(axis=-1))


def log_softmax_bounds_all(box: IntervalTensor, axis: int = -1) -> IntervalTensor:
    """Log-softmax bounds for every class index at once.

    Upper bound for class c: the c-th logit at its max and all others at
    their min. The normalizer is logsumexp of [log(e^u_c - e^l_c), lse(l)].
    Lower bound: the c-th logit at its min, others at their max, via the
    logsumexp of everything except u_c, then combined with l_c.
    """
    lo = np.moveaxis(box.lower, axis, -1)
    hi = np.moveaxis(box.upper, axis, -1)
    m = lo.shape[-1]

    diff = log_exp_diff(hi, lo)
    lse_lo = logsumexp(lo, axis=-1, keepdims=True)
    norm_up = logsumexp(np.stack([np.asarray(diff), np.broadcast_to(lse_lo, hi.shape)]), axis=0)
    upper = hi - norm_up

    # logsumexp of u with index c removed, for every c
    eye = np.eye(m, dtype=bool)
    hi_rep = np.where(eye, -np.inf, hi[..., None, :])
    lse_others = logsumexp(hi_rep, axis=-1)
    norm_lo = logsumexp(np.stack([lo, lse_others]), axis=0)
    lower = lo - norm_lo

    upper = np.minimum(upper, 0.0)
    # the two sides round differently; on a point box lower can exceed upper by an ulp
    lower = np.minimum(lower, upper)
    return IntervalTensor(np.moveaxis(lower, -1, axis), np.moveaxis(upper, -1, axis))


def log_softmax_bounds(box: IntervalTensor, c: int) -> IntervalTensor:
    """Scalar interval on log softmax(z)[c] for z in a box over m logits."""
    m = box.shape[-1]
    if not 0 <= c < m:
        raise IndexError(f"class index {c} out of range for {m} logits")
    full = log_softmax_bounds_all(box)
    return full[..., c]


def softmax_bounds(box: IntervalTensor, axis: int = -1) -> IntervalTensor:
    """Probability bounds obtained by exponentiating log-softmax bounds."""
    ls = log_softmax_bounds_all(box, axis=axis)
    return IntervalTensor(np.exp(ls.lower), np.exp(ls.upper))


def reduce_bounds(kind: str, boxes: Sequence[IntervalTensor] | IntervalTensor, axis: int = 0) -> IntervalTensor:
    """Reduce a list of same-shape intervals (or one interval along ``axis``)."""
    if isinstance(boxes, IntervalTensor):
        lo, hi = boxes.lower, boxes.upper
    else:
        boxes = list(boxes)
        if kind == "concat":
            try:
                return IntervalTensor(
                    np.concatenate([b.lower for b in boxes], axis=axis),
                    np.concatenate([b.upper for b in boxes], axis=axis),
                )
            except ValueError as exc:
                raise DimensionError(str(exc)) from None
        shapes = {b.shape for b in boxes}
        if len(shapes) != 1:
            raise DimensionError(f"cannot reduce intervals of shapes {sorted(shapes)}")
        lo = np.stack([b.lower for b in boxes], axis=axis)
        hi = np.stack([b.upper for b in boxes], axis=axis)
    if kind == "sum":
        return IntervalTensor(lo.sum(axis=axis), hi.sum(axis=axis))
    if kind == "mean":
        return IntervalTensor(lo.mean(axis=axis), hi.mean(axis=axis))
    if kind == "max":
        return IntervalTensor(lo.max(axis=axis), hi.max(axis=axis))
    if kind == "min":
        return IntervalTensor(lo.min(axis=axis), hi.min(axis=axis))
    if kind == "concat":
        return IntervalTensor(lo, hi)
    raise ConfigurationError(f"unknown reduction {kind!r}")
