"""Text classifiers built from graph ops, plus loss bounds and certificates.

Architectures: ``bow`` (mean of word vectors, or summed premise and
hypothesis encodings for two-sequence tasks), ``cnn`` (one convolution,
relu, mean over time), ``lstm`` (optionally bidirectional, mean or last
state) and ``decomp_attn`` (decomposable attention without intra-sentence
attention, with a trainable null token on the premise side).

Binary tasks use a single logit; k-way tasks use k logits.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .embedding import InputTransform, VectorStore
from .graph import Graph, Node, Parameter
from .interval import ConfigurationError
from .lexicon import DataError, Example, SubstitutionSpec, Vocabulary, point_spec

ARCHITECTURES = ("bow", "cnn", "lstm", "decomp_attn")
MASK_FILL = -1e9


@dataclass
class ModelConfig:
    arch: str = "bow"
    n_classes: int = 2
    hidden: int = 100
    ff_layers: int = 2
    kernel_width: int = 3
    dropout: float = 0.0
    embed_dim: int | None = None
    bidirectional: bool = True
    pool: str = "mean"
    pair: bool = False
    init_seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.n_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.hidden < 1 or self.ff_layers < 1 or self.kernel_width < 1:
            raise ConfigurationError("dimensions must be positive")
        if self.embed_dim is not None and self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.pool not in ("mean", "last"):
            raise ConfigurationError(f"unknown pooling {self.pool!r}")
        if self.arch == "decomp_attn":
            self.pair = True

    @property
    def n_out(self) -> int:
        return 1 if self.n_classes == 2 else self.n_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    rows: np.ndarray                 # vocabulary ids making up the word table
    center: np.ndarray               # (B, L) table rows of the original words
    candidates: np.ndarray | None    # (B, L, K) table rows, padded with center
    mask: np.ndarray                 # (B, L)
    labels: np.ndarray               # (B,)
    premise: np.ndarray | None = None
    premise_mask: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


def encode(examples: Sequence[Example], vocab: Vocabulary,
           specs: Sequence[SubstitutionSpec] | None = None) -> Batch:
    """Pack examples (and their substitution sets) into padded index arrays."""
    if specs is None:
        specs = [point_spec(ex.tokens) for ex in examples]
    words = set()
    for ex, sp in zip(examples, specs):
        if sp.tokens != ex.tokens:
            raise DataError("substitution spec does not match example tokens")
        for cs in sp.candidates:
            words.update(cs)
        if ex.premise is not None:
            words.update(ex.premise)
    try:
        ids = sorted({vocab[w] for w in words})
    except KeyError as exc:
        raise DataError(f"token {exc.args[0]!r} is not in the vocabulary") from None
    local = {v: i for i, v in enumerate(ids)}
    row = lambda w: local[vocab[w]]

    B = len(examples)
    L = max(len(ex.tokens) for ex in examples)
    K = max(max(sp.sizes()) for sp in specs)
    center = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    cand = np.zeros((B, L, K), dtype=np.int64)
    for b, (ex, sp) in enumerate(zip(examples, specs)):
        for i, cs in enumerate(sp.candidates):
            r = row(cs[0])
            center[b, i] = r
            mask[b, i] = True
            cand[b, i, :] = r
            cand[b, i, : len(cs)] = [row(w) for w in cs]
    premise = premise_mask = None
    if examples[0].premise is not None:
        Lp = max(len(ex.premise) for ex in examples)
        premise = np.zeros((B, Lp), dtype=np.int64)
        premise_mask = np.zeros((B, Lp), dtype=bool)
        for b, ex in enumerate(examples):
            premise[b, : len(ex.premise)] = [row(w) for w in ex.premise]
            premise_mask[b, : len(ex.premise)] = True
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(np.asarray(ids, dtype=np.int64), center, cand if K > 1 else None, mask,
                 labels, premise, premise_mask)


def _glorot(rng, shape):
    scale = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-scale, scale, shape)


class Model:
    """Parameters plus a graph builder for one architecture."""

    def __init__(self, config: ModelConfig, store: VectorStore):
        self.config = config
        self.store = store
        self.vocab = store.vocab
        rng = np.random.default_rng(config.init_seed)
        d_pre = store.dim
        self.transform = InputTransform(d_pre, config.embed_dim, rng)
        d = self.transform.out_dim
        self.params: dict[str, Parameter] = {}
        for p in self.transform.params():
            self.params[p.name] = p
        H = config.hidden
        arch = config.arch
        if arch == "bow":
            self._ff("head", (2 * d if config.pair else d), config.ff_layers, config.n_out, rng)
        elif arch == "cnn":
            self._linear("conv", config.kernel_width * d, H, rng)
            self._ff("head", H, config.ff_layers, config.n_out, rng)
        elif arch == "lstm":
            dirs = ["fwd", "bwd"] if config.bidirectional else ["fwd"]
            for name in dirs:
                self._linear(f"lstm_{name}", d + H, 4 * H, rng)
                # forget-gate bias starts at 1
                self.params[f"lstm_{name}.bias"].value[H:2 * H] = 1.0
            self._ff("head", H * len(dirs), config.ff_layers, config.n_out, rng)
        elif arch == "decomp_attn":
            self._add(Parameter("null", rng.normal(scale=0.1, size=d)))
            self._ff("attend", d, 2, H, rng)
            self._ff("compare", 2 * d, 2, H, rng)
            self._ff("head", 2 * H, config.ff_layers, config.n_out, rng)

    # -- parameter helpers ---------------------------------------------------

    def _add(self, p: Parameter):
        self.params[p.name] = p

    def _linear(self, name, n_in, n_out, rng):
        self._add(Parameter(f"{name}.weight", _glorot(rng, (n_in, n_out))))
        self._add(Parameter(f"{name}.bias", np.zeros(n_out)))

    def _ff(self, name, n_in, layers, n_out, rng):
        dims = [n_in] + [self.config.hidden] * (layers - 1) + [n_out]
        for i in range(layers):
            self._linear(f"{name}.{i}", dims[i], dims[i + 1], rng)

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if state[k].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {k}")
            p.value = np.array(state[k], dtype=np.float64)

    # -- graph pieces ------------------------------------------------------------

    def _lin(self, g: Graph, x: Node, name: str) -> Node:
        return g.linear(x, g.param(self.params[f"{name}.weight"]),
                        g.param(self.params[f"{name}.bias"]))

    def _run_ff(self, g: Graph, h: Node, name: str, layers: int) -> Node:
        for i in range(layers - 1):
            h = g.relu(self._lin(g, h, f"{name}.{i}"))
            h = g.dropout(h, self.config.dropout)
        return self._lin(g, h, f"{name}.{layers - 1}")

    def word_table(self, g: Graph, rows: np.ndarray) -> Node:
        vec = g.const(self.store.matrix[rows])
        return g.relu(g.linear(vec, g.param(self.transform.weight), g.param(self.transform.bias)))

    def forward(self, g: Graph, batch: Batch, eps: float = 1.0) -> Node:
        """Logits node of shape (B, n_out); an interval node when eps > 0
        and some position has substitutes."""
        table = self.word_table(g, batch.rows)
        x = g.embed_box(table, batch.center, batch.candidates, eps)
        arch = self.config.arch
        if arch == "bow":
            return self._bow(g, x, batch, table)
        if arch == "cnn":
            return self._cnn(g, x, batch)
        if arch == "lstm":
            return self._lstm(g, x, batch)
        return self._decomp(g, x, batch, table)

    def _masked_pool(self, g, x, mask, mean=True):
        w = mask.astype(np.float64)
        if mean:
            w = w / w.sum(axis=1, keepdims=True)
        return g.weighted_sum(x, w[:, :, None], axis=1)

    def _bow(self, g, x, batch, table):
        if not self.config.pair:
            h = self._masked_pool(g, x, batch.mask)
        else:
            p = g.embed_box(table, batch.premise)
            h = g.concat([self._masked_pool(g, p, batch.premise_mask, mean=False),
                          self._masked_pool(g, x, batch.mask, mean=False)], axis=-1)
        return self._run_ff(g, h, "head", self.config.ff_layers)

    def _cnn(self, g, x, batch):
        B, L = batch.mask.shape
        d = x.shape[-1]
        kw = self.config.kernel_width
        x = g.where(batch.mask[:, :, None], x, g.const(np.zeros((1, 1, d))))
        left = (kw - 1) // 2
        right = kw - 1 - left
        parts = [x]
        if left:
            parts.insert(0, g.const(np.zeros((B, left, d))))
        if right:
            parts.append(g.const(np.zeros((B, right, d))))
        padded = g.concat(parts, axis=1) if len(parts) > 1 else x
        windows = [g.index(padded, (slice(None), slice(o, o + L))) for o in range(kw)]
        h = g.relu(self._lin(g, g.concat(windows, axis=-1), "conv"))
        h = self._masked_pool(g, h, batch.mask)
        return self._run_ff(g, h, "head", self.config.ff_layers)

    def _lstm_dir(self, g, x, mask, name, reverse):
        B, L = mask.shape
        H = self.config.hidden
        W = g.param(self.params[f"{name}.weight"])
        b = g.param(self.params[f"{name}.bias"])
        h = g.const(np.zeros((B, H)))
        c = h
        states = [None] * L
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            xt = g.index(x, (slice(None), t))
            z = g.linear(g.concat([xt, h], axis=-1), W, b)
            i = g.sigmoid(g.index(z, (slice(None), slice(0, H))))
            f = g.sigmoid(g.index(z, (slice(None), slice(H, 2 * H))))
            u = g.tanh(g.index(z, (slice(None), slice(2 * H, 3 * H))))
            o = g.sigmoid(g.index(z, (slice(None), slice(3 * H, 4 * H))))
            c_new = g.add(g.mul(f, c), g.mul(i, u))
            h_new = g.mul(o, g.tanh(c_new))
            m = mask[:, t][:, None]
            if m.all():
                c, h = c_new, h_new
            else:
                c = g.where(m, c_new, c)
                h = g.where(m, h_new, h)
            states[t] = h
        return h, states

    def _lstm(self, g, x, batch):
        mask = batch.mask
        outs = []
        dirs = [("lstm_fwd", False)] + ([("lstm_bwd", True)] if self.config.bidirectional else [])
        for name, rev in dirs:
            last, states = self._lstm_dir(g, x, mask, name, rev)
            if self.config.pool == "last":
                outs.append(last)
            else:
                seq = g.stack(states, axis=1)
                outs.append(self._masked_pool(g, seq, mask))
        h = outs[0] if len(outs) == 1 else g.concat(outs, axis=-1)
        return self._run_ff(g, h, "head", self.config.ff_layers)

    def _decomp(self, g, hyp, batch, table):
        B = len(batch)
        d = hyp.shape[-1]
        null = g.reshape(g.param(self.params["null"]), (1, 1, d))
        prem = g.embed_box(table, batch.premise)
        zeros = g.const(np.zeros((B, 1, d)))
        prem = g.concat([g.add(zeros, null), prem], axis=1)
        pmask = np.concatenate([np.ones((B, 1), dtype=bool), batch.premise_mask], axis=1)
        hmask = batch.mask

        fa = self._run_ff(g, prem, "attend", 2)          # (B, Lp, H)
        fb = self._run_ff(g, hyp, "attend", 2)           # (B, Lh, H)
        fa = g.relu(fa)
        fb = g.relu(fb)
        scores = g.sum(g.mul(g.reshape(fa, fa.shape[:2] + (1, fa.shape[2])),
                             g.reshape(fb, (B, 1) + fb.shape[1:])), axis=-1)  # (B, Lp, Lh)
        fill = g.const(np.full((1, 1, 1), MASK_FILL))
        # premise word i attends over hypothesis words j
        beta_w = g.softmax(g.where(hmask[:, None, :], scores, fill))
        beta = g.sum(g.mul(g.reshape(beta_w, beta_w.shape + (1,)),
                           g.reshape(hyp, (B, 1) + hyp.shape[1:])), axis=2)   # (B, Lp, d)
        # hypothesis word j attends over premise words i
        st = g.transpose(scores, (0, 2, 1))
        alpha_w = g.softmax(g.where(pmask[:, None, :], st, fill))
        alpha = g.sum(g.mul(g.reshape(alpha_w, alpha_w.shape + (1,)),
                            g.reshape(prem, (B, 1) + prem.shape[1:])), axis=2)  # (B, Lh, d)
        v1 = g.relu(self._run_ff(g, g.concat([prem, beta], axis=-1), "compare", 2))
        v2 = g.relu(self._run_ff(g, g.concat([hyp, alpha], axis=-1), "compare", 2))
        h = g.concat([self._masked_pool(g, v1, pmask, mean=False),
                      self._masked_pool(g, v2, hmask, mean=False)], axis=-1)
        return self._run_ff(g, h, "head", self.config.ff_layers)

    # -- convenience ---------------------------------------------------------------

    def logits(self, examples: Sequence[Example], specs=None, eps: float = 1.0,
               check: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concrete logits and their bounds as (value, lower, upper)."""
        g = Graph(check=check)
        out = self.forward(g, encode(examples, self.vocab, specs), eps)
        return out.value, out.lo, out.hi

    def predict(self, examples: Sequence[Example]) -> np.ndarray:
        value, _, _ = self.logits(examples, check=False)
        return predictions(value)


def predictions(logits: np.ndarray) -> np.ndarray:
    if logits.shape[-1] == 1:
        return (logits[..., 0] > 0).astype(np.int64)
    return np.argmax(logits, axis=-1)


def loss_node(g: Graph, logits: Node, labels: np.ndarray) -> Node:
    """Per-example cross-entropy with its interval over the perturbation box.

    Binary: softplus(-sign * s), monotone in s, so each bound comes from one
    logit endpoint. Multiclass: minus the log-softmax bound of the true class.
    """
    labels = np.asarray(labels)
    B, n_out = logits.shape
    if n_out == 1:
        if np.any((labels < 0) | (labels > 1)):
            raise DataError("binary labels must be 0 or 1")
        sign = 2.0 * labels - 1.0
        return g.softplus(g.scale(g.index(logits, (slice(None), 0)), -sign))
    if np.any((labels < 0) | (labels >= n_out)):
        raise DataError(f"labels must lie in [0, {n_out})")
    ls = g.log_softmax(logits)
    return g.neg(g.index(ls, (np.arange(B), labels)))


def loss_and_bound(model: Model, examples: Sequence[Example], specs=None, eps: float = 1.0,
                   check: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(f, l_final, u_final) per example: the clean loss and the bounds on
    the loss over the eps-shrunk perturbation boxes."""
    g = Graph(check=check)
    batch = encode(examples, model.vocab, specs)
    loss = loss_node(g, model.forward(g, batch, eps), batch.labels)
    return loss.value, loss.lo, loss.hi


@dataclass
class CertificationResult:
    certified: bool
    correct: bool
    lower: np.ndarray
    upper: np.ndarray
    margin: float

    @property
    def logit_bounds(self):
        return self.lower, self.upper


def margin_bounds(lower: np.ndarray, upper: np.ndarray, label: int) -> float:
    """Worst-case margin of the true class; positive means certified."""
    if lower.shape[-1] == 1:
        return float(lower[0]) if label == 1 else float(-upper[0])
    others = np.delete(upper, label)
    return float(lower[label] - others.max())


def concrete_margin(logits: np.ndarray, labels) -> np.ndarray:
    """Margin of the true class for concrete logits (B, n_out)."""
    labels = np.asarray(labels)
    if logits.shape[-1] == 1:
        sign = 2.0 * labels - 1.0
        return sign * logits[:, 0]
    true = logits[np.arange(len(labels)), labels]
    other = logits.copy()
    other[np.arange(len(labels)), labels] = -np.inf
    return true - other.max(axis=-1)


def certify_batch(model: Model, examples: Sequence[Example],
                  specs: Sequence[SubstitutionSpec]) -> list[CertificationResult]:
    value, lo, hi = model.logits(examples, specs, eps=1.0)
    correct = concrete_margin(value, [ex.label for ex in examples]) > 0
    out = []
    for k, ex in enumerate(examples):
        m = margin_bounds(lo[k], hi[k], ex.label)
        out.append(CertificationResult(m > 0, bool(correct[k]), lo[k], hi[k], m))
    return out


def certify(model: Model, example: Example, spec: SubstitutionSpec) -> CertificationResult:
    return certify_batch(model, [example], [spec])[0]
