"""Standard, data-augmentation and certifiably robust training.

Robust training minimises ``(1 - kappa) * f + kappa * u_final`` where the
upper bound is computed on input boxes shrunk by ``eps``. Both ``eps`` and
``kappa`` ramp linearly over ``t_init`` epochs (after ``warmup_epochs`` of
plain training) and are then held for up to ``t_final`` epochs.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .graph import Adam, Graph, Node, TrainingError
from .interval import ConfigurationError
from .lexicon import (Example, NeighborFilterConfig, NeighborTable, SubstitutionSpec,
                      build_substitution_spec, ends_frozen, point_spec)
from .models import (Model, ModelConfig, concrete_margin, encode, loss_node, margin_bounds)

log = logging.getLogger(__name__)

REGIMES = ("standard", "augment", "robust")
EARLY_STOP_METRIC = {"standard": "dev_clean_acc", "augment": "dev_aug_acc",
                     "robust": "dev_cert_acc"}


@dataclass
class TrainConfig:
    regime: str = "robust"
    kappa: float = 0.8
    t_init: int = 40
    t_final: int = 10
    warmup_epochs: int = 0
    fixed_epsilon: bool = False
    fixed_kappa: bool = False
    epsilon_max: float = 1.0
    augment_k: int = 4
    augment_resample: bool = True
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.25
    batch_size: int = 32
    seed: int = 0
    patience: int | None = None
    early_stop_metric: str | None = None
    freeze_ends: bool = False
    filter_train: bool = False
    check_bounds: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigurationError("kappa must lie in [0, 1]")
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ConfigurationError("epsilon_max must lie in [0, 1]")
        if min(self.t_init, self.t_final, self.warmup_epochs) < 0:
            raise ConfigurationError("epoch counts must be non-negative")
        if self.augment_k < 1:
            raise ConfigurationError("augment_k must be at least 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.early_stop_metric is None:
            self.early_stop_metric = EARLY_STOP_METRIC[self.regime]

    @property
    def epochs(self) -> int:
        return self.warmup_epochs + self.t_init + self.t_final

    @property
    def hold_start(self) -> int:
        """First epoch at which eps and kappa have reached their targets."""
        return self.warmup_epochs + self.t_init if self.regime == "robust" else 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    eps: float
    kappa: float
    stage: str


def schedule(config: TrainConfig, epoch: int) -> ScheduleState:
    if config.regime != "robust":
        return ScheduleState(epoch, 0.0, 0.0, "standard")
    if epoch < config.warmup_epochs:
        return ScheduleState(epoch, 0.0, 0.0, "warmup")
    t = epoch - config.warmup_epochs
    ramp = 1.0 if config.t_init == 0 else min(1.0, t / config.t_init)
    eps = config.epsilon_max * (1.0 if config.fixed_epsilon else ramp)
    kappa = config.kappa * (1.0 if config.fixed_kappa else ramp)
    stage = "ramp" if t < config.t_init else "hold"
    return ScheduleState(epoch, eps, kappa, stage)


def objective(f, u, kappa: float):
    """(1 - kappa) * f + kappa * u for plain numbers or arrays."""
    return (1.0 - kappa) * f + kappa * u


def objective_node(g: Graph, f: Node, u: Node, kappa: float) -> Node:
    if kappa == 0.0 or u is f:
        return f
    if kappa == 1.0:
        return u
    return g.add(g.scale(f, 1.0 - kappa), g.scale(u, kappa))


# ---------------------------------------------------------------------------
# specs and sampling


def make_specs(examples: Sequence[Example], table: NeighborTable,
               lm_filter: NeighborFilterConfig | None = None,
               freeze_ends: bool = False) -> list[SubstitutionSpec]:
    return [build_substitution_spec(ex.tokens, table, lm_filter,
                                    ends_frozen(ex.tokens) if freeze_ends else ())
            for ex in examples]


def sample_perturbations(example: Example, spec: SubstitutionSpec, k: int,
                         rng: np.random.Generator) -> list[Example]:
    """``k`` perturbed copies, each position drawn uniformly from S(x, i)."""
    return [Example(spec.sample(rng), example.label, example.premise) for _ in range(k)]


# ---------------------------------------------------------------------------
# evaluation helpers used for early stopping


def _batches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def clean_accuracy(model: Model, examples: Sequence[Example], batch_size: int = 256) -> float:
    hits = 0
    for sl in _batches(len(examples), batch_size):
        chunk = examples[sl]
        value, _, _ = model.logits(chunk, check=False)
        hits += int(np.sum(concrete_margin(value, [e.label for e in chunk]) > 0))
    return hits / max(1, len(examples))


def certified_flags(model: Model, examples: Sequence[Example], specs: Sequence[SubstitutionSpec],
                    batch_size: int = 256) -> np.ndarray:
    flags = []
    for sl in _batches(len(examples), batch_size):
        chunk = examples[sl]
        _, lo, hi = model.logits(chunk, specs[sl], eps=1.0)
        flags.extend(margin_bounds(lo[k], hi[k], ex.label) > 0 for k, ex in enumerate(chunk))
    return np.asarray(flags, dtype=bool)


def certified_accuracy_simple(model, examples, specs, batch_size: int = 256) -> float:
    if not examples:
        return 0.0
    return float(np.mean(certified_flags(model, examples, specs, batch_size)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    history: list[tuple[int, str, float]]
    schedule: list[ScheduleState]
    best_epoch: int
    best_metric: float
    epochs_run: int
    notes: list[str] = field(default_factory=list)

    def metric(self, name: str) -> list[float]:
        return [v for _, m, v in self.history if m == name]


def objective_graph(model: Model, examples: Sequence[Example],
                    specs: Sequence[SubstitutionSpec] | None, eps: float, kappa: float,
                    training: bool = False, rng=None, check: bool = True,
                    record: bool = False) -> tuple[Graph, Node]:
    """Graph whose output is the batch-mean training objective.

    With ``kappa == 0`` the boxes are never built, so the pass is exactly
    the one standard training would run.
    """
    g = Graph(check=check and not (training and model.config.dropout > 0.0),
              training=training, rng=rng, record=record)
    batch = encode(examples, model.vocab, specs)
    use_eps = eps if kappa > 0.0 else 0.0
    loss = loss_node(g, model.forward(g, batch, use_eps), batch.labels)
    f = g.mean(g.value_of(loss), axis=0)
    u = g.mean(g.upper_of(loss), axis=0) if not loss.is_point else f
    return g, objective_node(g, f, u, kappa)


def train_step(model: Model, opt: Adam, examples: Sequence[Example],
               specs: Sequence[SubstitutionSpec] | None, eps: float, kappa: float,
               rng: np.random.Generator, check: bool = True) -> float:
    """One optimiser step on a minibatch; returns the objective value."""
    g, obj = objective_graph(model, examples, specs, eps, kappa, training=True, rng=rng,
                             check=check)
    value = float(obj.value)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite objective {value}")
    opt.zero_grad()
    g.backward(obj)
    opt.step()
    return value


def train(model: Model, train_data: Sequence[Example], dev_data: Sequence[Example],
          table: NeighborTable, config: TrainConfig,
          dev_filter: NeighborFilterConfig | None = None,
          train_filter: NeighborFilterConfig | None = None,
          progress=None) -> TrainResult:
    """Train ``model`` in place and restore its best early-stopping state.

    Training substitution sets are unfiltered unless ``config.filter_train``
    is set; dev certification uses ``dev_filter``.
    """
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.trainable(), lr=config.lr, weight_decay=config.weight_decay,
               clip=config.grad_clip)
    tf = train_filter if config.filter_train else None
    train_specs = make_specs(train_data, table, tf, config.freeze_ends)
    dev_specs = make_specs(dev_data, table, dev_filter, config.freeze_ends)
    aug_dev = None
    if config.regime == "augment":
        aug_rng = np.random.default_rng([config.seed, 1])
        aug_dev = list(dev_data)
        for ex, sp in zip(dev_data, dev_specs):
            aug_dev.extend(sample_perturbations(ex, sp, config.augment_k, aug_rng))
    frozen_aug = None

    metric_name = config.early_stop_metric
    history: list[tuple[int, str, float]] = []
    trace: list[ScheduleState] = []
    best_state, best_metric, best_epoch = model.state(), -np.inf, -1
    stale = 0
    epoch = -1
    for epoch in range(config.epochs):
        st = schedule(config, epoch)
        trace.append(st)
        data, specs = list(train_data), list(train_specs)
        if config.regime == "augment":
            if config.augment_resample or frozen_aug is None:
                extra = []
                for ex, sp in zip(train_data, train_specs):
                    extra.extend(sample_perturbations(ex, sp, config.augment_k, rng))
                frozen_aug = extra
            data += frozen_aug
            specs += [point_spec(ex.tokens) for ex in frozen_aug]
        order = rng.permutation(len(data))
        total, count = 0.0, 0
        for b, sl in enumerate(_batches(len(order), config.batch_size)):
            idx = order[sl]
            try:
                val = train_step(model, opt, [data[i] for i in idx], [specs[i] for i in idx],
                                 st.eps, st.kappa, rng, config.check_bounds)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += val * len(idx)
            count += len(idx)
        metrics = {"train_loss": total / max(1, count),
                   "dev_clean_acc": clean_accuracy(model, dev_data),
                   "dev_cert_acc": certified_accuracy_simple(model, dev_data, dev_specs)}
        if aug_dev is not None:
            metrics["dev_aug_acc"] = clean_accuracy(model, aug_dev)
        for k, v in metrics.items():
            history.append((epoch, k, float(v)))
        if progress is not None:
            progress(st, metrics)
        log.info("epoch %d eps=%.3f kappa=%.3f %s", epoch, st.eps, st.kappa,
                 " ".join(f"{k}={v:.4f}" for k, v in metrics.items()))

        score = metrics[metric_name]
        if score > best_metric:
            best_metric, best_epoch, best_state = score, epoch, model.state()
            stale = 0
        elif epoch >= config.hold_start:
            stale += 1
        if config.patience is not None and epoch >= config.hold_start and stale >= config.patience:
            break
    model.load_state(best_state)
    return TrainResult(model, history, trace, best_epoch, float(best_metric), epoch + 1)


def staged_memory_config(**overrides) -> TrainConfig:
    """Plain training, then a ramp of eps to 1 and kappa to 0.5, then a hold
    phase ended by early stopping on certified dev accuracy."""
    base = dict(regime="robust", warmup_epochs=50, t_init=50, t_final=50, kappa=0.5,
                patience=10, freeze_ends=True, weight_decay=0.0)
    base.update(overrides)
    return TrainConfig(**base)


def staged_train_memory_task(model: Model, task, config: TrainConfig | None = None,
                             progress=None) -> TrainResult:
    config = config or staged_memory_config()
    if config.regime != "robust" or not config.freeze_ends:
        raise ConfigurationError("memory task needs robust training with frozen ends")
    result = train(model, task.train, task.dev, task.table, config, progress=progress)
    if config.warmup_epochs:
        result.notes.append(f"stage boundary at epoch {config.warmup_epochs}")
    result.notes.append(f"stage boundary at epoch {config.warmup_epochs + config.t_init}")
    return result


@dataclass
class MemoryRun:
    result: TrainResult
    test_certified: float
    test_clean: float
    seconds: float


def run_memory_experiment(vocab_size: int = 50, hidden: int = 300, n_train: int = 4000,
                          n_test: int = 1000, n_dev: int = 1000, dim: int = 32, seed: int = 0,
                          progress=None, **overrides) -> MemoryRun:
    """Generate the memory task, train a unidirectional LSTM with the staged
    schedule and report certified accuracy on the held-out split."""
    import time

    from .embedding import VectorStore
    from .lexicon import generate_memory_task

    t0 = time.perf_counter()
    task = generate_memory_task(n_train, n_test, vocab_size, seed=seed, n_dev=n_dev)
    store = VectorStore.random(task.vocab, dim, seed=seed)
    mc = ModelConfig(arch="lstm", hidden=hidden, bidirectional=False, pool="last",
                     init_seed=seed)
    model = Model(mc, store)
    result = staged_train_memory_task(model, task, staged_memory_config(seed=seed, **overrides),
                                      progress)
    specs = make_specs(task.test, task.table, freeze_ends=True)
    cert = certified_accuracy_simple(model, task.test, specs)
    clean = clean_accuracy(model, task.test)
    return MemoryRun(result, cert, clean, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# config files


PRESETS: dict[str, dict] = {
    "imdb_bow": dict(arch="bow", hidden=100, kappa=0.8, lr=1e-3, dropout=0.2,
                     weight_decay=1e-4, grad_clip=0.25, t_init=40),
    "imdb_cnn": dict(arch="cnn", hidden=100, kappa=0.8, lr=1e-3, dropout=0.2,
                     weight_decay=1e-4, grad_clip=0.25, t_init=40),
    "imdb_lstm": dict(arch="lstm", hidden=100, kappa=0.8, lr=1e-3, dropout=0.2,
                      weight_decay=1e-4, grad_clip=0.25, t_init=20),
    "snli_bow": dict(arch="bow", pair=True, n_classes=3, hidden=100, ff_layers=3, kappa=0.5,
                     lr=5e-4, dropout=0.1, weight_decay=1e-4, grad_clip=0.25, t_init=35,
                     batch_size=256),
    "snli_decomp_attn": dict(arch="decomp_attn", n_classes=3, hidden=300, ff_layers=2,
                             kappa=0.5, lr=1e-4, dropout=0.1, weight_decay=0.0,
                             grad_clip=0.25, t_init=50, batch_size=256),
    "memory": dict(arch="lstm", hidden=300, bidirectional=False, pool="last", ff_layers=2,
                   regime="robust", warmup_epochs=50, t_init=50, t_final=50, kappa=0.5,
                   patience=10, freeze_ends=True, weight_decay=0.0, dropout=0.0),
}


def _parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{n}: expected 'key = value'")
        key, val = line.split("=", 1)
        out[key.strip()] = _parse_value(val)
    return out


def split_config(values: dict) -> tuple[ModelConfig, TrainConfig]:
    """Build both configs from one flat mapping; a ``preset`` key supplies
    defaults that the remaining keys override."""
    values = dict(values)
    merged = {}
    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}")
        merged.update(PRESETS[preset])
    merged.update(values)
    mnames = {f.name for f in fields(ModelConfig)}
    tnames = {f.name for f in fields(TrainConfig)}
    unknown = set(merged) - mnames - tnames
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        mc = ModelConfig(**{k: v for k, v in merged.items() if k in mnames})
        tc = TrainConfig(**{k: v for k, v in merged.items() if k in tnames})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    return mc, tc


def load_config(path: str) -> tuple[ModelConfig, TrainConfig]:
    with open(path, encoding="utf-8") as fh:
        return split_config(parse_config_text(fh.read(), path))
