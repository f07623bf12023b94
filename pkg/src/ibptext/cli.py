"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error (including missing
files), 3 malformed data, 4 internal soundness or training fault.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from importlib import metadata

import numpy as np

from .embedding import VectorStore, bound_width_diagnostic
from .evaluation import (AttackConfig, certified_accuracy, evaluate, exhaustive_attack,
                         parallel_map, robustness_error_profile)
from .graph import SoundnessError, TrainingError, load_checkpoint, save_checkpoint
from .interval import ConfigurationError
from .lexicon import (DataError, FileScorer, FilteringError, NeighborFilterConfig, Vocabulary,
                      drop_oov, equivalence_classes, generate_memory_task, load_dataset,
                      load_neighbors, load_vectors, write_dataset, write_neighbors,
                      write_vectors)
from .models import Model, ModelConfig
from .training import TrainConfig, make_specs, parse_config_text, split_config, train

log = logging.getLogger("ibptext")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FAULT = 0, 2, 3, 4
VECTORS_KEY = "_pretrained_vectors"


class CheckpointError(DataError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _version() -> str:
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        here = os.path.dirname(os.path.abspath(__file__))
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            version += "+" + rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return version


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path: str | None, what: str) -> str | None:
    if path is not None and not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _data_file(path: str, split: str) -> str:
    """A dataset path may name a file or a directory holding ``<split>.tsv``."""
    if os.path.isdir(path):
        path = os.path.join(path, f"{split}.tsv")
    return _require(path, f"{split} data")


def _load_examples(path: str, vocab: Vocabulary) -> list:
    raw = load_dataset(path)
    kept = [e for e in (drop_oov(ex, vocab) for ex in raw) if e is not None]
    if len(kept) < len(raw):
        log.warning("%s: dropped %d examples with no in-vocabulary tokens",
                    path, len(raw) - len(kept))
    if not kept:
        raise DataError(f"{path}: no usable examples")
    return kept


def _write_manifest(out: str, args, started: str, inputs: dict, extra: dict | None = None):
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:] if args.argv is None else args.argv,
        "inputs": {k: {"path": os.path.abspath(p), "sha256": _sha256(p)}
                   for k, p in inputs.items() if p is not None and os.path.isfile(p)},
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", 1),
        "version": _version(),
        "out": os.path.abspath(out),
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _filter(path: str | None) -> NeighborFilterConfig | None:
    if path is None:
        return None
    return NeighborFilterConfig(scorer=FileScorer.load(path))


def _load_model(path: str) -> tuple[Model, TrainConfig]:
    try:
        params, manifest = load_checkpoint(path)
        vectors = params.pop(VECTORS_KEY)
        vocab = Vocabulary(manifest["vocab"])
        mc = ModelConfig.from_dict(manifest["config"]["model"])
        tc = TrainConfig.from_dict(manifest["config"]["train"])
        model = Model(mc, VectorStore(vocab, vectors))
        model.load_state(params)
    except FileNotFoundError:
        raise
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise CheckpointError(f"{path}: unusable checkpoint ({exc})") from None
    return model, tc


def _eval_inputs(args):
    model, tc = _load_model(_require(_ckpt_file(args.checkpoint), "checkpoint"))
    examples = _load_examples(_data_file(args.data, "test"), model.vocab)
    table = load_neighbors(_require(args.neighbors, "neighbors file"), model.vocab)
    lm = _filter(_require(getattr(args, "lm_scores", None), "LM score file"))
    specs = make_specs(examples, table, lm, tc.freeze_ends)
    return model, examples, specs


def _write_records(path: str, records):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in records:
            fh.write(json.dumps({"metric": k, "value": v}) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    started = _now()
    values = {}
    if args.config:
        with open(_require(args.config, "config"), encoding="utf-8") as fh:
            values = parse_config_text(fh.read(), args.config)
    if args.regime is not None:
        values["regime"] = args.regime
    if args.seed is not None:
        values["seed"] = args.seed
        values["init_seed"] = args.seed
    mc, tc = split_config(values)

    vocab, matrix = load_vectors(_require(args.vectors, "vectors file"))
    store = VectorStore(vocab, matrix)
    train_data = _load_examples(_data_file(args.data, "train"), vocab)
    dev_path = os.path.join(args.data, "dev.tsv") if os.path.isdir(args.data) else None
    if dev_path and os.path.exists(dev_path):
        dev_data = _load_examples(dev_path, vocab)
    else:
        cut = max(1, len(train_data) // 10)
        dev_data, train_data = train_data[:cut], train_data[cut:]
        log.warning("no dev split found; holding out the first %d training examples", cut)
    table = load_neighbors(_require(args.neighbors, "neighbors file"), vocab)
    lm = _filter(_require(args.lm_scores, "LM score file"))

    model = Model(mc, store)
    progress = None
    if args.verbose:
        progress = lambda st, m: print(f"epoch {st.epoch} {st.stage} eps={st.eps:.3f} "
                                      f"kappa={st.kappa:.3f} " +
                                      " ".join(f"{k}={v:.4f}" for k, v in m.items()),
                                      flush=True)
    result = train(model, train_data, dev_data, table, tc, dev_filter=lm, train_filter=lm,
                   progress=progress)

    os.makedirs(args.out, exist_ok=True)
    params = model.state()
    params[VECTORS_KEY] = matrix
    config = {"model": mc.to_dict(), "train": tc.to_dict()}
    save_checkpoint(os.path.join(args.out, "model"), params, config,
                    extra={"vocab": list(vocab), "best_epoch": result.best_epoch})
    with open(os.path.join(args.out, "history.tsv"), "w", encoding="utf-8") as fh:
        fh.write("epoch\tmetric\tvalue\n")
        for ep, k, v in result.history:
            fh.write(f"{ep}\t{k}\t{v!r}\n")
    with open(os.path.join(args.out, "schedule.tsv"), "w", encoding="utf-8") as fh:
        fh.write("epoch\tstage\teps\tkappa\n")
        for st in result.schedule:
            fh.write(f"{st.epoch}\t{st.stage}\t{st.eps!r}\t{st.kappa!r}\n")
    _write_manifest(args.out, args, started,
                    {"config": args.config, "vectors": args.vectors, "neighbors": args.neighbors,
                     "lm_scores": args.lm_scores,
                     "data": _data_file(args.data, "train")},
                    {"best_epoch": result.best_epoch, "best_metric": result.best_metric,
                     "epochs_run": result.epochs_run})
    print(f"best epoch {result.best_epoch}: {tc.early_stop_metric} = {result.best_metric:.4f}")
    return EXIT_OK


def cmd_certify(args) -> int:
    started = _now()
    model, examples, specs = _eval_inputs(args)
    frac, results = certified_accuracy(model, examples, specs)
    clean = float(np.mean([r.correct for r in results]))
    os.makedirs(args.out, exist_ok=True)
    _write_records(os.path.join(args.out, "report.jsonl"),
                   [("n", float(len(results))), ("clean_acc", clean), ("certified_acc", frac)])
    with open(os.path.join(args.out, "verdicts.tsv"), "w", encoding="utf-8") as fh:
        for i, r in enumerate(results):
            fh.write(f"{i}\t{int(r.correct)}\t{int(r.certified)}\t-\t-\n")
    summary = (f"examples            {len(results):>8}\n"
               f"clean accuracy      {100 * clean:>8.1f}\n"
               f"certified accuracy  {100 * frac:>8.1f}")
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    _write_manifest(args.out, args, started, _eval_paths(args))
    print(summary)
    return EXIT_OK


def cmd_attack(args) -> int:
    started = _now()
    model, examples, specs = _eval_inputs(args)
    cfg = AttackConfig(population=args.population, iterations=args.iters, seed=args.seed)
    report, attacks = evaluate(model, examples, specs, cfg, threads=args.threads)
    profile = robustness_error_profile(model, examples, attacks)
    os.makedirs(args.out, exist_ok=True)
    records = report.records() + [(f"words_changed_{k}", float(v))
                                  for k, v in profile.histogram.items()]
    records += [("errors_confident", float(profile.confident)),
                ("errors_unconfident", float(profile.unconfident))]
    _write_records(os.path.join(args.out, "report.jsonl"), records)
    with open(os.path.join(args.out, "verdicts.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.verdict_lines()) + "\n")
    with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.summary() + "\n")
    _write_manifest(args.out, args, started, _eval_paths(args))
    print(report.summary())
    return EXIT_OK


def cmd_enumerate(args) -> int:
    started = _now()
    model, examples, specs = _eval_inputs(args)
    results = parallel_map(lambda i: exhaustive_attack(model, examples[i], specs[i], args.cap),
                           range(len(examples)), args.threads)
    os.makedirs(args.out, exist_ok=True)
    done = [r for r in results if r is not None]
    skipped = len(results) - len(done)
    robust = float(np.mean([r.robust for r in done])) if done else float("nan")
    with open(os.path.join(args.out, "verdicts.tsv"), "w", encoding="utf-8") as fh:
        for i, r in enumerate(results):
            if r is None:
                fh.write(f"{i}\tskipped\t-\t-\n")
            else:
                fh.write(f"{i}\t{int(r.robust)}\t{r.min_margin!r}\t{r.visited}\n")
    _write_records(os.path.join(args.out, "report.jsonl"),
                   [("n", float(len(results))), ("enumerated", float(len(done))),
                    ("skipped_over_cap", float(skipped)), ("robust_acc", robust)])
    _write_manifest(args.out, args, started, _eval_paths(args))
    print(f"enumerated {len(done)} of {len(results)} examples "
          f"({skipped} over the cap of {args.cap}); robust accuracy {100 * robust:.1f}")
    return EXIT_OK


def cmd_gen_memory_task(args) -> int:
    started = _now()
    task = generate_memory_task(n_train=args.n_train, n_test=args.n_test,
                                vocab_size=args.vocab, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    for split in ("train", "dev", "test"):
        write_dataset(os.path.join(args.out, f"{split}.tsv"), getattr(task, split))
    write_neighbors(os.path.join(args.out, "neighbors.tsv"), task.table)
    store = VectorStore.random(task.vocab, args.dim, seed=args.seed)
    write_vectors(os.path.join(args.out, "vectors.txt"), task.vocab, store.matrix)
    with open(os.path.join(args.out, "memory.cfg"), "w", encoding="utf-8") as fh:
        fh.write("preset = memory\n")
    _write_manifest(args.out, args, started, {})
    print(f"wrote memory task to {args.out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    started = _now()
    model, _ = _load_model(_require(_ckpt_file(args.checkpoint), "checkpoint"))
    store = model.store
    if args.vectors is not None:
        vocab, matrix = load_vectors(_require(args.vectors, "vectors file"))
        if list(vocab) != list(store.vocab) or not np.array_equal(matrix, store.matrix):
            raise DataError(f"{args.vectors}: vectors differ from those the checkpoint was "
                            "trained with")
    table = load_neighbors(_require(args.neighbors, "neighbors file"), store.vocab)
    diag = bound_width_diagnostic(table, model.transform, store)
    stats = equivalence_classes(table, store.vocab)
    lines = ["word\tpretrained\ttransformed"]
    lines += [f"{w}\t{a:.6f}\t{b:.6f}" for w, a, b in diag.rows()]
    summary = (f"words with neighbors: {len(diag.words)}\n"
               f"tighter after transform: {100 * diag.fraction_tighter:.1f}%\n"
               f"equivalence classes: {len(stats.classes)}\n"
               f"largest class: {stats.largest}\n"
               f"words without neighbors: {stats.neighborless}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "widths.tsv"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(os.path.join(args.out, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(summary + "\n")
        _write_manifest(args.out, args, started,
                        {"checkpoint": _ckpt_file(args.checkpoint), "neighbors": args.neighbors,
                         "vectors": args.vectors})
    else:
        print("\n".join(lines))
    print(summary)
    return EXIT_OK


def cmd_rerun(args) -> int:
    """Replay the argv recorded in a manifest, writing to a new directory."""
    with open(_require(args.manifest, "manifest"), encoding="utf-8") as fh:
        argv = list(json.load(fh)["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = args.out
    else:
        argv += ["--out", args.out]
    return main(argv)


def _ckpt_file(path: str) -> str:
    return path if path.endswith((".npz", ".json")) else path + ".npz"


def _eval_paths(args) -> dict:
    return {"checkpoint": _ckpt_file(args.checkpoint), "data": _data_file(args.data, "test"),
            "neighbors": args.neighbors, "lm_scores": getattr(args, "lm_scores", None)}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ibptext",
                                description="Certified robustness to word substitutions.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads for per-example work (default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True, help="directory with train.tsv/dev.tsv, or a file")
    t.add_argument("--neighbors", required=True)
    t.add_argument("--vectors", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--regime", choices=["standard", "augment", "robust"])
    t.add_argument("--lm-scores")
    t.set_defaults(fn=cmd_train)

    def eval_parser(name, help):
        e = sub.add_parser(name, help=help)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True, help="directory with test.tsv, or a file")
        e.add_argument("--neighbors", required=True)
        e.add_argument("--lm-scores")
        e.add_argument("--out", required=True)
        return e

    eval_parser("certify", "certified accuracy").set_defaults(fn=cmd_certify)
    a = eval_parser("attack", "genetic-attack accuracy")
    defaults = AttackConfig()
    a.add_argument("--population", type=int, default=defaults.population)
    a.add_argument("--iters", type=int, default=defaults.iterations)
    a.add_argument("--seed", type=int, default=defaults.seed)
    a.set_defaults(fn=cmd_attack)
    e = eval_parser("enumerate", "exact robust accuracy on small perturbation spaces")
    e.add_argument("--cap", type=int, default=10_000)
    e.set_defaults(fn=cmd_enumerate)

    g = sub.add_parser("gen-memory-task", help="write the synthetic memory task")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=4000)
    g.add_argument("--n-test", type=int, default=1000)
    g.add_argument("--vocab", type=int, default=50)
    g.add_argument("--dim", type=int, default=32, help="random word-vector size")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_memory_task)

    d = sub.add_parser("diagnose", help="bound-width and equivalence-class diagnostics")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--neighbors", required=True)
    d.add_argument("--vectors")
    d.add_argument("--out")
    d.set_defaults(fn=cmd_diagnose)

    r = sub.add_parser("rerun", help="replay a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_rerun)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(argv) if argv is not None else None
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (ConfigurationError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FilteringError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SoundnessError, TrainingError) as exc:
        print(f"internal fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
