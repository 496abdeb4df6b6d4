"""Command-line front end: ``icsynergy {synth,split,train,eval,optimize,rank}``.

Every run resolves a flat JSON config (defaults, then ``--config FILE``,
then ``--set key=value`` overrides), writes its artifacts under ``--out``
with stable names and records a ``manifest_<command>.json`` beside them.
Only the manifest carries timestamps, so the other JSON outputs of two
identical runs are byte-identical.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

import torch

from . import __version__
from .context import STRATEGIES, UNKNOWN_FIRST
from .ctxopt import (
    ContextProblem,
    ContractError,
    GAConfig,
    best_of_budget_random,
    error_reduction,
    load_contexts,
    run_ga,
    save_contexts,
)
from .dataset import DataError, ingest_csv, load_split, make_fewshot_split, make_optimization_split, save_split, write_csv
from .inverse import DrugEmbeddingBank, rank_curve, train_retrieval
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .synthgen import sample_dataset, sample_world
from .train import ConfigError, TrainConfig, evaluate, train

log = logging.getLogger("icsynergy")

EXIT_CONFIG = 2
EXIT_DATA = 3

_MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"num_drugs", "num_cells"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}

DEFAULTS: dict[str, dict[str, Any]] = {
    "synth": dict(num_drugs=60, num_cells=6, d_latent=4, count=4000, noise_rate=0.0, num_groups=0,
                  drug_offset=1.0, shared_gain=1.0),
    "split": dict(regime="few-shot", m=10, n=20, mode="unknown-drug", label_threshold=0.5),
    "train": dict(preset="desk", model={}, **{k: None for k in ("epochs", "batch_size", "lr", "strategy", "n_ctx",
                                                                   "mode", "objective")}),
    "eval": dict(strategy=UNKNOWN_FIRST, n_ctx=20),
    "optimize": dict(method="ga", n_ctx=20, budget=None, population=8, epochs=50, parents=4,
                     mutation_rate=0.10, elitism=1),
    "rank": dict(n_ctx_max=20, source="held-out", pool="all", max_queries=None),
}


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(command: str, config_path: str | None, overrides: list[str]) -> dict[str, Any]:
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    layers: list[dict] = []
    if config_path:
        try:
            layers.append(json.loads(Path(config_path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        layer: dict = {}
        node = layer
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
        layers.append(layer)
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("config must be a JSON object")
        for k, v in layer.items():
            if k == "seed":
                cfg["seed"] = v
                continue
            if k not in cfg and not (command == "train" and k in _TRAIN_KEYS):
                raise ConfigError(f"unknown {command} config key {k!r}")
            if isinstance(cfg.get(k), dict) and isinstance(v, dict):
                cfg[k] = {**cfg[k], **v}
            else:
                cfg[k] = v
    return cfg


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Run:
    """Artifact bookkeeping for one invocation."""

    def __init__(self, args: argparse.Namespace, cfg: dict):
        self.args, self.cfg = args, cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.artifacts: list[str] = []
        self.started = time.time()

    def input(self, path: str | None, what: str) -> Path:
        if not path:
            raise ConfigError(f"--{what} is required for {self.args.command}")
        p = Path(path)
        if not p.exists():
            raise DataError(f"{what} file {path} does not exist")
        self.inputs[str(p)] = file_digest(p)
        return p

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name

    def finish(self, argv: list[str]) -> None:
        canonical = json.dumps(self.cfg, sort_keys=True)
        dump_json(self.out / f"manifest_{self.args.command}.json", {
            "command_line": ["icsynergy", *argv],
            "version": __version__,
            "config": self.cfg,
            "config_hash": hashlib.sha256(canonical.encode("utf-8")).hexdigest(),
            "seed": self.args.seed,
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "started_unix": self.started,
            "duration_s": time.time() - self.started,
        })


def _load_data(run: Run):
    vocab, tuples = ingest_csv(run.input(run.args.data, "data"), threshold=run.cfg.get("label_threshold", 0.5))
    if not tuples:
        raise DataError("data file holds no tuples")
    return vocab, tuples


def _load_split(run: Run, tuples):
    try:
        return load_split(run.input(run.args.split, "split"), tuples)
    except (KeyError, IndexError, json.JSONDecodeError) as exc:
        raise DataError(f"split manifest does not match the data: {exc}") from None


def _load_model(run: Run, vocab):
    model, meta = load_checkpoint(run.input(run.args.checkpoint, "checkpoint"))
    if meta["vocab_digest"] != vocab.digest():
        raise DataError("checkpoint was trained on a different entity vocabulary")
    return model, meta


def cmd_synth(run: Run) -> None:
    c, seed = run.cfg, run.args.seed
    world = sample_world(c["num_drugs"], c["num_cells"], c["d_latent"], seed, noise_rate=c["noise_rate"],
                         drug_offset=c["drug_offset"], shared_gain=c["shared_gain"])
    data = sample_dataset(world, c["count"], seed, num_groups=c["num_groups"])
    vocab = world.vocab()
    write_csv(run.path("data.csv"), vocab, data)
    world.save(run.path("world.npz"))
    DrugEmbeddingBank.from_matrix(world.drug_vecs).save_csv(run.path("embeddings.csv"), vocab)


def cmd_split(run: Run) -> None:
    c = run.cfg
    vocab, tuples = _load_data(run)
    if c["regime"] == "few-shot":
        sp = make_fewshot_split(tuples, c["m"], c["n"], c["mode"], run.args.seed, vocab=vocab)
    elif c["regime"] == "optimization":
        sp = make_optimization_split(tuples, c["m"], c["mode"], run.args.seed, vocab=vocab)
    else:
        raise ConfigError(f"unknown regime {c['regime']!r}; use few-shot or optimization")
    save_split(run.path("split.json"), sp)


def cmd_train(run: Run) -> None:
    c = run.cfg
    vocab, tuples = _load_data(run)
    sp = _load_split(run, tuples)
    unknown_model = set(c["model"]) - _MODEL_KEYS
    if unknown_model:
        raise ConfigError(f"unknown model keys {sorted(unknown_model)}")
    try:
        mcfg = ModelConfig.preset(c["preset"], vocab.num_drugs, vocab.num_cells, **c["model"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    over = {k: v for k, v in c.items() if k in _TRAIN_KEYS and v is not None}
    tcfg = TrainConfig.preset(c["preset"], **{**over, "seed": run.args.seed})
    model = build_model(mcfg, seed=run.args.seed)
    history = run.path("history.jsonl")
    if tcfg.objective == "retrieval":
        bank = DrugEmbeddingBank.load_csv(run.input(run.args.embeddings, "embeddings"), vocab)
        train_retrieval(model, sp, bank, tcfg, history_path=history)
    else:
        train(model, sp, tcfg, history_path=history)
    save_checkpoint(run.path("model.npz"), model, vocab.digest(), run.args.seed, extra={"train": tcfg.to_dict()})


def cmd_eval(run: Run) -> None:
    c = run.cfg
    vocab, tuples = _load_data(run)
    sp = _load_split(run, tuples)
    model, _ = _load_model(run, vocab)
    n_ctx = run.args.n_ctx if run.args.n_ctx is not None else c["n_ctx"]
    strategy = run.args.strategy or c["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    if n_ctx > model.config.max_ctx_examples:
        raise ConfigError(f"n_ctx {n_ctx} exceeds the model maximum {model.config.max_ctx_examples}")
    contexts = load_contexts(run.input(run.args.context_file, "context-file")) if run.args.context_file else None
    res = evaluate(model, sp, strategy, n_ctx, run.args.seed, contexts=contexts)
    dump_json(run.path("metrics.json"), {
        "strategy": "optimized" if contexts else strategy,
        "n_ctx": n_ctx,
        "metrics": res.report.to_dict(),
    })


def cmd_optimize(run: Run) -> None:
    c = run.cfg
    vocab, tuples = _load_data(run)
    sp = _load_split(run, tuples)
    model, _ = _load_model(run, vocab)
    problem = ContextProblem(model, sp, c["n_ctx"])
    methods = ["ga", "random", "error-reduction"] if c["method"] == "all" else [c["method"]]
    unknown = set(methods) - {"ga", "random", "error-reduction"}
    if unknown:
        raise ConfigError(f"unknown optimisation method {c['method']!r}")
    budget = c["budget"]
    summary: dict[str, Any] = {"n_ctx": c["n_ctx"]}
    if "ga" in methods:
        gcfg = GAConfig(c["population"], c["epochs"], c["parents"], c["mutation_rate"], c["elitism"])
        ga = run_ga(problem, gcfg, seed=run.args.seed)
        save_contexts(run.path("contexts_ga.json"), ga.best)
        ga.write_trace(run.path("trace_ga.jsonl"))
        budget = ga.evaluations if budget is None else budget
        summary["ga"] = {"evaluations": ga.evaluations, "initial_best": ga.initial_best,
                         "validation_roc_auc": ga.best_fitness, "test_roc_auc": problem.fitness(ga.best, "test")}
    if budget is None:
        raise ConfigError("budget is required unless the GA runs first (method ga or all)")
    if "random" in methods:
        rr = best_of_budget_random(problem, int(budget), seed=run.args.seed)
        save_contexts(run.path("contexts_random.json"), rr.best)
        summary["random"] = {"evaluations": len(rr.fitnesses), "validation_mean": rr.mean,
                             "validation_roc_auc": rr.max, "test_roc_auc": problem.fitness(rr.best, "test")}
    if "error-reduction" in methods:
        er = error_reduction(problem, int(budget), seed=run.args.seed)
        save_contexts(run.path("contexts_error-reduction.json"), er.chromosome)
        summary["error-reduction"] = {"epochs": er.epochs, "validation_roc_auc": problem.fitness(er.chromosome),
                                      "test_roc_auc": problem.fitness(er.chromosome, "test")}
    dump_json(run.path("optimize.json"), summary)


def cmd_rank(run: Run) -> None:
    c = run.cfg
    vocab, tuples = _load_data(run)
    sp = _load_split(run, tuples)
    model, _ = _load_model(run, vocab)
    bank = DrugEmbeddingBank.load_csv(run.input(run.args.embeddings, "embeddings"), vocab)
    if bank.dim != model.config.retrieval_dim:
        raise ConfigError(f"embedding dim {bank.dim} != model retrieval_dim {model.config.retrieval_dim}")
    contexts = load_contexts(run.input(run.args.context_file, "context-file")) if run.args.context_file else None
    curve = rank_curve(model, sp, bank, c["n_ctx_max"], seed=run.args.seed, source=c["source"], pool=c["pool"],
                       max_queries=c["max_queries"], contexts=contexts)
    dump_json(run.path("rank.json"), curve.to_dict())


COMMANDS: dict[str, Callable[[Run], None]] = {
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "optimize": cmd_optimize,
    "rank": cmd_rank,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icsynergy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write a synthetic dataset, its latent world and embedding bank",
        "split": "build a held-out entity split manifest",
        "train": "train the synergy or retrieval objective",
        "eval": "zero- or few-shot evaluation on the test tuples",
        "optimize": "optimise per-entity contexts on a frozen checkpoint",
        "rank": "inverse-design rank curves",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1, help="cap on torch worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", help="synergy CSV")
        if name in ("train", "eval", "optimize", "rank"):
            p.add_argument("--split", help="split manifest from `split`")
        if name in ("eval", "optimize", "rank"):
            p.add_argument("--checkpoint", help="model.npz from `train`")
        if name in ("train", "rank"):
            p.add_argument("--embeddings", help="drug embedding CSV (retrieval)")
        if name in ("eval", "rank"):
            p.add_argument("--context-file", help="contexts JSON from `optimize`")
        if name == "eval":
            p.add_argument("--n-ctx", type=int, help="context examples per query (0 = zero-shot)")
            p.add_argument("--strategy", choices=STRATEGIES)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    torch.set_num_threads(args.threads)
    try:
        cfg = resolve_config(args.command, args.config, args.set)
        if "seed" in cfg:
            args.seed = int(cfg.pop("seed"))
        run = Run(args, cfg)
        COMMANDS[args.command](run)
        run.finish(argv)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
