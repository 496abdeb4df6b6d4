"""Prefix-averaged training with masked, strategy-sampled contexts; evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import metrics
from .context import (
    INTERPOLATE,
    RANDOM,
    STRATEGIES,
    PromptSequence,
    build_graph,
    interpolate_strategy,
    mask_and_assemble,
    select_context_indices,
    training_mask_choice,
)
from .dataset import UNKNOWN, SplitBundle
from .model import (
    SynergyTransformer,
    encode,
    loss_retrieval_prefixes,
    loss_synergy,
    prefix_weights,
    read_positions,
)
from .rng import stream, torch_seed

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int | None = None
    warmup_frac: float = 0.05
    strategy: str = "unknown-first"
    n_ctx: int = 20
    mode: str = "unknown-drug"
    seed: int = 0
    objective: str = "synergy"
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    check_hygiene: bool = False

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "desk": dict(epochs=30, batch_size=64, lr=1e-3, warmup_frac=0.05),
            # weight decay curbs memorising the training drugs, which otherwise flattens held-out ranks
            "desk-retrieval": dict(epochs=15, batch_size=64, lr=3e-3, warmup_frac=0.05, weight_decay=0.1,
                                   objective="retrieval"),
            "paper-drug": dict(epochs=40, batch_size=64, lr=2e-5, warmup_steps=10_000, n_ctx=20),
            "paper-cell": dict(epochs=30, batch_size=128, lr=2e-5, warmup_frac=0.05, n_ctx=10,
                               mode="unknown-cell", strategy=INTERPOLATE),
        }
        if name not in presets:
            raise ConfigError(f"unknown training preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def _validate(cfg: TrainConfig, split: SplitBundle, model: SynergyTransformer, total_steps: int) -> int:
    if cfg.strategy not in STRATEGIES + (INTERPOLATE,):
        raise ConfigError(f"unknown strategy {cfg.strategy!r}")
    if cfg.objective not in ("synergy", "retrieval"):
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    if split.mode != cfg.mode:
        raise ConfigError(f"split mode {split.mode!r} does not match training mode {cfg.mode!r}")
    if cfg.n_ctx > model.config.max_ctx_examples:
        raise ConfigError(f"n_ctx {cfg.n_ctx} exceeds the model maximum {model.config.max_ctx_examples}")
    if cfg.epochs < 1 or cfg.batch_size < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if cfg.objective == "retrieval" and cfg.batch_size < 2:
        raise ConfigError("the contrastive objective needs batch_size >= 2")
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else int(round(cfg.warmup_frac * total_steps))
    if not 0 <= warmup < total_steps:
        raise ConfigError(f"warmup ({warmup}) must be below the total step count ({total_steps})")
    return warmup


def linear_schedule(warmup: int, total: int) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        return max(0.0, (total - step) / max(1, total - warmup))

    return factor


def group_by_length(prompts: Sequence[PromptSequence]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        groups.setdefault(p.length, []).append(i)
    return groups


def _assert_hygiene(prompts: Sequence[PromptSequence], held_out: set[int], mode: str) -> None:
    slots = (2,) if mode == "unknown-cell" else (0, 1)
    for p in prompts:
        for slot, v in p.tokens:
            if slot in slots and v in held_out:
                raise AssertionError(f"held-out entity {v} reached a prompt unmasked")


def batch_loss(
    model: SynergyTransformer,
    prompts: Sequence[PromptSequence],
    objective: str,
    n_ctx: int,
    targets: Sequence[np.ndarray] | None = None,
) -> torch.Tensor:
    """Loss of a minibatch, split into equal-length groups weighted by size."""
    total = 0.0
    dtype = next(model.parameters()).dtype
    for _, idx in sorted(group_by_length(prompts).items()):
        group = [prompts[i] for i in idx]
        ids = encode(group, model.config)
        k = group[0].n_ctx + 1
        w = prefix_weights(k, objective, n_ctx).to(dtype)
        h = model.hidden(ids)
        if objective == "synergy":
            labels = torch.tensor([p.labels for p in group], dtype=dtype)
            part = loss_synergy(model.synergy_logits(h), labels, w)
        else:
            pos, has = read_positions(group)
            pred = model.retrieval_vectors(h, pos)
            tgt = torch.as_tensor(np.stack([targets[i] for i in idx]), dtype=dtype)  # (B, r)
            tgt = tgt.unsqueeze(1) * has.unsqueeze(-1).to(dtype)
            part = loss_retrieval_prefixes(pred, tgt, model.log_temp, w)
        total = total + part * (len(idx) / len(prompts))
    return total


def train(
    model: SynergyTransformer,
    split: SplitBundle,
    cfg: TrainConfig,
    bank=None,
    history_path: str | Path | None = None,
) -> TrainResult:
    """Train on the split's training tuples only.

    Each query gets a freshly chosen artificial unknown and a context drawn
    from the training pool with its own node excluded.  For the retrieval
    objective ``bank`` supplies the target vector of every drug.
    """
    pool = split.train
    n = len(pool)
    # a trailing batch of one is useless to the contrastive loss
    min_tail = 2 if cfg.objective == "retrieval" else 1
    per_epoch = n // cfg.batch_size + int(n % cfg.batch_size >= min_tail)
    total_steps = per_epoch * cfg.epochs
    if n == 0 or per_epoch == 0:
        raise ConfigError("training set is too small for one batch")
    warmup = _validate(cfg, split, model, total_steps)
    if cfg.objective == "retrieval" and bank is None:
        raise ConfigError("retrieval training needs an embedding bank")

    graph = build_graph(pool)
    rng = stream(cfg.seed, "train", "sampling")
    torch.manual_seed(torch_seed(cfg.seed, "train", "torch"))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, linear_schedule(warmup, total_steps))
    held = set(split.held_out)
    result = TrainResult()
    out = open(history_path, "w", encoding="utf-8") if history_path else None
    model.train()
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            losses = []
            for start in range(0, per_epoch * cfg.batch_size, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                strategy = interpolate_strategy(epoch, cfg.epochs, rng) if cfg.strategy == INTERPOLATE else cfg.strategy
                prompts, targets = [], []
                for qi in batch:
                    q = pool[qi]
                    h = training_mask_choice(q, cfg.mode, rng)
                    ctx = select_context_indices(graph, q, h, cfg.n_ctx, strategy, rng, cfg.mode, exclude=int(qi))
                    prompts.append(mask_and_assemble([pool[i] for i in ctx], q, h, cfg.mode))
                    if bank is not None:
                        targets.append(bank.target(h))
                if cfg.check_hygiene:
                    _assert_hygiene(prompts, held, cfg.mode)
                loss = batch_loss(model, prompts, cfg.objective, cfg.n_ctx, targets or None)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"loss became {loss.item()} at epoch {epoch}, step {result.steps}, lr {sched.get_last_lr()[0]:.3g}"
                    )
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                sched.step()
                result.steps += 1
                losses.append(loss.item())
            rec = {"epoch": epoch, "step": result.steps, "loss": float(np.mean(losses)), "lr": sched.get_last_lr()[0]}
            result.history.append(rec)
            log.info("epoch %d loss %.4f lr %.3g", epoch, rec["loss"], rec["lr"])
            if out:
                out.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out:
            out.close()
    model.eval()
    return result


def _pack(prefix: torch.Tensor, queries: list[torch.Tensor]) -> tuple[torch.Tensor, ...]:
    """One sequence holding a shared context followed by several 3-token queries.

    Each query attends to the context and causally to itself, at the
    positions it would occupy alone, so its logit matches the unpacked prompt.
    """
    n, m = len(prefix), len(queries)
    ids = torch.cat([prefix, *queries])
    pos = torch.cat([torch.arange(n), (n + torch.arange(3)).repeat(m)])
    blk = torch.cat([torch.full((n,), -1), torch.arange(m).repeat_interleave(3)])
    t = len(ids)
    causal = torch.ones(t, t, dtype=torch.bool).tril()
    mask = causal & ((blk[None, :] < 0) | (blk[None, :] == blk[:, None]))
    read = n + 3 * torch.arange(m) + 2
    return ids, pos, mask, read


@torch.no_grad()
def query_logits(
    model: SynergyTransformer, prompts: Sequence[PromptSequence], max_pack: int = 64, batch_tokens: int = 16384
) -> np.ndarray:
    """Logit at the query slot of every prompt, in input order.

    Prompts that share their context tokens are scored in one packed
    sequence (at most ``max_pack`` queries each), so a context reused across
    many queries is encoded once.
    """
    model.eval()
    out = np.empty(len(prompts), dtype=np.float64)
    rows: list[torch.Tensor | None] = [None] * len(prompts)
    for _, idx in group_by_length(prompts).items():
        ids = encode([prompts[i] for i in idx], model.config)
        for i, r in zip(idx, ids):
            rows[i] = r
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, r in enumerate(rows):
        groups.setdefault(tuple(r[:-3].tolist()), []).append(i)
    packs = []
    for prefix, idx in groups.items():
        for s in range(0, len(idx), max_pack):
            chunk = idx[s:s + max_pack]
            packs.append((chunk, *_pack(torch.tensor(prefix, dtype=torch.long), [rows[i][-3:] for i in chunk])))
    packs.sort(key=lambda p: len(p[1]))
    start = 0
    while start < len(packs):
        stop = start + 1
        while stop < len(packs) and (stop - start + 1) * len(packs[stop][1]) <= batch_tokens:
            stop += 1
        batch = packs[start:stop]
        t = len(batch[-1][1])
        ids = torch.zeros(len(batch), t, dtype=torch.long)
        pos = torch.zeros(len(batch), t, dtype=torch.long)
        mask = torch.eye(t, dtype=torch.bool).repeat(len(batch), 1, 1)
        for b, (_, i, p, m, _) in enumerate(batch):
            n = len(i)
            ids[b, :n], pos[b, :n], mask[b, :n, :n] = i, p, m
        h = model.hidden(ids, pos, mask.unsqueeze(1))
        for b, (chunk, _, _, _, read) in enumerate(batch):
            out[chunk] = model.synergy_head(h[b, read]).squeeze(-1).double().numpy()
        start = stop
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class EvalResult:
    report: metrics.MetricsReport
    probs: np.ndarray
    labels: np.ndarray
    tuple_idx: np.ndarray


def build_prompts(
    split: SplitBundle,
    queries: Sequence[int],
    strategy: str,
    n_ctx: int,
    seed: int,
    contexts: Mapping[int, Sequence[int]] | None = None,
    graph=None,
) -> list[PromptSequence]:
    """Evaluation prompts for tuple indices ``queries`` with bank contexts.

    Randomness is keyed by each query's tuple index, so the prompt a query
    receives does not depend on the order of ``queries``.  ``contexts``
    maps a held-out entity to bank positions used verbatim (first
    ``n_ctx``) instead of sampling.
    """
    bank = split.context_bank
    graph = graph if graph is not None else (build_graph(bank) if bank else None)
    prompts = []
    for j in queries:
        q = split.tuples[j]
        h = split.designated_unknown(q)
        if contexts is not None:
            ctx = [bank[i] for i in list(contexts.get(h, ()))[:n_ctx]]
        elif n_ctx == 0 or graph is None:
            ctx = []
        else:
            rng = stream(seed, "eval", strategy, int(j))
            ctx = [bank[i] for i in select_context_indices(graph, q, h, n_ctx, strategy, rng, split.mode)]
        prompts.append(mask_and_assemble(ctx, q, h, split.mode, split.held_out, query_label=False))
    return prompts


def evaluate(
    model: SynergyTransformer,
    split: SplitBundle,
    strategy: str = "unknown-first",
    n_ctx: int = 20,
    seed: int = 0,
    contexts: Mapping[int, Sequence[int]] | None = None,
    queries: Sequence[int] | None = None,
) -> EvalResult:
    """Zero-shot (``n_ctx=0``) or few-shot scoring of held-out test tuples."""
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    queries = list(split.test_idx if queries is None else queries)
    prompts = build_prompts(split, queries, strategy, n_ctx, seed, contexts)
    probs = sigmoid(query_logits(model, prompts))
    labels = np.asarray([split.tuples[j].label for j in queries])
    groups = [split.tuples[j].group_tag for j in queries]
    rep = metrics.report(probs, labels, groups if any(g is not None for g in groups) else None)
    return EvalResult(rep, probs, labels, np.asarray(queries))
