"""Per-entity context optimisation against validation ROC-AUC with frozen weights."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .context import mask_and_assemble
from .dataset import SplitBundle
from .model import SynergyTransformer
from .rng import stream
from .train import ConfigError, query_logits, sigmoid


class ContractError(ValueError):
    """A precondition of the optimiser does not hold."""


@dataclass(frozen=True)
class GAConfig:
    population: int = 8
    epochs: int = 50
    parents: int = 4
    mutation_rate: float = 0.10
    elitism: int = 1

    def __post_init__(self):
        if not self.population >= self.parents >= 2:
            raise ConfigError("need population >= parents >= 2")
        if not 0 <= self.elitism < self.population:
            raise ConfigError("elitism must leave room for offspring")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigError("mutation_rate must lie in [0, 1]")


@dataclass(frozen=True)
class Chromosome:
    """One ordered block of bank positions per held-out entity."""

    blocks: tuple[tuple[int, tuple[int, ...]], ...]

    @classmethod
    def from_map(cls, mapping: Mapping[int, Sequence[int]]) -> "Chromosome":
        return cls(tuple((int(h), tuple(int(g) for g in mapping[h])) for h in sorted(mapping)))

    def as_map(self) -> dict[int, tuple[int, ...]]:
        return dict(self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(g, dtype=np.int64) for _, g in self.blocks])

    def to_json(self) -> str:
        return json.dumps({str(h): list(g) for h, g in self.blocks}, sort_keys=True)


def load_contexts(path: str | Path) -> dict[int, list[int]]:
    with open(path, encoding="utf-8") as fh:
        return {int(h): [int(i) for i in g] for h, g in json.load(fh).items()}


def save_contexts(path: str | Path, chrom: Chromosome) -> None:
    Path(path).write_text(chrom.to_json() + "\n", encoding="utf-8")


class ContextProblem:
    """Fitness oracle: validation ROC-AUC of a chromosome, cached by content."""

    def __init__(self, model: SynergyTransformer, split: SplitBundle, n_ctx: int):
        if not split.val_idx:
            raise ContractError("fitness needs a non-empty validation set")
        self.model, self.split, self.n_ctx = model, split, n_ctx
        bank = split.context_bank
        self.heads = tuple(sorted(split.held_out))
        self.candidates: dict[int, np.ndarray] = {}
        for h in self.heads:
            cand = np.asarray([i for i, t in enumerate(bank) if t.mentions(h, split.mode)], dtype=np.int64)
            if len(cand) < n_ctx:
                raise ConfigError(f"held-out entity {h} has {len(cand)} bank tuples, fewer than n_ctx={n_ctx}")
            self.candidates[h] = cand
        self._queries = {
            "validation": list(split.val_idx),
            "test": list(split.test_idx),
        }
        self._cache: dict[tuple, float] = {}
        self.evaluations = 0

    def random_chromosome(self, rng: np.random.Generator) -> Chromosome:
        return Chromosome(tuple(
            (h, tuple(int(g) for g in rng.choice(self.candidates[h], self.n_ctx, replace=False)))
            for h in self.heads
        ))

    def probs(self, chrom: Chromosome, which: str = "validation", queries: Sequence[int] | None = None) -> np.ndarray:
        ctx = chrom.as_map()
        bank, sp = self.split.context_bank, self.split
        qs = self._queries[which] if queries is None else queries
        prompts = []
        for j in qs:
            q = sp.tuples[j]
            h = sp.designated_unknown(q)
            prompts.append(mask_and_assemble([bank[i] for i in ctx[h]], q, h, sp.mode, sp.held_out, query_label=False))
        return sigmoid(query_logits(self.model, prompts))

    def labels(self, which: str = "validation") -> np.ndarray:
        return np.asarray([self.split.tuples[j].label for j in self._queries[which]])

    def fitness(self, chrom: Chromosome, which: str = "validation") -> float:
        key = (which, chrom.blocks)
        if key not in self._cache:
            self._cache[key] = metrics.roc_auc(self.probs(chrom, which), self.labels(which))
            if which == "validation":
                self.evaluations += 1
        return self._cache[key]


@dataclass
class GAResult:
    best: Chromosome
    best_fitness: float
    initial_best: float
    evaluations: int
    trace: list[dict] = field(default_factory=list)
    population: list[Chromosome] = field(default_factory=list)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _repair(problem: ContextProblem, genes: np.ndarray, rng: np.random.Generator) -> Chromosome:
    """Restore distinct, h-bearing genes inside every block."""
    blocks, n = [], problem.n_ctx
    for b, h in enumerate(problem.heads):
        cand = problem.candidates[h]
        valid = set(cand.tolist())
        seen: set[int] = set()
        block = []
        for g in genes[b * n:(b + 1) * n].tolist():
            if g in valid and g not in seen:
                seen.add(g)
                block.append(g)
            else:
                block.append(None)
        free = [c for c in cand.tolist() if c not in seen]
        fill = iter(rng.permutation(free).tolist()) if None in block else iter(())
        blocks.append((h, tuple(g if g is not None else next(fill) for g in block)))
    return Chromosome(tuple(blocks))


def _mutate(problem: ContextProblem, genes: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    genes = genes.copy()
    n = problem.n_ctx
    hits = np.flatnonzero(rng.random(len(genes)) < rate)
    for pos in hits:
        b = pos // n
        cand = problem.candidates[problem.heads[b]]
        block = set(genes[b * n:(b + 1) * n].tolist())
        free = [c for c in cand.tolist() if c not in block]
        if free:
            genes[pos] = free[int(rng.integers(len(free)))]
    return genes


def run_ga(
    problem: ContextProblem,
    cfg: GAConfig = GAConfig(),
    seed: int = 0,
    initial: Sequence[Chromosome] | None = None,
) -> GAResult:
    """Steady-state GA with elitism; every fitness evaluation is traced."""
    rng = stream(seed, "ga")
    trace: list[dict] = []
    best: tuple[float, Chromosome] | None = None
    start_count = problem.evaluations

    def score(c: Chromosome, gen: int) -> float:
        nonlocal best
        f = problem.fitness(c)
        if best is None or f > best[0]:
            best = (f, c)
        trace.append({"eval": len(trace), "generation": gen, "fitness": f, "best": best[0]})
        return f

    if initial is not None:
        if len(initial) != cfg.population:
            raise ConfigError(f"initial population has {len(initial)} members, expected {cfg.population}")
        pop = list(initial)
    else:
        pop = [problem.random_chromosome(rng) for _ in range(cfg.population)]
    fit = [score(c, 0) for c in pop]
    initial_best = max(fit)
    length = len(pop[0].flat())
    for gen in range(1, cfg.epochs + 1):
        order = np.argsort(-np.asarray(fit), kind="stable")
        parents = [pop[i] for i in order[:cfg.parents]]
        elites = [(pop[i], fit[i]) for i in order[:cfg.elitism]]
        children = []
        for k in range(cfg.population - cfg.elitism):
            a, b = parents[k % cfg.parents].flat(), parents[(k + 1) % cfg.parents].flat()
            cut = int(rng.integers(1, length)) if length > 1 else 0
            genes = np.concatenate([a[:cut], b[cut:]])
            genes = _mutate(problem, genes, cfg.mutation_rate, rng)
            children.append(_repair(problem, genes, rng))
        pop = [c for c, _ in elites] + children
        fit = [f for _, f in elites] + [score(c, gen) for c in children]
    return GAResult(best[1], best[0], initial_best, problem.evaluations - start_count, trace, pop)


@dataclass
class RandomResult:
    best: Chromosome
    mean: float
    max: float
    fitnesses: list[float]


def best_of_budget_random(problem: ContextProblem, budget: int, seed: int = 0) -> RandomResult:
    """Draw ``budget`` Unknown-First style chromosomes and keep the best."""
    if budget < 1:
        raise ConfigError("budget must be positive")
    rng = stream(seed, "random-budget")
    fits, best = [], None
    for _ in range(budget):
        c = problem.random_chromosome(rng)
        f = problem.fitness(c)
        fits.append(f)
        if best is None or f > best[1]:
            best = (c, f)
    return RandomResult(best[0], float(np.mean(fits)), float(max(fits)), fits)


@dataclass
class ErrorReductionResult:
    chromosome: Chromosome
    mean_error: dict[int, dict[int, float]]
    epochs: int


def error_reduction(problem: ContextProblem, budget: int, seed: int = 0) -> ErrorReductionResult:
    """Pick, per entity, the bank examples with the lowest mean attributed error.

    Each of ``budget`` rounds gives every validation query a fresh random
    block of its entity's bank tuples; the query's absolute error is charged
    to each example in that block.  Unsampled examples never qualify; ties
    go to the lower bank position.
    """
    if budget < 1:
        raise ConfigError("budget must be positive")
    rng = stream(seed, "error-reduction")
    sp, n = problem.split, problem.n_ctx
    queries = list(sp.val_idx)
    hs = [sp.designated_unknown(sp.tuples[j]) for j in queries]
    labels = np.asarray([sp.tuples[j].label for j in queries], dtype=np.float64)
    total: dict[tuple[int, int], float] = {}
    count: dict[tuple[int, int], int] = {}
    bank = sp.context_bank
    for _ in range(budget):
        blocks, prompts = [], []
        for j, h in zip(queries, hs):
            block = rng.choice(problem.candidates[h], n, replace=False)
            blocks.append(block)
            prompts.append(mask_and_assemble([bank[i] for i in block], sp.tuples[j], h, sp.mode, sp.held_out,
                                             query_label=False))
        err = np.abs(sigmoid(query_logits(problem.model, prompts)) - labels)
        for h, block, e in zip(hs, blocks, err):
            for i in block.tolist():
                total[(h, i)] = total.get((h, i), 0.0) + float(e)
                count[(h, i)] = count.get((h, i), 0) + 1
    means: dict[int, dict[int, float]] = {h: {} for h in problem.heads}
    for (h, i), s in total.items():
        means[h][i] = s / count[(h, i)]
    chosen = {}
    rng_fill = stream(seed, "error-reduction", "fill")
    for h in problem.heads:
        ranked = sorted(means[h], key=lambda i: (means[h][i], i))[:n]
        if len(ranked) < n:
            # entities without validation queries carry no statistics
            rest = [c for c in problem.candidates[h].tolist() if c not in ranked]
            ranked += rng_fill.choice(rest, n - len(ranked), replace=False).tolist()
        chosen[h] = ranked
    return ErrorReductionResult(Chromosome.from_map(chosen), means, budget)
