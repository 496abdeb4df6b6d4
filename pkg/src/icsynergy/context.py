"""Context graph over a tuple pool, selection strategies, masking and prompts.

Nodes are tuples of the pool.  Two nodes are joined by a drug edge when
they share a drug and by a cell edge when they share the cell line.  The
graph is stored through an entity index (entity -> nodes containing it),
from which both adjacency relations are derived on demand; materialising
all cell edges would be quadratic in the pool size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import UNKNOWN, UNKNOWN2, SynergyTuple

RANDOM = "random"
GRAPH = "graph"
UNKNOWN_FIRST = "unknown-first"
INTERPOLATE = "interpolate"
STRATEGIES = (RANDOM, GRAPH, UNKNOWN_FIRST)

# token slots
DRUG_A, DRUG_B, CELL, LABEL = 0, 1, 2, 3

_EMPTY = np.zeros(0, dtype=np.int64)


def _drug_key(d: int) -> tuple[str, int]:
    return ("drug", d)


def _cell_key(c: int) -> tuple[str, int]:
    return ("cell", c)


def entity_key(entity: int, mode: str) -> tuple[str, int]:
    return _cell_key(entity) if mode == "unknown-cell" else _drug_key(entity)


class ContextGraph:
    def __init__(self, nodes: Sequence[SynergyTuple]):
        self.nodes: tuple[SynergyTuple, ...] = tuple(nodes)
        index: dict[tuple[str, int], list[int]] = {}
        for i, t in enumerate(self.nodes):
            for d in {t.drug_a, t.drug_b}:
                index.setdefault(_drug_key(d), []).append(i)
            index.setdefault(_cell_key(t.cell), []).append(i)
        self.entity_index: dict[tuple[str, int], np.ndarray] = {
            k: np.asarray(v, dtype=np.int64) for k, v in index.items()
        }

    def __len__(self) -> int:
        return len(self.nodes)

    def containing(self, key: tuple[str, int]) -> np.ndarray:
        return self.entity_index.get(key, _EMPTY)

    def drug_adj(self, i: int) -> frozenset[int]:
        t = self.nodes[i]
        out = set()
        for d in {t.drug_a, t.drug_b}:
            out.update(self.containing(_drug_key(d)).tolist())
        out.discard(i)
        return frozenset(out)

    def cell_adj(self, i: int) -> frozenset[int]:
        out = set(self.containing(_cell_key(self.nodes[i].cell)).tolist())
        out.discard(i)
        return frozenset(out)

    def neighbors_of(self, query: SynergyTuple) -> np.ndarray:
        """Nodes sharing any entity with ``query`` (which need not be a node)."""
        parts = [self.containing(_drug_key(query.drug_a)), self.containing(_drug_key(query.drug_b)),
                 self.containing(_cell_key(query.cell))]
        return np.unique(np.concatenate(parts))


def build_graph(pool: Sequence[SynergyTuple]) -> ContextGraph:
    if len(pool) == 0:
        raise ValueError("cannot build a context graph over an empty pool")
    return ContextGraph(pool)


def _draw(rng: np.random.Generator, candidates: np.ndarray, k: int, taken: np.ndarray) -> np.ndarray:
    if k <= 0 or candidates.size == 0:
        return _EMPTY
    if taken.size:
        candidates = candidates[~np.isin(candidates, taken)]
    if candidates.size <= k:
        return rng.permutation(candidates)
    return rng.choice(candidates, size=k, replace=False)


def select_context_indices(
    graph: ContextGraph,
    query: SynergyTuple,
    h: int,
    n_ctx: int,
    strategy: str,
    rng: np.random.Generator,
    mode: str = "unknown-drug",
    exclude: int | None = None,
) -> np.ndarray:
    """Node indices of the chosen context, in prompt order.

    Unknown-first draws nodes containing ``h``, tops up from any neighbour
    of the query (graph tier), then from the whole pool (random tier).
    Lower tiers are placed first so that the most relevant examples sit
    next to the query.  Sampling is without replacement; ``exclude`` (the
    query's own node during training) is never drawn.
    """
    if n_ctx < 0:
        raise ValueError("n_ctx must be >= 0")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    taken = np.asarray([exclude], dtype=np.int64) if exclude is not None else _EMPTY
    budget = min(n_ctx, len(graph) - taken.size)
    tiers: list[np.ndarray] = []

    def add(tier: np.ndarray) -> None:
        nonlocal taken, budget
        tiers.append(tier)
        taken = np.concatenate([taken, tier])
        budget -= tier.size

    if strategy == UNKNOWN_FIRST:
        add(_draw(rng, graph.containing(entity_key(h, mode)), budget, taken))
    if strategy in (UNKNOWN_FIRST, GRAPH):
        add(_draw(rng, graph.neighbors_of(query), budget, taken))
    if budget > 0:
        # rejection sampling beats filtering the full pool when it is large
        if len(graph) > 4 * (taken.size + budget):
            picked: list[int] = []
            seen = set(taken.tolist())
            while len(picked) < budget:
                j = int(rng.integers(len(graph)))
                if j not in seen:
                    seen.add(j)
                    picked.append(j)
            add(np.asarray(picked, dtype=np.int64))
        else:
            add(_draw(rng, np.arange(len(graph)), budget, taken))
    return np.concatenate(tiers[::-1]) if tiers else _EMPTY


def select_context(graph, query, h, n_ctx, strategy, rng, mode="unknown-drug", exclude=None) -> list[SynergyTuple]:
    idx = select_context_indices(graph, query, h, n_ctx, strategy, rng, mode, exclude)
    return [graph.nodes[i] for i in idx]


@dataclass(frozen=True)
class PromptSequence:
    """Flat ``[d1 d2 c y] * n + [d1 d2 c]`` token stream.

    ``tokens`` holds ``(slot, value)`` pairs; values are entity ids, the
    reserved ``UNKNOWN``/``UNKNOWN2`` ids, or 0/1 for label slots.
    ``labels`` carries the label of every example including the query when
    it is known (-1 otherwise).
    """

    tokens: tuple[tuple[int, int], ...]
    labels: tuple[int, ...]

    @property
    def n_ctx(self) -> int:
        return (len(self.tokens) - 3) // 4

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def query_positions(self) -> tuple[int, ...]:
        return tuple(4 * i + 2 for i in range(self.n_ctx + 1))

    def unknown_positions(self) -> tuple[int, ...]:
        """Per example, the position of its first UNKNOWN token, or -1."""
        out = []
        for i in range(self.n_ctx + 1):
            pos = -1
            for j in range(3):
                if self.tokens[4 * i + j][1] == UNKNOWN:
                    pos = 4 * i + j
                    break
            out.append(pos)
        return tuple(out)

    def values(self) -> tuple[int, ...]:
        return tuple(v for _, v in self.tokens)


def _mask(t: SynergyTuple, h: int, hidden: frozenset[int], mode: str) -> tuple[int, int, int]:
    a, b, c = t.drug_a, t.drug_b, t.cell
    if mode == "unknown-cell":
        if c == h:
            c = UNKNOWN
        elif c in hidden:
            c = UNKNOWN2
        return a, b, c
    a = UNKNOWN if a == h else (UNKNOWN2 if a in hidden else a)
    b = UNKNOWN if b == h else (UNKNOWN2 if b in hidden else b)
    return a, b, c


def mask_and_assemble(
    context: Sequence[SynergyTuple],
    query: SynergyTuple,
    h: int,
    mode: str = "unknown-drug",
    held_out: Sequence[int] = (),
    query_label: bool = True,
) -> PromptSequence:
    """Mask ``h`` as UNKNOWN and any other held-out entity as UNKNOWN2.

    With ``query_label=False`` the query's label is withheld from
    ``labels`` (it never enters ``tokens`` either way).
    """
    hidden = frozenset(held_out) | {h}
    tokens: list[tuple[int, int]] = []
    labels: list[int] = []
    for t in context:
        a, b, c = _mask(t, h, hidden, mode)
        tokens += [(DRUG_A, a), (DRUG_B, b), (CELL, c), (LABEL, t.label)]
        labels.append(t.label)
    a, b, c = _mask(query, h, hidden, mode)
    tokens += [(DRUG_A, a), (DRUG_B, b), (CELL, c)]
    labels.append(query.label if query_label else -1)
    return PromptSequence(tuple(tokens), tuple(labels))


def training_mask_choice(x: SynergyTuple, mode: str, rng: np.random.Generator) -> int:
    if mode == "unknown-cell":
        return x.cell
    return x.drug_a if rng.random() < 0.5 else x.drug_b


def random_probability(epoch: int, total_epochs: int) -> float:
    """Probability of the random strategy under interpolation, floored at 1/4."""
    return max(0.25, 1.0 - epoch / total_epochs)


def interpolate_strategy(epoch: int, total_epochs: int, rng: np.random.Generator) -> str:
    return RANDOM if rng.random() < random_probability(epoch, total_epochs) else UNKNOWN_FIRST
