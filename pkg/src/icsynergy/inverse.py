"""Inverse design as retrieval: predict the hidden drug's embedding from context."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .context import UNKNOWN_FIRST, PromptSequence, build_graph, mask_and_assemble, select_context_indices, training_mask_choice
from .dataset import DataError, EntityVocab, SplitBundle
from .metrics import mean_rank
from .model import SynergyTransformer, encode
from .rng import stream
from .train import ConfigError, TrainConfig, TrainResult, group_by_length, train


@dataclass(frozen=True)
class DrugEmbeddingBank:
    """Unit-norm vectors per drug; a drug may own several rows (augmented views)."""

    vectors: np.ndarray  # (rows, dim)
    owners: np.ndarray  # (rows,) drug id per row
    num_drugs: int
    source: str = "ingested-file"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("embedding bank rows must be non-zero")
        object.__setattr__(self, "vectors", v / norms)
        owners = np.asarray(self.owners, dtype=np.int64)
        object.__setattr__(self, "owners", owners)
        missing = set(range(self.num_drugs)) - set(owners.tolist())
        if missing:
            raise DataError(f"no embedding for drug ids {sorted(missing)[:5]}")
        first = np.full(self.num_drugs, -1, dtype=np.int64)
        for row, d in enumerate(owners):
            if first[d] < 0:
                first[d] = row
        object.__setattr__(self, "_first", first)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def target(self, drug: int) -> np.ndarray:
        return self.vectors[self._first[drug]]

    def drug_scores(self, pred: np.ndarray) -> np.ndarray:
        """Max cosine over each drug's rows (one score per drug id)."""
        p = np.asarray(pred, dtype=np.float64)
        p = p / np.linalg.norm(p)
        cos = self.vectors @ p
        out = np.full(self.num_drugs, -np.inf)
        np.maximum.at(out, self.owners, cos)
        return out

    @classmethod
    def from_matrix(cls, mat: np.ndarray, source: str = "synthetic-latent") -> "DrugEmbeddingBank":
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat, np.arange(mat.shape[0]), mat.shape[0], source)

    @classmethod
    def load_csv(cls, path: str | Path, vocab: EntityVocab) -> "DrugEmbeddingBank":
        rows, owners = [], []
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0].strip() != "drug" or len(header) < 2:
                raise DataError("embedding file header must be drug,dim_0,...")
            for line, rec in enumerate(reader, start=2):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise DataError(f"line {line}: expected {len(header)} fields")
                name = rec[0].strip()
                try:
                    owners.append(vocab.drug_id(name))
                except KeyError:
                    continue  # drugs absent from the synergy data are irrelevant
                try:
                    rows.append([float(x) for x in rec[1:]])
                except ValueError:
                    raise DataError(f"line {line}: non-numeric embedding value") from None
        return cls(np.asarray(rows).reshape(len(rows), len(header) - 1), np.asarray(owners), vocab.num_drugs)

    def save_csv(self, path: str | Path, vocab: EntityVocab) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["drug"] + [f"dim_{i}" for i in range(self.dim)])
            for d, row in zip(self.owners, self.vectors):
                w.writerow([vocab.drugs[d]] + [repr(float(x)) for x in row])


def rank_drugs(pred: np.ndarray, bank: DrugEmbeddingBank, candidates: Sequence[int] | None = None) -> np.ndarray:
    """Candidate drug ids by descending cosine; ties go to the lower id."""
    scores = bank.drug_scores(pred)
    ids = np.arange(bank.num_drugs) if candidates is None else np.asarray(sorted(candidates), dtype=np.int64)
    s = scores[ids]
    return ids[np.lexsort((ids, -s))]


def rank_of(pred: np.ndarray, bank: DrugEmbeddingBank, truth: int, candidates: Sequence[int] | None = None) -> int:
    order = rank_drugs(pred, bank, candidates)
    hit = np.flatnonzero(order == truth)
    if hit.size == 0:
        raise ValueError(f"drug {truth} is not among the candidates")
    return int(hit[0]) + 1


@torch.no_grad()
def query_vectors(model: SynergyTransformer, prompts: Sequence[PromptSequence], batch_size: int = 256) -> np.ndarray:
    """Retrieval-head output at each prompt's query UNKNOWN token."""
    model.eval()
    out = np.empty((len(prompts), model.config.retrieval_dim))
    for _, idx in group_by_length(prompts).items():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            group = [prompts[i] for i in chunk]
            pos = []
            for p in group:
                up = p.unknown_positions()[-1]
                if up < 0:
                    raise ValueError("query carries no UNKNOWN token to read")
                pos.append(up)
            h = model.hidden(encode(group, model.config))
            sel = h[torch.arange(len(group)), torch.tensor(pos)]
            out[chunk] = model.retrieval_head(sel).double().numpy()
    return out


@dataclass
class RetrievalResult:
    ranked: list[int]
    rank: int | None


def retrieve(
    model: SynergyTransformer,
    prompt: PromptSequence,
    bank: DrugEmbeddingBank,
    top_k: int = 10,
    truth: int | None = None,
    candidates: Sequence[int] | None = None,
) -> RetrievalResult:
    pred = query_vectors(model, [prompt])[0]
    order = rank_drugs(pred, bank, candidates)
    rank = int(np.flatnonzero(order == truth)[0]) + 1 if truth is not None and truth in order else None
    return RetrievalResult([int(d) for d in order[:top_k]], rank)


def train_retrieval(
    model: SynergyTransformer, split: SplitBundle, bank: DrugEmbeddingBank, cfg: TrainConfig, history_path=None
) -> TrainResult:
    if split.mode != "unknown-drug" or cfg.mode != "unknown-drug":
        raise ConfigError("retrieval is defined for hidden drugs only (mode unknown-drug)")
    if cfg.objective != "retrieval":
        raise ConfigError("train_retrieval needs objective='retrieval'")
    if cfg.batch_size < 2:
        raise ConfigError("the contrastive loss is identically zero for batches of one; use batch_size >= 2")
    if bank.dim != model.config.retrieval_dim:
        raise ConfigError(f"bank dim {bank.dim} != model retrieval_dim {model.config.retrieval_dim}")
    return train(model, split, cfg, bank=bank, history_path=history_path)


@dataclass
class RankCurve:
    mean_rank: dict[int, float]
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean_rank": {str(k): v for k, v in self.mean_rank.items()}, "per_query": self.per_query}


def _candidates(pool: str, split: SplitBundle, num_drugs: int) -> list[int] | None:
    if pool == "all":
        return None
    held = set(split.held_out)
    if pool == "held-out":
        return sorted(held)
    if pool == "seen":
        return [d for d in range(num_drugs) if d not in held]
    raise ConfigError(f"unknown candidate pool {pool!r}")


def rank_curve(
    model: SynergyTransformer,
    split: SplitBundle,
    bank: DrugEmbeddingBank,
    n_ctx_max: int,
    seed: int = 0,
    source: str = "held-out",
    pool: str = "all",
    max_queries: int | None = None,
    contexts: Mapping[int, Sequence[int]] | None = None,
) -> RankCurve:
    """Mean rank of the hidden drug after 0..n_ctx_max context examples.

    ``source="held-out"`` scores test queries with contexts from the bank
    (or the given optimised ``contexts``, replayed in gene order);
    ``source="seen"`` masks a training drug in training queries and draws
    contexts from the training pool, the query's own node excluded.
    """
    if split.mode != "unknown-drug":
        raise ConfigError("rank curves need mode unknown-drug")
    cands = _candidates(pool, split, bank.num_drugs)
    if source == "held-out":
        pool_tuples = split.context_bank
        queries = list(split.test_idx)
    elif source == "seen":
        pool_tuples = split.train
        queries = list(range(len(pool_tuples)))
    else:
        raise ConfigError(f"unknown query source {source!r}")
    rng = stream(seed, "rank", source, "queries")
    if max_queries is not None and len(queries) > max_queries:
        queries = sorted(rng.choice(queries, size=max_queries, replace=False).tolist())
    graph = build_graph(pool_tuples)
    prompts, meta = [], []
    for j in queries:
        qrng = stream(seed, "rank", source, int(j))
        if source == "held-out":
            q = split.tuples[j]
            h = split.designated_unknown(q)
            if contexts is not None:
                ctx_idx = list(contexts.get(h, ()))[:n_ctx_max]
            else:
                ctx_idx = select_context_indices(graph, q, h, n_ctx_max, UNKNOWN_FIRST, qrng, split.mode).tolist()
            held = split.held_out
        else:
            q = pool_tuples[j]
            h = training_mask_choice(q, split.mode, qrng)
            ctx_idx = select_context_indices(graph, q, h, n_ctx_max, UNKNOWN_FIRST, qrng, split.mode, exclude=j).tolist()
            held = ()
        if cands is not None and h not in cands:
            continue
        ctx = [pool_tuples[i] for i in ctx_idx]
        for i in range(len(ctx) + 1):
            prompts.append(mask_and_assemble(ctx[:i], q, h, split.mode, held, query_label=False))
            meta.append((int(j), h, i))
    vecs = query_vectors(model, prompts)
    by_i: dict[int, list[int]] = {}
    per_query: dict[int, dict] = {}
    for (j, h, i), v in zip(meta, vecs):
        r = rank_of(v, bank, h, cands)
        by_i.setdefault(i, []).append(r)
        per_query.setdefault(j, {"tuple": j, "drug": h, "ranks": []})["ranks"].append(r)
    curve = {i: mean_rank(rs) for i, rs in sorted(by_i.items())}
    return RankCurve(curve, [per_query[j] for j in sorted(per_query)])
