"""Synergy tuples, entity vocabularies, and the two held-out split regimes."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .rng import stream

Mode = Literal["unknown-drug", "unknown-cell"]
MODES: tuple[str, ...] = ("unknown-drug", "unknown-cell")

# Reserved mask ids live outside the dense non-negative entity range.
UNKNOWN = -1
UNKNOWN2 = -2

LABEL_THRESHOLD = 0.5

_HEADER = ("drug_1", "drug_2", "cell_line", "label")


class DataError(ValueError):
    """Bad input data (malformed CSV, unusable split request)."""


class ParseError(DataError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SplitError(DataError):
    pass


@dataclass(frozen=True)
class SynergyTuple:
    drug_a: int
    drug_b: int
    cell: int
    label: int
    group_tag: str | None = None

    def drugs(self) -> tuple[int, int]:
        return (self.drug_a, self.drug_b)

    def mentions(self, entity: int, mode: str) -> bool:
        if mode == "unknown-cell":
            return self.cell == entity
        return self.drug_a == entity or self.drug_b == entity


@dataclass(frozen=True)
class EntityVocab:
    """Dense id maps for drugs and cells; ids are positions in the name tuples."""

    drugs: tuple[str, ...] = ()
    cells: tuple[str, ...] = ()
    _drug_index: dict = field(init=False, repr=False, compare=False)
    _cell_index: dict = field(init=False, repr=False, compare=False)

    UNKNOWN = UNKNOWN
    UNKNOWN2 = UNKNOWN2

    def __post_init__(self):
        if len(set(self.drugs)) != len(self.drugs) or len(set(self.cells)) != len(self.cells):
            raise ValueError("duplicate entity names in vocabulary")
        object.__setattr__(self, "_drug_index", {n: i for i, n in enumerate(self.drugs)})
        object.__setattr__(self, "_cell_index", {n: i for i, n in enumerate(self.cells)})

    @property
    def num_drugs(self) -> int:
        return len(self.drugs)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    def drug_id(self, name: str) -> int:
        return self._drug_index[name]

    def cell_id(self, name: str) -> int:
        return self._cell_index[name]

    def entity_name(self, entity: int, mode: str) -> str:
        if entity == UNKNOWN:
            return "[UNKNOWN]"
        if entity == UNKNOWN2:
            return "[UNKNOWN2]"
        return self.cells[entity] if mode == "unknown-cell" else self.drugs[entity]

    def digest(self) -> str:
        payload = json.dumps({"drugs": list(self.drugs), "cells": list(self.cells)})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        return {"drugs": list(self.drugs), "cells": list(self.cells)}

    @classmethod
    def from_dict(cls, d: dict) -> "EntityVocab":
        return cls(tuple(d["drugs"]), tuple(d["cells"]))


def _parse_label(raw: str, line: int, threshold: float) -> int:
    raw = raw.strip()
    if raw in ("0", "1"):
        return int(raw)
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(line, f"label {raw!r} is neither 0/1 nor a number") from None
    if not np.isfinite(value):
        raise ParseError(line, f"label {raw!r} is not finite")
    return int(value > threshold)


def ingest_csv(path: str | Path, threshold: float = LABEL_THRESHOLD) -> tuple[EntityVocab, list[SynergyTuple]]:
    """Read ``drug_1,drug_2,cell_line,label[,group]`` rows.

    Float labels are binarized here (``label > threshold``) and nowhere else.
    The vocabulary is built in order of first appearance, drug_1 before
    drug_2 within a row, so reloading a file always reproduces the same ids.
    """
    drugs: dict[str, int] = {}
    cells: dict[str, int] = {}
    rows: list[SynergyTuple] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(1, "missing header row")
        header = [h.strip() for h in header]
        if tuple(header[:4]) != _HEADER or len(header) > 5 or (len(header) == 5 and header[4] != "group"):
            raise ParseError(1, f"unexpected header {header!r}")
        width = len(header)
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (4, width):
                raise ParseError(line_no, f"expected {width} fields, got {len(row)}")
            d1, d2, c = (x.strip() for x in row[:3])
            if not d1 or not d2 or not c:
                raise ParseError(line_no, "empty entity name")
            label = _parse_label(row[3], line_no, threshold)
            tag = row[4].strip() if len(row) == 5 and row[4].strip() else None
            for name in (d1, d2):
                drugs.setdefault(name, len(drugs))
            cells.setdefault(c, len(cells))
            rows.append(SynergyTuple(drugs[d1], drugs[d2], cells[c], label, tag))
    return EntityVocab(tuple(drugs), tuple(cells)), rows


def write_csv(path: str | Path, vocab: EntityVocab, tuples: Iterable[SynergyTuple]) -> None:
    tuples = list(tuples)
    with_group = any(t.group_tag is not None for t in tuples)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(_HEADER) + (["group"] if with_group else []))
        for t in tuples:
            row = [vocab.drugs[t.drug_a], vocab.drugs[t.drug_b], vocab.cells[t.cell], t.label]
            if with_group:
                row.append(t.group_tag or "")
            w.writerow(row)


@dataclass(frozen=True)
class SplitBundle:
    """Index-based partition of a tuple list around a held-out entity set."""

    tuples: tuple[SynergyTuple, ...]
    mode: str
    seed: int
    held_out: tuple[int, ...]
    train_idx: tuple[int, ...]
    bank_idx: tuple[int, ...]
    val_idx: tuple[int, ...]
    test_idx: tuple[int, ...]
    regime: str = "few-shot"

    @property
    def train(self) -> list[SynergyTuple]:
        return [self.tuples[i] for i in self.train_idx]

    @property
    def context_bank(self) -> list[SynergyTuple]:
        return [self.tuples[i] for i in self.bank_idx]

    @property
    def validation(self) -> list[SynergyTuple]:
        return [self.tuples[i] for i in self.val_idx]

    @property
    def test(self) -> list[SynergyTuple]:
        return [self.tuples[i] for i in self.test_idx]

    def designated_unknown(self, t: SynergyTuple) -> int:
        """The held-out entity a query is about: drug_a wins over drug_b."""
        return designated_unknown(t, set(self.held_out), self.mode)

    def to_manifest(self) -> dict:
        return {
            "mode": self.mode,
            "regime": self.regime,
            "seed": self.seed,
            "held_out": list(self.held_out),
            "train": list(self.train_idx),
            "context_bank": list(self.bank_idx),
            "validation": list(self.val_idx),
            "test": list(self.test_idx),
        }

    @classmethod
    def from_manifest(cls, manifest: dict, tuples: Sequence[SynergyTuple]) -> "SplitBundle":
        return cls(
            tuples=tuple(tuples),
            mode=manifest["mode"],
            seed=int(manifest["seed"]),
            held_out=tuple(manifest["held_out"]),
            train_idx=tuple(manifest["train"]),
            bank_idx=tuple(manifest["context_bank"]),
            val_idx=tuple(manifest["validation"]),
            test_idx=tuple(manifest["test"]),
            regime=manifest.get("regime", "few-shot"),
        )


def designated_unknown(t: SynergyTuple, held_out: set[int], mode: str) -> int:
    if mode == "unknown-cell":
        return t.cell
    if t.drug_a in held_out:
        return t.drug_a
    if t.drug_b in held_out:
        return t.drug_b
    raise ValueError(f"tuple {t} mentions no held-out drug")


def _entities(tuples: Sequence[SynergyTuple], mode: str) -> list[int]:
    if mode == "unknown-cell":
        return sorted({t.cell for t in tuples})
    return sorted({d for t in tuples for d in t.drugs()})


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _pick_held_out(tuples, m: int, mode: str, seed: int) -> tuple[list[int], list[int], list[int]]:
    """Held-out set plus (train indices, held-out tuple indices).

    The held-out entity draw depends only on (seed, mode, m, entity set), so
    both split regimes built from one seed share the same training set.
    """
    _check_mode(mode)
    entities = _entities(tuples, mode)
    if m < 1 or m > len(entities):
        raise SplitError(f"cannot hold out {m} entities: only {len(entities)} present")
    rng = stream(seed, "split", "held-out", mode)
    held = sorted(int(e) for e in rng.choice(entities, size=m, replace=False))
    hs = set(held)
    train, rest = [], []
    for i, t in enumerate(tuples):
        hit = (t.cell in hs) if mode == "unknown-cell" else (t.drug_a in hs or t.drug_b in hs)
        (rest if hit else train).append(i)
    return held, train, rest


def make_fewshot_split(
    tuples: Sequence[SynergyTuple], m: int, n: int, mode: str, seed: int, vocab: EntityVocab | None = None
) -> SplitBundle:
    """Hold out ``m`` entities; put exactly ``n`` tuples per entity in the bank.

    Entities claim their bank quota in a seeded random order; a tuple that
    mentions two held-out drugs is consumed by whichever claims it first and
    counts toward that entity only.  Everything else held-out is test data.
    """
    held, train, rest = _pick_held_out(tuples, m, mode, seed)
    rng = stream(seed, "split", "few-shot-bank", mode)
    by_entity: dict[int, list[int]] = {h: [] for h in held}
    for i in rest:
        t = tuples[i]
        ents = {t.cell} if mode == "unknown-cell" else set(t.drugs())
        for h in ents & by_entity.keys():
            by_entity[h].append(i)
    taken: set[int] = set()
    bank: list[int] = []
    for h in rng.permutation(held):
        free = [i for i in by_entity[int(h)] if i not in taken]
        if len(free) < n:
            name = vocab.entity_name(int(h), mode) if vocab is not None else str(int(h))
            raise SplitError(f"held-out entity {name} has only {len(free)} available tuples, need {n}")
        chosen = sorted(int(i) for i in rng.choice(free, size=n, replace=False))
        taken.update(chosen)
        bank.extend(chosen)
    test = [i for i in rest if i not in taken]
    return SplitBundle(tuple(tuples), mode, seed, tuple(held), tuple(train), tuple(sorted(bank)), (), tuple(test), "few-shot")


def make_optimization_split(
    tuples: Sequence[SynergyTuple], m: int, mode: str, seed: int, vocab: EntityVocab | None = None
) -> SplitBundle:
    """Hold out ``m`` entities and deal their tuples into bank/validation/test thirds."""
    held, train, rest = _pick_held_out(tuples, m, mode, seed)
    rng = stream(seed, "split", "optimization", mode)
    order = rng.permutation(np.asarray(rest, dtype=np.int64))
    bank, val, test = (tuple(sorted(int(i) for i in part)) for part in np.array_split(order, 3))
    return SplitBundle(tuple(tuples), mode, seed, tuple(held), tuple(train), bank, val, test, "optimization")


def check_split(split: SplitBundle) -> None:
    """Raise AssertionError if the hygiene invariants are violated."""
    hs = set(split.held_out)
    parts = [split.train_idx, split.bank_idx, split.val_idx, split.test_idx]
    seen: set[int] = set()
    for part in parts:
        assert seen.isdisjoint(part), "split partitions overlap"
        seen.update(part)
    for i in split.train_idx:
        t = split.tuples[i]
        assert not any(t.mentions(h, split.mode) for h in hs), f"train tuple {i} mentions a held-out entity"
    for part in parts[1:]:
        for i in part:
            t = split.tuples[i]
            assert any(t.mentions(h, split.mode) for h in hs), f"held-out tuple {i} mentions no held-out entity"


def save_split(path: str | Path, split: SplitBundle) -> None:
    Path(path).write_text(json.dumps(split.to_manifest(), sort_keys=True) + "\n", encoding="utf-8")


def load_split(path: str | Path, tuples: Sequence[SynergyTuple]) -> SplitBundle:
    return SplitBundle.from_manifest(json.loads(Path(path).read_text(encoding="utf-8")), tuples)
