"""Synthetic synergy worlds with a bilinear, drug-symmetric label function.

A world assigns every drug a unit latent vector and every cell a symmetric
matrix; a combination is synergistic when ``v_a @ M_c @ v_b`` exceeds a
threshold placed at the median score, optionally with label noise.

Drug vectors share a common direction (``drug_offset``) and the cell
matrices carry a shared rank-one component along it (``shared_gain``).
Together these give each drug a main effect, so a model that has never
seen a drug still has something to go on from its partner and the cell,
while the drug-specific residual is only recoverable from context.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import EntityVocab, SynergyTuple
from .rng import stream


@dataclass(frozen=True)
class LatentWorld:
    drug_vecs: np.ndarray  # (num_drugs, d_latent), unit rows
    cell_mats: np.ndarray  # (num_cells, d_latent, d_latent), symmetric
    noise_rate: float
    threshold: float

    def __post_init__(self):
        if not 0.0 <= self.noise_rate < 0.5:
            raise ValueError("noise_rate must be in [0, 0.5)")

    @property
    def num_drugs(self) -> int:
        return self.drug_vecs.shape[0]

    @property
    def num_cells(self) -> int:
        return self.cell_mats.shape[0]

    @property
    def d_latent(self) -> int:
        return self.drug_vecs.shape[1]

    def score(self, drug_a, drug_b, cell) -> np.ndarray:
        """Vectorised ``v_a^T M_c v_b``."""
        va = self.drug_vecs[np.asarray(drug_a)]
        vb = self.drug_vecs[np.asarray(drug_b)]
        m = self.cell_mats[np.asarray(cell)]
        return np.einsum("...i,...ij,...j->...", va, m, vb)

    def vocab(self) -> EntityVocab:
        return EntityVocab(
            tuple(f"drug_{i:04d}" for i in range(self.num_drugs)),
            tuple(f"cell_{i:03d}" for i in range(self.num_cells)),
        )

    def save(self, path: str | Path) -> None:
        np.savez(
            path,
            drug_vecs=self.drug_vecs,
            cell_mats=self.cell_mats,
            meta=np.array(json.dumps({"noise_rate": self.noise_rate, "threshold": self.threshold})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "LatentWorld":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["drug_vecs"], z["cell_mats"], meta["noise_rate"], meta["threshold"])


def sample_world(
    num_drugs: int,
    num_cells: int,
    d_latent: int,
    seed: int,
    noise_rate: float = 0.0,
    drug_offset: float = 1.0,
    shared_gain: float = 1.0,
) -> LatentWorld:
    if min(num_drugs, num_cells, d_latent) < 1:
        raise ValueError("num_drugs, num_cells and d_latent must all be >= 1")
    rng = stream(seed, "synth", "world")
    z = rng.standard_normal((num_drugs, d_latent)) / np.sqrt(d_latent)
    z[:, 0] += drug_offset
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    vecs = z / np.where(norms == 0, 1.0, norms)
    g = rng.standard_normal((num_cells, d_latent, d_latent)) / np.sqrt(d_latent)
    mats = 0.5 * (g + np.transpose(g, (0, 2, 1)))
    gains = shared_gain * (0.5 + rng.random(num_cells))
    mats[:, 0, 0] += gains
    a, b = np.triu_indices(num_drugs, k=1) if num_drugs > 1 else (np.array([0]), np.array([0]))
    scores = np.einsum("pi,cij,pj->cp", vecs[a], mats, vecs[b])
    return LatentWorld(vecs, mats, float(noise_rate), float(np.median(scores)))


def label(world: LatentWorld, drug_a: int, drug_b: int, cell: int, rng: np.random.Generator | None = None) -> int:
    """1 iff the bilinear score strictly exceeds the threshold, then noise-flipped."""
    y = int(world.score(drug_a, drug_b, cell) > world.threshold)
    if world.noise_rate > 0.0:
        if rng is None:
            raise ValueError("a generator is required when noise_rate > 0")
        if rng.random() < world.noise_rate:
            y = 1 - y
    return y


def sample_dataset(world: LatentWorld, count: int, seed: int, num_groups: int = 0) -> list[SynergyTuple]:
    """``count`` tuples with uniform distinct-drug pairs and uniform cells.

    With ``num_groups > 0`` each cell is tagged ``group_{cell % num_groups}``,
    a stand-in for tissue type.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = stream(seed, "synth", "dataset")
    n = world.num_drugs
    a = rng.integers(0, n, size=count)
    if n > 1:
        b = (a + rng.integers(1, n, size=count)) % n
    else:
        b = a.copy()
    c = rng.integers(0, world.num_cells, size=count)
    y = (world.score(a, b, c) > world.threshold).astype(int)
    if world.noise_rate > 0.0:
        flips = rng.random(count) < world.noise_rate
        y = np.where(flips, 1 - y, y)
    tag = (lambda k: f"group_{k % num_groups}") if num_groups > 0 else (lambda k: None)
    return [SynergyTuple(int(i), int(j), int(k), int(v), tag(int(k))) for i, j, k, v in zip(a, b, c, y)]
