"""Decoder-only transformer over flattened synergy prompts.

Every entity, label value and mask symbol has its own learned embedding;
a learned absolute position embedding is added per token.  Synergy logits
are read from the hidden state at every cell slot through one affine map,
so a single causal pass scores all prefixes of the prompt at once.  The
retrieval head maps the hidden state at an example's UNKNOWN token to a
vector compared against drug embeddings by cosine similarity.
"""
from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context import PromptSequence
from .dataset import UNKNOWN, UNKNOWN2

CHECKPOINT_FORMAT = 1


class InputError(ValueError):
    """Prompt token outside the model vocabulary or too long."""


@dataclass(frozen=True)
class ModelConfig:
    num_drugs: int
    num_cells: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    max_ctx_examples: int = 20
    retrieval_dim: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def vocab_size(self) -> int:
        return self.num_drugs + self.num_cells + 4

    @property
    def max_len(self) -> int:
        return 4 * self.max_ctx_examples + 3

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, name: str, num_drugs: int, num_cells: int, **overrides) -> "ModelConfig":
        presets = {
            "desk": dict(d_model=64, n_layers=4, n_heads=4, max_ctx_examples=20),
            "desk-retrieval": dict(d_model=64, n_layers=4, n_heads=4, max_ctx_examples=20, retrieval_dim=4),
            "paper-drug": dict(d_model=256, n_layers=12, n_heads=4, max_ctx_examples=20, retrieval_dim=512),
            "paper-cell": dict(d_model=256, n_layers=6, n_heads=4, max_ctx_examples=10, retrieval_dim=512),
        }
        if name not in presets:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(presets)}")
        return cls(num_drugs=num_drugs, num_cells=num_cells, **{**presets[name], **overrides})


class Block(nn.Module):
    def __init__(self, d: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc = nn.Linear(d, 4 * d)
        self.out = nn.Linear(4 * d, d)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=2)
        shape = (b, t, self.n_heads, d // self.n_heads)
        q, k, v = (z.view(shape).transpose(1, 2) for z in (q, k, v))
        p = self.dropout if self.training else 0.0
        if attn_mask is None:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=True, dropout_p=p)
        else:
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask, dropout_p=p)
        x = x + self.proj(y.transpose(1, 2).reshape(b, t, d))
        return x + self.out(F.gelu(self.fc(self.ln2(x))))


class SynergyTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.max_len, d)
        self.blocks = nn.ModuleList(Block(d, config.n_heads, config.dropout) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.synergy_head = nn.Linear(d, 1)
        self.retrieval_head = nn.Linear(d, config.retrieval_dim)
        self.log_temp = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Embedding)):
                nn.init.normal_(mod.weight, 0.0, 0.02)
                if getattr(mod, "bias", None) is not None:
                    nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        with torch.no_grad():
            self.log_temp.fill_(math.log(1 / 0.07))

    def hidden(
        self, ids: torch.Tensor, positions: torch.Tensor | None = None, attn_mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Final hidden states (B, T, d).

        By default position t sits at slot t under a causal mask.  Packed
        batches pass explicit ``positions`` (B, T) and a boolean
        ``attn_mask`` (B, 1, T, T), True where attention is allowed.
        """
        if positions is None:
            t = ids.shape[1]
            if t > self.config.max_len:
                raise InputError(f"prompt length {t} exceeds maximum {self.config.max_len}")
            positions = torch.arange(t, device=ids.device)
        elif positions.numel() and int(positions.max()) >= self.config.max_len:
            raise InputError(f"position {int(positions.max())} exceeds maximum {self.config.max_len - 1}")
        x = self.tok_emb(ids) + self.pos_emb(positions)
        for blk in self.blocks:
            x = blk(x, attn_mask)
        return self.ln_f(x)

    def synergy_logits(self, h: torch.Tensor) -> torch.Tensor:
        """(B, n+1) logits read at the cell slots 2, 6, 10, ..."""
        return self.synergy_head(h[:, 2::4]).squeeze(-1)

    def retrieval_vectors(self, h: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """(B, K, r) head outputs at per-example read positions (B, K)."""
        idx = positions.unsqueeze(-1).expand(-1, -1, h.shape[-1])
        return self.retrieval_head(torch.gather(h, 1, idx))

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.synergy_logits(self.hidden(ids))


def encode(prompts: Sequence[PromptSequence], config: ModelConfig) -> torch.Tensor:
    """Token ids (B, T) for equal-length prompts."""
    if not prompts:
        raise InputError("no prompts")
    lengths = {p.length for p in prompts}
    if len(lengths) != 1:
        raise InputError(f"prompts in one batch must share a length, got {sorted(lengths)}")
    vals = np.asarray([p.values() for p in prompts], dtype=np.int64)
    t = vals.shape[1]
    slot = np.arange(t) % 4
    nd, nc = config.num_drugs, config.num_cells
    ids = np.empty_like(vals)
    drug = slot < 2
    cell = slot == 2
    lab = slot == 3
    if np.any(vals[:, lab] < 0) or np.any(vals[:, lab] > 1):
        raise InputError("label tokens must be 0 or 1")
    if np.any(vals < UNKNOWN2):
        raise InputError("negative entity id")
    if np.any(vals[:, drug] >= nd) or np.any(vals[:, cell] >= nc):
        raise InputError("entity id outside the model vocabulary")
    ids[:, drug] = vals[:, drug]
    ids[:, cell] = nd + vals[:, cell]
    ids[:, lab] = nd + nc + vals[:, lab]
    ids[vals == UNKNOWN] = nd + nc + 2
    ids[vals == UNKNOWN2] = nd + nc + 3
    return torch.from_numpy(ids)


def read_positions(prompts: Sequence[PromptSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Retrieval read position per example and whether it holds UNKNOWN.

    Examples without an UNKNOWN token are read at their cell slot; their
    targets are the zero vector.
    """
    pos, has = [], []
    for p in prompts:
        up = p.unknown_positions()
        pos.append([u if u >= 0 else 4 * i + 2 for i, u in enumerate(up)])
        has.append([u >= 0 for u in up])
    return torch.tensor(pos, dtype=torch.long), torch.tensor(has, dtype=torch.bool)


@dataclass
class ForwardOutput:
    logits: np.ndarray  # (n+1,) one per cell slot, the last is the query
    retrieval_vecs: dict[int, np.ndarray]  # UNKNOWN position -> vector


@torch.no_grad()
def forward(model: SynergyTransformer, prompt: PromptSequence) -> ForwardOutput:
    model.eval()
    ids = encode([prompt], model.config)
    h = model.hidden(ids)
    logits = model.synergy_logits(h)[0].double().numpy()
    ups = [u for u in prompt.unknown_positions() if u >= 0]
    vecs = {}
    if ups:
        out = model.retrieval_head(h[0, ups]).double().numpy()
        vecs = {u: out[i] for i, u in enumerate(ups)}
    return ForwardOutput(logits, vecs)


def prefix_weights(n_examples: int, objective: str = "synergy", k: int | None = None) -> torch.Tensor:
    """Per-prefix loss weights for prompts with ``n_examples`` scored slots.

    Synergy uses 1 everywhere; retrieval ramps ``max(i, 1) / k`` over prefix
    sizes ``i = 0..n_examples-1`` with ``k`` the configured context length.
    """
    if objective == "synergy":
        return torch.ones(n_examples)
    k = (n_examples - 1) if k is None else k
    if k <= 0:
        return torch.ones(n_examples)
    i = torch.arange(n_examples, dtype=torch.float64).clamp(min=1)
    return i / k


def loss_synergy(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over prompts of ``(1/(n+1)) sum_i w_i BCE(logit_i, y_i)``."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    per = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="none")
    if weights is not None:
        if weights.shape[-1] != logits.shape[-1]:
            raise ValueError("one weight per prefix is required")
        per = per * weights.to(per.dtype)
    return per.mean()


def loss_retrieval(pred: torch.Tensor, target: torch.Tensor, log_temp: torch.Tensor | float) -> torch.Tensor:
    """Symmetric minibatch contrastive loss between predictions and targets.

    Prediction rows are L2-normalised here; target rows are expected to be
    unit length already (or zero, for examples carrying no UNKNOWN).
    """
    b = pred.shape[0]
    if b == 0:
        raise ValueError("contrastive loss needs a non-empty batch")
    if pred.shape != target.shape:
        raise ValueError("prediction and target batches differ in shape")
    p = F.normalize(pred, dim=-1)
    scale = torch.exp(torch.as_tensor(log_temp, dtype=p.dtype))
    sim = scale * target.to(p.dtype) @ p.T
    eye = torch.arange(b)
    return F.cross_entropy(sim, eye) + F.cross_entropy(sim.T, eye)


def loss_retrieval_prefixes(
    pred: torch.Tensor, target: torch.Tensor, log_temp: torch.Tensor, weights: torch.Tensor | None = None
) -> torch.Tensor:
    """Prefix-averaged contrastive loss for (B, K, r) predictions/targets."""
    k = pred.shape[1]
    w = torch.ones(k) if weights is None else weights
    total = sum(w[i].to(pred.dtype) * loss_retrieval(pred[:, i], target[:, i], log_temp) for i in range(k))
    return total / k


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> SynergyTransformer:
    g = torch.random.fork_rng(devices=[])
    with g:
        torch.manual_seed(seed)
        model = SynergyTransformer(config)
    return model.to(dtype)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, model: SynergyTransformer, vocab_digest: str, seed: int, extra: dict | None = None) -> None:
    state = model.state_dict()
    dtype = {torch.float32: "float32", torch.float64: "float64"}[next(iter(state.values())).dtype]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "vocab_digest": vocab_digest,
        "seed": seed,
        "dtype": dtype,
        "parameters": list(state),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    _atomic_write(Path(path), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[SynergyTransformer, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        state = {k: torch.from_numpy(z[f"param/{k}"].copy()) for k in meta["parameters"]}
    model = SynergyTransformer(ModelConfig(**meta["config"]))
    model.to(torch.float64 if meta["dtype"] == "float64" else torch.float32)
    model.load_state_dict(state)
    return model, meta
