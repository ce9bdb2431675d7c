"""Context-classifying manager, target selection distributions and manager losses."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core_types import ContextSchema, InvalidInputError
from .layers import EncoderBlock, PositionalEncoding

LOSS_FLOOR = 1e-12


class ContextEmbedder(nn.Module):
    """Splices trainable embedding rows into the dense encoded context.

    Dense inputs carry zeros in the columns of embedded enumerated states;
    ``codes`` holds their category indices (one column per embedded state).
    """

    def __init__(self, schema: ContextSchema):
        super().__init__()
        self.schema = schema
        self.tables = nn.ModuleDict()
        self.slots = []
        for i in schema.embedded_states:
            spec = schema.states[i]
            self.tables[spec.name] = nn.Embedding(spec.table_rows, spec.width)
            self.slots.append((spec.name, schema.offsets[i], spec.width))

    def forward(self, dense, codes=None):
        if not self.slots:
            return dense
        pieces, col = [], 0
        for e, (name, off, width) in enumerate(self.slots):
            pieces.append(dense[..., col:off])
            pieces.append(self.tables[name](codes[..., e]).to(dense.dtype))
            col = off + width
        pieces.append(dense[..., col:])
        return torch.cat(pieces, dim=-1)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.weight.detach().double().numpy().copy() for name, t in self.tables.items()}


class ManagerModel(nn.Module):
    """Positional embedding, attention encoder, average pooling, K-way softmax."""

    def __init__(self, schema: ContextSchema, K: int, d_model: int = 32, n_heads: int = 4,
                 n_layers: int = 2):
        super().__init__()
        self.schema = schema
        self.K = K
        self.config = dict(K=K, d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                           schema=schema.to_list())
        self.embed = ContextEmbedder(schema)
        self.inp = nn.Linear(schema.width, d_model)
        self.pos = PositionalEncoding(d_model)
        self.blocks = nn.ModuleList(EncoderBlock(d_model, n_heads) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, K)
        # no initial preference: uniform output, argmax ties go to worker 0
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def _run(self, dense, codes):
        if dense.shape[-1] != self.schema.width:
            raise InvalidInputError(
                f"context width {dense.shape[-1]} does not match schema width {self.schema.width}")
        x = self.pos(self.inp(self.embed(dense, codes)))
        maps = []
        for block in self.blocks:
            x, w = block(x)
            maps.append(w)
        return self.head(self.norm(x).mean(dim=1)), maps

    def logits(self, dense, codes=None):
        return self._run(dense, codes)[0]

    def forward(self, dense, codes=None):
        return self.logits(dense, codes).softmax(dim=-1)

    @classmethod
    def from_config(cls, config: dict) -> "ManagerModel":
        cfg = dict(config)
        schema = ContextSchema.from_list(cfg.pop("schema"))
        return cls(schema, **cfg)


def _as_batch(context):
    t = torch.as_tensor(context)
    return t.unsqueeze(0) if t.ndim == 2 else t


@torch.no_grad()
def manager_forward(manager: ManagerModel, context, codes=None) -> np.ndarray:
    """Selection probabilities for one encoded context (LC x width) or a batch."""
    dense = _as_batch(context)
    dense = dense.to(next(manager.parameters()).dtype)
    if codes is not None:
        codes = _as_batch(torch.as_tensor(codes, dtype=torch.long))
    was = manager.training
    manager.eval()
    p = manager(dense, codes)
    manager.train(was)
    p = p.double().numpy()
    return p[0] if np.ndim(context) == 2 else p


def select_worker(p_hat) -> np.ndarray:
    """Argmax with ties resolved to the lowest worker index."""
    return np.argmax(np.asarray(p_hat), axis=-1)


@torch.no_grad()
def extract_attention(manager: ManagerModel, context, codes=None) -> np.ndarray:
    """Attention weights, ``layers x heads x LC x LC``, for one context."""
    dense = _as_batch(context).to(next(manager.parameters()).dtype)
    if codes is not None:
        codes = _as_batch(torch.as_tensor(codes, dtype=torch.long))
    was = manager.training
    manager.eval()
    _, maps = manager._run(dense, codes)
    manager.train(was)
    return torch.stack([m[0] for m in maps]).double().numpy()


def write_attention(path: str | Path, weights: np.ndarray, meta: dict | None = None) -> None:
    """Header line (JSON dims), then one ``layer head w...`` record per map."""
    w = np.asarray(weights, dtype=float)
    layers, heads, lq, lk = w.shape
    header = {"layers": layers, "heads": heads, "queries": lq, "keys": lk}
    header.update(meta or {})
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(layers):
        for h in range(heads):
            vals = " ".join(repr(float(v)) for v in w[i, h].ravel())
            lines.append(f"{i} {h} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_attention(path: str | Path) -> tuple[np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    shape = (header["layers"], header["heads"], header["queries"], header["keys"])
    w = np.zeros(shape)
    for line in lines[1:]:
        parts = line.split()
        w[int(parts[0]), int(parts[1])] = np.array(parts[2:], dtype=float).reshape(shape[2:])
    return w, header


# ----------------------------------------------------- target distributions ---

@dataclass(frozen=True)
class TargetDistribution:
    probs: np.ndarray
    rule: str


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _volume_term(volumes, beta):
    if beta < 0:
        raise InvalidInputError("beta must be non-negative")
    v = np.asarray(volumes, dtype=float)
    if (v < 0).any():
        raise InvalidInputError("volumes must be non-negative")
    max_v = v.max(axis=-1, keepdims=True)
    # before any training MaxV = 0; treat every worker as fully under-trained
    safe = np.where(max_v > 0, max_v, 1.0)
    return beta * np.where(max_v > 0, (max_v - v) / safe, 1.0)


def _losses(losses):
    l = np.asarray(losses, dtype=float)
    if l.shape[-1] < 1 or not np.isfinite(l).all():
        raise InvalidInputError("losses must be finite")
    return np.maximum(l, LOSS_FLOOR)


def target_distribution_simple(losses) -> TargetDistribution:
    l = _losses(losses)
    return TargetDistribution(_softmax(l.max(axis=-1, keepdims=True) / l), "simple")


def target_distribution_regularized(losses, volumes, beta: float) -> TargetDistribution:
    l = _losses(losses)
    reg = _volume_term(volumes, beta)
    return TargetDistribution(_softmax(np.exp(-l / l.max(axis=-1, keepdims=True)) + reg),
                              "regularized")


def target_distribution_unnormalized(losses, volumes, beta: float) -> TargetDistribution:
    l = _losses(losses)
    reg = _volume_term(volumes, beta)
    return TargetDistribution(_softmax(l.max(axis=-1, keepdims=True) / l + reg), "unnormalized")


def target_distribution(rule: str, losses, volumes=None, beta: float = 0.0) -> TargetDistribution:
    """Dispatch on rule; ``losses`` may be ``(K,)`` or ``(B, K)``."""
    if rule == "simple":
        return target_distribution_simple(losses)
    if volumes is None:
        volumes = np.zeros(np.shape(losses)[-1])
    if rule == "regularized":
        return target_distribution_regularized(losses, volumes, beta)
    if rule == "unnormalized":
        return target_distribution_unnormalized(losses, volumes, beta)
    raise InvalidInputError(f"unknown target rule {rule!r}")


def target_tensor(rule: str, losses: torch.Tensor, volumes, beta: float) -> torch.Tensor:
    """Torch version over a ``(B, K)`` loss matrix; returns ``(B, K)`` targets."""
    l = losses.clamp(min=LOSS_FLOOR)
    max_l = l.max(dim=-1, keepdim=True).values
    if rule == "simple":
        return (max_l / l).softmax(-1)
    reg = torch.as_tensor(_volume_term(volumes, beta), dtype=l.dtype).view(1, -1)
    if rule == "regularized":
        return (torch.exp(-l / max_l) + reg).softmax(-1)
    if rule == "unnormalized":
        return (max_l / l + reg).softmax(-1)
    raise InvalidInputError(f"unknown target rule {rule!r}")


# ------------------------------------------------------------- losses ---

def _check_pair(p_hat, p):
    a = np.asarray(p_hat, dtype=float)
    b = np.asarray(p, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def wasserstein_loss(p_hat, p, ground: str = "index") -> float:
    """Order-1 Wasserstein distance between two distributions over worker indices.

    ``ground="index"`` uses unit spacing between consecutive indices (sum of
    absolute CDF differences); ``"tv"`` uses the 0/1 metric (total variation).
    """
    a, b = _check_pair(p_hat, p)
    if ground == "tv":
        return float(0.5 * np.abs(a - b).sum())
    if ground != "index":
        raise InvalidInputError(f"unknown ground metric {ground!r}")
    return float(np.abs(np.cumsum(a - b)[:-1]).sum())


def cross_entropy_loss(p_hat, p) -> float:
    a, b = _check_pair(p_hat, p)
    return float(-(b * np.log(np.maximum(a, LOSS_FLOOR))).sum())


def manager_loss_tensor(kind: str, p_hat: torch.Tensor, p: torch.Tensor,
                        ground: str = "index") -> torch.Tensor:
    """Per-sample manager loss, shape ``(B,)``."""
    if kind == "wasserstein":
        if ground == "tv":
            return 0.5 * (p_hat - p).abs().sum(-1)
        return torch.cumsum(p_hat - p, dim=-1)[..., :-1].abs().sum(-1)
    if kind == "cross_entropy":
        return -(p * torch.log(p_hat.clamp(min=LOSS_FLOOR))).sum(-1)
    raise InvalidInputError(f"unknown manager loss {kind!r}")


def entropy(shares) -> float:
    s = np.asarray(shares, dtype=float)
    s = s[s > 0]
    return float(-(s * np.log(s)).sum()) + 0.0


def max_entropy(K: int) -> float:
    return math.log(K)
