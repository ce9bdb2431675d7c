"""Worker predictors, the step-length constraint and trajectory losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .core_types import InvalidInputError
from .layers import DecoderBlock, EncoderBlock, PositionalEncoding

# Below this raw-displacement norm the step direction is undefined; stay put.
EPS = 1e-8


def _saturation_cap(eps: float) -> float:
    # sigmoid rounds to exactly 1.0 for large inputs; keep realized steps strictly short.
    return 1.0 - 8.0 * eps


def apply_step_constraint(prev_loc, raw_dis, max_step: float, eps: float = EPS) -> np.ndarray:
    """Next location after limiting a raw displacement to below ``max_step``.

    The realized step has length ``sigmoid(|raw|) * max_step`` along ``raw``.
    """
    prev = np.asarray(prev_loc, dtype=float)
    raw = np.asarray(raw_dis, dtype=float)
    if prev.shape != (2,) or raw.shape != (2,):
        raise InvalidInputError("prev_loc and raw_dis must be 2D points")
    if not (np.isfinite(prev).all() and np.isfinite(raw).all() and math.isfinite(max_step)):
        raise InvalidInputError("inputs must be finite")
    if not max_step > 0:
        raise InvalidInputError("max_step must be positive")
    norm = math.hypot(raw[0], raw[1])
    if norm < eps:
        return prev.copy()
    frac = min(1.0 / (1.0 + math.exp(-norm)), _saturation_cap(float(np.finfo(np.float64).eps)))
    return prev + (frac * max_step / norm) * raw


def constrain_steps(raw: torch.Tensor, max_step: float, eps: float = EPS) -> torch.Tensor:
    """Vectorized constraint: raw displacements ``(..., 2)`` to realized steps."""
    sq = (raw * raw).sum(-1, keepdim=True)
    live = ~(sq < eps * eps)  # NaN stays live so divergence is not masked
    norm = torch.sqrt(torch.where(live, sq, torch.ones_like(sq)))
    frac = torch.sigmoid(norm).clamp(max=_saturation_cap(torch.finfo(raw.dtype).eps))
    return torch.where(live, frac * max_step / norm * raw, torch.zeros_like(raw))


# ---------------------------------------------------------------- losses ---

def _pair(ty, ty_hat, dims=2):
    a = np.asarray(ty, dtype=float)
    b = np.asarray(ty_hat, dtype=float)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape} vs {b.shape}")
    if dims == 2 and (a.ndim != 2 or a.shape[1] != 2 or len(a) < 1):
        raise InvalidInputError(f"trajectories must be (LY>=1, 2), got {a.shape}")
    if a.size == 0:
        raise InvalidInputError("empty input")
    return a, b


def ade(ty, ty_hat) -> float:
    a, b = _pair(ty, ty_hat)
    return float(np.mean(np.linalg.norm(b - a, axis=1)))


def fde(ty, ty_hat) -> float:
    a, b = _pair(ty, ty_hat)
    return float(np.linalg.norm(b[-1] - a[-1]))


def mse(series, series_hat) -> float:
    a, b = _pair(series, series_hat, dims=None)
    return float(np.mean((b - a) ** 2))


def _safe_norm(d: torch.Tensor) -> torch.Tensor:
    sq = (d * d).sum(-1)
    pos = ~(sq <= 0)  # keeps NaN
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def batch_loss(kind: str, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample loss, shape ``(B,)``, for predictions ``(B, LY, D)``."""
    if pred.shape != target.shape:
        raise InvalidInputError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if kind == "ade":
        return _safe_norm(pred - target).mean(-1)
    if kind == "fde":
        return _safe_norm(pred[:, -1] - target[:, -1])
    if kind == "mse":
        return ((pred - target) ** 2).flatten(1).mean(-1)
    raise InvalidInputError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------- workers ---

class Worker(nn.Module):
    """Base for trajectory workers.

    Subclasses map relative past features and decoder tokens to raw
    displacements; this class handles framing and the step constraint.
    ``forward(tx, target, ty)`` teacher-forces when ``ty`` is given and
    rolls out autoregressively otherwise.
    """

    token_dim = 4

    def __init__(self, n_units: int, horizon: int, max_step: float):
        super().__init__()
        self.n_units = n_units
        self.horizon = horizon
        self.max_step = float(max_step)

    def _frame(self, tx, target):
        b, lx, c = tx.shape
        if c != 2 * self.n_units:
            raise InvalidInputError(f"TX has {c} columns, worker expects {2 * self.n_units}")
        if target is None:
            target = torch.zeros(b, dtype=torch.long, device=tx.device)
        units = tx.view(b, lx, self.n_units, 2)
        # target unit first, others keep their order
        order = torch.arange(self.n_units, device=tx.device).expand(b, -1)
        order = (order + target.view(-1, 1)) % self.n_units
        units = torch.gather(units, 2, order.view(b, 1, -1, 1).expand(b, lx, -1, 2))
        origin = units[:, -1, 0]
        rel = (units - origin.view(b, 1, 1, 2)) / self.max_step
        vel = torch.diff(rel, dim=1, prepend=rel[:, :1])
        feats = torch.cat([rel, vel], dim=-1).reshape(b, lx, 4 * self.n_units)
        return feats, origin, vel[:, -1, 0]

    def _tokens(self, origin, last_vel, locs):
        """Decoder inputs: previous location (relative) and previous displacement."""
        rel = (locs - origin.unsqueeze(1)) / self.max_step
        prev = torch.cat([rel.new_zeros(rel.shape[0], 1, 2), rel], dim=1)
        disp = torch.diff(prev, dim=1, prepend=(prev[:, :1] - last_vel.unsqueeze(1)))
        return torch.cat([prev, disp], dim=-1)

    def encode(self, feats):
        raise NotImplementedError

    def decode(self, memory, tokens):
        raise NotImplementedError

    def forward(self, tx, target=None, ty=None):
        feats, origin, last_vel = self._frame(tx, target)
        memory = self.encode(feats)
        if ty is not None:
            if ty.shape[1:] != (self.horizon, 2):
                raise InvalidInputError(f"TY must be ({self.horizon}, 2), got {tuple(ty.shape[1:])}")
            tokens = self._tokens(origin, last_vel, ty[:, :-1])
            steps = constrain_steps(self.decode(memory, tokens), self.max_step)
            prev = torch.cat([origin.unsqueeze(1), ty[:, :-1]], dim=1)
            return prev + steps
        locs = origin.new_zeros(origin.shape[0], 0, 2)
        cur = origin
        for _ in range(self.horizon):
            tokens = self._tokens(origin, last_vel, locs)
            raw = self.decode(memory, tokens)[:, -1]
            cur = cur + constrain_steps(raw, self.max_step)
            locs = torch.cat([locs, cur.unsqueeze(1)], dim=1)
        return locs

    @torch.no_grad()
    def predict(self, tx, target=None):
        was = self.training
        self.eval()
        out = self(tx, target)
        self.train(was)
        return out

    def zero_head(self):
        """Zero the output head so every raw displacement is (0, 0)."""
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        return self


class TransformerWorker(Worker):
    """Encoder-decoder attention worker predicting one displacement per step."""

    def __init__(self, n_units: int, horizon: int, max_step: float, d_model: int = 32,
                 n_heads: int = 4, n_layers: int = 2):
        super().__init__(n_units, horizon, max_step)
        self.config = dict(kind="transformer", n_units=n_units, horizon=horizon,
                           max_step=float(max_step), d_model=d_model, n_heads=n_heads,
                           n_layers=n_layers)
        self.enc_in = nn.Linear(4 * n_units, d_model)
        self.dec_in = nn.Linear(self.token_dim, d_model)
        self.pos = PositionalEncoding(d_model)
        self.encoder = nn.ModuleList(EncoderBlock(d_model, n_heads) for _ in range(n_layers))
        self.decoder = nn.ModuleList(DecoderBlock(d_model, n_heads) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, 2)

    def encode(self, feats):
        x = self.pos(self.enc_in(feats))
        for block in self.encoder:
            x, _ = block(x)
        return x

    def decode(self, memory, tokens):
        y = self.pos(self.dec_in(tokens))
        for block in self.decoder:
            y = block(y, memory)
        return self.head(self.norm(y))


class RecurrentWorker(Worker):
    """GRU encoder-decoder alternative with the same interface."""

    def __init__(self, n_units: int, horizon: int, max_step: float, d_model: int = 32,
                 n_layers: int = 1, **_):
        super().__init__(n_units, horizon, max_step)
        self.config = dict(kind="recurrent", n_units=n_units, horizon=horizon,
                           max_step=float(max_step), d_model=d_model, n_layers=n_layers)
        self.enc = nn.GRU(4 * n_units, d_model, num_layers=n_layers, batch_first=True)
        self.dec = nn.GRU(self.token_dim, d_model, num_layers=n_layers, batch_first=True)
        self.head = nn.Linear(d_model, 2)

    def encode(self, feats):
        return self.enc(feats)[1]

    def decode(self, memory, tokens):
        out, _ = self.dec(tokens, memory)
        return self.head(out)


class SeriesWorker(nn.Module):
    """Unconstrained GRU forecaster for generic multivariate series.

    Maps ``(B, LX, D_in)`` to ``(B, LY, D_out)``; pair with the ``mse`` loss.
    """

    def __init__(self, in_dim: int, out_dim: int, horizon: int, d_model: int = 32):
        super().__init__()
        self.horizon = horizon
        self.config = dict(kind="series", in_dim=in_dim, out_dim=out_dim, horizon=horizon,
                           d_model=d_model)
        self.enc = nn.GRU(in_dim, d_model, batch_first=True)
        self.cell = nn.GRUCell(out_dim, d_model)
        self.head = nn.Linear(d_model, out_dim)
        self.out_dim = out_dim

    def forward(self, tx, target=None, ty=None):
        h = self.enc(tx)[1][0]
        prev = tx[:, -1, -self.out_dim:]
        outs = []
        for i in range(self.horizon):
            h = self.cell(prev, h)
            y = prev + self.head(h)
            outs.append(y)
            prev = ty[:, i] if ty is not None else y
        return torch.stack(outs, dim=1)

    @torch.no_grad()
    def predict(self, tx, target=None):
        return self(tx, target)


def build_worker(config: dict) -> nn.Module:
    """Rebuild a worker from its ``config`` dict (as stored in checkpoints)."""
    cfg = dict(config)
    kind = cfg.pop("kind")
    if kind == "transformer":
        return TransformerWorker(**cfg)
    if kind == "recurrent":
        return RecurrentWorker(**cfg)
    if kind == "series":
        return SeriesWorker(**cfg)
    raise InvalidInputError(f"unknown worker kind {kind!r}")


@dataclass
class PredictionLossReport:
    per_sample: np.ndarray
    loss_kind: str

    def __post_init__(self):
        if self.per_sample.ndim != 2:
            raise InvalidInputError("per_sample must be batch x K")
        if not (np.isfinite(self.per_sample).all() and (self.per_sample >= 0).all()):
            raise InvalidInputError("losses must be finite and non-negative")


def loss_matrix(workers, tx, ty, target=None, kind: str = "ade", rollout: bool = True) -> torch.Tensor:
    """``(B, K)`` tensor of per-sample losses, no gradient."""
    cols = []
    with torch.no_grad():
        for w in workers:
            pred = w.predict(tx, target) if rollout else w(tx, target, ty)
            cols.append(batch_loss(kind, pred, ty))
    return torch.stack(cols, dim=1)


def per_worker_losses(workers, batch, kind: str = "ade", rollout: bool = True) -> PredictionLossReport:
    if batch.tx.shape[0] == 0:
        raise InvalidInputError("batch is empty")
    m = loss_matrix(workers, batch.tx, batch.ty, getattr(batch, "target", None), kind, rollout)
    return PredictionLossReport(m.double().numpy(), kind)
