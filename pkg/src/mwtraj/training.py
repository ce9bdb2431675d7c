"""Competition-symbiosis training of a manager and K workers."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .core_types import ConfigError, Hyperparameters
from .datasets import CorpusSplit, SampleArrays
from .manager import (ManagerModel, entropy, manager_loss_tensor, select_worker,
                      target_tensor)
from .workers import RecurrentWorker, TransformerWorker, batch_loss, build_worker, loss_matrix

log = logging.getLogger(__name__)

EVAL_CHUNK = 512


def set_deterministic(threads: int = 1) -> None:
    """Single-threaded, deterministic kernels; identical seeds give identical logs."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainingState:
    volumes: np.ndarray
    iteration: int = 0
    loss_history: list = field(default_factory=list)
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {"volumes": [int(v) for v in self.volumes], "iteration": self.iteration,
                "loss_history": self.loss_history, "rng_seed": self.rng_seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainingState":
        return cls(np.asarray(d["volumes"], dtype=np.int64), d["iteration"],
                   list(d["loss_history"]), d["rng_seed"])


@dataclass(frozen=True)
class TrapThresholds:
    dominant_share: float = 0.9
    low_accuracy: float = 0.2
    high_entropy: float = 0.9


@dataclass
class TrapDiagnostics:
    selection_shares: np.ndarray
    manager_accuracy: float
    selection_entropy: float
    flag: str
    top1_loss: float = math.nan
    iteration: int = 0

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "selection_shares": [float(s) for s in self.selection_shares],
                "manager_accuracy": float(self.manager_accuracy),
                "selection_entropy": float(self.selection_entropy), "flag": self.flag,
                "top1_loss": float(self.top1_loss)}


def split_batch(p_hat, n_workers: int | None = None) -> list[np.ndarray]:
    """Route each row to its argmax worker (lowest index on ties).

    Returns K arrays of row indices that partition ``range(len(p_hat))``.
    """
    p = np.asarray(p_hat)
    if p.ndim != 2:
        raise ConfigError("p_hat must be batch x K")
    K = p.shape[1] if n_workers is None else n_workers
    choice = select_worker(p)
    return [np.flatnonzero(choice == i) for i in range(K)]


def _probs(manager, dense, codes):
    with torch.no_grad():
        was = manager.training
        manager.eval()
        out = manager(dense, codes)
        manager.train(was)
    return out


def split_outputs(manager, workers, split: SampleArrays, kind: str = "ade",
                  dtype=torch.float32) -> tuple[np.ndarray, np.ndarray]:
    """Manager probabilities and rollout loss matrix for a whole split."""
    probs, losses = [], []
    for start in range(0, len(split), EVAL_CHUNK):
        b = split.batch(np.arange(start, min(start + EVAL_CHUNK, len(split))), dtype)
        probs.append(_probs(manager, b.dense, b.codes).double().numpy())
        losses.append(loss_matrix(workers, b.tx, b.ty, b.target, kind).double().numpy())
    return np.concatenate(probs), np.concatenate(losses)


def diagnose_from(p_hat: np.ndarray, losses: np.ndarray,
                  thresholds: TrapThresholds = TrapThresholds()) -> TrapDiagnostics:
    K = p_hat.shape[1]
    choice = select_worker(p_hat)
    shares = np.bincount(choice, minlength=K) / len(choice)
    accuracy = float(np.mean(choice == np.argmin(losses, axis=1)))
    ent = entropy(shares)
    if K > 1 and shares.max() > thresholds.dominant_share:
        flag = "T1"
    elif K > 1 and accuracy < thresholds.low_accuracy and ent > thresholds.high_entropy * math.log(K):
        flag = "T2"
    else:
        flag = "none"
    top1 = float(np.mean(losses[np.arange(len(choice)), choice]))
    return TrapDiagnostics(shares, accuracy, ent, flag, top1)


def diagnose_traps(manager, workers, split: SampleArrays, thresholds: TrapThresholds = TrapThresholds(),
                   kind: str = "ade") -> TrapDiagnostics:
    """Selection shares, manager accuracy, selection entropy and the trap flag.

    Accuracy counts samples whose argmax worker is also the per-sample
    lowest-loss worker. T1: one worker takes more than ``dominant_share`` of
    the samples. T2: accuracy below ``low_accuracy`` while selection entropy
    exceeds ``high_entropy * log K``.
    """
    p_hat, losses = split_outputs(manager, workers, split, kind)
    return diagnose_from(p_hat, losses, thresholds)


def build_models(hp: Hyperparameters, corpus: CorpusSplit, max_step: float | None = None):
    torch.manual_seed(hp.seed)
    n_units = corpus.train.tx.shape[2] // 2
    step = max_step or corpus.max_step or hp.max_step
    manager = ManagerModel(corpus.schema, hp.K, hp.d_model, hp.n_heads, hp.manager_layers)
    cls = TransformerWorker if hp.worker_kind == "transformer" else RecurrentWorker
    workers = [cls(n_units, hp.LY, step, d_model=hp.d_model, n_heads=hp.n_heads,
                   n_layers=hp.worker_layers) for _ in range(hp.K)]
    return manager, workers


def _state_hash(module) -> str:
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Runs the alternating worker/manager phases and owns all mutable state.

    ``route_by="oracle_loss"`` routes each training sample to its lowest-loss
    worker instead of the manager's choice. ``trainer="no_competition"`` is the
    control variant: workers train on a fixed random K-way split of the data,
    and the manager is fitted only after worker training ends.
    """

    def __init__(self, hp: Hyperparameters, corpus: CorpusSplit, manager=None, workers=None,
                 log_path: str | Path | None = None, thresholds: TrapThresholds = TrapThresholds()):
        if len(corpus.train) == 0:
            raise ConfigError("training split is empty")
        if hp.LY != corpus.train.ty.shape[1]:
            raise ConfigError(f"LY={hp.LY} does not match corpus horizon {corpus.train.ty.shape[1]}")
        self.hp = hp
        self.corpus = corpus
        if manager is None or workers is None:
            manager, workers = build_models(hp, corpus)
        if len(workers) != hp.K or manager.K != hp.K:
            raise ConfigError("model count does not match K")
        self.manager = manager
        self.workers = list(workers)
        self.manager_opt = torch.optim.Adam(manager.parameters(), lr=hp.manager_lr)
        self.worker_opts = [torch.optim.Adam(w.parameters(), lr=hp.worker_lr) for w in self.workers]
        self.rng = np.random.default_rng(hp.seed)
        self.state = TrainingState(np.zeros(hp.K, dtype=np.int64), rng_seed=hp.seed)
        self.thresholds = thresholds
        self.diagnostics: list[TrapDiagnostics] = []
        self.log_path = Path(log_path) if log_path else None
        self.best = {"loss": math.inf, "iteration": 0, "stale": 0, "models": None}
        self.stopped = False
        self.phase_checks: list[dict] = []
        if hp.trainer == "no_competition":
            self.assignment = self.rng.permutation(len(corpus.train)) % hp.K

    # -- batches --------------------------------------------------------------
    def sample_batch(self):
        n = len(self.corpus.train)
        size = min(self.hp.batch_size, n)
        idx = self.rng.choice(n, size=size, replace=False)
        return idx, self.corpus.train.batch(idx)

    def _worker_step(self, i, batch, rows):
        w, opt = self.workers[i], self.worker_opts[i]
        rows = torch.as_tensor(rows, dtype=torch.long)
        w.train()
        pred = w(batch.tx[rows], batch.target[rows], batch.ty[rows])
        loss = batch_loss(self.hp.worker_loss, pred, batch.ty[rows]).mean()
        if not torch.isfinite(loss):
            self._diverged(f"worker {i} loss is not finite")
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(w.parameters(), 1.0)
        opt.step()
        return loss.item()

    def route(self, idx, batch) -> list[np.ndarray]:
        hp = self.hp
        if hp.trainer == "no_competition":
            owner = self.assignment[idx]
            return [np.flatnonzero(owner == i) for i in range(hp.K)]
        if hp.route_by == "oracle_loss":
            losses = loss_matrix(self.workers, batch.tx, batch.ty, batch.target, hp.worker_loss)
            return split_batch(-losses.double().numpy())
        return split_batch(_probs(self.manager, batch.dense, batch.codes).double().numpy())

    def worker_phase(self, alpha: int) -> dict:
        """Fix the manager; ``alpha`` routed gradient steps for the workers."""
        routed = np.zeros(self.hp.K, dtype=np.int64)
        losses = [[] for _ in range(self.hp.K)]
        for _ in range(alpha):
            idx, batch = self.sample_batch()
            groups = self.route(idx, batch)
            sizes = np.array([len(g) for g in groups])
            if sizes.sum() != len(idx) or len(np.unique(np.concatenate(groups))) != len(idx):
                raise AssertionError("routing did not partition the batch")
            for i, rows in enumerate(groups):
                if len(rows):
                    losses[i].append(self._worker_step(i, batch, rows))
            self.state.volumes += sizes
            routed += sizes
        return {"routed": routed, "train_loss": [float(np.mean(l)) if l else None for l in losses]}

    def manager_phase(self) -> dict:
        """Fix the workers; fit the manager to per-sample target distributions."""
        hp = self.hp
        out = {}
        for _ in range(hp.manager_steps):
            _, batch = self.sample_batch()
            losses = loss_matrix(self.workers, batch.tx, batch.ty, batch.target, hp.worker_loss)
            targets = target_tensor(hp.target_rule, losses, self.state.volumes, hp.beta)
            self.manager.train()
            p_hat = self.manager(batch.dense, batch.codes)
            loss = manager_loss_tensor(hp.manager_loss, p_hat, targets.to(p_hat.dtype),
                                       hp.ground_metric).mean()
            if not torch.isfinite(loss):
                self._diverged("manager loss is not finite")
            self.manager_opt.zero_grad()
            loss.backward()
            self.manager_opt.step()
            out = {"manager_loss": loss.item(),
                   "worker_loss": [float(v) for v in losses.mean(0)]}
        return out

    def _diverged(self, msg):
        snap = {"iteration": self.state.iteration, "volumes": self.state.volumes.tolist(),
                "last": self.state.loss_history[-1:] }
        raise TrainingDiverged(msg, snap)

    # -- loop -----------------------------------------------------------------
    def evaluate(self) -> TrapDiagnostics:
        d = diagnose_traps(self.manager, self.workers, self.corpus.val, self.thresholds,
                           self.hp.worker_loss)
        d.iteration = self.state.iteration
        self.diagnostics.append(d)
        return d

    def iteration(self) -> dict:
        hp = self.hp
        it = self.state.iteration
        alpha = hp.alpha_at(it)
        if hp.trainer == "no_competition":
            wp = self.worker_phase(alpha)
            mp = {}
        else:
            m_hash = _state_hash(self.manager)
            wp = self.worker_phase(alpha)
            if _state_hash(self.manager) != m_hash:
                raise AssertionError("manager changed during the worker phase")
            w_hash = [_state_hash(w) for w in self.workers]
            mp = self.manager_phase()
            if [_state_hash(w) for w in self.workers] != w_hash:
                raise AssertionError("a worker changed during the manager phase")
        self.state.iteration = it + 1
        routed = wp["routed"]
        record = {
            "iteration": it + 1,
            "alpha": alpha,
            "routed": routed.tolist(),
            "selection_shares": (routed / max(routed.sum(), 1)).tolist(),
            "volumes": self.state.volumes.tolist(),
            "worker_train_loss": wp["train_loss"],
            "worker_loss": mp.get("worker_loss"),
            "manager_loss": mp.get("manager_loss"),
        }
        self.state.loss_history.append({"iteration": it + 1, "manager_loss": mp.get("manager_loss"),
                                        "worker_loss": mp.get("worker_loss")})
        return record

    def _snapshot_models(self):
        return (copy.deepcopy(self.manager.state_dict()),
                [copy.deepcopy(w.state_dict()) for w in self.workers])

    def _restore(self, models):
        self.manager.load_state_dict(models[0])
        for w, sd in zip(self.workers, models[1]):
            w.load_state_dict(sd)

    def _log(self, record):
        if self.log_path is not None:
            with open(self.log_path, "a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def run(self, iterations: int | None = None) -> "Trainer":
        """Train up to ``iterations`` total (default ``hp.iterations``)."""
        hp = self.hp
        total = hp.iterations if iterations is None else iterations
        while self.state.iteration < total and not self.stopped:
            record = self.iteration()
            it = self.state.iteration
            if hp.trainer != "no_competition" and (it % hp.eval_every == 0 or it == hp.iterations):
                d = self.evaluate()
                record["eval"] = d.to_dict()
                self._early_stop(d)
            record["trap_flag"] = self.diagnostics[-1].flag if self.diagnostics else None
            self._log(record)
        if hp.trainer == "no_competition" and self.state.iteration >= hp.iterations:
            self._fit_manager_afterwards()
        if self.stopped or (self.state.iteration >= hp.iterations and hp.early_stopping
                            and self.best["models"] is not None):
            self._restore(self.best["models"])
        return self

    def _early_stop(self, d: TrapDiagnostics):
        if not self.hp.early_stopping:
            return
        if d.top1_loss < self.best["loss"]:
            self.best.update(loss=d.top1_loss, iteration=d.iteration, stale=0,
                             models=self._snapshot_models())
        else:
            self.best["stale"] += 1
            if self.best["stale"] >= self.hp.patience:
                log.info("early stop at iteration %d (best %d)", d.iteration, self.best["iteration"])
                self.stopped = True

    def _fit_manager_afterwards(self):
        if getattr(self, "_manager_fitted", False):
            return
        for m in range(self.hp.iterations):
            mp = self.manager_phase()
            self._log({"manager_fit_step": m + 1, "manager_loss": mp.get("manager_loss")})
        self._manager_fitted = True
        self.evaluate()

    # -- checkpoints -----------------------------------------------------------
    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        root = Path(path)
        (root / "workers").mkdir(parents=True, exist_ok=True)
        torch.save({"config": self.manager.config, "state_dict": self.manager.state_dict()},
                   root / "manager.pt")
        for i, w in enumerate(self.workers):
            torch.save({"id": i, "config": w.config, "state_dict": w.state_dict()},
                       root / "workers" / f"worker_{i:02d}.pt")
        (root / "state.json").write_text(json.dumps(self.state.to_dict(), indent=1))
        cfg = {"hyperparameters": self.hp.to_dict(), "provenance": self.corpus.provenance}
        cfg.update(extra or {})
        (root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        torch.save({
            "manager_opt": self.manager_opt.state_dict(),
            "worker_opts": [o.state_dict() for o in self.worker_opts],
            "rng": self.rng.bit_generator.state,
            "best": self.best,
            "stopped": self.stopped,
            "diagnostics": [d.to_dict() for d in self.diagnostics],
            "assignment": getattr(self, "assignment", None),
        }, root / "trainer.pt")
        return root

    @classmethod
    def resume(cls, path: str | Path, corpus: CorpusSplit, log_path=None,
               hp: Hyperparameters | None = None) -> "Trainer":
        root = Path(path)
        cfg = json.loads((root / "config.json").read_text())
        hp = hp or Hyperparameters.from_dict(cfg["hyperparameters"])
        manager, workers = load_models(root)
        t = cls(hp, corpus, manager, workers, log_path=log_path)
        extra = torch.load(root / "trainer.pt", weights_only=False)
        t.manager_opt.load_state_dict(extra["manager_opt"])
        for o, sd in zip(t.worker_opts, extra["worker_opts"]):
            o.load_state_dict(sd)
        t.rng.bit_generator.state = extra["rng"]
        t.best = extra["best"]
        t.stopped = extra["stopped"]
        t.diagnostics = [TrapDiagnostics(np.asarray(d["selection_shares"]), d["manager_accuracy"],
                                         d["selection_entropy"], d["flag"], d["top1_loss"],
                                         d["iteration"]) for d in extra["diagnostics"]]
        if extra.get("assignment") is not None:
            t.assignment = extra["assignment"]
        t.state = TrainingState.from_dict(json.loads((root / "state.json").read_text()))
        return t


def load_models(path: str | Path):
    root = Path(path)
    m = torch.load(root / "manager.pt", weights_only=False)
    manager = ManagerModel.from_config(m["config"])
    manager.load_state_dict(m["state_dict"])
    workers = []
    for f in sorted((root / "workers").glob("worker_*.pt")):
        w = torch.load(f, weights_only=False)
        model = build_worker(w["config"])
        model.load_state_dict(w["state_dict"])
        workers.append(model)
    return manager, workers


@dataclass
class TrainResult:
    manager: ManagerModel
    workers: list
    state: TrainingState
    diagnostics: list
    trainer: Trainer

    @property
    def final(self) -> TrapDiagnostics:
        return self.diagnostics[-1]


def train(hp: Hyperparameters, corpus: CorpusSplit, log_path=None, out_dir=None,
          thresholds: TrapThresholds = TrapThresholds()) -> TrainResult:
    """Train a manager and ``hp.K`` workers; deterministic for a fixed seed."""
    t = Trainer(hp, corpus, log_path=log_path, thresholds=thresholds).run()
    final = t.evaluate()
    final.iteration = t.state.iteration
    if out_dir is not None:
        t.save(out_dir)
    return TrainResult(t.manager, t.workers, t.state, t.diagnostics, t)


def grid_cells(grid: Mapping[str, Sequence]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def ablation_matrix(base: Hyperparameters, grid: Mapping[str, Sequence], corpus: CorpusSplit,
                    seeds: Sequence[int] | None = None, k: int | None = None,
                    evaluate: Callable | None = None) -> list[dict]:
    """Train every grid cell (for every seed) on the same data; one row per run.

    Rows hold the cell's settings, test top-1/top-k loss, manager accuracy,
    selection entropy, max selection share and the trap flag (validation).
    """
    from .evaluation import evaluate_split
    evaluate = evaluate or evaluate_split
    seeds = (base.seed,) if seeds is None else seeds
    rows = []
    for cell in grid_cells(grid):
        for seed in seeds:
            try:
                hp = base.replace(seed=seed, **cell)
                if "K" in cell and "k" not in cell:
                    hp = hp.replace(k=min(hp.k, hp.K))
            except TypeError as exc:
                raise ConfigError(str(exc)) from None
            res = train(hp, corpus)
            summary = evaluate(res.manager, res.workers, corpus.test, k or hp.k, hp.worker_loss)
            d = res.final
            rows.append({**cell, "seed": seed, "top1": summary["top1"], "topk": summary["topk"],
                         "accuracy": summary["accuracy"], "entropy": d.selection_entropy,
                         "max_share": float(d.selection_shares.max()), "flag": d.flag})
    return rows


def format_ablation(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
    table = [cols] + [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table)
