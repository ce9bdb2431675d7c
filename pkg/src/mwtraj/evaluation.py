"""Top-k loss, manager accuracy and the multi-round evaluation protocol."""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_types import Hyperparameters, InvalidInputError
from .datasets import CorpusSplit, SampleArrays, SyntheticSpec, resample
from .manager import select_worker
from .training import split_outputs, train


def rank_workers(p_hat) -> np.ndarray:
    """Worker indices by descending probability; ties keep the lower index first."""
    p = np.asarray(p_hat, dtype=float)
    return np.argsort(-p, axis=-1, kind="stable")


def top_k_from(p_hat, losses, k: int) -> np.ndarray:
    """Per-sample minimum loss among the ``k`` most probable workers."""
    p = np.atleast_2d(p_hat)
    l = np.atleast_2d(losses)
    K = p.shape[1]
    if not 1 <= k <= K:
        raise InvalidInputError(f"k must be in 1..{K}, got {k}")
    top = rank_workers(p)[:, :k]
    return np.take_along_axis(l, top, axis=1).min(axis=1)


def top_k_loss(manager, workers, sample: SampleArrays, k: int, kind: str = "ade") -> float:
    """Top-k loss of a single sample (``sample`` holds one row)."""
    if len(sample) != 1:
        raise InvalidInputError("top_k_loss expects a single sample")
    if not 1 <= k <= len(workers):
        raise InvalidInputError(f"k must be in 1..{len(workers)}, got {k}")
    p_hat, losses = split_outputs(manager, workers, sample, kind)
    return float(top_k_from(p_hat, losses, k)[0])


def accuracy_from(p_hat, losses) -> float:
    return float(np.mean(select_worker(p_hat) == np.argmin(losses, axis=1)))


def manager_accuracy(manager, workers, split: SampleArrays, kind: str = "ade") -> float:
    """Fraction of samples where the manager picks the lowest-loss worker."""
    if len(split) == 0:
        raise InvalidInputError("split is empty")
    p_hat, losses = split_outputs(manager, workers, split, kind)
    return accuracy_from(p_hat, losses)


def summarize(p_hat, losses, k: int) -> dict:
    return {"top1": float(np.mean(top_k_from(p_hat, losses, 1))),
            "topk": float(np.mean(top_k_from(p_hat, losses, k))),
            "accuracy": accuracy_from(p_hat, losses), "n": int(len(losses))}


def evaluate_split(manager, workers, split: SampleArrays, k: int, kind: str = "ade") -> dict:
    if len(split) == 0:
        raise InvalidInputError("split is empty")
    if not 1 <= k <= len(workers):
        raise InvalidInputError(f"k must be in 1..{len(workers)}, got {k}")
    p_hat, losses = split_outputs(manager, workers, split, kind)
    return summarize(p_hat, losses, k)


def baseline_single_worker(hp: Hyperparameters, corpus: CorpusSplit) -> dict:
    """Context-blind reference: one worker of the same size trained on all data."""
    res = train(hp.replace(K=1, k=1), corpus)
    return evaluate_split(res.manager, res.workers, corpus.test, 1, hp.worker_loss)


@dataclass
class EvaluationReport:
    model: str
    top1: list
    topk: list
    accuracy: list
    flags: list
    config_hash: str
    k: int = 1
    extra: dict = field(default_factory=dict)

    @staticmethod
    def mean(values) -> float:
        return statistics.fmean(values)

    @staticmethod
    def sd(values) -> float:
        """Population standard deviation (divides by n)."""
        return statistics.pstdev(values)

    def to_dict(self) -> dict:
        out = {"model": self.model, "k": self.k, "config_hash": self.config_hash,
               "rounds": len(self.top1), "flags": self.flags}
        for name in ("top1", "topk", "accuracy"):
            vals = getattr(self, name)
            out[name] = {"rounds": vals, "MEAN": self.mean(vals), "SD": self.sd(vals)}
        out.update(self.extra)
        return out

    def table(self, metric: str = "top1", digits: int = 4) -> str:
        """Text table: model, one column per round, then MEAN and SD."""
        vals = getattr(self, metric)
        head = ["Model"] + [f"Round {i}" for i in range(len(vals))] + ["MEAN", "SD"]
        row = [self.model] + [f"{v:.{digits}f}" for v in vals] + \
              [f"{self.mean(vals):.{digits}f}", f"{self.sd(vals):.{digits}f}"]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([fmt(head), "-+-".join("-" * w for w in widths), fmt(row)])

    def save(self, directory: str | Path) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        (root / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        text = [f"[{m}]\n{self.table(m)}\n" for m in ("top1", "topk", "accuracy")]
        (root / "report.txt").write_text("\n".join(text))


def config_hash(hp: Hyperparameters, source) -> str:
    payload = {"hp": hp.to_dict()}
    if isinstance(source, SyntheticSpec):
        payload["source"] = source.to_dict()
    elif isinstance(source, CorpusSplit):
        payload["source"] = source.provenance
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_rounds(hp: Hyperparameters, source, rounds: int = 10, model: str | None = None,
               contiguous: bool = False) -> EvaluationReport:
    """Re-sample, re-train and evaluate ``rounds`` times on the test split."""
    if rounds < 1:
        raise InvalidInputError("rounds must be >= 1")
    top1, topk, acc, flags = [], [], [], []
    for r in range(rounds):
        corpus = resample(source, r, contiguous=contiguous)
        res = train(hp.replace(seed=hp.seed + r), corpus)
        s = evaluate_split(res.manager, res.workers, corpus.test, hp.k, hp.worker_loss)
        top1.append(s["top1"])
        topk.append(s["topk"])
        acc.append(s["accuracy"])
        flags.append(res.final.flag)
    return EvaluationReport(model or f"MW-{hp.K}", top1, topk, acc, flags,
                            config_hash(hp, source), k=hp.k)
