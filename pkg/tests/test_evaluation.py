import json
import statistics

import numpy as np
import pytest
import torch

from mwtraj.core_types import InvalidInputError
from mwtraj.datasets import SyntheticSpec
from mwtraj.evaluation import (EvaluationReport, accuracy_from, baseline_single_worker,
                               evaluate_split, manager_accuracy, rank_workers, run_rounds,
                               top_k_from, top_k_loss)
from mwtraj.training import train


def test_top_k_examples():
    p = np.array([[0.5, 0.3, 0.2]])
    losses = np.array([[5.0, 3.0, 7.0]])
    assert top_k_from(p, losses, 2)[0] == 3.0
    assert top_k_from(p, losses, 1)[0] == 5.0
    assert top_k_from(p, losses, 3)[0] == 3.0
    with pytest.raises(InvalidInputError):
        top_k_from(p, losses, 4)
    with pytest.raises(InvalidInputError):
        top_k_from(p, losses, 0)


def test_rank_ties_by_index():
    np.testing.assert_array_equal(rank_workers([0.2, 0.4, 0.2, 0.2]), [1, 0, 2, 3])


def test_accuracy_counting():
    losses = np.random.default_rng(1).uniform(size=(10, 4))
    best = losses.argmin(1)
    picks = np.where(np.arange(10) < 7, best, (best + 1) % 4)
    assert accuracy_from(np.eye(4)[picks], losses) == pytest.approx(0.7)


def test_uniform_random_manager_near_chance():
    rng = np.random.default_rng(0)
    losses = rng.uniform(size=(20000, 10))
    p = rng.dirichlet(np.ones(10), size=20000)
    assert abs(accuracy_from(p, losses) - 0.1) < 0.01


def test_evaluate_split_on_trained_models(tiny_hp, tiny_corpus):
    res = train(tiny_hp, tiny_corpus)
    s = evaluate_split(res.manager, res.workers, tiny_corpus.test, 2)
    assert s["topk"] <= s["top1"] and 0 <= s["accuracy"] <= 1 and s["n"] == len(tiny_corpus.test)
    assert manager_accuracy(res.manager, res.workers, tiny_corpus.test) == s["accuracy"]
    one = top_k_loss(res.manager, res.workers, tiny_corpus.test.subset([0]), 1)
    assert one == pytest.approx(float(np.min(
        top_k_from(*_outputs(res, tiny_corpus.test.subset([0])), 1))), rel=1e-6)
    with pytest.raises(InvalidInputError):
        evaluate_split(res.manager, res.workers, tiny_corpus.test, tiny_hp.K + 1)
    with pytest.raises(InvalidInputError):
        top_k_loss(res.manager, res.workers, tiny_corpus.test.subset([0, 1]), 1)


def _outputs(res, split):
    from mwtraj.training import split_outputs
    return split_outputs(res.manager, res.workers, split)


def test_perfect_worker_scores_zero(tiny_hp, tiny_corpus):
    res = train(tiny_hp.replace(K=1, k=1, iterations=1), tiny_corpus)

    class Oracle(torch.nn.Module):
        def __init__(self, split):
            super().__init__()
            self.ty = torch.as_tensor(split.ty, dtype=torch.float32)

        def predict(self, tx, target=None):
            return self.ty[:len(tx)]

    s = evaluate_split(res.manager, [Oracle(tiny_corpus.test)], tiny_corpus.test, 1)
    assert s["top1"] == s["topk"] == 0.0 and s["accuracy"] == 1.0


def test_baseline_equals_k1_training(tiny_hp, tiny_corpus):
    base = baseline_single_worker(tiny_hp, tiny_corpus)
    res = train(tiny_hp.replace(K=1, k=1), tiny_corpus)
    ref = evaluate_split(res.manager, res.workers, tiny_corpus.test, 1)
    assert base == ref and base["top1"] == base["topk"]


def test_report_statistics_and_table():
    r = EvaluationReport("MW-5", [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [], "abc")
    d = r.to_dict()
    assert d["top1"]["MEAN"] == 2.0
    assert d["top1"]["SD"] == pytest.approx(0.816496580927726, abs=1e-12)
    lines = r.table("top1").splitlines()
    assert lines[0].split(" | ")[0].strip() == "Model"
    assert [c.strip() for c in lines[0].split(" | ")][1:] == ["Round 0", "Round 1", "Round 2",
                                                             "MEAN", "SD"]
    assert [c.strip() for c in lines[2].split(" | ")] == ["MW-5", "1.0000", "2.0000", "3.0000",
                                                         "2.0000", "0.8165"]
    assert EvaluationReport("m", [4.2], [4.2], [1.0], [], "x").to_dict()["top1"]["SD"] == 0.0


def test_run_rounds_reproducible(tiny_hp, tmp_path):
    spec = SyntheticSpec(n_samples=60, LC=3, LX=8, LY=4, seed=2)
    hp = tiny_hp.replace(iterations=2, eval_every=2)
    a = run_rounds(hp, spec, rounds=2)
    b = run_rounds(hp, spec, rounds=2)
    assert a.to_dict() == b.to_dict()
    assert len(a.top1) == 2 and a.config_hash == b.config_hash
    a.save(tmp_path)
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["top1"]["MEAN"] == statistics.fmean(saved["top1"]["rounds"])
    assert "Round 1" in (tmp_path / "report.txt").read_text()
    with pytest.raises(InvalidInputError):
        run_rounds(hp, spec, rounds=0)
