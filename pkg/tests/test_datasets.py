import csv
from dataclasses import replace

import numpy as np
import pytest

from mwtraj.core_types import ConfigError, ContextSchema, DataStateSpec
from mwtraj.datasets import (CorpusSplit, DataError, SyntheticSpec, generate_synthetic,
                             ingest_csv, resample, split_indices, window_starts)

SPEC = SyntheticSpec(n_samples=200, LC=3, LX=8, LY=5, seed=4)


def _all(c):
    from mwtraj.datasets import SampleArrays
    return SampleArrays.concat([c.train, c.val, c.test])


def test_synthetic_shapes_and_split():
    c = generate_synthetic(SPEC)
    assert (len(c.train), len(c.val), len(c.test)) == (160, 20, 20)
    assert c.train.tx.shape[1:] == (8, 2) and c.train.ty.shape[1:] == (5, 2)
    assert c.train.dense.shape[1:] == (3, c.schema.width)
    assert c.max_step == SPEC.max_step


def test_synthetic_deterministic():
    a, b = generate_synthetic(SPEC), generate_synthetic(SPEC)
    np.testing.assert_array_equal(a.test.ty, b.test.ty)
    np.testing.assert_array_equal(a.val.dense, b.val.dense)
    c = generate_synthetic(replace(SPEC, seed=5))
    assert not np.array_equal(a.test.ty, c.test.ty)


def test_steps_respect_speed_cap_and_continuity():
    pool = _all(generate_synthetic(SPEC))
    path = np.concatenate([pool.tx, pool.ty], axis=1)
    steps = np.linalg.norm(np.diff(path, axis=1), axis=-1)
    assert steps.max() <= SPEC.speed_max + 1e-9
    # TY's first point is one step after TX's last
    first = np.linalg.norm(pool.ty[:, 0] - pool.tx[:, -1], axis=1)
    assert (first >= SPEC.speed_min - 1e-9).all()


def test_context_selects_pattern():
    c = generate_synthetic(SPEC)
    pool = _all(c)
    mode_cols = pool.dense[:, 0, :c.schema.states[0].width]
    np.testing.assert_array_equal(mode_cols.argmax(1), pool.pattern)
    assert set(pool.pattern.tolist()) == {0, 1, 2}


def test_single_pattern_corpus():
    pool = _all(generate_synthetic(replace(SPEC, num_patterns=1)))
    assert set(pool.pattern.tolist()) == {0}


def test_context_noise_decouples_some_samples():
    c = generate_synthetic(replace(SPEC, context_noise=1.0, n_samples=300))
    pool = _all(c)
    agree = np.mean(pool.dense[:, 0, :3].argmax(1) == pool.pattern)
    assert 0.2 < agree < 0.5


def test_infeasible_spec():
    with pytest.raises(ConfigError):
        SyntheticSpec(speed_min=0, speed_max=0)
    with pytest.raises(ConfigError):
        SyntheticSpec(speed_max=3.0, max_step=2.0)


def test_archive_round_trip(tmp_path):
    c = generate_synthetic(SPEC)
    h1 = c.save(tmp_path / "a")
    h2 = generate_synthetic(SPEC).save(tmp_path / "b")
    assert h1 == h2
    back = CorpusSplit.load(tmp_path / "a")
    assert len(back.train) == len(c.train) and back.schema == c.schema
    np.testing.assert_array_equal(back.test.codes, c.test.codes)
    with pytest.raises(DataError):
        CorpusSplit.load(tmp_path / "missing")


def test_split_indices():
    tr, va, te = split_indices(100)
    assert tr.tolist() == list(range(80)) and va.tolist() == list(range(80, 90))
    tr, va, te = split_indices(100, np.random.default_rng(0))
    assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(100))


def test_window_count_examples():
    assert len(window_starts(100, 30, 10, 10)) == 7
    assert len(window_starts(40, 30, 10, 100)) == 1
    assert len(window_starts(39, 30, 10, 100)) == 0


# -- CSV ingestion ----------------------------------------------------------------------

SCHEMA = ContextSchema([DataStateSpec("speed", "ranged", min=0, max=5),
                        DataStateSpec("phase", "boolean", categories=("a", "b"))])


def _write_csv(path, n=100, hole=None, units=("u0", "u1")):
    rng = np.random.default_rng(0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([c for u in units for c in (f"x_{u}", f"y_{u}")] + ["speed", "phase"])
        for t in range(n):
            row = [v for i, _ in enumerate(units) for v in (t * 0.5 + i, i - t * 0.25)]
            row += [rng.uniform(0, 5), "ab"[t % 2]]
            if hole is not None and t == hole:
                row[0] = ""
            w.writerow(row)


def test_ingest_counts_and_contiguous_split(tmp_path):
    _write_csv(tmp_path / "s.csv")
    c = ingest_csv(tmp_path / "s.csv", SCHEMA, LC=5, LX=30, LY=10, stride=10)
    assert len(c.train) + len(c.val) + len(c.test) == 7
    assert c.train.tx.shape[1:] == (30, 4) and c.train.ty.shape[1:] == (10, 2)
    assert (len(c.train), len(c.val), len(c.test)) == (6, 1, 0)
    # contiguous blocks: training windows precede validation windows in time
    assert c.train.tx[-1, 0, 0] < c.val.tx[0, 0, 0]
    assert c.provenance["report"]["windows_skipped"] == 0


def test_ingest_alignment_and_target(tmp_path):
    _write_csv(tmp_path / "s.csv", n=50)
    c = ingest_csv(tmp_path / "s.csv", SCHEMA, LC=2, LX=6, LY=3, stride=1, target="u1")
    s = c.train
    np.testing.assert_allclose(s.ty[0, 0], [6 * 0.5 + 1, 1 - 6 * 0.25])
    np.testing.assert_array_equal(s.target[:3], [1, 1, 1])
    # context holds the last LC frames of the past window: phases at t=4,5
    np.testing.assert_array_equal(s.dense[0, :, 1], [0, 1])


def test_ingest_skips_missing_rows(tmp_path):
    _write_csv(tmp_path / "s.csv", hole=55)
    c = ingest_csv(tmp_path / "s.csv", SCHEMA, LC=5, LX=30, LY=10, stride=10)
    rep = c.provenance["report"]
    assert rep["rows_with_missing_values"] == 1
    # row 55 lies in the windows starting at 20, 30, 40 and 50
    assert rep["windows_skipped"] == 4 and rep["samples"] == 3


def test_ingest_errors(tmp_path):
    _write_csv(tmp_path / "s.csv", n=20)
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "s.csv", SCHEMA, LC=5, LX=30, LY=10)
    bad = ContextSchema([DataStateSpec("altitude", "ranged", min=0, max=1)])
    with pytest.raises(DataError):
        ingest_csv(tmp_path / "s.csv", bad, LC=2, LX=5, LY=2)
    (tmp_path / "schema.yaml").write_text("- {name: speed, kind: ranged, min: 5, max: 0}\n")
    with pytest.raises(ConfigError):
        ingest_csv(tmp_path / "s.csv", tmp_path / "schema.yaml", LC=2, LX=5, LY=2)


def test_ingest_duplicate_runs_identical(tmp_path):
    _write_csv(tmp_path / "s.csv")
    a = ingest_csv(tmp_path / "s.csv", SCHEMA, LC=5, LX=30, LY=10, stride=3)
    b = ingest_csv(tmp_path / "s.csv", SCHEMA, LC=5, LX=30, LY=10, stride=3)
    np.testing.assert_array_equal(a.val.tx, b.val.tx)


# -- resampling -------------------------------------------------------------------------

def test_resample_synthetic():
    a, b = resample(SPEC, 3), resample(SPEC, 3)
    np.testing.assert_array_equal(a.test.tx, b.test.tx)
    c = resample(SPEC, 4)
    assert not np.array_equal(a.test.tx, c.test.tx)
    assert (len(c.train), len(c.val), len(c.test)) == (160, 20, 20)


def test_resample_corpus_pools_and_resplits():
    base = generate_synthetic(SPEC)
    a, b = resample(base, 1), resample(base, 2)
    assert (len(a.train), len(a.val), len(a.test)) == (160, 20, 20)
    assert not np.array_equal(a.val.tx, b.val.tx)
    pooled = np.sort(np.concatenate([a.train.tx, a.val.tx, a.test.tx])[:, 0, 0])
    np.testing.assert_array_equal(pooled, np.sort(_all(base).tx[:, 0, 0]))


def test_resample_contiguous_blocks():
    base = generate_synthetic(SPEC)
    r = resample(base, 7, contiguous=True)
    assert len(r.val) == len(r.test) == 20
    pool = _all(base).tx[:, 0, 0]
    idx = [int(np.flatnonzero(pool == v)[0]) for v in r.test.tx[:, 0, 0]]
    assert idx == list(range(idx[0], idx[0] + 20))
