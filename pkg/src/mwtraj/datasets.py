"""Synthetic context-dependent corpora, CSV ingestion and split protocols."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core_types import (ConfigError, ContextSchema, ContextWindow, DataSample, DataStateSpec,
                         InvalidInputError)

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
PATTERNS = ("straight", "arc", "zigzag", "arc_right", "brake")


class DataError(ValueError):
    """Raised when input data cannot be turned into samples."""


@dataclass
class Batch:
    dense: torch.Tensor
    codes: torch.Tensor
    tx: torch.Tensor
    ty: torch.Tensor
    target: torch.Tensor

    def __len__(self):
        return self.tx.shape[0]


@dataclass
class SampleArrays:
    """Stacked samples. ``pattern`` is hidden ground truth (-1 when unknown)."""

    dense: np.ndarray
    codes: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    target: np.ndarray
    pattern: np.ndarray

    def __post_init__(self):
        n = len(self.tx)
        for name in ("dense", "codes", "ty", "target", "pattern"):
            if len(getattr(self, name)) != n:
                raise InvalidInputError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.tx)

    def subset(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleArrays(*(getattr(self, k)[idx] for k in _FIELDS))

    def batch(self, idx=None, dtype=torch.float32) -> Batch:
        sub = self if idx is None else self.subset(idx)
        return Batch(
            dense=torch.as_tensor(sub.dense, dtype=dtype),
            codes=torch.as_tensor(sub.codes, dtype=torch.long),
            tx=torch.as_tensor(sub.tx, dtype=dtype),
            ty=torch.as_tensor(sub.ty, dtype=dtype),
            target=torch.as_tensor(sub.target, dtype=torch.long),
        )

    @classmethod
    def concat(cls, parts: Sequence["SampleArrays"]) -> "SampleArrays":
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in _FIELDS))

    @classmethod
    def from_samples(cls, samples: Sequence[DataSample], patterns=None) -> "SampleArrays":
        if not samples:
            raise InvalidInputError("no samples")
        schema = samples[0].context.schema
        dense, codes = zip(*(schema.encode_parts(s.context.frames) for s in samples))
        return cls(np.stack(dense), np.stack(codes), np.stack([s.tx for s in samples]),
                   np.stack([s.ty for s in samples]),
                   np.array([s.target_id for s in samples], dtype=np.int64),
                   np.asarray(patterns if patterns is not None else [-1] * len(samples),
                              dtype=np.int64))


_FIELDS = ("dense", "codes", "tx", "ty", "target", "pattern")


@dataclass
class CorpusSplit:
    train: SampleArrays
    val: SampleArrays
    test: SampleArrays
    schema: ContextSchema
    provenance: dict = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}

    @property
    def max_step(self) -> float | None:
        return self.provenance.get("max_step")

    def save(self, path: str | Path) -> str:
        """Write an archive directory; returns its content hash."""
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for split, arrays in self.splits().items():
            for key in _FIELDS:
                np.save(root / f"{split}_{key}.npy", getattr(arrays, key), allow_pickle=False)
        manifest = {
            "provenance": self.provenance,
            "schema": self.schema.to_list(),
            "counts": {k: len(v) for k, v in self.splits().items()},
        }
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return archive_hash(root)

    @classmethod
    def load(cls, path: str | Path) -> "CorpusSplit":
        root = Path(path)
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read corpus archive {root}: {exc}") from None
        parts = {}
        for split in ("train", "val", "test"):
            parts[split] = SampleArrays(*(np.load(root / f"{split}_{k}.npy") for k in _FIELDS))
        return cls(schema=ContextSchema.from_list(manifest["schema"]),
                   provenance=manifest["provenance"], **parts)


def archive_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def split_indices(n: int, rng: np.random.Generator | None = None,
                  fractions=SPLIT_FRACTIONS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """80/10/10 index split; shuffled when ``rng`` is given, contiguous otherwise."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


# -------------------------------------------------------------- synthetic ---

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic corpus.

    Every sample cruises in a straight line during the observed window; at the
    prediction time the mover switches to the pattern chosen by the context
    state ``mode``. Patterns share their observed past, so only the context
    reveals which one follows. ``context_noise`` is the probability that the
    mode is re-drawn at random (a noisy context rule).
    """

    num_patterns: int = 3
    n_samples: int = 3750
    n_units: int = 1
    LC: int = 5
    LX: int = 30
    LY: int = 10
    dt: float = 1.0
    speed_min: float = 1.3
    speed_max: float = 1.8
    max_step: float = 2.0
    turn_rate: float = 0.15
    zigzag_angle: float = 0.7
    heading_noise: float = 0.02
    context_noise: float = 0.0
    arena: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_patterns <= len(PATTERNS):
            raise ConfigError(f"num_patterns must be in 1..{len(PATTERNS)}")
        if not 0 < self.speed_min <= self.speed_max:
            raise ConfigError("need 0 < speed_min <= speed_max (a zero speed cap is infeasible)")
        if self.speed_max > self.max_step:
            raise ConfigError("pattern speed cap must not exceed max_step")
        if self.n_samples < 10:
            raise ConfigError("n_samples must be at least 10")
        if min(self.LC, self.LX, self.LY, self.n_units) < 1 or self.LC > self.LX:
            raise ConfigError("need 1 <= LC <= LX, LY >= 1, n_units >= 1")
        if not 0 <= self.context_noise <= 1 or self.heading_noise < 0:
            raise ConfigError("noise levels must be non-negative (context_noise <= 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def schema(self) -> ContextSchema:
        modes = tuple(f"m{i}" for i in range(max(self.num_patterns, 2)))
        return ContextSchema([
            DataStateSpec("mode", "enumerated", categories=modes),
            DataStateSpec("clock", "ranged", min=0.0, max=100.0),
            DataStateSpec("wind", "unlimited", soft_max=5.0),
            DataStateSpec("light", "boolean", categories=("day", "night")),
        ])


def _headings(pattern: str, base: float, spec: SyntheticSpec) -> np.ndarray:
    i = np.arange(1, spec.LY + 1)
    if pattern == "straight" or pattern == "brake":
        return np.full(spec.LY, base)
    if pattern == "arc":
        return base + spec.turn_rate * i
    if pattern == "arc_right":
        return base - spec.turn_rate * i
    if pattern == "zigzag":
        return base + np.where(i % 2 == 1, spec.zigzag_angle, -spec.zigzag_angle)
    raise ConfigError(f"unknown pattern {pattern}")


def _future_speeds(pattern: str, v: float, spec: SyntheticSpec) -> np.ndarray:
    if pattern == "brake":
        return np.linspace(v, spec.speed_min, spec.LY)
    return np.full(spec.LY, v)


def _walk(start, headings, speeds):
    steps = np.stack([np.cos(headings), np.sin(headings)], axis=1) * speeds[:, None]
    return start + np.cumsum(steps, axis=0)


def generate_synthetic(spec: SyntheticSpec) -> CorpusSplit:
    rng = np.random.default_rng(spec.seed)
    schema = spec.schema()
    samples, patterns = [], []
    for _ in range(spec.n_samples):
        mode = int(rng.integers(spec.num_patterns))
        pattern = mode
        if spec.context_noise and rng.random() < spec.context_noise:
            pattern = int(rng.integers(spec.num_patterns))
        units = []
        for u in range(spec.n_units):
            v = rng.uniform(spec.speed_min, spec.speed_max)
            base = rng.uniform(0, 2 * math.pi)
            now = rng.uniform(0, spec.arena, size=2)
            past_h = base + spec.heading_noise * rng.standard_normal(spec.LX - 1)
            # walk backwards from the current location
            back = np.stack([np.cos(past_h), np.sin(past_h)], axis=1) * v
            past = now - np.concatenate([np.cumsum(back[::-1], axis=0)[::-1], np.zeros((1, 2))])
            name = PATTERNS[pattern] if u == 0 else "straight"
            fut_h = _headings(name, base, spec) + spec.heading_noise * rng.standard_normal(spec.LY)
            future = _walk(now, fut_h, _future_speeds(name, v, spec))
            units.append((past, future))
        frames = []
        for _ in range(spec.LC):
            frames.append((f"m{mode}", float(rng.uniform(0, 100)),
                           float(rng.exponential(3.0)), "day" if rng.random() < 0.5 else "night"))
        tx = np.concatenate([p for p, _ in units], axis=1)
        samples.append(DataSample(ContextWindow(frames, schema), tx, units[0][1], 0))
        patterns.append(pattern)
    pool = SampleArrays.from_samples(samples, patterns)
    tr, va, te = split_indices(len(pool), np.random.default_rng(spec.seed + 1))
    return CorpusSplit(pool.subset(tr), pool.subset(va), pool.subset(te), schema,
                       provenance={"source": "synthetic", "seed": spec.seed,
                                   "spec": spec.to_dict(), "spec_hash": spec.spec_hash(),
                                   "max_step": spec.max_step, "dt": spec.dt})


# -------------------------------------------------------------- ingestion ---

def _parse_value(raw: str, spec: DataStateSpec):
    if raw is None or raw.strip() == "" or raw.strip().lower() == "nan":
        return None
    if spec.kind in ("ranged", "unlimited"):
        return float(raw)
    for cat in spec.categories:
        if str(cat) == raw.strip():
            return cat
    return raw.strip()


def _unit_columns(header: Sequence[str]) -> list[str]:
    units = []
    for col in header:
        if col.startswith("x_") and f"y_{col[2:]}" in header:
            units.append(col[2:])
    if not units:
        raise DataError("CSV needs coordinate columns x_<unit>, y_<unit>")
    return units


def read_series(path: str | Path, schema: ContextSchema):
    """Read one CSV series; returns unit names, coords (T, 2U), frames, valid mask."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        units = _unit_columns(header)
        missing = [s.name for s in schema.states if s.name not in header]
        if missing:
            raise DataError(f"{path}: columns missing for states {missing}")
        coords, frames, valid = [], [], []
        for row in reader:
            ok = True
            xy = []
            for u in units:
                for axis in "xy":
                    cell = row.get(f"{axis}_{u}", "")
                    try:
                        val = float(cell)
                    except (TypeError, ValueError):
                        val = math.nan
                    ok &= math.isfinite(val)
                    xy.append(val)
            frame = [_parse_value(row.get(s.name), s) for s in schema.states]
            ok &= all(v is not None for v in frame)
            coords.append(xy)
            frames.append(frame)
            valid.append(ok)
    return units, np.array(coords, dtype=float).reshape(-1, 2 * len(units)), frames, np.array(valid, bool)


def window_starts(length: int, LX: int, LY: int, stride: int) -> list[int]:
    span = LX + LY
    if length < span:
        return []
    return list(range(0, length - span + 1, stride))


def ingest_csv(paths, schema: ContextSchema | str | Path, LC: int, LX: int, LY: int,
               stride: int = 1, target: str | None = None, max_step: float | None = None,
               dt: float = 1.0) -> CorpusSplit:
    """Sliding-window samples from time-ordered CSVs, split 80/10/10 by contiguous blocks.

    Windows touching a row with missing values are skipped; the count of such
    rows and windows is recorded in ``provenance["report"]``.
    """
    if not isinstance(schema, ContextSchema):
        schema = ContextSchema.load(schema)
    if stride < 1 or LC > LX:
        raise ConfigError("need stride >= 1 and LC <= LX")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    pools, bad_rows, skipped = [], 0, 0
    max_disp = 0.0
    for path in paths:
        units, coords, frames, valid = read_series(path, schema)
        t_idx = units.index(target) if target is not None else 0
        bad_rows += int((~valid).sum())
        samples = []
        for s in window_starts(len(coords), LX, LY, stride):
            if not valid[s:s + LX + LY].all():
                skipped += 1
                continue
            ctx = ContextWindow(frames[s + LX - LC:s + LX], schema)
            ty = coords[s + LX:s + LX + LY, 2 * t_idx:2 * t_idx + 2]
            samples.append(DataSample(ctx, coords[s:s + LX], ty, t_idx))
            path_xy = coords[s:s + LX + LY, 2 * t_idx:2 * t_idx + 2]
            max_disp = max(max_disp, float(np.linalg.norm(np.diff(path_xy, axis=0), axis=1).max()))
        if samples:
            pools.append(SampleArrays.from_samples(samples))
    if not pools:
        raise DataError("no complete windows could be extracted")
    pool = SampleArrays.concat(pools)
    tr, va, te = split_indices(len(pool))
    if max_step is None:
        max_step = max_disp * 1.05 if max_disp > 0 else 1.0
    return CorpusSplit(pool.subset(tr), pool.subset(va), pool.subset(te), schema, provenance={
        "source": "csv", "paths": [str(p) for p in paths], "stride": stride,
        "windows": {"LC": LC, "LX": LX, "LY": LY}, "max_step": float(max_step), "dt": dt,
        "report": {"rows_with_missing_values": bad_rows, "windows_skipped": skipped,
                   "samples": len(pool)}})


# ------------------------------------------------------------- resampling ---

def resample(source, round_seed: int, contiguous: bool = False) -> CorpusSplit:
    """A fresh 80/10/10 split for one evaluation round.

    ``source`` may be a ``SyntheticSpec`` (regenerated under a round seed) or a
    ``CorpusSplit`` whose samples are pooled and re-split. With
    ``contiguous=True`` the pooled, time-ordered samples are cut into ten
    blocks and the round seed picks which blocks serve validation and test.
    """
    if isinstance(source, SyntheticSpec):
        return generate_synthetic(replace(source, seed=_round_seed(source.seed, round_seed)))
    if not isinstance(source, CorpusSplit):
        raise ConfigError(f"cannot resample from {type(source).__name__}")
    pool = SampleArrays.concat([source.train, source.val, source.test])
    rng = np.random.default_rng(round_seed)
    if contiguous:
        blocks = np.array_split(np.arange(len(pool)), 10)
        order = rng.permutation(10)
        tr = np.concatenate([blocks[b] for b in sorted(order[:8])])
        va, te = blocks[order[8]], blocks[order[9]]
    else:
        tr, va, te = split_indices(len(pool), rng)
    prov = dict(source.provenance, round_seed=int(round_seed))
    return CorpusSplit(pool.subset(tr), pool.subset(va), pool.subset(te), source.schema, prov)


def _round_seed(base: int, round_seed: int) -> int:
    return int(np.random.SeedSequence([base, round_seed]).generate_state(1)[0])
