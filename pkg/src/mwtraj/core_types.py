"""Domain types, data-state normalization and context encoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml


class InvalidInputError(ValueError):
    """Raised when an operation receives data that violates its contract."""


class ConfigError(ValueError):
    """Raised for invalid configuration or schema content."""


KINDS = ("ranged", "unlimited", "boolean", "enumerated")
ONE_HOT_LIMIT = 10


def _finite(value: float, what: str = "value") -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise InvalidInputError(f"{what} is not numeric: {value!r}") from None
    if not math.isfinite(value):
        raise InvalidInputError(f"{what} must be finite, got {value}")
    return value


@dataclass(frozen=True)
class DataStateSpec:
    """Schema entry for one contextual data state.

    ``categories`` holds the two states of a boolean (first maps to 0) or the
    category list of an enumerated state. ``embedding_len`` is only read for
    enumerated states with ``ONE_HOT_LIMIT`` or more categories.
    """

    name: str
    kind: str
    min: float | None = None
    max: float | None = None
    soft_max: float | None = None
    categories: tuple = ()
    embedding_len: int | None = None
    unknown: str = "reserve"

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.kind not in KINDS:
            raise ConfigError(f"{self.name}: unknown kind {self.kind!r}")
        if self.unknown not in ("reserve", "error"):
            raise ConfigError(f"{self.name}: unknown policy must be 'reserve' or 'error'")
        if self.kind == "ranged":
            if self.min is None or self.max is None or not float(self.min) < float(self.max):
                raise ConfigError(f"{self.name}: ranged state needs min < max")
        elif self.kind == "unlimited":
            if self.soft_max is None or not float(self.soft_max) > 0:
                raise ConfigError(f"{self.name}: unlimited state needs soft_max > 0")
        elif self.kind == "boolean":
            if len(self.categories) != 2 or self.categories[0] == self.categories[1]:
                raise ConfigError(f"{self.name}: boolean state needs two distinct categories")
        else:
            n = len(self.categories)
            if n < 2 or len(set(self.categories)) != n:
                raise ConfigError(f"{self.name}: enumerated state needs >= 2 distinct categories")
            if n < ONE_HOT_LIMIT:
                if self.embedding_len not in (None, n):
                    raise ConfigError(
                        f"{self.name}: one-hot state has embedding_len == category count ({n})")
                object.__setattr__(self, "embedding_len", n)
            elif self.embedding_len is None or not 1 < self.embedding_len < n:
                raise ConfigError(f"{self.name}: embedded state needs 1 < embedding_len < {n}")

    @property
    def embedded(self) -> bool:
        return self.kind == "enumerated" and len(self.categories) >= ONE_HOT_LIMIT

    @property
    def width(self) -> int:
        return int(self.embedding_len) if self.kind == "enumerated" else 1

    @property
    def table_rows(self) -> int:
        """Rows of the trainable embedding table, including the unknown row."""
        return len(self.categories) + 1

    def category_index(self, value) -> int:
        try:
            return self.categories.index(value)
        except ValueError:
            if self.unknown == "error":
                raise InvalidInputError(f"{self.name}: unseen category {value!r}") from None
            return len(self.categories)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"name": self.name, "kind": self.kind}
        for key in ("min", "max", "soft_max", "embedding_len"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        if self.categories:
            out["categories"] = list(self.categories)
        if self.unknown != "reserve":
            out["unknown"] = self.unknown
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "DataStateSpec":
        allowed = {"name", "kind", "min", "max", "soft_max", "categories", "embedding_len", "unknown"}
        extra = set(d) - allowed
        if extra:
            raise ConfigError(f"unknown schema fields {sorted(extra)}")
        if "name" not in d or "kind" not in d:
            raise ConfigError("schema entries need 'name' and 'kind'")
        return cls(**{k: (tuple(v) if k == "categories" else v) for k, v in d.items()})


def normalize_ranged(value: float, spec: DataStateSpec) -> float:
    if spec.kind != "ranged":
        raise InvalidInputError(f"{spec.name} is not a ranged state")
    value = _finite(value, spec.name)
    lo, hi = float(spec.min), float(spec.max)
    value = min(max(value, lo), hi)
    return (value - lo) / (hi - lo)


def normalize_unlimited(value: float, spec: DataStateSpec) -> float:
    if spec.kind != "unlimited":
        raise InvalidInputError(f"{spec.name} is not an unlimited state")
    value = _finite(value, spec.name)
    if value < 0:
        raise InvalidInputError(f"{spec.name}: unlimited states start at 0, got {value}")
    return math.tanh(value / float(spec.soft_max))


def normalize_boolean(value, spec: DataStateSpec) -> int:
    if spec.kind != "boolean":
        raise InvalidInputError(f"{spec.name} is not a boolean state")
    if value == spec.categories[0]:
        return 0
    if value == spec.categories[1]:
        return 1
    raise InvalidInputError(f"{spec.name}: {value!r} is neither {spec.categories[0]!r} "
                            f"nor {spec.categories[1]!r}")


def encode_enumerated(value, spec: DataStateSpec,
                      embedding: np.ndarray | None = None) -> np.ndarray:
    """One-hot vector, or the embedding row for large category sets.

    Unknown categories map to an all-zero one-hot, or to the reserved last row
    of ``embedding`` (shape ``(len(categories) + 1, embedding_len)``).
    """
    if spec.kind != "enumerated":
        raise InvalidInputError(f"{spec.name} is not an enumerated state")
    idx = spec.category_index(value)
    if not spec.embedded:
        vec = np.zeros(spec.width)
        if idx < len(spec.categories):
            vec[idx] = 1.0
        return vec
    if embedding is None:
        raise InvalidInputError(f"{spec.name}: embedded state needs an embedding table")
    embedding = np.asarray(embedding, dtype=float)
    if embedding.shape != (spec.table_rows, spec.width):
        raise InvalidInputError(
            f"{spec.name}: embedding table must be {(spec.table_rows, spec.width)}, "
            f"got {embedding.shape}")
    return embedding[idx].copy()


class ContextSchema:
    """Ordered collection of data states; the order fixes column layout."""

    def __init__(self, states: Sequence[DataStateSpec]):
        self.states = tuple(states)
        if not self.states:
            raise ConfigError("schema needs at least one data state")
        names = [s.name for s in self.states]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate data-state names in schema")
        self.offsets = []
        col = 0
        for s in self.states:
            self.offsets.append(col)
            col += s.width
        self.width = col

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        return isinstance(other, ContextSchema) and self.states == other.states

    def __hash__(self):
        return hash(self.states)

    @property
    def embedded_states(self) -> list[int]:
        return [i for i, s in enumerate(self.states) if s.embedded]

    def to_list(self) -> list[dict]:
        return [s.to_dict() for s in self.states]

    @classmethod
    def from_list(cls, entries: Sequence[Mapping]) -> "ContextSchema":
        return cls([DataStateSpec.from_dict(e) for e in entries])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"states": self.to_list()}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ContextSchema":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse schema {path}: {exc}") from None
        if isinstance(doc, Mapping):
            doc = doc.get("states")
        if not isinstance(doc, list):
            raise ConfigError(f"{path}: schema must be a list of states or {{states: [...]}}")
        return cls.from_list(doc)

    def encode_parts(self, frames: Sequence[Sequence]) -> tuple[np.ndarray, np.ndarray]:
        """Split encoding: dense matrix with zeroed embedding slots, plus codes.

        Returns ``(dense, codes)`` with shapes ``(LC, width)`` and
        ``(LC, n_embedded)``; the manager splices trainable rows into the slots.
        """
        if len(frames) == 0:
            raise InvalidInputError("context window has no frames")
        emb = self.embedded_states
        dense = np.zeros((len(frames), self.width))
        codes = np.zeros((len(frames), len(emb)), dtype=np.int64)
        for r, frame in enumerate(frames):
            if len(frame) != len(self.states):
                raise InvalidInputError(
                    f"frame {r} has {len(frame)} entries, schema has {len(self.states)}")
            e = 0
            for spec, off, value in zip(self.states, self.offsets, frame):
                if spec.kind == "ranged":
                    dense[r, off] = normalize_ranged(value, spec)
                elif spec.kind == "unlimited":
                    dense[r, off] = normalize_unlimited(value, spec)
                elif spec.kind == "boolean":
                    dense[r, off] = normalize_boolean(value, spec)
                elif spec.embedded:
                    codes[r, e] = spec.category_index(value)
                    e += 1
                else:
                    dense[r, off:off + spec.width] = encode_enumerated(value, spec)
        return dense, codes

    def encode(self, frames: Sequence[Sequence],
               embeddings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        dense, codes = self.encode_parts(frames)
        for e, i in enumerate(self.embedded_states):
            spec = self.states[i]
            table = (embeddings or {}).get(spec.name)
            if table is None:
                raise InvalidInputError(f"{spec.name}: no embedding table supplied")
            table = np.asarray(table, dtype=float)
            if table.shape != (spec.table_rows, spec.width):
                raise InvalidInputError(f"{spec.name}: embedding table has shape {table.shape}")
            off = self.offsets[i]
            dense[:, off:off + spec.width] = table[codes[:, e]]
        return dense


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray
    dt: float = 1.0
    unit_id: int | str = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 1:
            raise InvalidInputError(f"trajectory points must be (L>=1, 2), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise InvalidInputError("trajectory coordinates must be finite")
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class ContextWindow:
    frames: tuple
    schema: ContextSchema

    def __post_init__(self):
        frames = tuple(tuple(f) for f in self.frames)
        if not frames:
            raise InvalidInputError("context window has no frames")
        for r, f in enumerate(frames):
            if len(f) != len(self.schema):
                raise InvalidInputError(
                    f"frame {r} has {len(f)} entries, schema has {len(self.schema)}")
        object.__setattr__(self, "frames", frames)

    @property
    def encoded_width(self) -> int:
        return self.schema.width


def encode_context(window: ContextWindow,
                   embeddings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Encode a window to an ``LC x (N + sum(LE_i - 1))`` matrix."""
    return window.schema.encode(window.frames, embeddings)


@dataclass(frozen=True)
class DataSample:
    """One (C, TX, TY) unit. ``tx`` is ``LX x 2|U|``; ``ty`` is ``LY x 2``."""

    context: ContextWindow
    tx: np.ndarray
    ty: np.ndarray
    target_id: int = 0

    def __post_init__(self):
        tx = np.asarray(self.tx, dtype=float)
        ty = np.asarray(self.ty, dtype=float)
        if tx.ndim != 2 or tx.shape[1] % 2 or tx.shape[1] == 0:
            raise InvalidInputError(f"TX must be LX x 2|U|, got {tx.shape}")
        if ty.ndim != 2 or ty.shape[1] != 2:
            raise InvalidInputError(f"TY must be LY x 2, got {ty.shape}")
        if not 0 <= self.target_id < tx.shape[1] // 2:
            raise InvalidInputError(f"target_id {self.target_id} out of range")
        if not (np.isfinite(tx).all() and np.isfinite(ty).all()):
            raise InvalidInputError("trajectories must be finite")
        object.__setattr__(self, "tx", tx)
        object.__setattr__(self, "ty", ty)

    @property
    def n_units(self) -> int:
        return self.tx.shape[1] // 2

    def shapes(self) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
        lc = len(self.context.frames)
        return (lc, self.context.encoded_width), self.tx.shape, self.ty.shape


MANAGER_LOSSES = ("wasserstein", "cross_entropy")
WORKER_LOSSES = ("ade", "fde", "mse")
TARGET_RULES = ("simple", "regularized", "unnormalized")
ROUTING = ("manager", "oracle_loss")
TRAINERS = ("cstrain", "no_competition")


@dataclass(frozen=True)
class Hyperparameters:
    """Training and model configuration.

    Field defaults follow the glossary where one exists (K=20, k=3, LC=5,
    LX=30, LY=10, dt=1). Architecture defaults are desk-scale.
    """

    K: int = 20
    k: int = 3
    alpha: int = 1
    alpha_decay: str = "linear"
    beta: float = 0.5
    batch_size: int = 64
    iterations: int = 1000
    LC: int = 5
    LX: int = 30
    LY: int = 10
    dt: float = 1.0
    max_step: float = 1.0
    manager_loss: str = "wasserstein"
    worker_loss: str = "ade"
    target_rule: str = "regularized"
    ground_metric: str = "index"
    route_by: str = "manager"
    trainer: str = "cstrain"
    manager_steps: int = 1
    manager_lr: float = 1e-3
    worker_lr: float = 1e-3
    eval_every: int = 50
    patience: int = 5
    early_stopping: bool = True
    worker_kind: str = "transformer"
    d_model: int = 32
    n_heads: int = 4
    manager_layers: int = 2
    worker_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.K >= 1, "K >= 1"),
            (1 <= self.k <= self.K, "1 <= k <= K"),
            (self.alpha >= 1, "alpha >= 1"),
            (self.beta >= 0, "beta >= 0"),
            (self.max_step > 0, "max_step > 0"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.iterations >= 0, "iterations >= 0"),
            (min(self.LC, self.LX, self.LY) >= 1, "LC, LX, LY >= 1"),
            (self.dt > 0, "dt > 0"),
            (self.manager_steps >= 1, "manager_steps >= 1"),
            (self.eval_every >= 1, "eval_every >= 1"),
            (self.patience >= 1, "patience >= 1"),
            (self.d_model % self.n_heads == 0, "d_model divisible by n_heads"),
            (self.manager_loss in MANAGER_LOSSES, f"manager_loss in {MANAGER_LOSSES}"),
            (self.worker_loss in WORKER_LOSSES, f"worker_loss in {WORKER_LOSSES}"),
            (self.target_rule in TARGET_RULES, f"target_rule in {TARGET_RULES}"),
            (self.ground_metric in ("index", "tv"), "ground_metric in ('index', 'tv')"),
            (self.route_by in ROUTING, f"route_by in {ROUTING}"),
            (self.trainer in TRAINERS, f"trainer in {TRAINERS}"),
            (self.alpha_decay in ("linear", "none"), "alpha_decay in ('linear', 'none')"),
            (self.worker_kind in ("transformer", "recurrent"),
             "worker_kind in ('transformer', 'recurrent')"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"invalid hyperparameters: need {msg}")

    def alpha_at(self, iteration: int) -> int:
        """Worker steps for a 0-based iteration: linear decay to 1 over the first half."""
        if self.alpha_decay == "none" or self.alpha == 1:
            return self.alpha
        horizon = max(self.iterations // 2, 1)
        if iteration >= horizon:
            return 1
        return max(1, int(round(self.alpha - (self.alpha - 1) * iteration / horizon)))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Hyperparameters":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown hyperparameters {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid hyperparameters: {exc}") from None

    def replace(self, **kw) -> "Hyperparameters":
        return replace(self, **kw)
