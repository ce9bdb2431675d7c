"""Experiment configuration: one YAML file plus ``key=value`` overrides.

Layout::

    hyperparameters: {K: 5, beta: 0.5, ...}   # any Hyperparameters field
    data:
      synthetic: {num_patterns: 3, seed: 0, ...}   # SyntheticSpec fields
      # or  csv: {paths: [a.csv], schema: schema.yaml, stride: 1, target: u0, max_step: 2.0}
      # or  archive: path/to/corpus
    out: runs/exp1
    seeds: [0, 1, 2]          # ablate; default is hyperparameters.seed
    grid: {beta: [0.0, 0.5, 1.0]}
    rounds: 10
    deterministic: true

Overrides use dotted keys (``data.synthetic.seed=3``); a bare key that names
a hyperparameter (``beta=1``) is shorthand for ``hyperparameters.beta=1``.
Values are parsed as YAML scalars.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from .core_types import ConfigError, Hyperparameters
from .datasets import CorpusSplit, SyntheticSpec, generate_synthetic, ingest_csv

TOP_LEVEL = ("hyperparameters", "data", "out", "seeds", "grid", "rounds", "deterministic")
_HP_FIELDS = {f.name for f in dataclasses.fields(Hyperparameters)}
_CSV_KEYS = {"paths", "schema", "stride", "target", "max_step", "dt"}


@dataclass(frozen=True)
class ExperimentConfig:
    hyperparameters: Hyperparameters = field(default_factory=Hyperparameters)
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    out: str | None = None
    seeds: tuple = ()
    grid: dict = field(default_factory=dict)
    rounds: int = 10
    deterministic: bool = True

    def __post_init__(self):
        if len(self.data) != 1 or next(iter(self.data)) not in ("synthetic", "csv", "archive"):
            raise ConfigError("data must hold exactly one of: synthetic, csv, archive")
        kind, body = next(iter(self.data.items()))
        if kind == "synthetic":
            self.synthetic_spec()
        elif kind == "csv":
            if not isinstance(body, Mapping) or "paths" not in body or "schema" not in body:
                raise ConfigError("csv data needs 'paths' and 'schema'")
            unknown = set(body) - _CSV_KEYS
            if unknown:
                raise ConfigError(f"unknown csv keys: {sorted(unknown)}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        for key, values in self.grid.items():
            if key not in _HP_FIELDS:
                raise ConfigError(f"grid axis {key!r} is not a hyperparameter")
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"grid axis {key!r} must be a non-empty list")

    # -- construction ------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        unknown = set(d) - set(TOP_LEVEL)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        hp = d.get("hyperparameters") or {}
        if not isinstance(hp, Mapping):
            raise ConfigError("hyperparameters must be a mapping")
        try:
            seeds = tuple(int(s) for s in d.get("seeds") or ())
        except (TypeError, ValueError):
            raise ConfigError("seeds must be a list of integers") from None
        return cls(Hyperparameters.from_dict(hp), dict(d.get("data") or {"synthetic": {}}),
                   d.get("out"), seeds, dict(d.get("grid") or {}), int(d.get("rounds", 10)),
                   bool(d.get("deterministic", True)))

    @classmethod
    def load(cls, path: str | Path | None, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        raw: dict = {}
        if path is not None:
            try:
                raw = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError("config file must hold a mapping")
        return cls.from_dict(apply_overrides(raw, overrides))

    @property
    def run_seeds(self) -> tuple:
        """Seeds for multi-seed commands; defaults to the hyperparameter seed."""
        return self.seeds or (self.hyperparameters.seed,)

    def to_dict(self) -> dict:
        return {"hyperparameters": self.hyperparameters.to_dict(), "data": self.data,
                "out": self.out, "seeds": list(self.seeds), "grid": self.grid,
                "rounds": self.rounds, "deterministic": self.deterministic}

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output path is excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # -- data ----------------------------------------------------------------------
    def synthetic_spec(self) -> SyntheticSpec:
        body = self.data.get("synthetic")
        if body is None:
            raise ConfigError("data source is not synthetic")
        hp = self.hyperparameters
        params = {"LC": hp.LC, "LX": hp.LX, "LY": hp.LY, "dt": hp.dt, "max_step": hp.max_step}
        params.update(body)
        try:
            return SyntheticSpec(**params)
        except TypeError as exc:
            raise ConfigError(f"bad synthetic spec: {exc}") from None

    def source(self):
        """A ``SyntheticSpec`` or a loaded ``CorpusSplit`` (what ``resample`` accepts)."""
        kind, body = next(iter(self.data.items()))
        if kind == "synthetic":
            return self.synthetic_spec()
        return self.corpus()

    def corpus(self) -> CorpusSplit:
        kind, body = next(iter(self.data.items()))
        if kind == "synthetic":
            return generate_synthetic(self.synthetic_spec())
        if kind == "archive":
            return CorpusSplit.load(body)
        hp = self.hyperparameters
        paths = body["paths"] if isinstance(body["paths"], list) else [body["paths"]]
        return ingest_csv(paths, body["schema"], hp.LC, hp.LX, hp.LY,
                          stride=int(body.get("stride", 1)), target=body.get("target"),
                          max_step=body.get("max_step"), dt=body.get("dt", hp.dt))


def apply_overrides(raw: Mapping, overrides: Sequence[str]) -> dict:
    out = json.loads(json.dumps(raw, default=str))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1 and parts[0] in _HP_FIELDS:
            parts = ["hyperparameters", parts[0]]
        if parts[0] not in TOP_LEVEL:
            raise ConfigError(f"unknown override key {key!r}")
        try:
            value: Any = yaml.safe_load(text)
        except yaml.YAMLError:
            value = text
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a scalar")
        node[parts[-1]] = value
    return out
