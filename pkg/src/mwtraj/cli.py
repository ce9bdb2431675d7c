"""Command line: generate, train, evaluate, ablate, export-attention.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training diverged.
Outputs go to ``--out``, else the config's ``out``, else
``$MWTRAJ_OUT/<verb>-<config hash>`` (``$MWTRAJ_OUT`` defaults to ``runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import ExperimentConfig, apply_overrides
from .core_types import ConfigError, InvalidInputError
from .datasets import DataError, archive_hash
from .evaluation import EvaluationReport, evaluate_split, run_rounds
from .manager import extract_attention, write_attention
from .training import (Trainer, TrainingDiverged, ablation_matrix, format_ablation, load_models,
                       set_deterministic)

OUT_ENV = "MWTRAJ_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("mwtraj")


def _config(args, extra: list[str] | None = None) -> ExperimentConfig:
    overrides = list(args.override or []) + list(extra or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"{args.seed_key}={args.seed}")
    cfg = ExperimentConfig.load(args.config, overrides)
    if cfg.deterministic:
        set_deterministic()
    return cfg


def _out(args, cfg: ExperimentConfig, verb: str) -> Path:
    if args.out:
        root = Path(args.out)
    elif cfg.out:
        root = Path(cfg.out)
    else:
        root = Path(os.environ.get(OUT_ENV, "runs")) / f"{verb}-{cfg.config_hash()}"
    root.mkdir(parents=True, exist_ok=True)
    return root


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# ---------------------------------------------------------------- verbs ---

def cmd_generate(args) -> int:
    args.seed_key = "data.synthetic.seed"
    cfg = _config(args)
    corpus = cfg.corpus()
    out = _out(args, cfg, "generate")
    digest = corpus.save(out)
    print(f"corpus: {out}  samples train/val/test = "
          f"{len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)}  hash {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    args.seed_key = "seed"
    cfg = _config(args)
    corpus = cfg.corpus()
    out = _out(args, cfg, "train")
    ckpt = out / "checkpoint"
    log_path = out / "metrics.jsonl"
    if args.resume:
        trainer = Trainer.resume(args.resume, corpus, log_path=log_path, hp=cfg.hyperparameters)
    else:
        log_path.unlink(missing_ok=True)
        trainer = Trainer(cfg.hyperparameters, corpus, log_path=log_path)
    trainer.run(args.until)
    finished = trainer.state.iteration >= cfg.hyperparameters.iterations or trainer.stopped
    d = trainer.evaluate()
    extra = {"experiment": cfg.to_dict(), "config_hash": cfg.config_hash()}
    trainer.save(ckpt, extra)
    summary = {"config_hash": cfg.config_hash(), "iteration": trainer.state.iteration,
               "finished": finished, "volumes": trainer.state.volumes.tolist(), **d.to_dict()}
    _write_json(out / "summary.json", summary)
    print(f"checkpoint: {ckpt}")
    print(f"iteration {trainer.state.iteration}  val top1 {d.top1_loss:.4f}  "
          f"accuracy {d.manager_accuracy:.3f}  entropy {d.selection_entropy:.3f}")
    print(f"trap flag: {d.flag}")
    return EXIT_OK


def _checkpoint_config(args) -> ExperimentConfig:
    args.seed_key = "seed"
    if args.config is None and getattr(args, "checkpoint", None):
        stored = json.loads((Path(args.checkpoint) / "config.json").read_text())
        if "experiment" in stored:
            raw = apply_overrides(stored["experiment"], args.override or [])
            return ExperimentConfig.from_dict(raw)
    return _config(args)


def cmd_evaluate(args) -> int:
    if args.rounds:
        args.seed_key = "seed"
        cfg = _config(args)
        hp = cfg.hyperparameters
        if args.k is not None:
            hp = hp.replace(k=args.k)
        report = run_rounds(hp, cfg.source(), rounds=args.rounds)
        report.extra["experiment_hash"] = cfg.config_hash()
    else:
        if not args.checkpoint:
            raise ConfigError("evaluate needs --checkpoint or --rounds")
        cfg = _checkpoint_config(args)
        if cfg.deterministic:
            set_deterministic()
        manager, workers = load_models(args.checkpoint)
        k = args.k if args.k is not None else min(cfg.hyperparameters.k, len(workers))
        if not 1 <= k <= len(workers):
            raise ConfigError(f"k={k} must be in 1..{len(workers)}")
        split = getattr(cfg.corpus(), args.split)
        s = evaluate_split(manager, workers, split, k, cfg.hyperparameters.worker_loss)
        report = EvaluationReport(f"MW-{len(workers)}", [s["top1"]], [s["topk"]],
                                  [s["accuracy"]], [], cfg.config_hash(), k=k,
                                  extra={"split": args.split, "n": s["n"]})
    out = _out(args, cfg, "evaluate")
    report.save(out)
    print(report.table("top1"))
    d = report.to_dict()
    print(f"top1 {d['top1']['MEAN']:.4f}  top{report.k} {d['topk']['MEAN']:.4f}  "
          f"accuracy {d['accuracy']['MEAN']:.3f}")
    return EXIT_OK


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"grid axis {item!r} is not key=v1,v2")
        key, text = item.split("=", 1)
        grid[key.strip()] = [yaml.safe_load(v) for v in text.split(",")]
    return grid


def cmd_ablate(args) -> int:
    args.seed_key = "seed"
    cfg = _config(args)
    grid = dict(cfg.grid)
    grid.update(_parse_grid(args.grid))
    if not grid:
        raise ConfigError("ablate needs a grid (config 'grid' or --grid key=v1,v2)")
    cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "grid": grid})
    corpus = cfg.corpus()
    rows = ablation_matrix(cfg.hyperparameters, grid, corpus, seeds=cfg.run_seeds)
    out = _out(args, cfg, "ablate")
    _write_json(out / "ablation.json", {"config_hash": cfg.config_hash(), "rows": rows})
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = _checkpoint_config(args)
    manager, _ = load_models(args.checkpoint)
    split = getattr(cfg.corpus(), args.split)
    if not 0 <= args.sample < len(split):
        raise ConfigError(f"sample {args.sample} outside 0..{len(split) - 1}")
    weights = extract_attention(manager, split.dense[args.sample], split.codes[args.sample])
    out = _out(args, cfg, "attention")
    path = out / f"attention_{args.split}_{args.sample}.txt"
    write_attention(path, weights, {"split": args.split, "sample": args.sample,
                                    "config_hash": cfg.config_hash()})
    print(f"attention: {path}  shape {list(weights.shape)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwtraj", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable (e.g. beta=1, data.synthetic.seed=3)")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("generate", help="write a corpus archive"))
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train a manager and K workers"))
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint directory")
    p.add_argument("--until", type=int, metavar="N",
                   help="stop after N total iterations (resume later)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="top-1/top-k loss and manager accuracy"))
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("-k", type=int)
    p.add_argument("--rounds", type=int, help="re-sample and re-train this many rounds")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("ablate", help="train every cell of a hyperparameter grid"))
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2",
                   help="grid axis, repeatable (adds to the config's grid)")
    p.set_defaults(func=cmd_ablate)

    p = common(sub.add_parser("export-attention", help="manager attention maps for one sample"),
               seed=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_export_attention)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, InvalidInputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; state {exc.snapshot}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
