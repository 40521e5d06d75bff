"""Toy-scale ablation tables: batch-size consistency, decision networks, pruning options, group splits."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging

import numpy as np

from .config import ExperimentConfig
from .data import load_dataset
from .gating import CANDIDATE_NAMES
from .trainer import evaluate, pretrain_backbone, run_pipeline

log = logging.getLogger(__name__)

ABLATIONS = ("batch-size", "gate-arch", "prune-options", "group-split")
PRUNE_OPTIONS = {"static": (True, False), "dynamic": (False, True), "static&dynamic": (True, True)}
# split column label -> gate strategy
SPLIT_STRATEGIES = {"avg-32": "avg-32", "avg-8": "avg-8", "random": "random", "recursive": "group"}


class RunCache:
    """Memoizes trained pipelines so several tables can share runs."""

    def __init__(self):
        self._runs: dict[tuple, tuple] = {}
        self._backbones: dict[tuple, tuple] = {}

    def __len__(self):
        return len(self._runs)

    def get(self, cfg: ExperimentConfig, seed: int, *, strategy=None, use_static=None, use_dynamic=None, gate_kinds=None):
        train_cfg = dataclasses.replace(
            cfg.train,
            seed=seed,
            gate_strategy=strategy if strategy is not None else cfg.train.gate_strategy,
            use_static=cfg.train.use_static if use_static is None else use_static,
            use_dynamic=cfg.train.use_dynamic if use_dynamic is None else use_dynamic,
        )
        kinds = tuple(gate_kinds) if gate_kinds is not None else None
        key = (repr(cfg.model), repr(train_cfg), repr(cfg.data), cfg.paths.dataset, kinds)
        if key not in self._runs:
            data = dataclasses.replace(cfg.data, seed=seed)
            train, test = load_dataset(cfg.paths.dataset, data.n_train, data.n_test, data.seed, data.noise, cfg.model.image_size)
            log.info("training variant seed=%d strategy=%s static=%s dynamic=%s kinds=%s", seed,
                     train_cfg.gate_strategy, train_cfg.use_static, train_cfg.use_dynamic, kinds)
            pretrained = None
            if train_cfg.epochs_pretrain > 0:
                t = train_cfg
                bkey = (repr(cfg.model), repr(cfg.data), cfg.paths.dataset, seed, t.epochs_pretrain, t.lr,
                        t.weight_decay, t.batch_size)
                if bkey not in self._backbones:
                    self._backbones[bkey] = pretrain_backbone(cfg.model, train_cfg, train, test)
                pretrained = self._backbones[bkey]
            model, tlog, summary = run_pipeline(cfg.model, train_cfg, train, test,
                                                gate_kinds=list(kinds) if kinds else None, pretrained=pretrained)
            self._runs[key] = (model, tlog, summary, test)
        return self._runs[key]


def spread(accuracies) -> float:
    """Max minus min accuracy, in percentage points."""
    a = np.asarray(list(accuracies), dtype=np.float64)
    return float((a.max() - a.min()) * 100.0)


def batch_size_table(cfg: ExperimentConfig, cache: RunCache | None = None) -> list[dict]:
    """One row per (strategy, seed, inference batch size)."""
    cache = cache or RunCache()
    rows = []
    for strategy in cfg.ablation.strategies:
        for seed in cfg.ablation.seeds:
            model, _, _, test = cache.get(cfg, seed, strategy=strategy)
            for bs in cfg.ablation.inference_batch_sizes:
                acc, cost = evaluate(model, test, inference_batch_size=bs)
                rows.append({"strategy": strategy, "seed": seed, "inference_batch_size": bs,
                             "accuracy": acc, "model_cost": cost})
    return rows


def batch_size_spreads(rows: list[dict]) -> dict[str, float]:
    """Median over seeds of the per-seed accuracy spread across inference batch sizes."""
    per: dict[str, dict[int, list[float]]] = {}
    for r in rows:
        per.setdefault(r["strategy"], {}).setdefault(r["seed"], []).append(r["accuracy"])
    return {s: float(np.median([spread(v) for v in seeds.values()])) for s, seeds in per.items()}


def _metric_rows(columns: dict[str, list[tuple[float, float]]]) -> list[dict]:
    """Median accuracy (percent) and model cost per column."""
    acc = {"metric": "accuracy"}
    cost = {"metric": "model_cost"}
    for name, runs in columns.items():
        acc[name] = float(np.median([a for a, _ in runs])) * 100.0
        cost[name] = float(np.median([c for _, c in runs]))
    return [acc, cost]


def _final(cache: RunCache, cfg: ExperimentConfig, seed: int, **kw) -> tuple[float, float]:
    _, _, summary, _ = cache.get(cfg, seed, **kw)
    return summary["accuracy"], summary["model_cost"]


def gate_arch_table(cfg: ExperimentConfig, cache: RunCache | None = None) -> list[dict]:
    """Manually fixed decision networks versus the searched ones."""
    cache = cache or RunCache()
    L = cfg.model.layers
    columns = {}
    for kind in cfg.ablation.manual_gates:
        columns[CANDIDATE_NAMES[kind]] = [_final(cache, cfg, s, gate_kinds=[kind] * L) for s in cfg.ablation.seeds]
    columns["searched"] = [_final(cache, cfg, s) for s in cfg.ablation.seeds]
    return _metric_rows(columns)


def prune_options_table(cfg: ExperimentConfig, cache: RunCache | None = None) -> list[dict]:
    cache = cache or RunCache()
    columns = {
        name: [_final(cache, cfg, s, use_static=st, use_dynamic=dy) for s in cfg.ablation.seeds]
        for name, (st, dy) in PRUNE_OPTIONS.items()
    }
    return _metric_rows(columns)


def group_split_table(cfg: ExperimentConfig, cache: RunCache | None = None) -> list[dict]:
    cache = cache or RunCache()
    columns = {
        label: [_final(cache, cfg, s, strategy=SPLIT_STRATEGIES[label]) for s in cfg.ablation.seeds]
        for label in cfg.ablation.split_methods
    }
    return _metric_rows(columns)


TABLES = {
    "batch-size": batch_size_table,
    "gate-arch": gate_arch_table,
    "prune-options": prune_options_table,
    "group-split": group_split_table,
}


def run_ablation(cfg: ExperimentConfig, which: str, cache: RunCache | None = None) -> list[dict]:
    if which not in TABLES:
        raise ValueError(f"unknown ablation {which!r}; choose from {', '.join(ABLATIONS)}")
    return TABLES[which](cfg, cache)


def to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: f"{v:.6g}" if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()
