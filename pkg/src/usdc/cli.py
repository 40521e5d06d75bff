"""Command-line entry point: ``usdc <verb> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Set ``USDC_SEED`` to override the training and data seeds of any config.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .autograd import no_grad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, apply_env, load_config
from .data import SHAPES, load_dataset, make_shapes10, save_image_dir, save_npz
from .flops import backbone_macs
from .trainer import (
    TrainLog, build_model, evaluate, load_backbone, pretrain_backbone, train_stage1, train_stage2, transition,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("usdc")


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def _config(args) -> ExperimentConfig:
    try:
        if getattr(args, "config", None) is None:
            return apply_env(ExperimentConfig(), os.environ)
        return load_config(args.config)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from e
    except ConfigError as e:
        raise UsageError(f"{args.config or 'environment'}: {e}") from e


def _data(cfg: ExperimentConfig):
    d = cfg.data
    return load_dataset(cfg.paths.dataset, d.n_train, d.n_test, d.seed, d.noise, cfg.model.image_size)


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    out = Path(getattr(args, "out", None) or cfg.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path):
    if path is None:
        raise UsageError("--checkpoint is required")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise UsageError(f"{path}: {e}") from e


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


def _append_log(out: Path, tlog: TrainLog) -> None:
    with open(out / "train_log.jsonl", "a") as f:
        f.write(tlog.to_jsonl())


def _summary(model, test, batch_size: int) -> dict:
    acc, cost = evaluate(model, test, batch_size)
    return {
        "accuracy": acc,
        "model_cost": cost,
        "params_before": int(model.params_before),
        "params_after": int(model.n_params()),
    }


# -- verbs ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    if args.dry_run:
        macs = backbone_macs(cfg.model)
        print(cfg.to_yaml(), end="")
        _emit({"uncompressed_macs": macs, "uncompressed_flops": 2 * macs, "model_cost": 1.0})
        return EXIT_OK
    out = _out_dir(cfg, args)
    train, test = _data(cfg)
    model = build_model(cfg.model, cfg.train)
    (out / "train_log.jsonl").write_text("")
    cfg.save(out / "config.yaml")
    tlog = TrainLog()
    if cfg.train.epochs_pretrain > 0:
        vit, _ = pretrain_backbone(cfg.model, cfg.train, train, test, tlog)
        load_backbone(model, vit)
    train_stage1(model, train, cfg.train, test, tlog)
    stage1_cost = tlog.final_cost(1)
    save_checkpoint(out / "stage1.ckpt", model, model.train_rng)
    if args.stop_after == "stage1":
        _append_log(out, tlog)
        _emit({"stage1_model_cost": stage1_cost, "checkpoint": str(out / "stage1.ckpt")})
        return EXIT_OK
    transition(model)
    save_checkpoint(out / "pruned.ckpt", model)
    train_stage2(model, train, cfg.train, test, tlog)
    _append_log(out, tlog)
    save_checkpoint(out / "final.ckpt", model, model.train_rng)
    (out / "flops_report.json").write_text(model.report.to_json(indent=2, sort_keys=True) + "\n")
    summary = _summary(model, test, cfg.train.batch_size)
    summary["stage1_model_cost"] = stage1_cost
    _emit(summary, out / "summary.json")
    return EXIT_OK


def cmd_prune(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.checkpoint)
    if model.stage != 1:
        raise UsageError(f"{args.checkpoint} is already pruned (stage {model.stage})")
    plan = transition(model, n_check=args.n_check)[1]
    out = Path(args.out or Path(cfg.paths.out_dir) / "pruned.ckpt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model)
    _emit({"checkpoint": str(out), "params_before": int(model.params_before), "params_after": int(model.n_params()),
           "prune_plan": plan.to_dict(), "gate_kinds": model.gate_kinds})
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.checkpoint)
    if model.stage != 2:
        raise UsageError(f"{args.checkpoint} is a stage-1 checkpoint; run 'usdc prune' first")
    out = _out_dir(cfg, args)
    train, test = _data(cfg)
    tlog = TrainLog()
    train_stage2(model, train, cfg.train, test, tlog)
    _append_log(out, tlog)
    save_checkpoint(out / "final.ckpt", model, model.train_rng)
    (out / "flops_report.json").write_text(model.report.to_json(indent=2, sort_keys=True) + "\n")
    _emit(_summary(model, test, cfg.train.batch_size), out / "summary.json")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.checkpoint)
    _, test = _data(cfg)
    bs = args.batch_size or cfg.train.batch_size
    result = _summary(model, test, bs)
    result["inference_batch_size"] = bs
    _emit(result)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = ablation.run_ablation(cfg, args.which)
    text = ablation.to_csv(rows)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def build_report(model, test, batch_size: int) -> dict:
    """Per-layer structure, execute rates and remaining-FLOPs ratios of a stage-2 model."""
    cfg = model.config
    plan = model.plan
    report = model.report
    model.eval()
    rates = {i: np.zeros(2) for i in model.layer_indices}
    costs = []
    x = test[0]
    with no_grad():
        for s in range(0, len(x), batch_size):
            out = model.forward(x[s : s + batch_size], deterministic=True)
            for g, i in zip(out.gates, model.layer_indices):
                rates[i] += g.values.data.sum(axis=0)
            costs.append(out.realized_cost(report, model.layer_indices))
    model.train()
    n = len(x)
    layers = []
    for i in range(cfg.layers):
        alive = plan.layer_alive(i)
        r = (rates[i] / n).tolist() if alive else [0.0, 0.0]
        layers.append({
            "layer": i,
            "alive": alive,
            "mhsa_alive": plan.kept_mhsa[i],
            "ffn_alive": plan.kept_ffn[i],
            "kept_heads": [int(h) for h in np.flatnonzero(plan.kept_heads[i])] if plan.kept_mhsa[i] else [],
            "kept_hidden_dims": int(plan.kept_channels[i].sum()) if plan.kept_ffn[i] else 0,
            "gate": model.gate_kinds[i],
            "execute_rate_mhsa": r[0] if plan.kept_mhsa[i] else 0.0,
            "execute_rate_ffn": r[1] if plan.kept_ffn[i] else 0.0,
        })
    static_remaining = float(report.f_other + sum(
        report.f_attn[i] + report.f_ffn[i] + report.f_selected_gate[i] for i in model.layer_indices))
    return {
        "layers": layers,
        "static_remaining": static_remaining,
        "joint_remaining": float(np.mean(np.concatenate(costs))),
        "params_before": int(model.params_before),
        "params_after": int(model.n_params()),
        "inference_batch_size": batch_size,
    }


def cmd_report(args) -> int:
    cfg = _config(args)
    model, _ = _load(args.checkpoint)
    if model.stage != 2:
        raise UsageError(
            f"{args.checkpoint} is a stage-1 (search) checkpoint; the report describes a pruned model, "
            "so run 'usdc prune' (and optionally 'usdc finetune') first"
        )
    _, test = _data(cfg)
    _emit(build_report(model, test, args.batch_size or cfg.train.batch_size), Path(args.out) if args.out else None)
    return EXIT_OK


def cmd_dataset_gen(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    images, labels = make_shapes10(args.n, seed=args.seed, size=args.size, noise=args.noise)
    out = Path(args.out)
    if args.format == "npz":
        out.parent.mkdir(parents=True, exist_ok=True)
        save_npz(out, images, labels)
    else:
        save_image_dir(out, images, labels)
    _emit({"path": str(out), "n": args.n, "classes": list(SHAPES), "format": args.format})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="usdc", description="Unified static and dynamic ViT compression (toy scale).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_, config=True, checkpoint=False, out=False):
        sp = sub.add_parser(name, help=help_)
        if config:
            sp.add_argument("--config", "-c", help="YAML experiment config (defaults used when omitted)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)
        if out:
            sp.add_argument("--out", "-o")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("train", cmd_train, "stage 1, prune, stage 2", out=True)
    sp.add_argument("--dry-run", action="store_true", help="print resolved config and uncompressed FLOPs only")
    sp.add_argument("--stop-after", choices=["stage1", "stage2"], default="stage2")
    sp = add("prune", cmd_prune, "prune a stage-1 checkpoint", checkpoint=True, out=True)
    sp.add_argument("--n-check", type=int, default=100, help="inputs for the equivalence check")
    add("finetune", cmd_finetune, "stage-2 fine-tuning of a pruned checkpoint", checkpoint=True, out=True)
    sp = add("eval", cmd_eval, "accuracy and realized cost", checkpoint=True)
    sp.add_argument("--batch-size", type=int)
    sp = add("ablate", cmd_ablate, "emit an ablation table as CSV", out=True)
    sp.add_argument("--which", required=True, choices=ablation.ABLATIONS)
    sp = add("report", cmd_report, "per-layer architecture report of a stage-2 checkpoint", checkpoint=True, out=True)
    sp.add_argument("--batch-size", type=int)
    sp = add("dataset-gen", cmd_dataset_gen, "write a shapes-10 dataset", config=False, out=False)
    sp.add_argument("--out", "-o", required=True)
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=16)
    sp.add_argument("--noise", type=float, default=0.25)
    sp.add_argument("--format", choices=["npz", "dir"], default="npz")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usdc {args.verb}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - top-level reporting
        print(f"usdc {args.verb}: failed: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
