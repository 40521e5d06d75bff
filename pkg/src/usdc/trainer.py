"""Two-stage optimization: joint search/compression, prune, fine-tune under gating."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .autograd import RngState, Tensor, cross_entropy, no_grad
from .flops import resource_loss
from .model import USDCModel
from .nn import AdamW, cosine_lr
from .vit import VisionTransformer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable training failure."""


@dataclass
class TrainConfig:
    gamma: float = 100.0
    f_t: float = 0.65
    tau_skip: float = 5.0
    tau_search: float = 2.0
    tau_static: float = 2.0
    lr: float = 5e-4
    arch_lr: float = 0.02
    weight_decay: float = 0.05
    epochs_pretrain: int = 0
    epochs_stage1: int = 30
    epochs_stage2: int = 20
    batch_size: int = 64
    gate_strategy: str = "group"
    use_static: bool = True
    use_dynamic: bool = True
    noise_anneal: float = 0.7
    static_harden: float = 0.5
    gate_exec_bias: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.f_t <= 1.0:
            raise ValueError(f"f_t must lie in (0, 1], got {self.f_t}")
        for name in ("tau_skip", "tau_search", "tau_static"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("lr", "arch_lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("noise_anneal", "static_harden"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("epochs_stage1", "epochs_stage2", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive int")
        if int(self.epochs_pretrain) < 0:
            raise ValueError("epochs_pretrain must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    stage: int
    epoch: int
    step: int
    l_cls: float
    l_res: float
    l_total: float
    model_cost: float
    exec_rates: list[list[float]]


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def records(self) -> list[dict]:
        out = []
        for s in self.steps:
            out.append({"kind": "step", **asdict(s)})
        for e in self.epochs:
            out.append({"kind": "epoch", **e})
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def final_cost(self, stage: int) -> float:
        """Mean logged model cost over the last epoch of ``stage``."""
        recs = [s for s in self.steps if s.stage == stage]
        if not recs:
            raise ValueError(f"no steps logged for stage {stage}")
        last = recs[-1].epoch
        return float(np.mean([s.model_cost for s in recs if s.epoch == last]))


def build_model(vit_config, cfg: TrainConfig, gate_kinds=None) -> USDCModel:
    return USDCModel(
        vit_config,
        seed=cfg.seed,
        use_static=cfg.use_static,
        use_dynamic=cfg.use_dynamic,
        tau_skip=cfg.tau_skip,
        tau_search=cfg.tau_search,
        tau_static=cfg.tau_static,
        gate_kinds=gate_kinds,
        gate_exec_bias=cfg.gate_exec_bias,
    )


def _optimizer(model, cfg: TrainConfig) -> AdamW:
    if isinstance(model, VisionTransformer):
        return AdamW([{"params": model.parameters(), "weight_decay": cfg.weight_decay, "lr_scale": 1.0}], lr=cfg.lr)
    groups = [{"params": model.weight_parameters(), "weight_decay": cfg.weight_decay, "lr_scale": 1.0}]
    arch = model.arch_parameters()
    if arch:
        scale = cfg.arch_lr / cfg.lr if cfg.lr > 0 else 0.0
        groups.append({"params": arch, "weight_decay": 0.0, "lr_scale": scale})
    return AdamW(groups, lr=cfg.lr)


def _run_stage(
    model: USDCModel | VisionTransformer,
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    epochs: int,
    stage: int,
    log_: TrainLog,
    val: tuple[np.ndarray, np.ndarray] | None,
    on_step: Callable[[StepRecord], None] | None,
) -> TrainLog:
    x, y = data
    n = len(x)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total_steps = epochs * steps_per_epoch
    opt = _optimizer(model, cfg)
    rng = RngState(cfg.seed * 1000 + stage)
    step = 0
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(n)
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            for group in opt.groups:
                group["lr"] = cosine_lr(cfg.lr, step, total_steps) * group["lr_scale"]
            if stage == 0:
                l_cls = cross_entropy(model(x[idx]), y[idx])
                l_res, cost, gates = Tensor(0.0), Tensor(1.0), []
                total = l_cls
            else:
                model.gate_noise = _noise_scale(stage, step, total_steps, cfg.noise_anneal)
                if stage == 1:
                    model.static_hard, model.static_noise = _static_schedule(step, total_steps, cfg.static_harden)
                out = model.forward(x[idx], rng=rng, strategy=cfg.gate_strategy)
                l_cls = cross_entropy(out.logits, y[idx])
                l_res = resource_loss(out.cost, cfg.f_t)
                total = l_cls + cfg.gamma * l_res
                cost, gates = out.cost, out.gates
            if not np.isfinite(total.data).all():
                raise TrainingError(
                    f"non-finite loss at stage {stage} epoch {epoch} step {step}: "
                    f"L_cls={l_cls.item()} L_res={l_res.item()} cost={cost.item()}"
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            rec = StepRecord(
                stage, epoch, step, l_cls.item(), l_res.item(), total.item(), cost.item(),
                [g.values.data.mean(axis=0).tolist() for g in gates],
            )
            log_.steps.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        summary = {"stage": stage, "epoch": epoch, "model_cost": float(np.mean(
            [r.model_cost for r in log_.steps if r.stage == stage and r.epoch == epoch]))}
        if val is not None:
            if stage == 0:
                acc, ev_cost = _backbone_accuracy(model, val, cfg.batch_size), 1.0
            else:
                acc, ev_cost = evaluate(model, val, inference_batch_size=cfg.batch_size)
            summary.update(accuracy=acc, eval_cost=ev_cost)
        log_.epochs.append(summary)
        log.info("stage %d epoch %d %s", stage, epoch, summary)
    model.train_rng = rng
    if stage != 0:
        model.gate_noise = 1.0
        model.static_hard, model.static_noise = False, 1.0
    return log_


def _noise_scale(stage: int, step: int, total_steps: int, anneal: float) -> float:
    """Stage-2 skip-gate noise: decays linearly to 0 over the first ``anneal`` of the steps."""
    if stage != 2 or anneal <= 0.0:
        return 1.0
    return max(0.0, 1.0 - step / (anneal * total_steps))


def _static_schedule(step: int, total_steps: int, harden: float) -> tuple[bool, float]:
    """Stage-1 static keeps: soft, then hard for the last ``harden`` of the steps.

    During the hard phase the noise decays linearly to 0 by its midpoint, so
    training ends on the plan that the transition will derive.
    """
    start = (1.0 - harden) * total_steps
    if harden <= 0.0 or step < start:
        return False, 1.0
    frac = (step - start) / (harden * total_steps)
    return True, max(0.0, 1.0 - 2.0 * frac)


def pretrain_backbone(vit_config, cfg: TrainConfig, data, val=None, log_: TrainLog | None = None, on_step=None):
    """Plain supervised training of the backbone, initialized exactly as ``build_model`` does."""
    vit = VisionTransformer(vit_config, RngState(cfg.seed))
    log_ = log_ if log_ is not None else TrainLog()
    if cfg.epochs_pretrain > 0:
        _run_stage(vit, data, cfg, cfg.epochs_pretrain, 0, log_, val, on_step)
    return vit, log_


def _backbone_accuracy(vit: VisionTransformer, data, batch_size: int) -> float:
    x, y = data
    vit.eval()
    with no_grad():
        pred = np.concatenate([vit(x[s : s + batch_size]).data.argmax(axis=1) for s in range(0, len(x), batch_size)])
    vit.train()
    return float((pred == y).mean())


def train_stage1(model: USDCModel, data, cfg: TrainConfig, val=None, log_: TrainLog | None = None, on_step=None):
    """Jointly train weights, static logits and gate-architecture logits."""
    if model.stage != 1:
        raise RuntimeError("train_stage1 needs a stage-1 model")
    log_ = log_ if log_ is not None else TrainLog()
    _run_stage(model, data, cfg, cfg.epochs_stage1, 1, log_, val, on_step)
    return model, model.static, model.arch, log_


def transition(model: USDCModel, check: bool = True, n_check: int = 100):
    """Prune and fix one decision network per layer; aborts if equivalence fails."""
    plan = model.transition(check=check, n_check=n_check)
    return model, plan


def train_stage2(model: USDCModel, data, cfg: TrainConfig, val=None, log_: TrainLog | None = None, on_step=None):
    """Fine-tune backbone and decision-network weights of the pruned model."""
    if model.stage != 2:
        raise RuntimeError("train_stage2 needs a pruned (stage-2) model")
    log_ = log_ if log_ is not None else TrainLog()
    _run_stage(model, data, cfg, cfg.epochs_stage2, 2, log_, val, on_step)
    return model, log_


def evaluate(model: USDCModel, data, inference_batch_size: int = 64) -> tuple[float, float]:
    """Top-1 accuracy and mean realized cost with batch-level gates per inference chunk."""
    x, y = data
    model.eval()
    correct = 0
    costs = []
    bs = max(1, int(inference_batch_size))
    with no_grad():
        for s in range(0, len(x), bs):
            out = model.forward(x[s : s + bs], deterministic=True)
            correct += int((out.logits.data.argmax(axis=1) == y[s : s + bs]).sum())
            if model.stage == 2:
                costs.append(out.realized_cost(model.report, model.layer_indices))
            else:
                costs.append(np.full(len(out.logits), out.cost.item()))
    model.train()
    return correct / len(x), float(np.mean(np.concatenate(costs)))


def load_backbone(model: USDCModel, vit: VisionTransformer) -> None:
    """Copy pretrained backbone weights into a stage-1 model."""
    src = dict(vit.named_parameters())
    for name, p in model.vit.named_parameters():
        p.data = src[name].data.copy()


def run_pipeline(vit_config, cfg: TrainConfig, train, val=None, on_step=None, gate_kinds=None, pretrained=None):
    """Optional pretraining, stage 1, transition, stage 2. Returns (model, log, summary).

    ``pretrained`` is a ``(backbone, log)`` pair from ``pretrain_backbone``
    for the same seed; it is reused instead of training a new one.
    """
    model = build_model(vit_config, cfg, gate_kinds)
    log_ = TrainLog()
    if cfg.epochs_pretrain > 0:
        vit, pre_log = pretrained if pretrained is not None else pretrain_backbone(vit_config, cfg, train, val)
        load_backbone(model, vit)
        log_.steps.extend(pre_log.steps)
        log_.epochs.extend(pre_log.epochs)
    train_stage1(model, train, cfg, val, log_, on_step)
    stage1_cost = log_.final_cost(1)
    transition(model)
    train_stage2(model, train, cfg, val, log_, on_step)
    summary = {"stage1_model_cost": stage1_cost, "params_before": model.params_before, "params_after": model.n_params()}
    if val is not None:
        acc, cost = evaluate(model, val, cfg.batch_size)
        summary.update(accuracy=acc, model_cost=cost)
    return model, log_, summary


TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig))
