"""The compressible network: backbone, decision networks and static masks.

Stage 1 (search) runs every layer through the joint static/dynamic block
with all gate candidates mixed. :meth:`USDCModel.transition` prunes the
backbone, keeps one decision network per surviving layer, and switches to
stage 2, where layers run the plain gated block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import RngState, Tensor, no_grad
from .flops import FlopsReport, flops_report, stage1_cost, stage2_cost
from .gating import (
    N_CANDIDATES,
    GateArchParams,
    GateCandidate,
    GateOutput,
    gated_block,
    mix_candidates,
    sample_gates,
    select_final_gates,
)
from .grouping import build_plan
from .nn import Module
from .static import PrunePlan, StaticParams, apply_prune, derive_prune_plan, joint_block, masked_forward
from .vit import VisionTransformer, ViTConfig, classify


class EquivalenceError(RuntimeError):
    """The pruned network disagrees with the hard-masked network."""


@dataclass
class ForwardResult:
    logits: Tensor
    cost: Tensor
    gates: list[GateOutput]

    def realized_cost(self, report: FlopsReport, layer_indices: list[int], selected: bool = True) -> np.ndarray:
        """Per-sample cost of the blocks each sample actually executed."""
        b = self.logits.shape[0]
        cost = np.full(b, report.f_other)
        for g, i in zip(self.gates, layer_indices):
            v = g.values.data
            cost += v[:, 0] * report.f_attn[i] + v[:, 1] * report.f_ffn[i]
            if selected:
                cost += report.f_selected_gate[i]
        return cost


class USDCModel(Module):
    def __init__(
        self,
        config: ViTConfig,
        seed: int = 0,
        use_static: bool = True,
        use_dynamic: bool = True,
        tau_skip: float = 5.0,
        tau_search: float = 2.0,
        tau_static: float = 2.0,
        gate_kinds: list[int] | None = None,
        gate_exec_bias: float = 0.0,
    ):
        rng = RngState(seed)
        self.config = config
        self.use_static = use_static
        self.use_dynamic = use_dynamic
        self.tau_skip = tau_skip
        self.gate_noise = 1.0  # Gumbel noise multiplier for skip gates
        self.static_hard = False  # straight-through 0/1 static keeps
        self.static_noise = 1.0
        self.stage = 1
        self.vit = VisionTransformer(config, rng)
        self.params_before = self.vit.n_params()
        L = config.layers
        # fixed_kinds pins one candidate per layer (manual gate choice, no search)
        self.fixed_kinds = list(gate_kinds) if gate_kinds is not None else None
        if use_dynamic:
            kinds = range(N_CANDIDATES)
            self.candidates = [
                [GateCandidate(k, config.embed_dim, rng, exec_bias=gate_exec_bias) for k in kinds]
                if self.fixed_kinds is None
                else [GateCandidate(self.fixed_kinds[i], config.embed_dim, rng, exec_bias=gate_exec_bias)]
                for i in range(L)
            ]
            self.arch = GateArchParams.init(L, N_CANDIDATES, tau_search) if self.fixed_kinds is None else None
        else:
            self.candidates = []
            self.arch = None
        self.static = StaticParams.init(config, rng, tau_static) if use_static else None
        self.gates: dict[int, GateCandidate] = {}
        self.gate_kinds: list[int | None] = [None] * L
        self.plan: PrunePlan | None = None
        self.report = flops_report(config)

    # -- parameter groups -------------------------------------------------
    def weight_parameters(self) -> list[Tensor]:
        params = self.vit.parameters()
        for row in self.candidates:
            for cand in row:
                params += cand.parameters()
        for i in sorted(self.gates):
            params += self.gates[i].parameters()
        return params

    def arch_parameters(self) -> list[Tensor]:
        params = []
        if self.arch is not None:
            params.append(self.arch.logits)
        if self.static is not None:
            params += self.static.parameters()
        return params

    def named_tensors(self) -> dict[str, Tensor]:
        """Every learnable tensor under a stable name (checkpoint order)."""
        out = {f"vit.{k}": v for k, v in self.vit.named_parameters()}
        for i, row in enumerate(self.candidates):
            for cand in row:
                out.update({f"cand.{i}.{cand.kind}.{k}": v for k, v in cand.named_parameters()})
        for i in sorted(self.gates):
            out.update({f"gate.{i}.{k}": v for k, v in self.gates[i].named_parameters()})
        if self.arch is not None:
            out["arch.logits"] = self.arch.logits
        if self.static is not None:
            out.update({f"static.{k}": v for k, v in self.static.tensors().items()})
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, row in enumerate(self.candidates):
            for cand in row:
                out.update({f"cand.{i}.{cand.kind}.{k}": v for k, v in cand.buffers()})
        for i in sorted(self.gates):
            out.update({f"gate.{i}.{k}": v for k, v in self.gates[i].buffers()})
        return out

    @property
    def layer_indices(self) -> list[int]:
        return self.vit.layer_indices

    def n_params(self) -> int:
        """Deployed parameter count: backbone plus the decision networks that run."""
        n = self.vit.n_params()
        if self.stage == 2:
            n += sum(g.n_params() for g in self.gates.values())
        return n

    # -- forward ----------------------------------------------------------
    def forward(
        self,
        images,
        rng: RngState | None = None,
        strategy: str = "group",
        hard: bool = True,
        deterministic: bool = False,
    ) -> ForwardResult:
        """Run a mini-batch.

        ``deterministic`` removes all Gumbel noise, uses batch-level gate
        sharing, and in stage 2 takes the bypassing fast path.
        """
        if deterministic:
            rng, strategy = None, "batch"
        if self.stage == 1:
            return self._forward_search(images, rng, strategy, hard, deterministic)
        return self._forward_finetune(images, rng, strategy, hard, deterministic)

    __call__ = forward

    def _plan(self, batch: int, strategy: str, rng):
        return build_plan(batch, strategy, rng) if self.use_dynamic else None

    def _forward_search(self, images, rng, strategy, hard, deterministic) -> ForwardResult:
        z = self.vit.embed(images)
        b = z.shape[0]
        relaxed = self.static.relax(rng, self.static_hard, self.static_noise) if self.static is not None else None
        weights = self.arch.weights(rng) if self.arch is not None else None
        plan = self._plan(b, strategy, rng)
        gates = []
        for i, layer in enumerate(self.vit.layers):
            if self.use_dynamic:
                w = weights[i] if weights is not None else None
                feats = mix_candidates(z, self.candidates[i], weights=w)
                g = sample_gates(feats, self.tau_skip, hard, rng, plan, deterministic, self.gate_noise)
            else:
                g = GateOutput.constant(b)
            if relaxed is not None:
                z = joint_block(z, layer, relaxed.a[i], relaxed.m[i], relaxed.h[i], relaxed.n[i], g)
            else:
                z = gated_block(z, layer, g)
            gates.append(g)
        logits = classify(z, self.vit)
        if self.use_dynamic:
            arch_w = weights
            if arch_w is None:  # pinned candidates: one-hot over the candidate table
                onehot = np.zeros((len(self.vit.layers), N_CANDIDATES), dtype=z.dtype)
                onehot[np.arange(len(self.fixed_kinds)), self.fixed_kinds] = 1.0
                arch_w = Tensor(onehot)
        else:
            arch_w = None
        cost = stage1_cost(relaxed, arch_w, gates if self.use_dynamic else None, self.report)
        return ForwardResult(logits, cost, gates)

    def _forward_finetune(self, images, rng, strategy, hard, deterministic) -> ForwardResult:
        z = self.vit.embed(images)
        b = z.shape[0]
        plan = self._plan(b, strategy, rng)
        fast = deterministic and hard
        gates = []
        for layer in self.vit.layers:
            if self.use_dynamic:
                feats = self.gates[layer.index](z)
                g = sample_gates(feats, self.tau_skip, hard, rng, plan, deterministic, self.gate_noise)
            else:
                g = GateOutput.constant(b)
            z = gated_block(z, layer, g, fast=fast)
            gates.append(g)
        logits = classify(z, self.vit)
        cost = stage2_cost(gates, self.report, self.layer_indices)
        return ForwardResult(logits, cost, gates)

    def predict_logits(self, images, batch_size: int | None = None) -> np.ndarray:
        """Inference logits with batch-level gates over chunks of ``batch_size``."""
        self.eval()
        n = len(images)
        bs = batch_size or n
        out = []
        with no_grad():
            for s in range(0, n, bs):
                out.append(self.forward(images[s : s + bs], deterministic=True).logits.data)
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))

    # -- stage transition -------------------------------------------------
    def selected_kinds(self) -> list[int | None]:
        if not self.use_dynamic:
            return [None] * self.config.layers
        if self.fixed_kinds is not None:
            return list(self.fixed_kinds)
        return select_final_gates(self.arch)

    def transition(self, check: bool = True, n_check: int = 100, tol: float = 1e-4, seed: int = 0) -> PrunePlan:
        """Prune by the static logits, keep the argmax decision network per layer, enter stage 2."""
        if self.stage != 1:
            raise RuntimeError("transition() needs a stage-1 model")
        plan = derive_prune_plan(self.static) if self.static is not None else PrunePlan.keep_all(self.config)
        kinds = self.selected_kinds()
        pruned = apply_prune(self.vit, plan)
        if check:
            check_equivalence(self.vit, pruned, plan, n_check, tol, seed)
        self.enter_stage2(plan, kinds, pruned)
        return plan

    def enter_stage2(self, plan: PrunePlan, kinds: list[int | None], pruned: VisionTransformer | None = None) -> None:
        """Swap in the pruned backbone and one decision network per surviving layer."""
        if pruned is None:
            pruned = apply_prune(self.vit, plan)
        gates = {}
        if self.use_dynamic:
            for layer in pruned.layers:
                i = layer.index
                if self.candidates:
                    row = self.candidates[i]
                    gates[i] = row[0] if self.fixed_kinds is not None else row[kinds[i]]
                else:
                    gates[i] = GateCandidate(kinds[i], self.config.embed_dim)
        self.gate_kinds = [kinds[i] if plan.layer_alive(i) else None for i in range(self.config.layers)]
        self.vit = pruned
        self.gates = gates
        self.candidates = []
        self.arch = None
        self.static = None
        self.plan = plan
        self.stage = 2
        self.report = flops_report(self.config, plan, self.gate_kinds, params=self.n_params())


def check_equivalence(full: VisionTransformer, pruned: VisionTransformer, plan: PrunePlan, n_inputs: int = 100,
                      tol: float = 1e-4, seed: int = 0) -> float:
    """Max relative error between pruned and hard-masked forwards over random inputs and gate patterns."""
    rng = RngState(seed)
    cfg = full.config
    shape = (n_inputs, cfg.channels, cfg.image_size, cfg.image_size)
    images = rng.normal(shape).astype(full.patch.weight.dtype)
    pattern = rng.uniform((n_inputs, cfg.layers, 2)) < 0.7
    dt = full.patch.weight.dtype
    gates_full = [GateOutput(Tensor(pattern[:, i, :].astype(dt)), True) for i in range(cfg.layers)]
    with no_grad():
        ref = masked_forward(full, images, plan, gates_full).data
        z = pruned.embed(images)
        for layer in pruned.layers:
            z = gated_block(z, layer, gates_full[layer.index])
        out = classify(z, pruned).data
    err = float(np.max(np.abs(out - ref)) / max(np.max(np.abs(ref)), 1e-12))
    if err > tol:
        raise EquivalenceError(f"pruned model deviates from the hard-masked model: rel err {err:.3e} > {tol:g}")
    return err
