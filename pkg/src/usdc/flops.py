"""FLOPs cost model (in multiply-accumulates) and the resource loss.

All shares are normalized by the MAC count of the uncompressed backbone,
so an uncompressed model without gate networks costs exactly 1.0.
Biases, normalization, softmax and activations are not counted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import RngState, Tensor, count_macs, get_default_dtype, no_grad, precision
from .gating import CANDIDATES, GateCandidate, GateOutput, N_CANDIDATES, gate_hidden_width, gated_block
from .static import PrunePlan, RelaxedStatic, apply_prune
from .vit import VisionTransformer, ViTConfig, classify


def mhsa_macs(tokens: int, embed_dim: int, n_heads: int, head_dim: int) -> int:
    inner = n_heads * head_dim
    return 3 * tokens * embed_dim * inner + 2 * tokens * tokens * inner + tokens * inner * embed_dim


def ffn_macs(tokens: int, embed_dim: int, hidden: int) -> int:
    return 2 * tokens * embed_dim * hidden


def other_macs(config: ViTConfig) -> int:
    """Patch embedding plus classifier (class token only)."""
    return config.num_patches * config.patch_dim * config.embed_dim + config.embed_dim * config.num_classes


def gate_macs(kind: int, config: ViTConfig) -> int:
    _, depth, _, _, tokenwise = CANDIDATES[kind]
    d = config.embed_dim
    per_row = d * gate_hidden_width(d) + gate_hidden_width(d) * 4 if depth == 2 else d * 4
    return per_row * (config.tokens if tokenwise else 1)


def backbone_macs(config: ViTConfig) -> int:
    t, d = config.tokens, config.embed_dim
    per_layer = mhsa_macs(t, d, config.heads, config.head_dim) + ffn_macs(t, d, config.ffn_hidden)
    return config.layers * per_layer + other_macs(config)


@dataclass
class FlopsReport:
    """Normalized per-block shares indexed by original layer."""

    f_attn: np.ndarray  # [L]
    f_ffn: np.ndarray  # [L]
    f_gate: np.ndarray  # [L, K] every candidate
    f_other: float
    total_macs: int
    f_selected_gate: np.ndarray = field(default_factory=lambda: np.zeros(0))  # [L], 0 for deleted layers
    params: int | None = None

    @property
    def model_cost(self) -> float:
        """Cost with every surviving block executed, gate networks excluded."""
        return float(self.f_attn.sum() + self.f_ffn.sum() + self.f_other)

    def to_dict(self) -> dict:
        return {
            "f_attn": self.f_attn.tolist(),
            "f_ffn": self.f_ffn.tolist(),
            "f_gate": self.f_gate.tolist(),
            "f_selected_gate": self.f_selected_gate.tolist(),
            "f_other": self.f_other,
            "total_macs": self.total_macs,
            "model_cost": self.model_cost,
            "params": self.params,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def flops_report(
    config: ViTConfig,
    plan: PrunePlan | None = None,
    gate_kinds: list[int | None] | None = None,
    params: int | None = None,
) -> FlopsReport:
    """Closed-form shares. With a plan, attention/FFN shares are those of the pruned model."""
    total = backbone_macs(config)
    t, d, dh = config.tokens, config.embed_dim, config.head_dim
    L = config.layers
    f_attn = np.zeros(L)
    f_ffn = np.zeros(L)
    for i in range(L):
        heads = config.heads if plan is None else int(plan.kept_heads[i].sum())
        hidden = config.ffn_hidden if plan is None else int(plan.kept_channels[i].sum())
        if plan is None or plan.kept_mhsa[i]:
            f_attn[i] = mhsa_macs(t, d, heads, dh) / total
        if plan is None or plan.kept_ffn[i]:
            f_ffn[i] = ffn_macs(t, d, hidden) / total
    f_gate = np.array([[gate_macs(k, config) / total for k in range(N_CANDIDATES)]] * L)
    selected = np.zeros(L)
    if gate_kinds is not None:
        for i, k in enumerate(gate_kinds):
            if k is not None and (plan is None or plan.layer_alive(i)):
                selected[i] = f_gate[i, k]
    return FlopsReport(f_attn, f_ffn, f_gate, other_macs(config) / total, total, selected, params)


def _const(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def stage1_cost(
    relaxed: RelaxedStatic | None,
    arch_weights: Tensor | None,
    gates: list[GateOutput] | None,
    report: FlopsReport,
) -> Tensor:
    """Differentiable search-stage cost.

    Per layer: g0 * a_keep * mean(head keeps) * F_attn
             + g1 * m_keep * mean(channel keeps) * F_ffn
             + sum_k w_k F_gate[k]; plus F_other.
    ``gates`` are batch-averaged; ``None`` relaxed/arch/gates mean all-keep,
    no gate networks, always-execute respectively.
    """
    L = len(report.f_attn)
    cost = _const(report.f_other)
    for i in range(L):
        attn = _const(report.f_attn[i])
        fnn = _const(report.f_ffn[i])
        if relaxed is not None:
            attn = attn * relaxed.a[i, 0] * relaxed.h[i].mean()
            fnn = fnn * relaxed.m[i, 0] * relaxed.n[i].mean()
        if gates is not None:
            gm = gates[i].mean()
            attn = attn * gm[0]
            fnn = fnn * gm[1]
        cost = cost + attn + fnn
        if arch_weights is not None:
            cost = cost + (arch_weights[i] * _const(report.f_gate[i])).sum()
    return cost


def stage2_cost(gates: list[GateOutput | None], report: FlopsReport, layer_indices: list[int]) -> Tensor:
    """Fine-tune-stage cost of the pruned model.

    ``layer_indices`` maps each surviving layer to its original index; gate
    networks always run, so their cost is unconditional.
    """
    cost = _const(report.f_other)
    for g, i in zip(gates, layer_indices):
        attn = _const(report.f_attn[i])
        fnn = _const(report.f_ffn[i])
        if g is not None:
            gm = g.mean()
            attn = attn * gm[0]
            fnn = fnn * gm[1]
        cost = cost + attn + fnn + _const(report.f_selected_gate[i])
    return cost


def resource_loss(cost: Tensor, f_t: float) -> Tensor:
    if not 0.0 < f_t <= 1.0:
        raise ValueError(f"target ratio must lie in (0, 1], got {f_t}")
    diff = cost - f_t
    return diff * diff


def count_flops_oracle(
    config: ViTConfig,
    plan: PrunePlan | None = None,
    gates: list[tuple[int, int]] | None = None,
    gate_kinds: list[int | None] | None = None,
    exhaustive: bool = False,
) -> int:
    """MACs of one sample's forward pass, counted by executing the real graph.

    Builds the (optionally pruned) model, attaches the gate networks given by
    ``gate_kinds`` (indexed by original layer), and runs a single image through
    it with every matmul instrumented. ``gates`` holds hard (mhsa, ffn)
    execute decisions per original layer; skipped blocks are bypassed and
    contribute nothing.
    """
    with precision(np.float64), no_grad():
        model = VisionTransformer(config, RngState(0))
        if plan is not None:
            model = apply_prune(model, plan)
        candidates = {}
        if gate_kinds is not None:
            for i, k in enumerate(gate_kinds):
                if k is not None:
                    candidates[i] = GateCandidate(k, config.embed_dim, RngState(i + 1)).eval()
        image = np.zeros((1, config.channels, config.image_size, config.image_size))
        with count_macs(exhaustive=exhaustive) as counter:
            z = model.embed(image)
            for layer in model.layers:
                i = layer.index
                if i in candidates:
                    candidates[i](z)
                mh, ff = gates[i] if gates is not None else (1, 1)
                g = GateOutput.constant(1, float(mh), float(ff))
                z = gated_block(z, layer, g, fast=True)
            classify(z, model)
    return counter.total
