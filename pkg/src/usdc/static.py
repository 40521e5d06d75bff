"""Learnable structural masks and explicit pruning.

Every prunable unit (head, FFN channel, MHSA block, FFN block) carries a
pair of logits ``(keep, drop)``. During search they are relaxed with a soft
Gumbel-Softmax; afterwards a unit is removed when ``keep < drop``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import RngState, Tensor, get_default_dtype, gumbel_softmax
from .gating import GateOutput, gated_block
from .nn import parameter
from .vit import EncoderLayer, VisionTransformer, ViTConfig, classify, ffn, mhsa

INIT_NOISE = 1e-3


@dataclass
class StaticParams:
    alpha_a: Tensor  # [L, 2] MHSA block
    alpha_m: Tensor  # [L, 2] FFN block
    alpha_h: Tensor  # [L, H, 2] heads
    alpha_n: Tensor  # [L, N, 2] FFN hidden channels
    tau_static: float = 2.0

    @classmethod
    def init(cls, config: ViTConfig, rng: RngState | None = None, tau_static: float = 2.0) -> "StaticParams":
        L, H, N = config.layers, config.heads, config.ffn_hidden

        def make(shape):
            noise = rng.normal(shape, scale=INIT_NOISE) if rng is not None else np.zeros(shape)
            return parameter(noise)

        return cls(make((L, 2)), make((L, 2)), make((L, H, 2)), make((L, N, 2)), tau_static)

    def tensors(self) -> dict[str, Tensor]:
        return {"alpha_a": self.alpha_a, "alpha_m": self.alpha_m, "alpha_h": self.alpha_h, "alpha_n": self.alpha_n}

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())

    def relax(self, rng: RngState | None = None, hard: bool = False, noise_scale: float = 1.0) -> "RelaxedStatic":
        """Gumbel-Softmax keep weights; ``rng=None`` gives the noise-free softmax.

        ``hard`` gives 0/1 keeps with the soft gradient (straight-through);
        without noise they are exactly the keeps of ``derive_prune_plan``.
        """
        tau = self.tau_static

        def sample(alpha):
            noise = rng.gumbel(alpha.shape) * noise_scale if rng is not None else None
            return gumbel_softmax(alpha, tau, hard=hard, noise=noise)

        return RelaxedStatic(
            a=sample(self.alpha_a),
            m=sample(self.alpha_m),
            h=sample(self.alpha_h)[..., 0],
            n=sample(self.alpha_n)[..., 0],
        )


@dataclass
class RelaxedStatic:
    """Relaxed weights: block pairs a/m [L, 2] (keep, skip-branch) and keeps h [L, H], n [L, N]."""

    a: Tensor
    m: Tensor
    h: Tensor
    n: Tensor

    @classmethod
    def all_keep(cls, config: ViTConfig) -> "RelaxedStatic":
        """Branch weights (1, 1) and unit keeps 1: the joint block reduces to the gated block."""
        L, dt = config.layers, get_default_dtype()
        return cls(
            Tensor(np.ones((L, 2), dt)), Tensor(np.ones((L, 2), dt)),
            Tensor(np.ones((L, config.heads), dt)), Tensor(np.ones((L, config.ffn_hidden), dt)),
        )


@dataclass
class PrunePlan:
    kept_heads: list[np.ndarray]
    kept_channels: list[np.ndarray]
    kept_mhsa: list[bool]
    kept_ffn: list[bool]

    def __post_init__(self):
        self.kept_heads = [np.asarray(h, dtype=bool) for h in self.kept_heads]
        self.kept_channels = [np.asarray(c, dtype=bool) for c in self.kept_channels]
        self.kept_mhsa = [bool(x) for x in self.kept_mhsa]
        self.kept_ffn = [bool(x) for x in self.kept_ffn]
        n = len(self.kept_heads)
        if not (len(self.kept_channels) == len(self.kept_mhsa) == len(self.kept_ffn) == n):
            raise ValueError("prune plan fields disagree on the number of layers")

    @property
    def layers(self) -> int:
        return len(self.kept_heads)

    @classmethod
    def keep_all(cls, config: ViTConfig) -> "PrunePlan":
        L = config.layers
        return cls(
            [np.ones(config.heads, bool)] * L,
            [np.ones(config.ffn_hidden, bool)] * L,
            [True] * L,
            [True] * L,
        )

    @classmethod
    def random(cls, config: ViTConfig, rng: RngState, p_keep: float = 0.6) -> "PrunePlan":
        L = config.layers
        return cls(
            [rng.uniform((config.heads,)) < p_keep for _ in range(L)],
            [rng.uniform((config.ffn_hidden,)) < p_keep for _ in range(L)],
            list(rng.uniform((L,)) < 0.8),
            list(rng.uniform((L,)) < 0.8),
        )

    def layer_alive(self, layer: int) -> bool:
        return self.kept_mhsa[layer] or self.kept_ffn[layer]

    def contains(self, other: "PrunePlan") -> bool:
        """True when every unit kept by ``other`` is also kept here."""
        return all(
            np.all(a >= b) for a, b in zip(self.kept_heads + self.kept_channels, other.kept_heads + other.kept_channels)
        ) and all(a >= b for a, b in zip(self.kept_mhsa + self.kept_ffn, other.kept_mhsa + other.kept_ffn))

    def to_dict(self) -> dict:
        return {
            "kept_heads": [h.astype(int).tolist() for h in self.kept_heads],
            "kept_channels": [c.astype(int).tolist() for c in self.kept_channels],
            "kept_mhsa": list(self.kept_mhsa),
            "kept_ffn": list(self.kept_ffn),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(d["kept_heads"], d["kept_channels"], d["kept_mhsa"], d["kept_ffn"])


def masked_mhsa(z: Tensor, layer: EncoderLayer, alpha_h_keep: Tensor) -> Tensor:
    return mhsa(z, layer, alpha_h_keep)


def masked_ffn(z: Tensor, layer: EncoderLayer, alpha_n_keep: Tensor) -> Tensor:
    return ffn(z, layer, alpha_n_keep)


def joint_block(
    z_prev: Tensor,
    layer: EncoderLayer,
    a: Tensor,
    m: Tensor,
    head_keep: Tensor,
    channel_keep: Tensor,
    g: GateOutput,
    form: str = "identity",
) -> Tensor:
    """Search-stage layer: dynamic gates times static block weights.

    ``a`` and ``m`` are the relaxed (keep, drop) pairs of the MHSA and FFN
    blocks. ``form="literal"`` weights the two branches independently::

        Z1  = MHSA'(LN(Z)) + Z
        Z2  = g0 a0 Z1 + (1 - g0) a1 Z
        Z3  = FFN'(LN(Z2)) + Z2
        out = g1 m0 Z3 + (1 - g1) m1 Z2

    With hard weights that zeroes the residual stream whenever a kept block
    is skipped. ``form="identity"`` (used for training) runs each block with
    weight ``g0 a0`` and otherwise passes its input through, matching what
    pruning and skipping do::

        Z2  = g0 a0 Z1 + (1 - g0 a0) Z
        out = g1 m0 Z3 + (1 - g1 m0) Z2
    """
    if form not in ("identity", "literal"):
        raise ValueError(f"unknown joint block form {form!r}")
    b = z_prev.shape[0]
    g0 = g.mhsa.reshape(b, 1, 1)
    g1 = g.ffn.reshape(b, 1, 1)
    z1 = mhsa(layer.ln1(z_prev), layer, head_keep) + z_prev
    if form == "literal":
        z2 = g0 * a[0] * z1 + (1.0 - g0) * a[1] * z_prev
    else:
        w0 = g0 * a[0]
        z2 = w0 * z1 + (1.0 - w0) * z_prev
    z3 = ffn(layer.ln2(z2), layer, channel_keep) + z2
    if form == "literal":
        return g1 * m[0] * z3 + (1.0 - g1) * m[1] * z2
    w1 = g1 * m[0]
    return w1 * z3 + (1.0 - w1) * z2


def derive_prune_plan(static: StaticParams) -> PrunePlan:
    """A unit is pruned exactly when its keep logit is strictly below its drop logit."""

    def kept(t: Tensor) -> np.ndarray:
        return ~(t.data[..., 0] < t.data[..., 1])

    return PrunePlan(
        kept_heads=list(kept(static.alpha_h)),
        kept_channels=list(kept(static.alpha_n)),
        kept_mhsa=list(kept(static.alpha_a)),
        kept_ffn=list(kept(static.alpha_m)),
    )


def hard_masks(plan: PrunePlan, layer: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
    return Tensor(plan.kept_heads[layer].astype(dtype)), Tensor(plan.kept_channels[layer].astype(dtype))


def masked_forward(model: VisionTransformer, images, plan: PrunePlan, gates: list[GateOutput] | None = None) -> Tensor:
    """Unpruned model run with hard 0/1 masks; pruned blocks act as identities.

    ``gates`` is indexed by original layer (None entries mean execute).
    """
    if plan.layers != len(model.layers):
        raise ValueError("plan and model disagree on the number of layers")
    z = model.embed(images)
    b = z.shape[0]
    dtype = model.patch.weight.dtype
    for i, layer in enumerate(model.layers):
        if not plan.layer_alive(i):
            continue
        hk, ck = hard_masks(plan, i, dtype)
        g = gates[i] if gates is not None and gates[i] is not None else GateOutput.constant(b)
        z = gated_block(z, layer, g, hk, ck, keep_blocks=(plan.kept_mhsa[i], plan.kept_ffn[i]))
    return classify(z, model)


def _take_cols(lin, cols: np.ndarray) -> None:
    lin.weight = parameter(np.ascontiguousarray(lin.weight.data[:, cols]))
    lin.bias = parameter(lin.bias.data[cols])
    lin.d_out = int(len(cols))


def _take_rows(lin, rows: np.ndarray) -> None:
    lin.weight = parameter(lin.weight.data[rows, :])
    lin.d_in = int(len(rows))


def apply_prune(model: VisionTransformer, plan: PrunePlan) -> VisionTransformer:
    """Physically remove pruned heads, channels, blocks and dead layers (returns a copy)."""
    if plan.layers != len(model.layers):
        raise ValueError(f"plan has {plan.layers} layers, model has {len(model.layers)}")
    pruned = model.clone()
    survivors = []
    for i, layer in enumerate(pruned.layers):
        if plan.kept_heads[i].shape != (layer.n_heads,) or plan.kept_channels[i].shape != (layer.hidden,):
            raise ValueError(f"plan does not match the shape of layer {i}")
        if not plan.layer_alive(i):
            continue
        dh = layer.head_dim
        if plan.kept_mhsa[i]:
            heads = np.flatnonzero(plan.kept_heads[i])
            cols = (heads[:, None] * dh + np.arange(dh)[None, :]).reshape(-1)
            for lin in (layer.wq, layer.wk, layer.wv):
                _take_cols(lin, cols)
            _take_rows(layer.wo, cols)
            layer.head_ids = [layer.head_ids[h] for h in heads]
            layer.n_heads = int(len(heads))
        else:
            layer.has_mhsa = False
            layer.ln1 = layer.wq = layer.wk = layer.wv = layer.wo = None
            layer.head_ids, layer.n_heads = [], 0
        if plan.kept_ffn[i]:
            chans = np.flatnonzero(plan.kept_channels[i])
            _take_cols(layer.fc1, chans)
            _take_rows(layer.fc2, chans)
            layer.channel_ids = [layer.channel_ids[c] for c in chans]
            layer.hidden = int(len(chans))
        else:
            layer.has_ffn = False
            layer.ln2 = layer.fc1 = layer.fc2 = None
            layer.channel_ids, layer.hidden = [], 0
        survivors.append(layer)
    pruned.layers = survivors
    return pruned
