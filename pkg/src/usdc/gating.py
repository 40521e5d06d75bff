"""Dynamic decision networks and gated block execution.

Each encoder layer owns a decision network mapping its input tokens to four
logits: two independent execute/skip categoricals, one for the MHSA block
and one for the FFN block (index 0 of each pair is "execute"). During the
search stage the layer mixes all candidate networks with Gumbel-Softmax
weights over learnable architecture logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import RngState, Tensor, activation, concat, get_default_dtype, gumbel_softmax, no_grad
from .grouping import GroupPlan, expand_groups, group_mean
from .nn import BatchNorm, LayerNorm, Linear, Module, parameter
from .vit import EncoderLayer, ffn, mhsa

# (name, layers, norm, act, tokenwise)
CANDIDATES = (
    ("fc2-ln-relu", 2, "ln", "relu", False),
    ("fc2-bn-relu", 2, "bn", "relu", False),
    ("fc2-ln-gelu", 2, "ln", "gelu", False),
    ("fc1", 1, None, None, False),
    ("conv2-bn-relu", 2, "bn", "relu", True),
    ("conv2-bn-gelu", 2, "bn", "gelu", True),
    ("conv1", 1, None, None, True),
)
CANDIDATE_NAMES = tuple(c[0] for c in CANDIDATES)
N_CANDIDATES = len(CANDIDATES)
GATE_OUT = 4


def gate_hidden_width(embed_dim: int) -> int:
    return max(embed_dim // 4, 4)


class GateCandidate(Module):
    """One decision-network architecture.

    FC candidates act on the token-mean-pooled feature; 1x1-conv candidates
    act on every token and mean-pool their logits.
    """

    def __init__(
        self, kind: int, embed_dim: int, rng: RngState | None = None, std: float = 0.02, exec_bias: float = 0.0
    ):
        name, depth, norm, act, tokenwise = CANDIDATES[kind]
        self.kind = kind
        self.name = name
        self.tokenwise = tokenwise
        self.act = act
        if depth == 2:
            hidden = gate_hidden_width(embed_dim)
            self.fc1 = Linear(embed_dim, hidden, rng, std)
            self.norm = LayerNorm(hidden) if norm == "ln" else BatchNorm(hidden)
            self.fc2 = Linear(hidden, GATE_OUT, rng, std)
        else:
            self.fc1 = Linear(embed_dim, GATE_OUT, rng, std)
            self.norm = None
            self.fc2 = None
        # execute-minus-skip logit margin at init; Gumbel makes it P(execute) = sigmoid(exec_bias)
        out = self.fc2 if self.fc2 is not None else self.fc1
        out.bias.data[[0, 2]] += exec_bias / 2
        out.bias.data[[1, 3]] -= exec_bias / 2

    def __call__(self, z: Tensor) -> Tensor:
        x = z if self.tokenwise else z.mean(axis=1)
        x = self.fc1(x)
        if self.fc2 is not None:
            x = activation(self.norm(x), self.act)
            x = self.fc2(x)
        return x.mean(axis=1) if self.tokenwise else x


def gate_features(z_prev: Tensor, candidate: GateCandidate) -> Tensor:
    """[B, T, d] -> [B, 4] gate logits."""
    return candidate(z_prev)


@dataclass
class GateArchParams:
    logits: Tensor  # [L, K]
    tau_search: float = 2.0

    @classmethod
    def init(cls, layers: int, n_candidates: int = N_CANDIDATES, tau_search: float = 2.0) -> "GateArchParams":
        return cls(parameter(np.zeros((layers, n_candidates))), tau_search)

    def weights(self, rng: RngState | None) -> Tensor:
        """Soft Gumbel-Softmax mixing weights [L, K]."""
        return gumbel_softmax(self.logits, self.tau_search, hard=False, rng=rng)


def mix_candidates(
    z_prev: Tensor,
    candidates: list[GateCandidate],
    arch: GateArchParams | None = None,
    rng: RngState | None = None,
    layer: int = 0,
    weights: Tensor | None = None,
) -> Tensor:
    """Weighted sum of every candidate's gate logits.

    ``weights`` ([K]) overrides sampling from ``arch``.
    """
    if not candidates:
        raise ValueError("mix_candidates needs at least one candidate")
    if weights is None:
        if arch is None:
            if len(candidates) != 1:
                raise ValueError("arch params are required to mix more than one candidate")
            weights = Tensor(np.ones(1, dtype=get_default_dtype()))
        else:
            weights = gumbel_softmax(arch.logits[layer], arch.tau_search, hard=False, rng=rng)
    out = None
    for k, cand in enumerate(candidates):
        term = gate_features(z_prev, cand) * weights[k]
        out = term if out is None else out + term
    return out


@dataclass
class GateOutput:
    """Execute gates [B, 2]: column 0 drives MHSA, column 1 drives FFN."""

    values: Tensor
    hard: bool

    @property
    def mhsa(self) -> Tensor:
        return self.values[:, 0]

    @property
    def ffn(self) -> Tensor:
        return self.values[:, 1]

    def mean(self) -> Tensor:
        return self.values.mean(axis=0)

    @classmethod
    def constant(cls, batch: int, mhsa: float = 1.0, ffn: float = 1.0) -> "GateOutput":
        v = np.tile(np.asarray([mhsa, ffn], dtype=get_default_dtype()), (batch, 1))
        return cls(Tensor(v), hard=mhsa in (0.0, 1.0) and ffn in (0.0, 1.0))


def sample_gates(
    gate_logits: Tensor,
    tau_skip: float,
    hard: bool = True,
    rng: RngState | None = None,
    plan: GroupPlan | None = None,
    deterministic: bool = False,
    noise_scale: float = 1.0,
) -> GateOutput:
    """Two independent binary Gumbel-Softmax decisions per sample.

    With a ``plan`` the logits are averaged per group and one decision is
    drawn per group, so all members share identical gates.
    ``deterministic`` drops the noise (inference); ``noise_scale``
    multiplies the Gumbel noise during training.
    """
    if not tau_skip > 0:
        raise ValueError(f"skip temperature must be > 0, got {tau_skip}")
    x = group_mean(gate_logits, plan) if plan is not None else gate_logits
    n = x.shape[0]
    pairs = x.reshape(n, 2, 2)
    if deterministic or rng is None:
        noise = None
    else:
        noise = rng.gumbel(pairs.shape) * noise_scale
    g = gumbel_softmax(pairs, tau_skip, hard=hard, noise=noise)
    g = g[:, :, 0]
    if plan is not None:
        g = expand_groups(g, plan)
    return GateOutput(g, hard)


def _blend(gate: Tensor, new: Tensor, old: Tensor) -> Tensor:
    gate = gate.reshape(gate.shape[0], 1, 1)
    return gate * new + (1.0 - gate) * old


def _mhsa_branch(z, layer, head_keep):
    return mhsa(layer.ln1(z), layer, head_keep) + z


def _ffn_branch(z, layer, channel_keep):
    return ffn(layer.ln2(z), layer, channel_keep) + z


def gated_block(
    z_prev: Tensor,
    layer: EncoderLayer,
    g: GateOutput,
    head_keep: Tensor | None = None,
    channel_keep: Tensor | None = None,
    keep_blocks: tuple[bool, bool] = (True, True),
    fast: bool = False,
) -> Tensor:
    """Encoder layer whose MHSA and FFN blocks are blended with their skip path.

    A block absent from the layer (pruned) or with ``keep_blocks`` False is
    an identity. ``fast`` requires hard gates and no autograd: it runs each
    block only on the rows whose gate is 1.
    """
    run_mhsa = layer.has_mhsa and keep_blocks[0]
    run_ffn = layer.has_ffn and keep_blocks[1]
    if fast:
        if not g.hard:
            raise ValueError("the bypassing fast path needs hard gates")
        with no_grad():
            z = z_prev
            if run_mhsa:
                z = _bypass(z, g.values.data[:, 0], lambda x: _mhsa_branch(x, layer, head_keep))
            if run_ffn:
                z = _bypass(z, g.values.data[:, 1], lambda x: _ffn_branch(x, layer, channel_keep))
            return z
    z = z_prev
    if run_mhsa:
        z = _blend(g.mhsa, _mhsa_branch(z, layer, head_keep), z)
    if run_ffn:
        z = _blend(g.ffn, _ffn_branch(z, layer, channel_keep), z)
    return z


def _bypass(z: Tensor, gate: np.ndarray, branch) -> Tensor:
    on = gate == 1
    if not on.any():
        return z
    if on.all():
        return branch(z)
    out = z.data.copy()
    out[on] = branch(Tensor(z.data[on])).data
    return Tensor(out)


def select_final_gates(arch: GateArchParams | np.ndarray) -> list[int]:
    """Per-layer argmax of the architecture logits; ties go to the lowest index."""
    logits = arch.logits.data if isinstance(arch, GateArchParams) else np.asarray(arch)
    return [int(np.argmax(row)) for row in logits]
