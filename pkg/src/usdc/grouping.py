"""Gate-sharing plans: sample-, batch- and group-level gate augmentation.

A plan shuffles the mini-batch, cuts the shuffled order into consecutive
groups, and every sample in a group receives the mean of its group's gate
logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import RngState, Tensor, _record

STRATEGIES = ("sample", "batch", "group", "random")
RANDOM_MAX_GROUP = 64


@dataclass
class GroupPlan:
    permutation: np.ndarray
    group_sizes: list[int]
    strategy: str = "group"
    group_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        self.group_sizes = [int(s) for s in self.group_sizes]
        b = len(self.permutation)
        if sorted(self.permutation.tolist()) != list(range(b)):
            raise ValueError("permutation is not a bijection on [0, B)")
        if any(s < 1 for s in self.group_sizes) or sum(self.group_sizes) != b:
            raise ValueError(f"group sizes {self.group_sizes} do not partition a batch of {b}")
        ids = np.empty(b, dtype=np.int64)
        ids[self.permutation] = np.repeat(np.arange(len(self.group_sizes)), self.group_sizes)
        self.group_ids = ids

    @property
    def batch_size(self) -> int:
        return len(self.permutation)

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)


def recursive_log2_split(batch_size: int) -> list[int]:
    """Halve the remaining block repeatedly: emit ceil(r/2), recurse on floor(r/2).

    For powers of two this gives [B/2, B/4, ..., 2, 1, 1].
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    sizes = []
    r = batch_size
    while r > 1:
        emit = (r + 1) // 2
        sizes.append(emit)
        r -= emit
    if r == 1:
        sizes.append(1)
    return sizes


def _parse_strategy(strategy: str) -> tuple[str, int | None]:
    s = strategy.lower()
    if s in ("group-recursive", "recursive", "ours"):
        return "group", None
    if s.startswith("avg-"):
        try:
            k = int(s[4:])
        except ValueError:
            raise ValueError(f"invalid average group size in {strategy!r}") from None
        if k < 1:
            raise ValueError(f"average group size must be >= 1, got {k}")
        return "avg", k
    if s in STRATEGIES:
        return s, None
    raise ValueError(f"unknown gate strategy {strategy!r}")


def build_plan(batch_size: int, strategy: str, rng: RngState | None = None) -> GroupPlan:
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    kind, k = _parse_strategy(strategy)
    identity = np.arange(batch_size)
    if kind == "sample":
        return GroupPlan(identity, [1] * batch_size, strategy)
    if kind == "batch":
        return GroupPlan(identity, [batch_size], strategy)
    if rng is None:
        raise ValueError(f"strategy {strategy!r} needs an rng")
    if kind == "group":
        sizes = recursive_log2_split(batch_size)
    elif kind == "avg":
        sizes = [k] * (batch_size // k) + ([batch_size % k] if batch_size % k else [])
    else:
        sizes, left = [], batch_size
        while left > 0:
            s = min(int(rng.integers(1, RANDOM_MAX_GROUP + 1)), left)
            sizes.append(s)
            left -= s
    perm = rng.permutation(batch_size)
    return GroupPlan(perm, sizes, strategy)


def group_mean(x: Tensor, plan: GroupPlan) -> Tensor:
    """[B, F] -> [G, F]: mean of each group's rows."""
    if x.shape[0] != plan.batch_size:
        raise ValueError(f"plan covers {plan.batch_size} samples, got batch of {x.shape[0]}")
    ids = plan.group_ids
    counts = np.asarray(plan.group_sizes, dtype=x.dtype)[:, None]
    # mean taken relative to each group's first member: exact on constant groups
    anchor = x.data[plan.permutation[np.cumsum([0] + plan.group_sizes[:-1])]]
    sums = np.zeros((plan.n_groups,) + x.shape[1:], dtype=x.dtype)
    np.add.at(sums, ids, x.data - anchor[ids])
    out = anchor + sums / counts

    def backward(g):
        return ((g / counts)[ids],)

    return _record(out, (x,), backward)


def expand_groups(x: Tensor, plan: GroupPlan) -> Tensor:
    """[G, F] -> [B, F]: broadcast each group's row back to its members."""
    return x[plan.group_ids]


def apply_plan(gate_logits: Tensor, plan: GroupPlan) -> Tensor:
    """Replace each row by the mean of its group's rows."""
    return expand_groups(group_mean(gate_logits, plan), plan)
