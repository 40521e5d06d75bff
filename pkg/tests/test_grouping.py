import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import check_grads

from usdc.autograd import RngState, Tensor
from usdc.grouping import GroupPlan, apply_plan, build_plan, group_mean, recursive_log2_split

STRATS = ["sample", "batch", "group", "random", "avg-8", "avg-3"]


def reference_split(b: int) -> list[int]:
    """Rule enumeration: halve the remaining block, emit the larger half, finish with 1."""
    if b == 1:
        return [1]
    half = -(-b // 2)
    return [half] + reference_split(b - half)


def test_recursive_split_examples():
    assert recursive_log2_split(1) == [1]
    assert recursive_log2_split(8) == [4, 2, 1, 1]
    assert recursive_log2_split(6) == [3, 2, 1]
    assert recursive_log2_split(64) == [32, 16, 8, 4, 2, 1, 1]
    with pytest.raises(ValueError):
        recursive_log2_split(0)


@given(st.integers(1, 512))
def test_recursive_split_matches_reference(b):
    sizes = recursive_log2_split(b)
    assert sizes == reference_split(b)
    assert sum(sizes) == b and sizes[-1] == 1 and sizes == sorted(sizes, reverse=True)


def test_build_plan_examples():
    p = build_plan(32, "batch")
    assert p.group_sizes == [32] and np.array_equal(p.permutation, np.arange(32))
    assert build_plan(3, "sample").group_sizes == [1, 1, 1]
    assert build_plan(20, "avg-8", RngState(0)).group_sizes == [8, 8, 4]
    assert build_plan(8, "group-recursive", RngState(0)).group_sizes == [4, 2, 1, 1]
    with pytest.raises(ValueError):
        build_plan(8, "bogus", RngState(0))
    with pytest.raises(ValueError):
        build_plan(8, "group")  # needs an rng


def test_group_plan_validation():
    with pytest.raises(ValueError):
        GroupPlan([0, 0, 1], [3])
    with pytest.raises(ValueError):
        GroupPlan([0, 1, 2], [2, 2])


@given(st.integers(1, 200), st.sampled_from(STRATS), st.integers(0, 10_000))
def test_plan_partitions_batch(b, strategy, seed):
    p = build_plan(b, strategy, RngState(seed))
    assert sorted(p.permutation.tolist()) == list(range(b))
    assert sum(p.group_sizes) == b and min(p.group_sizes) >= 1
    if strategy == "random":
        assert max(p.group_sizes) <= 64


def test_apply_plan_examples():
    x = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(apply_plan(Tensor(x, dtype=np.float64), build_plan(5, "sample")).data, x)
    out = apply_plan(Tensor(x, dtype=np.float64), build_plan(5, "batch")).data
    assert (out == out[0]).all()
    np.testing.assert_allclose(out[0], x.mean(axis=0), rtol=1e-14)
    a, b = [1.5, -2.0, 0.25, 3.0], [0.1, 0.2, 0.3, 0.4]
    rows = np.array([a, a, b, b])
    plan = GroupPlan(np.arange(4), [2, 2])
    np.testing.assert_array_equal(apply_plan(Tensor(rows, dtype=np.float64), plan).data, rows)


def _lattice(rng, b, f, sizes):
    """Integers scaled by the product of group sizes: every group mean is exact in float64."""
    scale = int(np.prod(sorted(set(sizes))))
    return (rng.integers(-50, 50, size=(b, f)) * scale).astype(np.float64)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 96), st.sampled_from(STRATS), st.integers(0, 10_000))
def test_apply_plan_algebra(b, strategy, seed):
    rng = RngState(seed)
    plan = build_plan(b, strategy, rng)
    data = np.random.default_rng(seed).normal(size=(b, 4))
    once = apply_plan(Tensor(data, dtype=np.float64), plan).data
    # idempotence is exact on arbitrary floats
    np.testing.assert_array_equal(apply_plan(Tensor(once, dtype=np.float64), plan).data, once)
    # rows of a group are identical
    for g in range(plan.n_groups):
        members = once[plan.group_ids == g]
        assert (members == members[0]).all()
    np.testing.assert_allclose(once.mean(axis=0), data.mean(axis=0), rtol=0, atol=1e-12)
    # on lattice data the global mean is preserved bit-exactly
    lat = _lattice(np.random.default_rng(seed + 1), b, 4, plan.group_sizes)
    out = apply_plan(Tensor(lat, dtype=np.float64), plan).data
    assert np.array_equal(out.sum(axis=0), lat.sum(axis=0))
    if strategy == "sample":
        np.testing.assert_array_equal(once, data)
    if strategy == "batch":
        assert np.array_equal(out, np.broadcast_to(lat.sum(axis=0) / b, lat.shape))


def test_group_mean_gradient(f64):
    plan = build_plan(9, "group", RngState(0))
    x = Tensor(np.random.default_rng(0).normal(size=(9, 4)), requires_grad=True)
    w = Tensor(np.random.default_rng(1).normal(size=(9, 4)))
    assert check_grads(lambda: (apply_plan(x, plan) * w).sum(), [x]) < 1e-8
    w2 = Tensor(np.random.default_rng(2).normal(size=(plan.n_groups, 4)))
    assert check_grads(lambda: (group_mean(x, plan) * w2).sum(), [x]) < 1e-8


def test_fresh_plan_each_draw():
    rng = RngState(0)
    perms = {tuple(build_plan(16, "group", rng).permutation) for _ in range(5)}
    assert len(perms) > 1
