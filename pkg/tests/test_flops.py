import numpy as np
import pytest
from helpers import check_grads

from usdc.autograd import RngState, Tensor, count_macs
from usdc.flops import (
    backbone_macs,
    count_flops_oracle,
    ffn_macs,
    flops_report,
    mhsa_macs,
    resource_loss,
    stage1_cost,
    stage2_cost,
)
from usdc.gating import N_CANDIDATES, GateOutput
from usdc.nn import Linear
from usdc.static import PrunePlan, RelaxedStatic
from usdc.vit import ViTConfig

TOY = ViTConfig()
SMALL = ViTConfig(layers=2, heads=4, embed_dim=16, ffn_hidden=8, image_size=8, patch_size=4)


def drop_all(cfg):
    plan = PrunePlan.keep_all(cfg)
    plan.kept_mhsa = [False] * cfg.layers
    plan.kept_ffn = [False] * cfg.layers
    return plan


def test_single_linear_is_six_macs():
    lin = Linear(2, 3, RngState(0))
    with count_macs() as c:
        lin(Tensor(np.ones((1, 1, 2))))
    assert c.total == 6


def test_toy_block_counts_exhaustive():
    cfg = ViTConfig(layers=1)
    base = count_flops_oracle(cfg, drop_all(cfg), exhaustive=True)
    only_mhsa = drop_all(cfg)
    only_mhsa.kept_mhsa = [True]
    only_ffn = drop_all(cfg)
    only_ffn.kept_ffn = [True]
    assert count_flops_oracle(cfg, only_mhsa, exhaustive=True) - base == 88_128
    assert count_flops_oracle(cfg, only_ffn, exhaustive=True) - base == 69_632
    t, d, n = 17, 32, 64
    assert mhsa_macs(t, d, 4, 8) == 3 * t * d * d + 2 * t * t * d + t * d * d == 88_128
    assert ffn_macs(t, d, n) == 2 * t * d * n == 69_632


def test_half_channels_halve_ffn():
    cfg = ViTConfig(layers=1)
    base = count_flops_oracle(cfg, drop_all(cfg))
    plan = drop_all(cfg)
    plan.kept_ffn = [True]
    full = count_flops_oracle(cfg, plan) - base
    plan.kept_channels[0][::2] = False
    assert 2 * (count_flops_oracle(cfg, plan) - base) == full


def test_unpruned_model_costs_one():
    report = flops_report(TOY)
    assert report.model_cost == pytest.approx(1.0, abs=1e-12)
    assert report.total_macs == backbone_macs(TOY) == count_flops_oracle(TOY) == 639_552
    assert (report.f_attn >= 0).all() and (report.f_gate >= 0).all()


def test_stage1_cost_examples():
    report = flops_report(SMALL)
    r = RelaxedStatic.all_keep(SMALL)
    zero_arch = Tensor(np.zeros((2, N_CANDIDATES)))
    ones = [GateOutput.constant(3) for _ in range(2)]
    assert stage1_cost(r, zero_arch, ones, report).item() == pytest.approx(1.0)
    zeros = [GateOutput.constant(3, 0.0, 0.0) for _ in range(2)]
    assert stage1_cost(r, zero_arch, zeros, report).item() == pytest.approx(report.f_other)


def test_stage2_cost_examples():
    kinds = [0, 6]
    report = flops_report(SMALL, PrunePlan.keep_all(SMALL), kinds)
    ones = [GateOutput.constant(1) for _ in range(2)]
    zeros = [GateOutput.constant(1, 0.0, 0.0) for _ in range(2)]
    gate_share = report.f_selected_gate.sum()
    assert stage2_cost(ones, report, [0, 1]).item() == pytest.approx(1.0 + gate_share)
    assert stage2_cost(zeros, report, [0, 1]).item() == pytest.approx(report.f_other + gate_share)


def random_triple(rng: RngState):
    heads = int(rng.integers(1, 4)) * 2
    cfg = ViTConfig(
        layers=int(rng.integers(1, 5)), heads=heads, embed_dim=heads * int(rng.integers(2, 5)),
        ffn_hidden=int(rng.integers(2, 20)), image_size=8, patch_size=int(rng.integers(1, 3)) * 2,
    )
    plan = PrunePlan.random(cfg, rng, p_keep=0.3 + 0.6 * float(rng.uniform()))
    kinds = [int(k) for k in rng.integers(0, N_CANDIDATES, size=cfg.layers)]
    gates = [(int(rng.integers(0, 2)), int(rng.integers(0, 2))) for _ in range(cfg.layers)]
    return cfg, plan, kinds, gates


def test_oracle_agreement_on_random_triples():
    rng = RngState(42)
    for _ in range(20):
        cfg, plan, kinds, gates = random_triple(rng)
        report = flops_report(cfg, plan, kinds)
        alive = [i for i in range(cfg.layers) if plan.layer_alive(i)]
        outs = [GateOutput.constant(1, *map(float, gates[i])) for i in alive]
        analytic = stage2_cost(outs, report, alive).item() * report.total_macs
        oracle = count_flops_oracle(cfg, plan, gates, kinds)
        assert abs(analytic - oracle) <= 1e-3 * oracle


def _oracle_tables(cfg):
    """Per-unit oracle MACs: MHSA by kept-head count, FFN by kept-channel count, gate by kind."""
    base_plan = drop_all(cfg)
    base = count_flops_oracle(cfg, base_plan)
    attn = np.zeros(cfg.heads + 1)
    for k in range(1, cfg.heads + 1):
        p = drop_all(cfg)
        p.kept_mhsa[0] = True
        p.kept_heads[0][k:] = False
        attn[k] = count_flops_oracle(cfg, p) - base
    ffn = np.zeros(cfg.ffn_hidden + 1)
    for k in range(1, cfg.ffn_hidden + 1):
        p = drop_all(cfg)
        p.kept_ffn[0] = True
        p.kept_channels[0][k:] = False
        ffn[k] = count_flops_oracle(cfg, p) - base
    keep = PrunePlan.keep_all(cfg)
    full = count_flops_oracle(cfg, keep)
    gate = np.array([count_flops_oracle(cfg, keep, gate_kinds=[k] * cfg.layers) - full for k in range(N_CANDIDATES)])
    return base, attn, ffn, gate / cfg.layers


def test_stage1_cost_matches_monte_carlo_oracle():
    cfg = SMALL
    base, attn_t, ffn_t, gate_t = _oracle_tables(cfg)
    rng = np.random.default_rng(0)
    L, H, N = cfg.layers, cfg.heads, cfg.ffn_hidden
    a, m = rng.uniform(size=L), rng.uniform(size=L)
    h, n = rng.uniform(size=(L, H)), rng.uniform(size=(L, N))
    g = rng.uniform(size=(L, 2))
    w = rng.dirichlet(np.ones(N_CANDIDATES), size=L)
    relaxed = RelaxedStatic(Tensor(np.stack([a, 1 - a], 1)), Tensor(np.stack([m, 1 - m], 1)), Tensor(h), Tensor(n))
    gates = [GateOutput(Tensor(np.tile(g[i], (1, 1))), False) for i in range(L)]
    report = flops_report(cfg)
    analytic = stage1_cost(relaxed, Tensor(w), gates, report).item() * report.total_macs

    draws = 10_000
    total = np.full(draws, float(base))
    for i in range(L):
        ka = (rng.uniform(size=draws) < a[i]) & (rng.uniform(size=draws) < g[i, 0])
        kh = (rng.uniform(size=(draws, H)) < h[i]).sum(axis=1)
        km = (rng.uniform(size=draws) < m[i]) & (rng.uniform(size=draws) < g[i, 1])
        kn = (rng.uniform(size=(draws, N)) < n[i]).sum(axis=1)
        kind = np.array([rng.choice(N_CANDIDATES, p=w[i]) for _ in range(draws)])
        total += ka * attn_t[kh] + km * ffn_t[kn] + gate_t[kind]
    assert abs(total.mean() - analytic) <= 0.01 * analytic


def test_stage1_cost_monotone_in_keep_weights():
    rng = np.random.default_rng(1)
    report = flops_report(SMALL)
    L = SMALL.layers

    def cost(a, m, h, n, g):
        r = RelaxedStatic(Tensor(np.stack([a, 1 - a], 1)), Tensor(np.stack([m, 1 - m], 1)), Tensor(h), Tensor(n))
        gates = [GateOutput(Tensor(g[i][None]), False) for i in range(L)]
        return stage1_cost(r, None, gates, report).item()

    for _ in range(20):
        args = [rng.uniform(size=L), rng.uniform(size=L), rng.uniform(size=(L, 4)), rng.uniform(size=(L, 8)),
                rng.uniform(size=(L, 2))]
        c0 = cost(*args)
        for j, arr in enumerate(args):
            bumped = [x.copy() for x in args]
            bumped[j] = np.minimum(1.0, arr + rng.uniform(0, 0.3, size=arr.shape))
            assert cost(*bumped) >= c0 - 1e-12


def test_resource_loss_examples(f64):
    assert resource_loss(Tensor(0.65), 0.65).item() == 0.0
    assert resource_loss(Tensor(0.648), 0.65).item() == pytest.approx(4e-6, rel=1e-9)
    c = Tensor(0.8, requires_grad=True)
    resource_loss(c, 0.65).backward()
    assert c.grad == pytest.approx(2 * (0.8 - 0.65))
    for bad in (0.0, 1.5, -0.1):
        with pytest.raises(ValueError):
            resource_loss(Tensor(0.5), bad)


@pytest.mark.parametrize("seed", range(10))
def test_stage1_cost_gradients(seed, f64):
    rng = np.random.default_rng(seed)
    L = SMALL.layers
    report = flops_report(SMALL)
    a = Tensor(rng.uniform(size=(L, 2)), requires_grad=True)
    m = Tensor(rng.uniform(size=(L, 2)), requires_grad=True)
    h = Tensor(rng.uniform(size=(L, 4)), requires_grad=True)
    n = Tensor(rng.uniform(size=(L, 8)), requires_grad=True)
    w = Tensor(rng.uniform(size=(L, N_CANDIDATES)), requires_grad=True)
    g = [Tensor(rng.uniform(size=(3, 2)), requires_grad=True) for _ in range(L)]

    def loss():
        gates = [GateOutput(x, False) for x in g]
        return resource_loss(stage1_cost(RelaxedStatic(a, m, h, n), w, gates, report), 0.3)

    assert check_grads(loss, [a, m, h, n, w, *g]) < 1e-4
