"""Acceptance suite: the ten primary criteria at their stated tolerances.

Each test records one pass/fail line, printed together at the end of the run.
Criteria 6 to 10 share one desk-scale training run (K=5, L=8, 200 samples,
5 epochs, seed 0).
"""

import time

import numpy as np
import pytest

from oracles import random_instance, random_search_min_se
from test_autodiff import PRIMITIVES
from ucformer import autodiff as ad
from ucformer.autodiff import Tensor
from ucformer.config import NetworkConfig, desk_profile
from ucformer.data import build_dataset, make_sample
from ucformer.evaluate import (
    EvalScenario,
    attention_flops,
    attention_oracle_check,
    connection_stats,
    dense_attention_flops,
    eval_se_sweep,
    held_out_sample,
    latency_comparison,
    power_cdf,
    robustness_sweep,
)
from ucformer.mmf import extract_both, solve_mmf, solve_mmf_dl, solve_mmf_ul
from ucformer.model import CosFormerNet
from ucformer.netsim.channel import generate_topology, simulate
from ucformer.netsim.se import ClusterMask
from ucformer.train import loss, normalize_labels, train

SEED = 0
DESK_Q = 4  # L/2: with Q = L = 8 the DCC baseline would coincide with full CF


@pytest.fixture(scope="module")
def desk():
    run = desk_profile()
    data = build_dataset(run.network, run.train, seed=SEED)
    net = CosFormerNet(run.model, run.network.L, seed=SEED)
    t0 = time.perf_counter()
    history = train(net, data, run, seed=SEED)
    return run, net, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_sweep(desk):
    run, net, _, _ = desk
    sc = EvalScenario(K_values=(3, 5, 8, 12), n_test=20, Q=DESK_Q, seed=1, noise_levels_m=(0.0, 5.0))
    return sc, eval_se_sweep(sc, net, run.network)


def test_1_attention_oracle(record):
    t0 = time.perf_counter()
    rows = attention_oracle_check(n_instances=200, seed=SEED, max_K=32)
    dt = time.perf_counter() - t0
    worst = max(r["rel_err"] for r in rows)
    covered = {(r["kernel"], r["n_heads"]) for r in rows}
    ok = worst < 1e-10 and dt < 5 and len(covered) == 4
    assert record(1, ok, f"max rel err {worst:.2e} over 200 instances, {dt:.2f} s")


def test_2_gradient_suite(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst_prim = 0.0
    for name, fn in PRIMITIVES.items():
        t = {
            "A": Tensor(rng.normal(size=(4, 6)), True),
            "A2": Tensor(rng.normal(size=(4, 6)), True),
            "B": Tensor(rng.normal(size=(6, 3)), True),
            "bias": Tensor(rng.normal(size=6), True),
            "gain": Tensor(rng.uniform(0.5, 1.5, 6), True),
            "d": Tensor(rng.normal(size=(4, 1)), True),
        }
        w = Tensor(rng.normal(size=fn(t).shape))
        worst_prim = max(worst_prim, ad.grad_check(lambda: ad.sum(ad.mul(fn(t), w)), list(t.values())))
    x = Tensor(rng.normal(size=(5, 5)), True)
    w = Tensor(rng.normal(size=(5, 5)))
    worst_prim = max(worst_prim, ad.grad_check(lambda: ad.sum(ad.mul(ad.relu(x), w)), [x]))

    # full training loss on a K=3, L=4 instance with oracle labels
    run = desk_profile()
    config = run.network.replace(L=4, K=3)
    sample = make_sample(config, 3, seed=11, sigma_e=0.0)
    net = CosFormerNet(run.model, 4, seed=SEED)
    out = net.forward(sample.X, config.tau_p)
    ul, dl = solve_mmf(simulate(sample.topology, config, sample.seed), out.mask_binary, config)
    target = np.concatenate(normalize_labels(ul.p, dl.p, net.config, net.dl_budget_mw))

    def f():
        o = net.forward(sample.X, config.tau_p, train=True, seed=3)
        return loss(ad.concat([o.p_ul_t, o.p_dl_t]), target, ul.min_se, dl.min_se, run.train.lam)

    worst_model = ad.grad_check(f, net.parameters(), coords_per_tensor=64, floor=1e-6)
    dt = time.perf_counter() - t0
    ok = worst_prim < 1e-5 and worst_model < 1e-3 and dt < 30
    assert record(2, ok, f"primitives {worst_prim:.2e}, full model {worst_model:.2e}, {dt:.1f} s")


def test_3_constraints(record):
    run = desk_profile()
    cfg, L, tau_p = run.model, run.network.L, run.network.tau_p
    budget = run.network.dl_budget_mw
    rng = np.random.default_rng(SEED)
    nets = [CosFormerNet(cfg, L, seed=s) for s in range(5)]
    violations = 0
    for n in range(1000):
        K = int(rng.integers(1, 65))
        out = nets[n % 5].forward(rng.uniform(size=(K, 2 * L + 2)), tau_p, train=bool(n % 2), seed=n)
        m = out.mask_binary.mask
        bad = (
            m.sum(axis=0).max() > tau_p
            or not m.any(axis=1).all()
            or out.p_ul_mw.min() < 0
            or out.p_ul_mw.max() > run.network.p_ul_max_mw
            or abs(out.p_dl_mw.sum() - budget) > 1e-9 * budget
        )
        violations += bool(bad)
    assert record(3, violations == 0, f"{violations} violations in 1000 forwards (K in 1..64)")


def test_4_mmf_dominance(record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    worst_gap, worst_spread = -np.inf, 0.0
    for _ in range(100):
        config, state = random_instance(rng)
        ul_c, dl_c = extract_both(state, ClusterMask.full(config.K, config.L), config)
        for co, solve in ((ul_c, solve_mmf_ul), (dl_c, solve_mmf_dl)):
            sol = solve(co, config)
            worst_gap = max(worst_gap, random_search_min_se(co, config, 100_000, rng) - sol.min_se)
            if co.direction == "dl":
                worst_spread = max(worst_spread, (sol.sinr.max() - sol.sinr.min()) / sol.sinr.min())
    dt = time.perf_counter() - t0
    ok = worst_gap <= 1e-9 and worst_spread <= 1e-5 and dt < 300
    detail = f"best random minus oracle {worst_gap:.2e} b/s/Hz, DL SINR spread {worst_spread:.1e}, {dt:.0f} s"
    assert record(4, ok, detail)


def test_5_estimation_statistics(record):
    config = NetworkConfig(L=2, N=4, K=2, n_mc=100_000, correlation_model="local-scattering", area_side=200.0)
    state = simulate(generate_topology(config, 5), config, 5)
    worst = 0.0
    for l in range(config.L):
        for k in range(config.K):
            x = state.h_hat[:, l, k, :]
            emp = x.T @ x.conj() / len(x)
            Phi = state.Phi[l, k]
            # entrywise error relative to the entry's natural scale sqrt(Phi_ii Phi_jj)
            d = np.sqrt(np.real(np.diag(Phi)))
            worst = max(worst, float(np.max(np.abs(emp - Phi) / np.outer(d, d))))
    psd_ok, rng = True, np.random.default_rng(SEED)
    for _ in range(100):
        cfg, st_ = random_instance(rng, n_mc=10)
        diff = st_.R - st_.Phi
        eig = np.linalg.eigvalsh(diff)
        psd_ok &= bool(eig.min() >= -1e-12 * np.abs(st_.R).max())
    ok = worst < 0.05 and psd_ok
    assert record(5, ok, f"max normalized covariance error {worst:.3f} at 1e5 draws, R - Phi PSD on 100: {psd_ok}")


def test_6_desk_training(desk, record):
    run, net, history, dt = desk
    finite = all(np.isfinite(r["loss"]) for r in history.rows)
    mse = history.epoch_means("mse")
    ratio = mse[-1] / mse[0]
    held = [held_out_sample(run.network, 5, 1, i) for i in range(40)]
    ks = power_cdf(net, held, run.network).ks
    ok_a, ok_b = finite, ratio < 0.5
    ok_c = ks["ul"] <= 0.15 and ks["dl"] <= 0.15
    detail = (
        f"(a) finite {finite}; (b) epoch MSE {mse[0]:.4f} -> {mse[-1]:.4f}, ratio {ratio:.3f} (need < 0.5); "
        f"(c) KS ul {ks['ul']:.3f} dl {ks['dl']:.3f} (need <= 0.15); training {dt:.0f} s"
    )
    assert record(6, ok_a and ok_b and ok_c and dt < 900, detail)


def _decreasing_with_slack(values) -> bool:
    return int(np.sum(np.diff(values) >= 0)) <= 1


def test_7_se_trend(desk_sweep, record):
    sc, rows = desk_sweep
    by = {(r["strategy"], r["K"]): r for r in rows}
    trend = {d: [by[("predicted-uc-cf", K)][f"se_{d}"] for K in sc.K_values] for d in ("ul", "dl")}
    ratio = {
        d: np.mean([by[("predicted-uc-cf", K)][f"min_se_{d}"] for K in sc.K_values])
        / np.mean([by[("optimal-uc-cf", K)][f"min_se_{d}"] for K in sc.K_values])
        for d in ("ul", "dl")
    }
    ok_trend = all(_decreasing_with_slack(v) for v in trend.values())
    ok_ratio = all(r >= 0.7 for r in ratio.values())
    detail = (
        f"mean SE ul {np.round(trend['ul'], 3).tolist()} dl {np.round(trend['dl'], 3).tolist()} "
        f"(trend {ok_trend}); min-SE ratio ul {ratio['ul']:.2f} dl {ratio['dl']:.2f} (need >= 0.7)"
    )
    assert record(7, ok_trend and ok_ratio, detail)


def test_8_robustness(desk, desk_sweep, record):
    run, net, _, _ = desk
    sc, _ = desk_sweep
    rows = robustness_sweep(net, sc, run.network)
    mean = {(s, d): np.mean([r[f"se_{d}"] for r in rows if r["noise_m"] == s]) for s in (0.0, 5.0) for d in ("ul", "dl")}
    rel = {d: abs(mean[(5.0, d)] - mean[(0.0, d)]) / mean[(0.0, d)] for d in ("ul", "dl")}
    ok = all(v <= 0.15 for v in rel.values())
    assert record(8, ok, f"relative SE change at 5 m: ul {rel['ul']:.3%}, dl {rel['dl']:.3%} (need <= 15%)")


def test_9_complexity(desk, record):
    run, net, _, _ = desk
    lin = [attention_flops(2 * K, 64, 4) / attention_flops(K, 64, 4) for K in (16, 32, 64)]
    dense = [dense_attention_flops(2 * K, 64, 4) / dense_attention_flops(K, 64, 4) for K in (16, 32, 64)]
    lat = latency_comparison(net, run.network, 40, seed=SEED, Q=DESK_Q)
    speedup = lat["dcc_oracle_s"] / lat["predicted_s"]
    ok = all(1.9 <= r <= 2.1 for r in lin) and all(3.6 <= r <= 4.4 for r in dense) and speedup >= 10
    detail = (
        f"linear ratios {np.round(lin, 3).tolist()}, dense {np.round(dense, 3).tolist()}; "
        f"K=40 predicted {lat['predicted_s'] * 1e3:.1f} ms vs DCC+oracle {lat['dcc_oracle_s'] * 1e3:.0f} ms ({speedup:.0f}x)"
    )
    assert record(9, ok, detail)


def test_10_connection_saturation(desk, record):
    run, net, _, _ = desk
    config = run.network.replace(tau_p=5)
    sc = EvalScenario(strategies=("dcc", "predicted-uc-cf"), K_values=(5, 10, 20, 40), n_test=10, Q=DESK_Q, seed=1)
    rows = connection_stats(sc, net, config)
    cap = config.L * config.tau_p
    pred = {r["K"]: r["total"] for r in rows if r["strategy"] == "predicted-uc-cf"}
    dcc_exact = all(r["total"] == r["K"] * DESK_Q for r in rows if r["strategy"] == "dcc")
    ok = max(pred.values()) <= cap and pred[40] >= 0.9 * cap and dcc_exact
    detail = f"predicted totals {pred} vs L*tau_p = {cap}; DCC exactly K*Q: {dcc_exact}"
    assert record(10, ok, detail)
