"""Baselines, paired SE sweeps, CDFs, robustness and complexity accounting."""

import numpy as np
import pytest

from ucformer.config import ModelConfig, NetworkConfig
from ucformer.evaluate import (
    EvalScenario,
    attention_flops,
    attention_oracle_check,
    baseline_dcc,
    baseline_full_cf,
    connection_stats,
    dense_attention_flops,
    empirical_cdf,
    eval_se_sweep,
    evaluate_sample,
    flops_report,
    held_out_sample,
    power_cdf,
    robustness_sweep,
    score,
)
from ucformer.model import CosFormerNet
from ucformer.netsim.channel import simulate

NET = NetworkConfig(L=4, N=2, K=3, n_mc=40, tau_p=3)
MODEL = ModelConfig(d_mod=16, n_heads=2, p_ul_max_mw=NET.p_ul_max_mw, p_dl_max_mw=NET.p_dl_max_per_ap_mw)


@pytest.fixture(scope="module")
def net():
    return CosFormerNet(MODEL, NET.L, seed=0)


def saturating_net():
    """A model whose mask scores are all near one: every AP fills its pilot slots."""
    m = CosFormerNet(MODEL, NET.L, seed=0)
    m.params["W_mask"].data[:] = 0.0
    m.params["b_mask"].data[:] = 5.0
    return m


class TestBaselines:
    def test_full_cf(self):
        mask = baseline_full_cf(5, 4)
        assert mask.mask.sum(axis=0).tolist() == [5] * 4 and mask.connections() == 20

    def test_dcc_full_and_argmax(self):
        beta = np.random.default_rng(0).uniform(size=(4, 6))
        np.testing.assert_array_equal(baseline_dcc(beta, 4).mask, np.ones((6, 4), bool))
        one = baseline_dcc(beta, 1).mask
        assert one.sum() == 6
        np.testing.assert_array_equal(np.argmax(one, axis=1), np.argmax(beta, axis=0))

    def test_dcc_linear_growth(self):
        rng = np.random.default_rng(1)
        for K in (1, 5, 17):
            assert baseline_dcc(rng.uniform(size=(8, K)), 3).connections() == 3 * K

    def test_dcc_ties_lower_index(self):
        assert np.flatnonzero(baseline_dcc(np.ones((4, 1)), 2).mask[0]).tolist() == [0, 1]

    def test_dcc_clamp_warns(self):
        with pytest.warns(UserWarning, match="clamped"):
            mask = baseline_dcc(np.ones((3, 2)), 5)
        assert mask.connections() == 6


class TestScoring:
    def test_single_ue_uc_equals_full(self, net):
        s = held_out_sample(NET, 1, 0, 0)
        state = simulate(s.topology, NET, s.seed)
        a = score(state, baseline_full_cf(1, NET.L), NET)
        b = score(state, baseline_dcc(s.beta, NET.L), NET)
        np.testing.assert_allclose(a.se_ul, b.se_ul)

    def test_oracle_dominates_predicted(self, net):
        for i in range(5):
            out = evaluate_sample(held_out_sample(NET, 3, 1, i), NET, ("optimal-uc-cf", "predicted-uc-cf"), net)
            assert out["optimal-uc-cf"].se_ul.min() >= out["predicted-uc-cf"].se_ul.min() - 1e-9
            assert out["optimal-uc-cf"].se_dl.min() >= out["predicted-uc-cf"].se_dl.min() - 1e-9
            np.testing.assert_array_equal(out["optimal-uc-cf"].mask.mask, out["predicted-uc-cf"].mask.mask)

    def test_dl_budget_spent(self):
        s = held_out_sample(NET, 3, 2, 0)
        sc = score(simulate(s.topology, NET, s.seed), baseline_full_cf(3, NET.L), NET)
        assert sc.p_dl.sum() == pytest.approx(NET.dl_budget_mw, rel=1e-9)

    def test_uc_needs_model(self):
        with pytest.raises(ValueError, match="model"):
            evaluate_sample(held_out_sample(NET, 2, 0, 0), NET, ("predicted-uc-cf",), None)

    def test_dcc_below_full_cf(self):
        sc = EvalScenario(strategies=("optimal-cf", "dcc"), K_values=(2, 3), n_test=6, Q=1)
        rows = {(r["strategy"], r["K"]): r for r in eval_se_sweep(sc, None, NET)}
        for K in (2, 3):
            assert rows[("dcc", K)]["se_ul"] <= rows[("optimal-cf", K)]["se_ul"]

    def test_sweep_deterministic(self, net):
        sc = EvalScenario(K_values=(2, 3), n_test=2, Q=2)
        assert eval_se_sweep(sc, net, NET) == eval_se_sweep(sc, net, NET)

    def test_scenario_validation(self):
        with pytest.raises(ValueError, match="unknown"):
            EvalScenario(strategies=("magic",))
        with pytest.raises(ValueError):
            EvalScenario(Q=0)


class TestConnections:
    def test_bounds(self, net):
        sc = EvalScenario(strategies=("optimal-cf", "dcc", "predicted-uc-cf"), K_values=(2, 6), n_test=3, Q=2)
        for r in connection_stats(sc, net, NET):
            if r["strategy"] == "optimal-cf":
                assert r["total"] == r["K"] * NET.L
            elif r["strategy"] == "dcc":
                assert r["total"] == 2 * r["K"]
            else:
                assert r["total"] <= NET.L * NET.tau_p

    def test_saturation(self):
        sc = EvalScenario(strategies=("predicted-uc-cf",), K_values=(12,), n_test=3)
        (row,) = connection_stats(sc, saturating_net(), NET)
        assert row["total"] == pytest.approx(NET.L * NET.tau_p, rel=0.02)


class TestCdf:
    def test_empirical_cdf(self):
        v, c = empirical_cdf(np.array([3.0, 1.0, 2.0]))
        np.testing.assert_array_equal(v, [1, 2, 3])
        np.testing.assert_allclose(c, [1 / 3, 2 / 3, 1])

    def test_power_cdf_shape(self, net):
        samples = [held_out_sample(NET, 3, 0, i) for i in range(4)]
        cdf = power_cdf(net, samples, NET)
        for d in ("ul", "dl"):
            for src in ("predicted", "oracle"):
                rows = [r for r in cdf.rows if r["direction"] == d and r["source"] == src]
                cs = [r["cdf"] for r in rows]
                assert np.all(np.diff(cs) > 0) and cs[-1] == 1.0 and len(rows) == 12
                vals = [r["value"] for r in rows]
                assert np.all(np.diff(vals) >= 0)
                if d == "ul":
                    assert min(vals) >= 0 and max(vals) <= NET.p_ul_max_mw * (1 + 1e-12)
            assert 0.0 <= cdf.ks[d] <= 1.0


class TestRobustness:
    def test_zero_noise_row_matches_standard_eval(self, net):
        sc = EvalScenario(strategies=("predicted-uc-cf",), K_values=(3,), n_test=3, noise_levels_m=(0.0, 20.0))
        rows = robustness_sweep(net, sc, NET)
        (std,) = eval_se_sweep(sc, net, NET)
        assert rows[0]["se_ul"] == pytest.approx(std["se_ul"], rel=1e-12)
        assert rows[0]["se_dl"] == pytest.approx(std["se_dl"], rel=1e-12)
        assert [r["noise_m"] for r in rows] == [0.0, 20.0]


class TestComplexity:
    def test_attention_linear(self):
        for K in (8, 16, 32, 64):
            assert 1.9 <= attention_flops(2 * K, 64, 4) / attention_flops(K, 64, 4) <= 2.1

    def test_dense_quadratic(self):
        for K in (16, 32, 64):
            assert 3.6 <= dense_attention_flops(2 * K, 64, 4) / dense_attention_flops(K, 64, 4) <= 4.4

    def test_parameter_hand_count(self):
        d, L, dff, width = 64, 16, 256, 34
        layer = (3 * d * d + 3 * d) + (d * d + d) + 4 * d + (dff * d + dff) + (d * dff + d)
        hand = (d * width + d) + 2 * layer + (d * L + L) + 2 * (d + 1)
        rep = flops_report(ModelConfig(), K=16, L=16)
        assert rep.n_params == hand == 103378

    def test_totals_sum_parts(self):
        rep = flops_report(ModelConfig(), K=20, L=16)
        assert rep.total == sum(rep.components.values())
        assert rep.components["attention"] == rep.attention

    def test_attention_oracle(self):
        rows = attention_oracle_check(n_instances=40, seed=0)
        assert {r["kernel"] for r in rows} == {"elu", "relu"}
        assert max(r["rel_err"] for r in rows) < 1e-10
