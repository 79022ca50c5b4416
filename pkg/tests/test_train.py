"""Loss, optimizer, batching and the dynamic-supervision loop."""

import numpy as np
import pytest

from ucformer import autodiff as ad
from ucformer.autodiff import Tensor
from ucformer.config import ModelConfig, NetworkConfig, RunConfig, TrainConfig
from ucformer.data import build_dataset
from ucformer.model import CosFormerNet, denormalize
from ucformer.mmf import solve_mmf
from ucformer.train import (
    AdamW,
    TrainingError,
    batches,
    load_checkpoint,
    loss,
    normalize_labels,
    save_checkpoint,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def small_run():
    net = NetworkConfig(L=4, N=2, K=3, n_mc=30)
    model = ModelConfig(d_mod=16, n_heads=2, p_ul_max_mw=net.p_ul_max_mw, p_dl_max_mw=net.p_dl_max_per_ap_mw)
    return RunConfig(net, model, TrainConfig(epochs=2, batch_size=4, samples_per_K=6, K_train=(2, 3)))


@pytest.fixture(scope="module")
def small_data(small_run):
    return build_dataset(small_run.network, small_run.train, seed=0)


class TestLoss:
    def test_perfect_prediction(self):
        y = np.array([0.2, 0.7])
        assert loss(Tensor(y.copy()), y, 1.0, 2.0, 0.0).item() == 0.0

    def test_lambda_zero_is_mse(self):
        a, b = np.array([0.1, 0.5, 0.9]), np.array([0.0, 0.5, 1.0])
        assert loss(Tensor(a), b, 3.0, 3.0, 0.0).item() == pytest.approx(np.mean((a - b) ** 2))

    def test_reward_lowers_loss(self):
        a, b = Tensor(np.array([0.3])), np.array([0.5])
        assert loss(a, b, 2.0, 1.0, 0.1).item() < loss(a, b, 1.0, 1.0, 0.1).item()

    def test_reward_has_no_gradient(self):
        x = Tensor(np.array([0.3, 0.6]), requires_grad=True)
        ad.backward(loss(x, np.array([0.1, 0.2]), 5.0, 7.0, 1.0))
        g_with = x.grad.copy()
        x.grad = None
        ad.backward(loss(x, np.array([0.1, 0.2]), 0.0, 0.0, 0.0))
        np.testing.assert_array_equal(g_with, x.grad)


class TestAdamW:
    def test_zero_grad_zero_decay(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.zeros(2)
        AdamW(weight_decay=0.0).step({"p": p})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = Tensor(np.array([0.0, 0.0]), requires_grad=True)
        p.grad = np.array([3.0, -0.01])
        AdamW(lr=1e-3, weight_decay=0.0).step({"p": p})
        np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-4)

    def test_decay_only(self):
        p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
        p.grad = np.zeros(2)
        AdamW(lr=1e-2, weight_decay=0.1).step({"p": p})
        np.testing.assert_allclose(p.data, np.array([2.0, -4.0]) * (1 - 1e-3), rtol=1e-14)

    def test_non_finite_aborts(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="non-finite"):
            AdamW().step({"p": p})
        assert p.data[0] == 1.0


class TestLoop:
    def test_batches_share_K(self, small_data):
        bs = batches(small_data, 4, seed=0, epoch=0)
        assert sorted(i for b in bs for i in b) == list(range(len(small_data)))
        for b in bs:
            assert len({small_data[i].K for i in b}) == 1 and len(b) <= 4

    def test_label_consistency(self, small_run, small_data):
        net = CosFormerNet(small_run.model, small_run.network.L, seed=0)
        for i in range(len(small_data)):
            out = net.forward(small_data[i].X, small_run.network.tau_p)
            ul, dl = solve_mmf(small_data.channels(i), out.mask_binary, small_run.network)
            t_ul, t_dl = normalize_labels(ul.p, dl.p, net.config, net.dl_budget_mw)
            assert np.all((t_ul >= 0) & (t_ul <= 1)) and np.all((t_dl >= 0) & (t_dl <= 1))
            p_ul = t_ul * (net.config.p_ul_max_mw - net.config.p_ul_min_mw) + net.config.p_ul_min_mw
            np.testing.assert_allclose(p_ul, ul.p, rtol=1e-12)
            assert p_ul.max() <= small_run.network.p_ul_max_mw * (1 + 1e-12)
            assert (t_dl * net.dl_budget_mw).sum() == pytest.approx(small_run.network.dl_budget_mw, rel=1e-9)
            # the DL target is invariant under the head's rescale
            _, back = denormalize(t_ul, t_dl, net.config, net.dl_budget_mw)
            np.testing.assert_allclose(back, dl.p, rtol=1e-9)

    def test_reproducible_logs(self, small_run, small_data, tmp_path):
        logs = []
        for rep in range(2):
            net = CosFormerNet(small_run.model, small_run.network.L, seed=0)
            train(net, small_data, small_run, seed=1).write_csv(tmp_path / f"m{rep}.csv")
            logs.append((tmp_path / f"m{rep}.csv").read_text())
        assert logs[0] == logs[1]
        assert logs[0].startswith("epoch,batch,loss,mse")

    def test_losses_finite_and_params_move(self, small_run, small_data):
        net = CosFormerNet(small_run.model, small_run.network.L, seed=0)
        before = net.state_dict()
        log = train(net, small_data, small_run, seed=2)
        assert all(np.isfinite(r["loss"]) and np.isfinite(r["grad_norm"]) for r in log.rows)
        assert any(not np.array_equal(before[k], v) for k, v in net.state_dict().items())

    def test_mask_head_gets_no_gradient(self, small_run, small_data):
        net = CosFormerNet(small_run.model, small_run.network.L, seed=0)
        train_step(net, small_data, [0, 1], small_run.network, small_run.train, AdamW(lr=0.0, weight_decay=0.0), 0)
        g = net.params["W_mask"].grad
        assert g is None or not np.any(g)
        assert np.any(net.params["W_UL"].grad)

    def test_surrogate_reaches_mask_head(self, small_run, small_data):
        net = CosFormerNet(small_run.model, small_run.network.L, seed=0)
        cfg = small_run.train.replace(se_surrogate=True)
        train_step(net, small_data, [0, 1], small_run.network, cfg, AdamW(lr=0.0, weight_decay=0.0), 0)
        assert np.any(net.params["W_mask"].grad)

    def test_wrong_L(self, small_run, small_data):
        net = CosFormerNet(small_run.model, 5, seed=0)
        with pytest.raises(TrainingError, match="L=5"):
            train(net, small_data, small_run, seed=0)

    def test_checkpoint_round_trip(self, small_run, tmp_path):
        net = CosFormerNet(small_run.model, small_run.network.L, seed=3)
        save_checkpoint(tmp_path / "c.npz", net, small_run)
        back, run = load_checkpoint(tmp_path / "c.npz")
        assert run == small_run
        for k, v in net.state_dict().items():
            assert back.params[k].data.tobytes() == v.tobytes()
