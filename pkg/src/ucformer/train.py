"""Dynamic-supervision training: oracle labels are recomputed on the clusters
the model predicts at each step, then the power heads regress onto them.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig, NetworkConfig, RunConfig, TrainConfig, dump_config, parse_config
from .data import Dataset
from .mmf import InfeasibleError, solve_mmf
from .model import CosFormerNet
from .rng import stream

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "batch", "loss", "mse", "min_se_ul", "min_se_dl", "grad_norm")


class TrainingError(RuntimeError):
    pass


def normalize_labels(p_ul, p_dl, model: ModelConfig, dl_budget_mw: float) -> tuple[np.ndarray, np.ndarray]:
    """Oracle powers in mW -> head targets in [0, 1].

    UL inverts the affine head map. DL is taken relative to the total budget,
    since the head's rescale only fixes relative magnitudes.
    """
    ul = (np.asarray(p_ul, dtype=float) - model.p_ul_min_mw) / (model.p_ul_max_mw - model.p_ul_min_mw)
    dl = np.asarray(p_dl, dtype=float) / dl_budget_mw
    return np.clip(ul, 0.0, 1.0), np.clip(dl, 0.0, 1.0)


def loss(pred: Tensor, target: np.ndarray, min_se_ul: float, min_se_dl: float, lam: float) -> Tensor:
    """Per-sample loss: mean squared error over the normalized powers minus the
    lam-weighted min-SE reward. The reward is a constant w.r.t. the parameters.
    """
    return ad.add(ad.mse(pred, np.asarray(target, dtype=float)), -lam * (min_se_ul + min_se_dl))


def se_surrogate(soft: Tensor, binary: np.ndarray, reward: float, lam: float) -> Tensor:
    """Straight-through stand-in for the reward: equals -lam*reward in value and
    pushes the retained soft scores up in proportion to the reward.
    """
    weights = np.asarray(binary, dtype=float)
    kept = ad.sum(ad.mul(soft, Tensor(weights)))
    denom = max(float(kept.data), 1e-12)
    return ad.scale(kept, -lam * reward / denom)


@dataclass
class AdamW:
    """Adam moments with bias correction and decoupled weight decay."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> AdamW:
        return cls(lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.adam_eps, weight_decay=cfg.weight_decay)

    def step(self, params: dict[str, Tensor]) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in {name}")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - self.lr * self.weight_decay * p.data


def optimizer_step(params: dict[str, Tensor], optimizer: AdamW) -> None:
    optimizer.step(params)


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Shuffled batches whose samples share K; the last batch per K may be short."""
    order = stream(seed, "batch-order", epoch).permutation(len(dataset))
    by_k: dict[int, list[int]] = {}
    for i in order:
        by_k.setdefault(dataset[i].K, []).append(int(i))
    out = []
    for K in sorted(by_k):
        idx = by_k[K]
        out += [idx[j : j + batch_size] for j in range(0, len(idx), batch_size)]
    perm = stream(seed, "batch-interleave", epoch).permutation(len(out))
    return [out[j] for j in perm]


@dataclass
class StepResult:
    loss: float
    mse: float
    min_se_ul: float
    min_se_dl: float
    skipped: int


def train_step(
    net: CosFormerNet,
    dataset: Dataset,
    indices: list[int],
    config: NetworkConfig,
    train_cfg: TrainConfig,
    optimizer: AdamW,
    seed: int,
) -> tuple[StepResult, float]:
    ad.zero_grad(net.parameters())
    terms, mses, ses_ul, ses_dl, skipped = [], [], [], [], 0
    for i in indices:
        s = dataset[i]
        out = net.forward(s.X, config.tau_p, train=True, seed=int(stream(seed, "dropout-site", i).integers(2**62)))
        if out.unserved:
            skipped += 1
            continue
        try:
            sol_ul, sol_dl = solve_mmf(dataset.channels(i), out.mask_binary, config)
        except InfeasibleError as exc:
            log.warning("sample %d skipped: %s", i, exc)
            skipped += 1
            continue
        t_ul, t_dl = normalize_labels(sol_ul.p, sol_dl.p, net.config, net.dl_budget_mw)
        pred = ad.concat([out.p_ul_t, out.p_dl_t])
        target = np.concatenate([t_ul, t_dl])
        if train_cfg.se_surrogate:
            reward = sol_ul.min_se + sol_dl.min_se
            term = ad.add(ad.mse(pred, target), se_surrogate(out.soft_t, out.mask_binary.mask, reward, train_cfg.lam))
        else:
            term = loss(pred, target, sol_ul.min_se, sol_dl.min_se, train_cfg.lam)
        terms.append(term)
        mses.append(float(np.mean((pred.data - target) ** 2)))
        ses_ul.append(sol_ul.min_se)
        ses_dl.append(sol_dl.min_se)
    if not terms:
        raise TrainingError(f"every sample of batch {indices[:4]}... was skipped")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    batch_loss = ad.scale(total, 1.0 / len(terms))
    if not np.isfinite(batch_loss.item()):
        raise TrainingError("non-finite loss")
    ad.backward(batch_loss)
    gnorm = float(np.sqrt(np.sum([np.sum(p.grad**2) for p in net.parameters() if p.grad is not None])))
    optimizer.step(net.params)
    res = StepResult(batch_loss.item(), float(np.mean(mses)), float(np.mean(ses_ul)), float(np.mean(ses_dl)), skipped)
    return res, gnorm


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def epoch_means(self, key: str) -> list[float]:
        epochs = sorted({r["epoch"] for r in self.rows})
        return [float(np.mean([r[key] for r in self.rows if r["epoch"] == e])) for e in epochs]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})


def train(net: CosFormerNet, dataset: Dataset, run: RunConfig, seed: int, epochs: int | None = None) -> TrainLog:
    """Run the training loop in place on ``net``; returns the per-batch metric log."""
    cfg = run.train
    if net.L != run.network.L:
        raise TrainingError(f"model built for L={net.L}, network has L={run.network.L}")
    optimizer = AdamW.from_config(cfg)
    history = TrainLog()
    for epoch in range(cfg.epochs if epochs is None else epochs):
        for b, idx in enumerate(batches(dataset, cfg.batch_size, seed, epoch)):
            res, gnorm = train_step(net, dataset, idx, run.network, cfg, optimizer, int(stream(seed, "step", epoch, b).integers(2**62)))
            history.rows.append(
                dict(epoch=epoch, batch=b, loss=res.loss, mse=res.mse, min_se_ul=res.min_se_ul, min_se_dl=res.min_se_dl, grad_norm=gnorm)
            )
        log.info("epoch %d: mse %.5f", epoch, history.epoch_means("mse")[-1])
    return history


def save_checkpoint(path: str | Path, net: CosFormerNet, run: RunConfig) -> None:
    """Parameters plus the run configuration text in one ``.npz`` archive."""
    arrays = net.state_dict()
    arrays["__config__"] = np.array(dump_config(run))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[CosFormerNet, RunConfig]:
    with np.load(path, allow_pickle=False) as archive:
        run = parse_config(str(archive["__config__"]))
        state = {k: archive[k].astype(np.float64) for k in archive.files if k != "__config__"}
    net = CosFormerNet(run.model, run.network.L)
    net.load_state_dict(state)
    return net, run
