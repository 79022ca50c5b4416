"""scikit-learn style wrapper around the network and its training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ModelConfig, NetworkConfig, RunConfig, TrainConfig
from .data import Dataset
from .model import CosFormerNet, ModelOutput, feature_width
from .train import train


def check_features(X, L: int | None = None) -> np.ndarray:
    """Validate one K x (2L+2) token matrix; returns a float64 copy."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if X.shape[1] < 4 or X.shape[1] % 2:
        raise ValueError(f"feature width must be 2L+2 with L >= 1, got {X.shape[1]}")
    if L is not None and X.shape[1] != feature_width(L):
        raise ValueError(f"expected {feature_width(L)} features for L={L}, got {X.shape[1]}")
    return X


def check_dataset(dataset) -> Dataset:
    if not isinstance(dataset, Dataset):
        raise TypeError(f"fit expects a Dataset, got {type(dataset).__name__}")
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    Ls = {s.L for s in dataset.samples}
    if len(Ls) != 1:
        raise ValueError(f"samples mix AP counts {sorted(Ls)}")
    return dataset


class ELUCosFormer(BaseEstimator):
    """Joint cluster and power predictor.

    ``fit`` takes a :class:`~ucformer.data.Dataset` (its samples carry the
    channels the oracle needs); ``predict`` takes one token matrix or a list
    of them and returns :class:`~ucformer.model.ModelOutput` objects.
    """

    def __init__(
        self,
        d_mod=64,
        n_layers=2,
        n_heads=4,
        d_ff=None,
        dropout=0.1,
        xi=0.3,
        alpha_elu=1.0,
        kernel="elu",
        normalize_attention=False,
        lam=1e-2,
        lr=1e-3,
        epochs=5,
        batch_size=8,
        weight_decay=1e-2,
        random_state=0,
    ):
        self.d_mod = d_mod
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.xi = xi
        self.alpha_elu = alpha_elu
        self.kernel = kernel
        self.normalize_attention = normalize_attention
        self.lam = lam
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _run_config(self, network: NetworkConfig) -> RunConfig:
        model = ModelConfig(
            d_mod=self.d_mod,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_ff=self.d_ff,
            dropout=self.dropout,
            xi=self.xi,
            alpha_elu=self.alpha_elu,
            kernel=self.kernel,
            normalize_attention=self.normalize_attention,
            p_ul_max_mw=network.p_ul_max_mw,
            p_dl_max_mw=network.p_dl_max_per_ap_mw,
        )
        train_cfg = TrainConfig(
            lam=self.lam, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, weight_decay=self.weight_decay
        )
        return RunConfig(network, model, train_cfg)

    def fit(self, X, y=None):
        """Train on a Dataset; ``y`` is unused because labels come from the oracle."""
        dataset = check_dataset(X)
        network = dataset.config
        if network.L != dataset[0].L:
            raise ValueError(f"dataset config has L={network.L}, samples have L={dataset[0].L}")
        self.run_config_ = self._run_config(network)
        self.net_ = CosFormerNet(self.run_config_.model, network.L, seed=self.random_state)
        self.history_ = train(self.net_, dataset, self.run_config_, seed=self.random_state)
        self.n_aps_ = network.L
        return self

    def predict(self, X) -> ModelOutput | list[ModelOutput]:
        check_is_fitted(self, "net_")
        tau_p = self.run_config_.network.tau_p
        if isinstance(X, (list, tuple)):
            return [self.net_.forward(check_features(x, self.n_aps_), tau_p) for x in X]
        return self.net_.forward(check_features(X, self.n_aps_), tau_p)
