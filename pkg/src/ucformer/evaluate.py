"""Baselines, evaluation sweeps and complexity counters.

Every strategy is scored on the same channel draws of a sample (paired
evaluation), and SE always comes from the frozen-filter coefficients, the same
convention the oracle optimizes, so oracle powers dominate any other powers
on a given mask.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .config import ModelConfig, NetworkConfig
from .data import Sample, build_features, inject_noise, make_sample
from .mmf import SinrCoefficients, extract_both, solve_mmf_dl, solve_mmf_ul
from .model import CosFormerNet, n_parameters, param_shapes
from .netsim.channel import ChannelState, simulate
from .netsim.se import ClusterMask
from .rng import stream

STRATEGIES = ("optimal-cf", "dcc", "optimal-uc-cf", "predicted-uc-cf")


@dataclass(frozen=True)
class EvalScenario:
    strategies: tuple[str, ...] = STRATEGIES
    K_values: tuple[int, ...] = (3, 5, 8, 12)
    noise_levels_m: tuple[float, ...] = (0.0, 5.0)
    seed: int = 0
    n_test: int = 20
    Q: int = 8
    sigma_e_m: float = 0.0

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("DCC needs Q >= 1")
        if not self.K_values or not self.strategies or not self.noise_levels_m:
            raise ValueError("sweep lists must be nonempty")
        unknown = set(self.strategies) - set(STRATEGIES)
        if unknown:
            raise ValueError(f"unknown strategies {sorted(unknown)}")


def held_out_sample(config: NetworkConfig, K: int, seed: int, index: int, sigma_e: float = 0.0) -> Sample:
    s = int(stream(seed, "test-sample", K, index).integers(0, 2**62))
    return make_sample(config, K, s, sigma_e)


def baseline_full_cf(K: int, L: int) -> ClusterMask:
    """Every AP serves every UE; the pilot limit is deliberately not applied."""
    return ClusterMask.full(K, L)


def baseline_dcc(beta: np.ndarray, Q: int) -> ClusterMask:
    """Each UE joins its Q strongest APs by large-scale fading (ties to the lower AP index)."""
    beta = np.asarray(beta, dtype=float)
    L, K = beta.shape
    if Q > L:
        warnings.warn(f"Q={Q} exceeds L={L}; clamped to L", stacklevel=2)
        Q = L
    order = np.argsort(-beta, axis=0, kind="stable")[:Q]  # (Q, K)
    mask = np.zeros((K, L), dtype=bool)
    mask[np.arange(K)[None, :].repeat(Q, 0), order] = True
    return ClusterMask(mask)


@dataclass
class Scored:
    """Per-UE SE of one strategy on one sample."""

    mask: ClusterMask
    p_ul: np.ndarray
    p_dl: np.ndarray
    se_ul: np.ndarray
    se_dl: np.ndarray

    @property
    def connections(self) -> int:
        return self.mask.connections()


def _se(coeffs: SinrCoefficients, p: np.ndarray, prelog: float) -> np.ndarray:
    return prelog * np.log2(1.0 + np.maximum(coeffs.sinr(p), 0.0))


def score(state: ChannelState, mask: ClusterMask, config: NetworkConfig, powers=None) -> Scored:
    """SE on ``mask`` with the given (p_ul, p_dl) or, when None, the max-min oracle powers."""
    ul_c, dl_c = extract_both(state, mask, config)
    if powers is None:
        p_ul, p_dl = solve_mmf_ul(ul_c, config).p, solve_mmf_dl(dl_c, config).p
    else:
        p_ul, p_dl = (np.asarray(p, dtype=float) for p in powers)
    return Scored(
        mask,
        p_ul,
        p_dl,
        _se(ul_c, p_ul, config.tau_u / config.tau_c),
        _se(dl_c, p_dl, config.tau_d / config.tau_c),
    )


def evaluate_sample(
    sample: Sample, config: NetworkConfig, strategies, net: CosFormerNet | None = None, Q: int = 8, X=None
) -> dict[str, Scored]:
    """Score every strategy on one set of channel draws. ``X`` overrides the model input."""
    state = simulate(sample.topology, config, sample.seed)
    out = {}
    pred = None
    if "predicted-uc-cf" in strategies or "optimal-uc-cf" in strategies:
        if net is None:
            raise ValueError("UC strategies need a trained model")
        pred = net.forward(sample.X if X is None else X, config.tau_p)
    for name in strategies:
        if name == "optimal-cf":
            out[name] = score(state, baseline_full_cf(sample.K, sample.L), config)
        elif name == "dcc":
            out[name] = score(state, baseline_dcc(sample.beta, Q), config)
        elif name == "optimal-uc-cf":
            out[name] = score(state, pred.mask_binary, config)
        elif name == "predicted-uc-cf":
            out[name] = score(state, pred.mask_binary, config, (pred.p_ul_mw, pred.p_dl_mw))
    return out


def eval_se_sweep(scenario: EvalScenario, net: CosFormerNet | None, config: NetworkConfig) -> list[dict]:
    """Rows (strategy, K, mean per-UE SE, mean min-SE) averaged over n_test paired samples."""
    acc: dict[tuple[str, int], list[Scored]] = {}
    for K in scenario.K_values:
        for i in range(scenario.n_test):
            sample = held_out_sample(config, K, scenario.seed, i, scenario.sigma_e_m)
            for name, sc in evaluate_sample(sample, config, scenario.strategies, net, scenario.Q).items():
                acc.setdefault((name, K), []).append(sc)
    rows = []
    for name in scenario.strategies:
        for K in scenario.K_values:
            scs = acc[(name, K)]
            rows.append(
                dict(
                    strategy=name,
                    K=K,
                    se_ul=float(np.mean([s.se_ul.mean() for s in scs])),
                    se_dl=float(np.mean([s.se_dl.mean() for s in scs])),
                    min_se_ul=float(np.mean([s.se_ul.min() for s in scs])),
                    min_se_dl=float(np.mean([s.se_dl.min() for s in scs])),
                )
            )
    return rows


def connection_stats(scenario: EvalScenario, net: CosFormerNet | None, config: NetworkConfig) -> list[dict]:
    """Rows (strategy, K, total connections, connections per UE) averaged over samples."""
    rows = []
    for name in scenario.strategies:
        if name == "optimal-uc-cf":
            continue  # same clusters as predicted-uc-cf
        for K in scenario.K_values:
            totals = []
            for i in range(scenario.n_test):
                sample = held_out_sample(config, K, scenario.seed, i, scenario.sigma_e_m)
                if name == "optimal-cf":
                    mask = baseline_full_cf(K, config.L)
                elif name == "dcc":
                    mask = baseline_dcc(sample.beta, scenario.Q)
                else:
                    mask = net.forward(sample.X, config.tau_p).mask_binary
                totals.append(mask.connections())
            rows.append(dict(strategy=name, K=K, total=float(np.mean(totals)), per_ue=float(np.mean(totals)) / K))
    return rows


@dataclass
class PowerCdf:
    rows: list[dict]
    ks: dict[str, float]


def empirical_cdf(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    v = np.sort(np.asarray(values, dtype=float))
    return v, np.arange(1, len(v) + 1) / len(v)


def power_cdf(net: CosFormerNet, samples: list[Sample], config: NetworkConfig) -> PowerCdf:
    """Empirical CDFs of predicted and oracle powers (oracle on the predicted clusters)."""
    pools = {("ul", "predicted"): [], ("ul", "oracle"): [], ("dl", "predicted"): [], ("dl", "oracle"): []}
    for sample in samples:
        state = simulate(sample.topology, config, sample.seed)
        pred = net.forward(sample.X, config.tau_p)
        opt = score(state, pred.mask_binary, config)
        pools[("ul", "predicted")].append(pred.p_ul_mw)
        pools[("dl", "predicted")].append(pred.p_dl_mw)
        pools[("ul", "oracle")].append(opt.p_ul)
        pools[("dl", "oracle")].append(opt.p_dl)
    rows = []
    for (direction, source), parts in pools.items():
        for v, c in zip(*empirical_cdf(np.concatenate(parts))):
            rows.append(dict(direction=direction, source=source, value=float(v), cdf=float(c)))
    ks = {
        d: float(stats.ks_2samp(np.concatenate(pools[(d, "predicted")]), np.concatenate(pools[(d, "oracle")])).statistic)
        for d in ("ul", "dl")
    }
    return PowerCdf(rows, ks)


def robustness_sweep(net: CosFormerNet, scenario: EvalScenario, config: NetworkConfig) -> list[dict]:
    """Mean per-UE SE of predicted-uc-cf when the model sees positions perturbed by sigma.

    Channels and SE always come from the clean positions.
    """
    rows = []
    for sigma in scenario.noise_levels_m:
        for K in scenario.K_values:
            ul, dl = [], []
            for i in range(scenario.n_test):
                sample = held_out_sample(config, K, scenario.seed, i)
                topo = sample.topology
                nseed = int(stream(scenario.seed, "robustness", K, i).integers(2**62))
                X = build_features(inject_noise(topo.ue_xy, sigma, nseed, "ue"), inject_noise(topo.ap_xy, sigma, nseed, "ap"))
                sc = evaluate_sample(sample, config, ("predicted-uc-cf",), net, X=X)["predicted-uc-cf"]
                ul.append(sc.se_ul.mean())
                dl.append(sc.se_dl.mean())
            rows.append(dict(noise_m=float(sigma), K=K, se_ul=float(np.mean(ul)), se_dl=float(np.mean(dl))))
    return rows


@dataclass
class FlopReport:
    K: int
    components: dict[str, int]
    n_params: int
    attention: int
    dense_attention: int
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())


def _affine(K: int, n_in: int, n_out: int) -> int:
    return 2 * K * n_in * n_out + K * n_out


def attention_flops(K: int, d_mod: int, n_heads: int) -> int:
    """Linearized cosine attention for one layer (all heads).

    Kernel map on Q and K, four position reweightings, two d_head x d_head
    summaries and their two products with the queries, plus the final sum.
    """
    dh = d_mod // n_heads
    per_head = 2 * K * dh + 4 * K * dh + 2 * (2 * K * dh * dh) + 2 * (2 * K * dh * dh) + K * dh
    return n_heads * per_head


def dense_attention_flops(K: int, d_mod: int, n_heads: int) -> int:
    """Dense counterfactual: explicit K x K scores, cosine reweighting, then S V."""
    dh = d_mod // n_heads
    per_head = 2 * K * dh + 2 * K * K * dh + K * K + 2 * K * K * dh
    return n_heads * per_head


def flops_report(config: ModelConfig, K: int, L: int) -> FlopReport:
    d, f, M = config.d_mod, config.ffn_width, config.n_layers
    ln = 8 * K * d
    comps = {
        "embed": _affine(K, 2 * L + 2, d),
        "layer_norm": M * 2 * ln,
        "qkv": M * _affine(K, d, 3 * d),
        "attention": M * attention_flops(K, d, config.n_heads),
        "attn_out": M * _affine(K, d, d),
        "ffn": M * (_affine(K, d, f) + K * f + _affine(K, f, d)),
        "residual": M * 2 * K * d,
        "heads": _affine(K, d, L) + 2 * _affine(K, d, 1) + 4 * K * (L + 2),
    }
    params = sum(int(np.prod(s)) for s in param_shapes(config, L).values())
    return FlopReport(
        K=K,
        components=comps,
        n_params=params,
        attention=comps["attention"],
        dense_attention=M * dense_attention_flops(K, d, config.n_heads),
    )


def time_call(fn, repeats: int = 3) -> float:
    """Best-of-n wall clock seconds."""
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return float(best)


def latency_comparison(net: CosFormerNet, config: NetworkConfig, K: int, seed: int = 0, Q: int = 8) -> dict[str, float]:
    """Wall clock of predicted-uc-cf inference vs the DCC + oracle pipeline on one sample.

    Informational; both pipelines start from positions.
    """
    sample = held_out_sample(config, K, seed, 0)
    topo = sample.topology

    def predicted():
        X = build_features(topo.ue_xy, topo.ap_xy)
        return net.forward(X, config.tau_p)

    def dcc_oracle():
        state = simulate(topo, config, sample.seed)
        return score(state, baseline_dcc(state.beta, min(Q, config.L)), config)

    return {"predicted_s": time_call(predicted), "dcc_oracle_s": time_call(dcc_oracle, repeats=1)}


def model_summary(net: CosFormerNet) -> dict[str, int]:
    return {"n_params": n_parameters(net.params), "L": net.L}


def attention_oracle_check(n_instances: int = 200, seed: int = 0, max_K: int = 32) -> list[dict]:
    """Linearized attention vs the dense O(K^2) evaluation on random instances.

    Instances cycle through both kernels and N_h in {1, 4}; ``rel_err`` is the
    max absolute deviation over the max absolute dense output.
    """
    from .autodiff import Tensor
    from .model import cos_linear_attention, dense_cos_attention

    rng = stream(seed, "attention-oracle")
    rows = []
    for n in range(n_instances):
        kernel = ("elu", "relu")[n % 2]
        n_heads = (1, 4)[(n // 2) % 2]
        K = int(rng.integers(1, max_K + 1))
        dh = int(rng.integers(1, 17))
        Q, Kt, V = (rng.normal(size=(n_heads, K, dh)) for _ in range(3))
        lin = cos_linear_attention(
            [Tensor(q) for q in Q], [Tensor(k) for k in Kt], [Tensor(v) for v in V], kernel
        ).data
        dense = dense_cos_attention(Q, Kt, V, kernel)
        scale = max(float(np.abs(dense).max()), 1e-300)
        rows.append(dict(instance=n, K=K, n_heads=n_heads, d_head=dh, kernel=kernel, rel_err=float(np.abs(lin - dense).max() / scale)))
    return rows
