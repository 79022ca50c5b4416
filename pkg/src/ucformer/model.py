"""ELU-CosFormer: coordinates in, AP clusters and UL/DL powers out.

Token k carries the normalized coordinates of UE k followed by those of every
AP. The encoder is pre-norm with cosine-reweighted linear attention; three
heads read the final token states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .netsim.se import ClusterMask


def feature_width(L: int) -> int:
    return 2 * L + 2


def n_aps_from_width(width: int) -> int:
    if width < 4 or width % 2:
        raise ValueError(f"feature width {width} is not 2L+2 for any L >= 1")
    return (width - 2) // 2


def param_shapes(config: ModelConfig, L: int) -> dict[str, tuple[int, ...]]:
    d, f = config.d_mod, config.ffn_width
    shapes: dict[str, tuple[int, ...]] = {"W_in": (d, feature_width(L)), "b_in": (d,)}
    for m in range(config.n_layers):
        shapes.update(
            {
                f"l{m}.ln1_g": (d,),
                f"l{m}.ln1_b": (d,),
                f"l{m}.W_qkv": (3 * d, d),
                f"l{m}.b_qkv": (3 * d,),
                f"l{m}.W_out": (d, d),
                f"l{m}.b_out": (d,),
                f"l{m}.ln2_g": (d,),
                f"l{m}.ln2_b": (d,),
                f"l{m}.W1": (f, d),
                f"l{m}.b1": (f,),
                f"l{m}.W2": (d, f),
                f"l{m}.b2": (d,),
            }
        )
    shapes.update(
        {"W_mask": (d, L), "b_mask": (L,), "W_UL": (d, 1), "b_UL": (1,), "W_DL": (d, 1), "b_DL": (1,)}
    )
    return shapes


_HEAD_WEIGHTS = ("W_mask", "W_UL", "W_DL")  # stored (in, out); the rest are (out, in)


def _fan_in(name: str, shapes: dict[str, tuple[int, ...]]) -> int:
    prefix, _, base = name.rpartition(".")
    if base.startswith("b"):
        base = "W" + base[1:]
        name = f"{prefix}.{base}" if prefix else base
    shape = shapes[name]
    return shape[0] if base in _HEAD_WEIGHTS else shape[1]


def init_params(config: ModelConfig, L: int, seed: int) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) for every affine map; layer norms start at identity."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1217]))
    shapes = param_shapes(config, L)
    params = {}
    for name, shape in shapes.items():
        base = name.split(".")[-1]
        if base.startswith("ln"):
            value = np.ones(shape) if base.endswith("_g") else np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


def n_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x W^T + b for weights stored (out, in)."""
    return ad.add(ad.matmul(x, ad.transpose(W)), b)


# ---------------------------------------------------------------------------
# attention


def cosine_weights(K: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of pi*i/(2K) for token positions i = 1..K."""
    angle = np.pi * np.arange(1, K + 1) / (2 * K)
    return np.cos(angle), np.sin(angle)


def kernel_map(x: Tensor, kernel: str, alpha: float = 1.0) -> Tensor:
    return ad.elu(x, alpha) if kernel == "elu" else ad.relu(x)


def embed(X: Tensor, params: dict[str, Tensor]) -> Tensor:
    W = params["W_in"]
    if X.data.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ad.ShapeError(f"input has shape {X.shape}; expected (K, {W.shape[1]})")
    return linear(X, W, params["b_in"])


def qkv(Z_norm: Tensor, params: dict[str, Tensor], layer: int, n_heads: int):
    """Per-head query/key/value blocks, each a list of N_h tensors of shape (K, d_head)."""
    fused = linear(Z_norm, params[f"l{layer}.W_qkv"], params[f"l{layer}.b_qkv"])
    d = fused.shape[1] // 3
    dh = d // n_heads
    parts = []
    for offset in (0, d, 2 * d):
        parts.append([ad.take(fused, offset + h * dh, offset + (h + 1) * dh) for h in range(n_heads)])
    return tuple(parts)


def cos_linear_attention(
    Q: list[Tensor],
    K: list[Tensor],
    V: list[Tensor],
    kernel: str = "elu",
    alpha: float = 1.0,
    normalize: bool = False,
) -> Tensor:
    """Cosine-reweighted linear attention, heads concatenated to (K, d_mod).

    Per head the output equals S V with S_ij = phi(q_i).phi(k_j) cos(pi(i-j)/2K).
    The cosine splits by angle addition, so S is never formed:
    A = Qcos (Kcos^T V) + Qsin (Ksin^T V), which costs O(K d_head^2).
    """
    n_tok = Q[0].shape[0]
    cos_w, sin_w = cosine_weights(n_tok)
    heads = []
    for q, k, v in zip(Q, K, V):
        qp, kp = kernel_map(q, kernel, alpha), kernel_map(k, kernel, alpha)
        qc, qs = ad.row_scale(qp, cos_w), ad.row_scale(qp, sin_w)
        kc, ks = ad.row_scale(kp, cos_w), ad.row_scale(kp, sin_w)
        out = ad.add(
            ad.matmul(qc, ad.matmul(ad.transpose(kc), v)),
            ad.matmul(qs, ad.matmul(ad.transpose(ks), v)),
        )
        if normalize:
            ones = Tensor(np.ones((n_tok, 1)))
            den = ad.add(
                ad.matmul(qc, ad.matmul(ad.transpose(kc), ones)),
                ad.matmul(qs, ad.matmul(ad.transpose(ks), ones)),
            )
            out = ad.row_divide(out, den)
        heads.append(out)
    return heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)


def _phi(x: np.ndarray, kernel: str, alpha: float) -> np.ndarray:
    if kernel == "elu":
        return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return np.maximum(x, 0.0)


def dense_cos_attention(Q, K, V, kernel="elu", alpha=1.0, normalize=False) -> np.ndarray:
    """Reference O(K^2) evaluation of the same operator on plain arrays.

    ``Q``, ``K``, ``V`` are (N_h, K, d_head) arrays.
    """
    n_heads, n_tok, _ = Q.shape
    i = np.arange(1, n_tok + 1)
    W = np.cos(np.pi * (i[:, None] - i[None, :]) / (2 * n_tok))
    outs = []
    for h in range(n_heads):
        S = (_phi(Q[h], kernel, alpha) @ _phi(K[h], kernel, alpha).T) * W
        out = S @ V[h]
        if normalize:
            out = out / np.maximum(S.sum(axis=1, keepdims=True), 1e-6)
        outs.append(out)
    return np.concatenate(outs, axis=1)


def encoder_layer(
    Z: Tensor,
    params: dict[str, Tensor],
    layer: int,
    config: ModelConfig,
    train: bool = False,
    seed: int = 0,
) -> Tensor:
    p = lambda name: params[f"l{layer}.{name}"]  # noqa: E731
    Zn = ad.layer_norm(Z, p("ln1_g"), p("ln1_b"))
    Q, K, V = qkv(Zn, params, layer, config.n_heads)
    A = cos_linear_attention(Q, K, V, config.kernel, config.alpha_elu, config.normalize_attention)
    A = linear(A, p("W_out"), p("b_out"))
    A = ad.dropout(A, config.dropout, train, _site_seed(seed, layer, 0))
    Z1 = ad.add(Z, A)
    H = ad.relu(linear(ad.layer_norm(Z1, p("ln2_g"), p("ln2_b")), p("W1"), p("b1")))
    F = ad.dropout(linear(H, p("W2"), p("b2")), config.dropout, train, _site_seed(seed, layer, 1))
    return ad.add(Z1, F)


def _site_seed(seed: int, layer: int, site: int) -> int:
    return (int(seed) * 131 + layer * 2 + site) & (2**63 - 1)


# ---------------------------------------------------------------------------
# heads


def top_tau_mask(mask_soft: np.ndarray, tau_p: int, xi: float) -> np.ndarray:
    """Keep each AP's tau_p highest scores (lower UE index wins ties), then threshold."""
    K, L = mask_soft.shape
    keep = np.zeros((K, L), dtype=bool)
    if K <= tau_p:
        keep[:] = True
    else:
        order = np.argsort(-mask_soft, axis=0, kind="stable")[:tau_p]
        keep[order, np.arange(L)[None, :]] = True
    return keep & (mask_soft > xi)


def repair_connectivity(binary: np.ndarray, mask_soft: np.ndarray, tau_p: int) -> tuple[np.ndarray, list[int]]:
    """Give every UE with an empty row at least one AP without breaking the tau_p limit.

    The UE goes to its best-scoring AP if that AP has a free slot, or by
    evicting the AP's weakest UE that keeps another AP, when the newcomer
    scores higher. Failing that, it takes the best AP with a free slot, then
    evicts the weakest multiply-served UE at its best AP. Returns the
    repaired mask and UEs left unserved (possible only if K > L * tau_p).
    """
    mask = binary.copy()
    unserved = []
    for k in np.flatnonzero(~mask.any(axis=1)):
        prefs = np.argsort(-mask_soft[k], kind="stable")
        load = mask.sum(axis=0)
        row_count = mask.sum(axis=1)

        def victim(l, stricter: bool):
            cand = np.flatnonzero(mask[:, l] & (row_count >= 2))
            if stricter:
                cand = cand[mask_soft[cand, l] < mask_soft[k, l]]
            if cand.size == 0:
                return None
            # weakest score; ties evict the higher UE index
            return int(cand[np.lexsort((-cand, mask_soft[cand, l]))[0]])

        best = prefs[0]
        choice, evict = None, None
        if load[best] < tau_p:
            choice = best
        elif (j := victim(best, True)) is not None:
            choice, evict = best, j
        else:
            free = [l for l in prefs if load[l] < tau_p]
            if free:
                choice = free[0]
            else:
                for l in prefs:
                    if (j := victim(l, False)) is not None:
                        choice, evict = l, j
                        break
        if choice is None:
            unserved.append(int(k))
            continue
        if evict is not None:
            mask[evict, choice] = False
        mask[k, choice] = True
    return mask, unserved


def clustering_head(Z_out: Tensor, params: dict[str, Tensor], tau_p: int, xi: float):
    soft = ad.sigmoid(ad.add(ad.matmul(Z_out, params["W_mask"]), params["b_mask"]))
    binary = top_tau_mask(soft.data, tau_p, xi)
    binary, unserved = repair_connectivity(binary, soft.data, tau_p)
    return soft, binary, unserved


def power_heads(Z_out: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    ul = ad.sigmoid(ad.add(ad.matmul(Z_out, params["W_UL"]), params["b_UL"]))
    dl = ad.sigmoid(ad.add(ad.matmul(Z_out, params["W_DL"]), params["b_DL"]))
    return ad.reshape(ul, (-1,)), ad.reshape(dl, (-1,))


def denormalize(p_ul_norm, p_dl_norm, config: ModelConfig, dl_budget_mw: float):
    """Map head outputs to mW; DL powers are rescaled to spend the whole budget."""
    p_ul_norm = np.asarray(p_ul_norm, dtype=float)
    p_dl_norm = np.asarray(p_dl_norm, dtype=float)
    p_ul = (config.p_ul_max_mw - config.p_ul_min_mw) * p_ul_norm + config.p_ul_min_mw
    check = (config.p_dl_max_mw - config.p_dl_min_mw) * p_dl_norm + config.p_dl_min_mw
    total = check.sum()
    if not total > 0:
        raise ValueError("DL rescale undefined: predicted DL powers sum to zero")
    return p_ul, check * (dl_budget_mw / total)


@dataclass
class ModelOutput:
    mask_soft: np.ndarray
    mask_binary: ClusterMask
    p_ul_norm: np.ndarray
    p_dl_norm: np.ndarray
    p_ul_mw: np.ndarray
    p_dl_mw: np.ndarray
    unserved: list[int]
    # graph handles for training
    soft_t: Tensor | None = None
    p_ul_t: Tensor | None = None
    p_dl_t: Tensor | None = None


class CosFormerNet:
    """Parameters plus the forward pass; variable token count K, fixed L."""

    def __init__(self, config: ModelConfig, L: int, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = config
        self.L = L
        self.params = init_params(config, L, seed) if params is None else params
        expected = param_shapes(config, L)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise ad.ShapeError(f"parameter {name}: expected shape {shape}, got {got}")

    @property
    def dl_budget_mw(self) -> float:
        return self.L * self.config.p_dl_max_mw

    def encode(self, X, train: bool = False, seed: int = 0) -> Tensor:
        Z = embed(X if isinstance(X, Tensor) else Tensor(X), self.params)
        for m in range(self.config.n_layers):
            Z = encoder_layer(Z, self.params, m, self.config, train, seed)
        return Z

    def forward(self, X, tau_p: int, train: bool = False, seed: int = 0) -> ModelOutput:
        Z = self.encode(X, train, seed)
        soft, binary, unserved = clustering_head(Z, self.params, tau_p, self.config.xi)
        ul, dl = power_heads(Z, self.params)
        p_ul_mw, p_dl_mw = denormalize(ul.data, dl.data, self.config, self.dl_budget_mw)
        return ModelOutput(
            mask_soft=soft.data,
            mask_binary=ClusterMask(binary),
            p_ul_norm=ul.data,
            p_dl_norm=dl.data,
            p_ul_mw=p_ul_mw,
            p_dl_mw=p_dl_mw,
            unserved=unserved,
            soft_t=soft,
            p_ul_t=ul,
            p_dl_t=dl,
        )

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ad.ShapeError(f"checkpoint {name}: shape {state[name].shape}, model expects {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)
