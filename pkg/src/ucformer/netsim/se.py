"""MMSE combining/precoding and Monte Carlo use-and-then-forget SE.

Collective vectors stack the per-AP N-blocks AP-major, so entry ``l*N + n``
belongs to antenna n of AP l.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np

from ..config import NetworkConfig
from .channel import ChannelError, ChannelState

MIN_DRAWS = 10


class MaskError(ValueError):
    """A cluster mask violates its structural invariants."""


@dataclass(frozen=True)
class ClusterMask:
    mask: np.ndarray  # (K, L) bool

    def __post_init__(self):
        m = np.asarray(self.mask).astype(bool)
        if m.ndim != 2:
            raise MaskError(f"mask must be K x L, got shape {m.shape}")
        object.__setattr__(self, "mask", m)

    @property
    def K(self) -> int:
        return self.mask.shape[0]

    @property
    def L(self) -> int:
        return self.mask.shape[1]

    def connections(self) -> int:
        return int(self.mask.sum())

    def check(self, tau_p: int | None = None) -> None:
        empty = np.flatnonzero(~self.mask.any(axis=1))
        if empty.size:
            raise MaskError(f"UE {int(empty[0])} is served by no AP")
        if tau_p is not None:
            load = self.mask.sum(axis=0)
            over = np.flatnonzero(load > tau_p)
            if over.size:
                l = int(over[0])
                raise MaskError(f"AP {l} serves {int(load[l])} UEs, more than tau_p={tau_p}")

    @classmethod
    def full(cls, K: int, L: int) -> ClusterMask:
        return cls(np.ones((K, L), dtype=bool))


@dataclass(frozen=True)
class PowerAllocation:
    p_ul: np.ndarray  # (K,) mW
    p_dl: np.ndarray  # (K,) mW

    def check(self, config: NetworkConfig, rel_slack: float = 1e-9) -> None:
        if np.any(self.p_ul < 0) or np.any(self.p_ul > config.p_ul_max_mw * (1 + rel_slack)):
            raise ValueError("UL powers outside [0, p_ul_max]")
        if np.any(self.p_dl < 0):
            raise ValueError("negative DL power")
        if self.p_dl.sum() > config.dl_budget_mw * (1 + rel_slack):
            raise ValueError(f"DL powers sum {self.p_dl.sum():.6g} exceeds budget {config.dl_budget_mw:.6g}")


@dataclass(frozen=True)
class SeReport:
    se_ul: np.ndarray
    se_dl: np.ndarray
    sinr_ul: np.ndarray
    sinr_dl: np.ndarray
    floored: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "se_ul", "se_dl", "sinr_ul", "sinr_dl"])
        for k in range(len(self.se_ul)):
            writer.writerow(
                [k] + [repr(float(v[k])) for v in (self.se_ul, self.se_dl, self.sinr_ul, self.sinr_dl)]
            )
        return buf.getvalue()


def collective(x: np.ndarray) -> np.ndarray:
    """(n, L, K, N) per-AP draws -> (n, K, L*N) collective vectors."""
    n, L, K, N = x.shape
    return np.ascontiguousarray(np.transpose(x, (0, 2, 1, 3))).reshape(n, K, L * N)


def block_mask(mask: ClusterMask | np.ndarray, N: int) -> np.ndarray:
    """(K, L*N) 0/1 weights implementing D_k for every UE."""
    m = mask.mask if isinstance(mask, ClusterMask) else np.asarray(mask, dtype=bool)
    return np.repeat(m, N, axis=1).astype(float)


def apply_mask(x: np.ndarray, mask: ClusterMask, k: int) -> np.ndarray:
    """Zero the N-blocks of APs that do not serve UE k.

    ``x`` is a collective vector of length L*N or a matrix whose rows are
    indexed by the collective dimension (D_k x).
    """
    row = mask.mask[k]
    if not row.any():
        raise MaskError(f"UE {k} has an empty mask row")
    LN = x.shape[0]
    if LN % mask.L:
        raise MaskError(f"length {LN} is not a multiple of L={mask.L}")
    d = np.repeat(row, LN // mask.L).astype(x.dtype if np.iscomplexobj(x) else float)
    return x * (d if x.ndim == 1 else d[:, None])


def _z_blocks(R: np.ndarray, Phi: np.ndarray, p_ul: np.ndarray) -> np.ndarray:
    """Per-AP N x N blocks of sum_k p_k (R_lk - Phi_lk)."""
    return np.einsum("k,lkmn->lmn", p_ul, R - Phi)


def mmse_combiners(
    h_hat: np.ndarray, Phi: np.ndarray, R: np.ndarray, p_ul: np.ndarray, sigma2: float
) -> np.ndarray:
    """Centralized MMSE combiners for all draws; returns (n, K, L*N).

    v_k = (sum_i p_i h_i h_i^H + Z)^{-1} h_k for every k, via one solve per
    draw against all K right-hand sides.
    """
    n, L, K, N = h_hat.shape
    LN = L * N
    Hh = collective(h_hat)  # (n, K, LN)
    Z = np.zeros((LN, LN), dtype=complex)
    blocks = _z_blocks(R, Phi, np.asarray(p_ul, dtype=float))
    for l in range(L):
        Z[l * N : (l + 1) * N, l * N : (l + 1) * N] = blocks[l]
    Z += sigma2 * np.eye(LN)
    A = np.einsum("k,nkx,nky->nxy", p_ul, Hh, Hh.conj()) + Z
    _check_conditioning(A, sigma2)
    V = np.linalg.solve(A, np.transpose(Hh, (0, 2, 1)))  # (n, LN, K)
    return np.transpose(V, (0, 2, 1))


def _check_conditioning(A: np.ndarray, sigma2: float, limit: float = 1e12) -> None:
    # A >= sigma2 I, so trace/sigma2 bounds the condition number from above.
    if sigma2 > 0:
        bound = np.real(np.trace(A, axis1=-2, axis2=-1)) / sigma2
        if np.all(bound <= limit):
            return
    cond = np.linalg.cond(A)
    if np.any(~(cond <= limit)):
        d = int(np.argmax(np.where(np.isfinite(cond), cond, np.inf)))
        raise ChannelError(f"combiner system ill-conditioned at draw {d} (cond={cond[d]:.3g})")


def mmse_combiner(h_hat_draw, Phi, R, p_ul, sigma2) -> np.ndarray:
    """Single-draw variant: ``h_hat_draw`` is (L, K, N); returns (K, L*N)."""
    return mmse_combiners(h_hat_draw[None], Phi, R, p_ul, sigma2)[0]


def _require_draws(state: ChannelState) -> None:
    if state.n_mc < MIN_DRAWS:
        raise ValueError(f"need at least {MIN_DRAWS} Monte Carlo draws, got {state.n_mc}")


@dataclass(frozen=True)
class LinkStatistics:
    """Monte Carlo moments that define SINR_k(p) for fixed filters.

    SINR_k = p_k * signal_k / (sum_i p_i * second_ki - p_k * signal_k + noise_k)
    """

    signal: np.ndarray  # (K,) |E{gain_kk}|^2
    second: np.ndarray  # (K, K) E{|gain_ki|^2}
    noise: np.ndarray  # (K,) effective noise term

    def sinr(self, p: np.ndarray) -> tuple[np.ndarray, bool]:
        p = np.asarray(p, dtype=float)
        num = p * self.signal
        den = self.second @ p - num + self.noise
        bad = den <= 0
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(bad, 0.0, num / np.where(bad, 1.0, den))
        return out, bool(bad.any())


def masked_combiners(state: ChannelState, mask: ClusterMask, p_comb: np.ndarray) -> np.ndarray:
    """D_k v_k for every draw and UE, shape (n, K, L*N)."""
    _require_draws(state)
    mask.check()
    N = state.shape[2]
    V = mmse_combiners(state.h_hat, state.Phi, state.R, p_comb, state.sigma2)
    return V * block_mask(mask, N)[None]


def _moments(gains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diag = np.einsum("nkk->nk", gains)
    signal = np.abs(diag.mean(axis=0)) ** 2
    second = np.mean(gains.real**2 + gains.imag**2, axis=0)
    return signal, second


def ul_statistics(state: ChannelState, mask: ClusterMask, p_comb: np.ndarray, Vm=None) -> LinkStatistics:
    Vm = masked_combiners(state, mask, p_comb) if Vm is None else Vm
    H = collective(state.h)
    G = np.einsum("nkx,nix->nki", Vm.conj(), H)  # v_k^H D_k h_i
    signal, second = _moments(G)
    noise = state.sigma2 * np.mean(np.sum(Vm.real**2 + Vm.imag**2, axis=-1), axis=0)
    return LinkStatistics(signal, second, noise)


def dl_precoders(state: ChannelState, mask: ClusterMask, p_comb: np.ndarray, Vm=None) -> np.ndarray:
    """Unit-norm precoders w_k = D_k v_k / ||D_k v_k||, shape (n, K, L*N)."""
    Vm = masked_combiners(state, mask, p_comb) if Vm is None else Vm
    norms = np.linalg.norm(Vm, axis=-1, keepdims=True)
    return np.divide(Vm, norms, out=np.zeros_like(Vm), where=norms > 0)


def dl_statistics(state: ChannelState, mask: ClusterMask, p_comb: np.ndarray, Vm=None) -> LinkStatistics:
    W = dl_precoders(state, mask, p_comb, Vm)
    H = collective(state.h)
    F = np.einsum("nkx,nix->nki", H.conj(), W)  # h_k^H D_i w_i
    signal, second = _moments(F)
    noise = np.full(len(signal), state.sigma2)
    return LinkStatistics(signal, second, noise)


def link_statistics(state: ChannelState, mask: ClusterMask, p_comb: np.ndarray):
    """UL and DL statistics sharing one set of combiners."""
    Vm = masked_combiners(state, mask, p_comb)
    return ul_statistics(state, mask, p_comb, Vm), dl_statistics(state, mask, p_comb, Vm)


def _se(prelog: float, sinr: np.ndarray) -> np.ndarray:
    return prelog * np.log2(1.0 + sinr)


def _warn_floor(direction: str) -> None:
    warnings.warn(f"{direction} SINR denominator <= 0 for some UE; floored at 0 (increase n_mc)", stacklevel=3)


def ul_se(state: ChannelState, mask: ClusterMask, powers: PowerAllocation, config: NetworkConfig) -> SeReport:
    """UL part of the report; the combiner uses the evaluated UL powers."""
    stats = ul_statistics(state, mask, powers.p_ul)
    sinr, floored = stats.sinr(powers.p_ul)
    if floored:
        _warn_floor("UL")
    zeros = np.zeros_like(sinr)
    return SeReport(_se(config.tau_u / config.tau_c, sinr), zeros, sinr, zeros, floored)


def dl_se(
    state: ChannelState,
    mask: ClusterMask,
    powers: PowerAllocation,
    config: NetworkConfig,
    p_comb: np.ndarray | None = None,
) -> SeReport:
    """DL part of the report.

    Precoders derive from MMSE combiners computed at ``p_comb`` UL powers
    (full UL power by default), so DL SE depends on ``powers.p_dl`` only.
    """
    K = mask.K
    p_comb = np.full(K, config.p_ul_max_mw) if p_comb is None else p_comb
    stats = dl_statistics(state, mask, p_comb)
    sinr, floored = stats.sinr(powers.p_dl)
    if floored:
        _warn_floor("DL")
    zeros = np.zeros_like(sinr)
    return SeReport(zeros, _se(config.tau_d / config.tau_c, sinr), zeros, sinr, floored)


def se_report(state, mask, powers, config) -> SeReport:
    ul = ul_se(state, mask, powers, config)
    dl = dl_se(state, mask, powers, config)
    return SeReport(ul.se_ul, dl.se_dl, ul.sinr_ul, dl.sinr_dl, ul.floored or dl.floored)
