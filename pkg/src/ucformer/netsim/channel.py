"""Topologies, large-scale fading, correlated Rayleigh channels and MMSE estimates.

Array conventions used across the simulator:

* ``beta``: (L, K) linear gains, AP index first.
* ``R``, ``Phi``, ``Q``: (L, K, N, N) complex Hermitian.
* channel draws ``h`` and estimates ``h_hat``: (n_mc, L, K, N) complex.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ..config import ConfigError, NetworkConfig
from ..rng import stream


class ChannelError(RuntimeError):
    """Numerical failure while building or using channel statistics."""


@dataclass(frozen=True)
class Topology:
    ue_xy: np.ndarray  # (K, 2) meters
    ap_xy: np.ndarray  # (L, 2) meters
    seed: int

    @property
    def K(self) -> int:
        return self.ue_xy.shape[0]

    @property
    def L(self) -> int:
        return self.ap_xy.shape[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["entity", "id", "x", "y"])
        for i, (x, y) in enumerate(self.ap_xy):
            writer.writerow(["ap", i, repr(float(x)), repr(float(y))])
        for i, (x, y) in enumerate(self.ue_xy):
            writer.writerow(["ue", i, repr(float(x)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, seed: int = 0) -> Topology:
        ap, ue = {}, {}
        for row in csv.DictReader(io.StringIO(text)):
            target = ap if row["entity"] == "ap" else ue
            target[int(row["id"])] = (float(row["x"]), float(row["y"]))
        ap_xy = np.array([ap[i] for i in sorted(ap)], dtype=float).reshape(-1, 2)
        ue_xy = np.array([ue[i] for i in sorted(ue)], dtype=float).reshape(-1, 2)
        return cls(ue_xy=ue_xy, ap_xy=ap_xy, seed=seed)


@dataclass(frozen=True)
class LargeScaleFading:
    beta: np.ndarray  # (L, K) linear
    beta_db: np.ndarray  # (L, K)
    shadow_db: np.ndarray  # (L, K)


@dataclass(frozen=True)
class ChannelState:
    beta: np.ndarray
    R: np.ndarray
    h: np.ndarray
    h_hat: np.ndarray
    Phi: np.ndarray
    Q: np.ndarray
    sigma2: float

    @property
    def n_mc(self) -> int:
        return self.h.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        _, L, K, N = self.h.shape
        return L, K, N


def ap_grid(L: int, area_side: float) -> np.ndarray:
    """Cell centers of a ceil(sqrt(L)) square grid, row-major, truncated to L."""
    side = math.ceil(math.sqrt(L))
    spacing = area_side / side
    centers = (np.arange(side) + 0.5) * spacing
    gx, gy = np.meshgrid(centers, centers, indexing="xy")
    grid = np.column_stack([gx.ravel(), gy.ravel()])
    return grid[:L].copy()


def generate_topology(config: NetworkConfig, seed: int, K: int | None = None) -> Topology:
    K = config.K if K is None else K
    ue = stream(seed, "topology").uniform(0.0, config.area_side, size=(K, 2))
    return Topology(ue_xy=ue, ap_xy=ap_grid(config.L, config.area_side), seed=seed)


def distances_3d(topo: Topology, height_diff: float) -> np.ndarray:
    """(L, K) AP-UE distances including the antenna height difference."""
    diff = topo.ap_xy[:, None, :] - topo.ue_xy[None, :, :]
    horizontal2 = np.sum(diff**2, axis=-1)
    return np.sqrt(horizontal2 + height_diff**2)


def pathloss_db(d3d, config: NetworkConfig):
    return config.pathloss_intercept_db - 10.0 * config.pathloss_exponent * np.log10(d3d)


def large_scale_fading(topo: Topology, config: NetworkConfig, seed: int) -> LargeScaleFading:
    if config.height_diff <= 0:
        raise ConfigError("height_diff must be > 0")
    d3d = distances_3d(topo, config.height_diff)
    shadow = stream(seed, "shadowing").normal(0.0, config.shadow_std_db, size=d3d.shape)
    beta_db = pathloss_db(d3d, config) + shadow
    return LargeScaleFading(beta=10.0 ** (beta_db / 10.0), beta_db=beta_db, shadow_db=shadow)


def _local_scattering(N: int, angle: float, asd_rad: float, n_quad: int = 401) -> np.ndarray:
    """Normalized (unit-diagonal) Gaussian local-scattering correlation for a half-wavelength ULA.

    Evaluated by quadrature as a positively weighted sum of rank-one steering
    outer products, so the result is PSD by construction.
    """
    deltas = np.linspace(-6.0 * asd_rad, 6.0 * asd_rad, n_quad)
    weights = np.exp(-0.5 * (deltas / asd_rad) ** 2)
    weights /= weights.sum()
    m = np.arange(N)
    steering = np.exp(1j * np.pi * np.outer(np.sin(angle + deltas), m))  # (n_quad, N)
    return np.einsum("q,qm,qn->mn", weights, steering, steering.conj())


def build_correlation(topo: Topology, config: NetworkConfig, fading: LargeScaleFading) -> np.ndarray:
    L, K, N = topo.L, topo.K, config.N
    beta = fading.beta
    if config.correlation_model == "uncorrelated":
        R = beta[:, :, None, None] * np.eye(N)[None, None]
        return R.astype(complex)
    asd = math.radians(config.asd_deg)
    R = np.empty((L, K, N, N), dtype=complex)
    for l in range(L):
        for k in range(K):
            dx, dy = topo.ue_xy[k] - topo.ap_xy[l]
            R[l, k] = beta[l, k] * _local_scattering(N, math.atan2(dy, dx), asd)
    R = 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))
    if L and K:
        eig = np.linalg.eigvalsh(R)
        scale = np.real(np.trace(R, axis1=-2, axis2=-1))
        bad = eig[..., 0] < -1e-10 * np.maximum(scale, np.finfo(float).tiny)
        if np.any(bad):
            l, k = np.argwhere(bad)[0]
            raise ChannelError(f"correlation matrix for (l={l}, k={k}) is not PSD")
    return R


def psd_sqrt(R: np.ndarray) -> np.ndarray:
    """Hermitian PSD square roots of a stack of matrices (..., N, N)."""
    eigval, eigvec = np.linalg.eigh(R)
    scale = np.maximum(np.abs(eigval).max(axis=-1, initial=0.0), np.finfo(float).tiny)
    bad = eigval[..., 0] < -1e-10 * scale
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ChannelError(f"square root failed: matrix at index (l, k) = {idx} is not PSD")
    root = np.sqrt(np.clip(eigval, 0.0, None))
    return (eigvec * root[..., None, :]) @ np.conj(np.swapaxes(eigvec, -1, -2))


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _is_scaled_identity(R: np.ndarray) -> bool:
    N = R.shape[-1]
    off = R - np.einsum("...ii->...i", R)[..., None] * np.eye(N)
    diag = np.einsum("...ii->...i", R)
    return not np.any(off) and np.all(diag == diag[..., :1])


def draw_channels(R: np.ndarray, n_draws: int, seed: int) -> np.ndarray:
    """Draws h = R^{1/2} g with g ~ CN(0, I); returns (n_draws, L, K, N)."""
    L, K, N, _ = R.shape
    g = complex_normal(stream(seed, "small-scale"), (n_draws, L, K, N))
    if _is_scaled_identity(R):
        gain = np.sqrt(np.real(R[..., 0, 0]))
        return g * gain[None, :, :, None]
    root = psd_sqrt(R)
    return np.einsum("lkmn,dlkn->dlkm", root, g)


def mmse_estimate(
    h: np.ndarray,
    R: np.ndarray,
    config: NetworkConfig,
    seed: int,
    sigma2: float | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """MMSE estimates of ``h`` from orthogonal pilots; returns (h_hat, Phi, Q).

    The pilot observation, after despreading and scaling by 1/sqrt(tau_p rho),
    is ``h + n / sqrt(tau_p rho)`` with n ~ CN(0, sigma2 I), whose covariance
    is exactly Q = R + sigma2/(tau_p rho) I.
    """
    sigma2 = config.noise_power_mw if sigma2 is None else sigma2
    tau_rho = config.tau_p * config.rho
    N = R.shape[-1]
    Q = R + (sigma2 / tau_rho) * np.eye(N)
    if Q.size:
        cond = np.linalg.cond(Q)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            l, k = np.argwhere(~(cond <= 1e12))[0]
            raise ChannelError(f"Q for (l={l}, k={k}) is ill-conditioned (cond={cond[l, k]:.3g})")
    gain = R @ np.linalg.inv(Q)  # R Q^-1
    Phi = gain @ R
    Phi = 0.5 * (Phi + np.conj(np.swapaxes(Phi, -1, -2)))
    y = h
    if sigma2 > 0:
        noise = complex_normal(stream(seed, "pilot-noise"), h.shape, sigma2)
        y = h + noise / math.sqrt(tau_rho)
    h_hat = np.einsum("lkmn,dlkn->dlkm", gain, y)
    return h_hat, Phi, Q


def simulate(topo: Topology, config: NetworkConfig, seed: int, n_draws: int | None = None) -> ChannelState:
    """Fading, correlation, channel draws and estimates for one topology."""
    fading = large_scale_fading(topo, config, seed)
    R = build_correlation(topo, config, fading)
    n_draws = config.n_mc if n_draws is None else n_draws
    h = draw_channels(R, n_draws, seed)
    h_hat, Phi, Q = mmse_estimate(h, R, config, seed)
    return ChannelState(
        beta=fading.beta, R=R, h=h, h_hat=h_hat, Phi=Phi, Q=Q, sigma2=config.noise_power_mw
    )
