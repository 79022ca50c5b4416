"""Max-min SE power control for a fixed cluster mask.

Filters (combiners, precoders) are computed once at full UL power and kept
fixed, which turns every SINR into a linear-fractional function of the power
vector::

    SINR_k(p) = p_k a_k / (sum_{i != k} b_ki p_i + s_k p_k + c_k)

``s_k`` is the variance of UE k's own effective gain, the part of the self
term that the use-and-then-forget bound counts as interference. The max-min
problem is then solved by bisection on a common SINR target; a target is
feasible when the minimal power vector meeting it (the limit of the standard
interference fixed point) respects the power limits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import NetworkConfig
from .netsim.channel import ChannelState
from .netsim.se import (
    ClusterMask,
    LinkStatistics,
    PowerAllocation,
    dl_statistics,
    link_statistics,
    ul_statistics,
)

FIXED_POINT_STEPS = 500
BISECTION_TOL = 1e-6


class InfeasibleError(ValueError):
    """A UE has no useful signal under the given mask."""


@dataclass(frozen=True)
class SinrCoefficients:
    a: np.ndarray  # (K,) signal gain
    B: np.ndarray  # (K, K) interference, zero diagonal
    s: np.ndarray  # (K,) self-gain variance
    c: np.ndarray  # (K,) effective noise
    direction: str  # "ul" or "dl"

    @property
    def K(self) -> int:
        return len(self.a)

    def sinr(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p * self.a / (self.B @ p + self.s * p + self.c)


@dataclass
class MmfSolution:
    powers: PowerAllocation
    min_se: float
    target_sinr: float
    sinr: np.ndarray
    iterations: int
    feasible: bool
    direction: str = "ul"
    trace: list[tuple[float, bool]] = field(default_factory=list)

    @property
    def p(self) -> np.ndarray:
        return self.powers.p_ul if self.direction == "ul" else self.powers.p_dl


def _coefficients(stats: LinkStatistics, direction: str) -> SinrCoefficients:
    a = stats.signal
    unserved = np.flatnonzero(~(a > 0))
    if unserved.size:
        raise InfeasibleError(f"UE {int(unserved[0])} has zero {direction.upper()} signal gain")
    diag = np.diag(stats.second)
    B = stats.second - np.diag(diag)
    s = np.maximum(diag - a, 0.0)
    return SinrCoefficients(a=a, B=B, s=s, c=stats.noise.copy(), direction=direction)


def extract_coefficients(
    state: ChannelState, mask: ClusterMask, config: NetworkConfig, direction: str
) -> SinrCoefficients:
    """Read the SINR coefficients off the Monte Carlo draws at full UL power."""
    p_full = np.full(mask.K, config.p_ul_max_mw)
    if direction == "ul":
        stats = ul_statistics(state, mask, p_full)
    elif direction == "dl":
        stats = dl_statistics(state, mask, p_full)
    else:
        raise ValueError(f"direction must be 'ul' or 'dl', got {direction!r}")
    return _coefficients(stats, direction)


def extract_both(state: ChannelState, mask: ClusterMask, config: NetworkConfig):
    """(UL, DL) coefficients from a single combiner computation."""
    ul, dl = link_statistics(state, mask, np.full(mask.K, config.p_ul_max_mw))
    return _coefficients(ul, "ul"), _coefficients(dl, "dl")


def fixed_point_iteration(coeffs: SinrCoefficients, t: float, over_budget, steps: int = FIXED_POINT_STEPS):
    """Minimal powers reaching SINR >= t for all UEs by direct iteration, or None.

    Iterates p <- t (B p + s p + c) / a from zero; the sequence is monotone
    increasing, so crossing a power limit proves infeasibility. Near the
    optimum the contraction factor approaches one and the step budget runs
    out, so the solver uses ``minimal_powers`` instead.
    """
    p = np.zeros(coeffs.K)
    for _ in range(steps):
        nxt = t * (coeffs.B @ p + coeffs.s * p + coeffs.c) / coeffs.a
        if over_budget(nxt):
            return None
        if np.max(np.abs(nxt - p)) <= 1e-13 * np.max(nxt):
            return nxt
        p = nxt
    return None


def minimal_powers(coeffs: SinrCoefficients, t: float, over_budget):
    """Limit of the fixed-point iteration, computed in closed form.

    p = (I - T)^-1 t c / a with T = t diag(1/a) (B + diag(s)). With c > 0 a
    nonnegative solution exists iff the spectral radius of T is below one, in
    which case it is the iteration's limit.
    """
    K = coeffs.K
    T = (t / coeffs.a)[:, None] * (coeffs.B + np.diag(coeffs.s))
    rhs = t * coeffs.c / coeffs.a
    try:
        p = np.linalg.solve(np.eye(K) - T, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(p)) or np.any(p <= 0) or over_budget(p):
        return None
    return p


def _solve(coeffs: SinrCoefficients, over_budget, scale_to_limit, alone_power: float, prelog: float, direction):
    a, s, c = coeffs.a, coeffs.s, coeffs.c
    t_hi = float(np.max(alone_power * a / (alone_power * s + c)))
    trace: list[tuple[float, bool]] = []
    best = np.zeros(coeffs.K)
    t_lo = 0.0
    steps = 0

    p_top = minimal_powers(coeffs, t_hi, over_budget)
    trace.append((t_hi, p_top is not None))
    if p_top is not None:
        best, t_lo = p_top, t_hi
    else:
        while t_hi - t_lo >= BISECTION_TOL * t_hi:
            t = 0.5 * (t_lo + t_hi)
            p = minimal_powers(coeffs, t, over_budget)
            steps += 1
            trace.append((t, p is not None))
            if p is None:
                t_hi = t
            else:
                t_lo, best = t, p
    best = scale_to_limit(best)
    sinr = coeffs.sinr(best)
    min_se = float(prelog * np.log2(1.0 + sinr.min())) if coeffs.K else 0.0
    K = coeffs.K
    if direction == "ul":
        powers = PowerAllocation(p_ul=best, p_dl=np.zeros(K))
    else:
        powers = PowerAllocation(p_ul=np.zeros(K), p_dl=best)
    return MmfSolution(
        powers=powers,
        min_se=min_se,
        target_sinr=t_lo,
        sinr=sinr,
        iterations=steps,
        feasible=bool(t_lo > 0),
        trace=trace,
        direction=direction,
    )


def solve_mmf_ul(coeffs: SinrCoefficients, config: NetworkConfig) -> MmfSolution:
    cap = config.p_ul_max_mw

    def over(p):
        return bool(np.any(p > cap * (1 + 1e-9)))

    def scale(p):
        # Uniform up-scaling never lowers any SINR in the linear-fractional form.
        peak = p.max(initial=0.0)
        return np.minimum(p * (cap / peak), cap) if peak > 0 else p

    return _solve(coeffs, over, scale, cap, config.tau_u / config.tau_c, "ul")


def solve_mmf_dl(coeffs: SinrCoefficients, config: NetworkConfig) -> MmfSolution:
    budget = config.dl_budget_mw

    def over(p):
        return bool(p.sum() > budget * (1 + 1e-9))

    def scale(p):
        total = p.sum()
        return p * (budget / total) if total > 0 else p

    sol = _solve(coeffs, over, scale, budget, config.tau_d / config.tau_c, "dl")
    return _equalize_dl(sol, coeffs, budget, config.tau_d / config.tau_c)


def _equalize_dl(sol: MmfSolution, coeffs: SinrCoefficients, budget: float, prelog: float) -> MmfSolution:
    """Replace the bisection point by the exact equal-SINR vector at full budget.

    With sum(p) = P the noise term c_k equals c_k 1'p / P, so equal SINRs t mean
    p = t D (B + diag(s) + c 1'/P) p with D = diag(1/a): t is the inverse Perron
    root of that nonnegative matrix and p its Perron vector.
    """
    K = coeffs.K
    if K == 0 or not sol.feasible:
        return sol
    M = (coeffs.B + np.diag(coeffs.s) + np.outer(coeffs.c, np.ones(K)) / budget) / coeffs.a[:, None]
    w, V = np.linalg.eig(M)
    j = int(np.argmax(w.real))
    p = np.abs(np.real(V[:, j]))
    if w[j].real <= 0 or not np.all(p > 0):
        return sol
    p *= budget / p.sum()
    sinr = coeffs.sinr(p)
    if sinr.min() < sol.sinr.min():
        return sol
    return MmfSolution(
        powers=PowerAllocation(p_ul=np.zeros(K), p_dl=p),
        min_se=float(prelog * np.log2(1.0 + sinr.min())),
        target_sinr=float(sinr.min()),
        sinr=sinr,
        iterations=sol.iterations,
        feasible=True,
        trace=sol.trace,
        direction="dl",
    )


def solve_mmf(state: ChannelState, mask: ClusterMask, config: NetworkConfig) -> tuple[MmfSolution, MmfSolution]:
    """UL and DL max-min solutions on one mask."""
    ul_c, dl_c = extract_both(state, mask, config)
    return solve_mmf_ul(ul_c, config), solve_mmf_dl(dl_c, config)


def min_se(coeffs: SinrCoefficients, p: np.ndarray, config: NetworkConfig) -> float:
    """Minimum SE achieved by powers ``p`` under the frozen-filter coefficients."""
    prelog = (config.tau_u if coeffs.direction == "ul" else config.tau_d) / config.tau_c
    return float(prelog * np.log2(1.0 + coeffs.sinr(p).min()))
