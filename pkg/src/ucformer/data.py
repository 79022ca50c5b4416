"""Dataset construction: topologies, position noise, min-max features, disk format.

On disk a dataset is one file: a text manifest (one line per sample with its
seed, K, L, byte offset and record length) terminated by ``end``, followed by
the binary records as little-endian float64. Each record stores the clean and
noisy coordinates, the large-scale fading and the feature matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import NetworkConfig, TrainConfig
from .netsim.channel import ChannelState, Topology, generate_topology, large_scale_fading, simulate
from .rng import stream

MAGIC = "ucformer-dataset 1"


def inject_noise(positions: np.ndarray, sigma_e: float, seed: int, entity: str = "ue") -> np.ndarray:
    """Add i.i.d. N(0, sigma_e^2) to every coordinate."""
    positions = np.asarray(positions, dtype=float)
    if sigma_e < 0:
        raise ValueError("sigma_e must be >= 0")
    if sigma_e == 0:
        return positions.copy()
    return positions + stream(seed, f"position-noise/{entity}").normal(0.0, sigma_e, positions.shape)


def minmax_normalize(values: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    lo = values.min()
    return (values - lo) / (values.max() - lo + eps)


def build_features(ue_xy: np.ndarray, ap_xy: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Token matrix X (K, 2L+2): row k is (u_kx, u_ky, a_1x, a_1y, ..., a_Lx, a_Ly).

    x and y are min-max scaled separately, pooling the UEs and APs of the sample.
    """
    K, L = len(ue_xy), len(ap_xy)
    pts = np.vstack([ue_xy, ap_xy])
    scaled = np.column_stack([minmax_normalize(pts[:, 0], eps), minmax_normalize(pts[:, 1], eps)])
    ue, ap = scaled[:K], scaled[K:]
    return np.hstack([ue, np.broadcast_to(ap.reshape(1, 2 * L), (K, 2 * L))])


@dataclass
class Sample:
    seed: int
    topology: Topology
    ue_noisy: np.ndarray
    ap_noisy: np.ndarray
    beta: np.ndarray  # (L, K)
    X: np.ndarray

    @property
    def K(self) -> int:
        return self.topology.K

    @property
    def L(self) -> int:
        return self.topology.L

    def to_record(self) -> np.ndarray:
        t = self.topology
        return np.concatenate(
            [a.ravel() for a in (t.ue_xy, t.ap_xy, self.ue_noisy, self.ap_noisy, self.beta, self.X)]
        ).astype("<f8")

    @classmethod
    def from_record(cls, seed: int, K: int, L: int, rec: np.ndarray) -> Sample:
        sizes = [2 * K, 2 * L, 2 * K, 2 * L, L * K, K * (2 * L + 2)]
        parts = np.split(np.asarray(rec, dtype=float), np.cumsum(sizes)[:-1])
        topo = Topology(parts[0].reshape(K, 2), parts[1].reshape(L, 2), seed)
        return cls(
            seed=seed,
            topology=topo,
            ue_noisy=parts[2].reshape(K, 2),
            ap_noisy=parts[3].reshape(L, 2),
            beta=parts[4].reshape(L, K),
            X=parts[5].reshape(K, 2 * L + 2),
        )


def make_sample(config: NetworkConfig, K: int, seed: int, sigma_e: float, eps: float = 1e-8) -> Sample:
    topo = generate_topology(config, seed, K=K)
    ue_noisy = inject_noise(topo.ue_xy, sigma_e, seed, "ue")
    ap_noisy = inject_noise(topo.ap_xy, sigma_e, seed, "ap")
    beta = large_scale_fading(topo, config, seed).beta
    return Sample(seed, topo, ue_noisy, ap_noisy, beta, build_features(ue_noisy, ap_noisy, eps))


@dataclass
class Dataset:
    config: NetworkConfig
    samples: list[Sample]
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def channels(self, i: int) -> ChannelState:
        """Channel draws for sample i; regenerated deterministically from its seed."""
        state = self._cache.get(i)
        if state is None:
            s = self.samples[i]
            state = simulate(s.topology, self.config, s.seed)
            if len(self._cache) >= 4096:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = state
        return state

    def manifest(self) -> list[tuple[int, int, int, int, int]]:
        rows, offset = [], 0
        for s in self.samples:
            n = s.to_record().nbytes
            rows.append((s.seed, s.K, s.L, offset, n))
            offset += n
        return rows

    def save(self, path: str | Path) -> None:
        rows = self.manifest()
        header = [MAGIC, f"count {len(rows)}"]
        header += [" ".join(str(v) for v in row) for row in rows]
        header.append("end")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for s in self.samples:
                fh.write(s.to_record().tobytes())

    @classmethod
    def load(cls, path: str | Path, config: NetworkConfig) -> Dataset:
        raw = Path(path).read_bytes()
        lines, pos = [], 0
        while True:
            nl = raw.index(b"\n", pos)
            line = raw[pos:nl].decode("ascii")
            pos = nl + 1
            if line == "end":
                break
            lines.append(line)
        if not lines or lines[0] != MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        count = int(lines[1].split()[1])
        samples = []
        for line in lines[2 : 2 + count]:
            seed, K, L, offset, length = (int(v) for v in line.split())
            rec = np.frombuffer(raw, dtype="<f8", count=length // 8, offset=pos + offset)
            samples.append(Sample.from_record(seed, K, L, rec))
        return cls(config, samples)


def sample_seed(seed: int, K: int, index: int) -> int:
    return int(stream(seed, "sample-seed", K, index).integers(0, 2**62))


def build_dataset(
    config: NetworkConfig,
    train: TrainConfig,
    seed: int,
    K_values=None,
    n_per_K: int | None = None,
    sigma_e: float | None = None,
) -> Dataset:
    """``n_per_K`` samples (default ``train.samples_per_K``) for every K, ordered by K then index."""
    K_values = train.K_train if K_values is None else K_values
    n_per_K = train.samples_per_K if n_per_K is None else n_per_K
    sigma_e = train.sigma_e_m if sigma_e is None else sigma_e
    samples = [
        make_sample(config, K, sample_seed(seed, K, i), sigma_e, train.eps_norm)
        for K in K_values
        for i in range(n_per_K)
    ]
    return Dataset(config, samples)
