"""Configuration records for the network simulator, the model and training.

Configs load from a plain ``key = value`` text file. Lines starting with ``#``
are comments; an optional ``[section]`` header routes keys to the network,
model or train record. Keys without a section go to the network record.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised when a configuration record violates its invariants."""


@dataclass(frozen=True)
class NetworkConfig:
    area_side: float = 500.0
    L: int = 16
    N: int = 4
    K: int = 10
    carrier_hz: float = 2e9
    pathloss_exponent: float = 3.67
    pathloss_intercept_db: float = -34.53
    height_diff: float = 10.0
    shadow_std_db: float = 4.0
    bandwidth_hz: float = 2e7
    noise_figure_db: float = 7.0
    p_ul_max_mw: float = 100.0
    p_dl_max_per_ap_mw: float = 200.0
    tau_c: int = 200
    tau_p: int = 10
    tau_u: int = 90
    tau_d: int = 100
    pilot_power_mw: float | None = None
    n_mc: int = 100
    correlation_model: str = "uncorrelated"
    asd_deg: float = 10.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.K < 0 or self.L < 1 or self.N < 1:
            raise ConfigError(f"need K >= 0, L >= 1, N >= 1 (got K={self.K}, L={self.L}, N={self.N})")
        if self.tau_p + self.tau_u + self.tau_d > self.tau_c:
            raise ConfigError(
                f"tau_p + tau_u + tau_d = {self.tau_p + self.tau_u + self.tau_d} exceeds tau_c = {self.tau_c}"
            )
        positive = {
            "area_side": self.area_side,
            "carrier_hz": self.carrier_hz,
            "pathloss_exponent": self.pathloss_exponent,
            "bandwidth_hz": self.bandwidth_hz,
            "p_ul_max_mw": self.p_ul_max_mw,
            "p_dl_max_per_ap_mw": self.p_dl_max_per_ap_mw,
            "tau_c": self.tau_c,
            "tau_p": self.tau_p,
            "tau_u": self.tau_u,
            "tau_d": self.tau_d,
            "n_mc": self.n_mc,
            "rho": self.rho,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be strictly positive, got {value}")
        if self.height_diff <= 0:
            raise ConfigError(f"height_diff must be > 0 (got {self.height_diff}); d3D = 0 is undefined")
        if self.shadow_std_db < 0:
            raise ConfigError("shadow_std_db must be >= 0")
        if self.correlation_model not in ("uncorrelated", "local-scattering"):
            raise ConfigError(f"unknown correlation_model {self.correlation_model!r}")

    @property
    def rho(self) -> float:
        """Pilot power in mW; defaults to the UL power cap."""
        return self.p_ul_max_mw if self.pilot_power_mw is None else self.pilot_power_mw

    @property
    def noise_power_mw(self) -> float:
        return noise_power_mw(self.bandwidth_hz, self.noise_figure_db)

    @property
    def dl_budget_mw(self) -> float:
        return self.L * self.p_dl_max_per_ap_mw

    def replace(self, **changes) -> NetworkConfig:
        return dataclasses.replace(self, **changes)


def noise_power_mw(bandwidth_hz: float, noise_figure_db: float) -> float:
    """Thermal noise power in mW: -174 dBm/Hz + 10 log10(B) + NF."""
    noise_dbm = -174.0 + 10.0 * math.log10(bandwidth_hz) + noise_figure_db
    return 10.0 ** (noise_dbm / 10.0)


@dataclass(frozen=True)
class ModelConfig:
    d_mod: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int | None = None
    dropout: float = 0.1
    xi: float = 0.3
    alpha_elu: float = 1.0
    kernel: str = "elu"
    normalize_attention: bool = False
    p_ul_min_mw: float = 0.0
    p_ul_max_mw: float = 100.0
    p_dl_min_mw: float = 0.0
    p_dl_max_mw: float = 200.0

    def __post_init__(self):
        if self.d_mod % self.n_heads:
            raise ConfigError(f"d_mod={self.d_mod} not divisible by n_heads={self.n_heads}")
        if not 0.0 < self.xi < 1.0:
            raise ConfigError(f"xi must lie in (0, 1), got {self.xi}")
        if self.kernel not in ("elu", "relu"):
            raise ConfigError(f"kernel must be 'elu' or 'relu', got {self.kernel!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.p_ul_max_mw <= self.p_ul_min_mw or self.p_dl_max_mw <= self.p_dl_min_mw:
            raise ConfigError("power ranges must be non-empty")
        if self.p_ul_min_mw < 0 or self.p_dl_min_mw < 0:
            raise ConfigError("power lower bounds must be >= 0")

    @property
    def d_head(self) -> int:
        return self.d_mod // self.n_heads

    @property
    def ffn_width(self) -> int:
        return 4 * self.d_mod if self.d_ff is None else self.d_ff

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1e-2
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    sigma_e_m: float = 1.0
    samples_per_K: int = 8000
    K_train: tuple[int, ...] = (5, 10)
    eps_norm: float = 1e-8
    se_surrogate: bool = False

    def __post_init__(self):
        for name in ("lr", "epochs", "batch_size", "adam_eps", "samples_per_K", "eps_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.lam < 0 or self.weight_decay < 0 or self.sigma_e_m < 0:
            raise ConfigError("lam, weight_decay and sigma_e_m must be >= 0")
        if not all(0.0 < b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if not self.K_train or min(self.K_train) < 1:
            raise ConfigError("K_train must be a nonempty set of positive counts")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def digest(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()[:16]


def desk_profile() -> RunConfig:
    """Reduced-scale settings that run on a laptop CPU in minutes."""
    net = NetworkConfig(L=8, N=4, K=5, n_mc=100)
    model = ModelConfig(p_ul_max_mw=net.p_ul_max_mw, p_dl_max_mw=net.p_dl_max_per_ap_mw)
    train = TrainConfig(epochs=5, batch_size=8, samples_per_K=200, K_train=(5,))
    return RunConfig(net, model, train)


def paper_profile() -> RunConfig:
    net = NetworkConfig(L=16, N=4, K=10)
    model = ModelConfig(p_ul_max_mw=net.p_ul_max_mw, p_dl_max_mw=net.p_dl_max_per_ap_mw)
    return RunConfig(net, model, TrainConfig())


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _coerce(value: str, target):
    text = value.strip()
    if target is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if target is int:
        return int(text)
    if target is float:
        return float(text)
    if target is str:
        return text
    if target == "float|None":
        return None if text.lower() in ("none", "") else float(text)
    if target == "int|None":
        return None if text.lower() in ("none", "") else int(text)
    if target == "tuple[int]":
        return tuple(int(t) for t in text.replace(",", " ").split())
    if target == "tuple[float]":
        return tuple(float(t) for t in text.replace(",", " ").split())
    raise ConfigError(f"unsupported field type {target!r}")


def _field_kind(f) -> object:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    t = t.replace(" ", "")
    table = {
        "int": int,
        "float": float,
        "str": str,
        "bool": bool,
        "float|None": "float|None",
        "int|None": "int|None",
        "tuple[int,...]": "tuple[int]",
        "tuple[float,float]": "tuple[float]",
    }
    if t not in table:
        raise ConfigError(f"field {f.name} has unsupported type {t}")
    return table[t]


def _apply(record, overrides: dict[str, str], section: str):
    known = {f.name: f for f in fields(record)}
    changes = {}
    for key, raw in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        changes[key] = _coerce(raw, _field_kind(known[key]))
    return dataclasses.replace(record, **changes) if changes else record


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` text on top of ``base`` (defaults if omitted)."""
    base = base or RunConfig()
    sections: dict[str, dict[str, str]] = {"network": {}, "model": {}, "train": {}}
    current = "network"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        sections[current][key.strip()] = value
    return RunConfig(
        network=_apply(base.network, sections["network"], "network"),
        model=_apply(base.model, sections["model"], "model"),
        train=_apply(base.train, sections["train"], "train"),
    )


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), base)


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(run: RunConfig) -> str:
    lines = []
    for name in ("network", "model", "train"):
        lines.append(f"[{name}]")
        record = getattr(run, name)
        for f in fields(record):
            lines.append(f"{f.name} = {_fmt(getattr(record, f.name))}")
        lines.append("")
    return "\n".join(lines)
