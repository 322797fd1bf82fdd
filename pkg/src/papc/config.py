"""Scenario constants, model hyperparameters and the named presets.

Config files are flat ``key = value`` text with optional ``[scenario]``,
``[model]`` and ``[train]`` sections whose keys mirror the dataclass fields.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

PAD_FADING = 6e-13


def noise_power_dbm(bandwidth_hz: float, noise_figure_db: float, n0_dbm_hz: float) -> float:
    return 10.0 * math.log10(bandwidth_hz) + n0_dbm_hz + noise_figure_db


@dataclass(frozen=True)
class ScenarioConfig:
    M: int = 10
    K_max: int = 4
    N: int = 4
    area_km2: float = 0.01
    tau: int = 200
    tau_p: int = 20
    lambda_smooth: float = 3.0
    # transmit powers in W; the SNRs are these divided by the noise power
    pilot_power_w: float = 0.2
    data_power_w: float = 1.0
    L0_db: float = 140.72
    d0_km: float = 0.01
    d1_km: float = 0.05
    sigma_sh_db: float = 8.0
    noise_figure_db: float = 9.0
    bandwidth_hz: float = 20e6
    n0_dbm_hz: float = -173.98
    noise_power_dbm: float = -91.97
    K_min: int | None = None
    seed: int = 2024

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.M > self.K_max > 0):
            raise ConfigError(f"need M > K_max > 0, got M={self.M}, K_max={self.K_max}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if not (0 < self.tau_p < self.tau):
            raise ConfigError(f"need 0 < tau_p < tau, got tau_p={self.tau_p}, tau={self.tau}")
        if not (0 < self.d0_km < self.d1_km):
            raise ConfigError(f"need 0 < d0 < d1, got d0={self.d0_km}, d1={self.d1_km}")
        if not self.area_km2 > 0:
            raise ConfigError(f"area must be positive, got {self.area_km2}")
        if self.lambda_smooth <= 0:
            raise ConfigError("lambda_smooth must be positive")
        if self.sigma_sh_db < 0:
            raise ConfigError("sigma_sh_db must be nonnegative")
        if self.K_min is not None and not (1 <= self.K_min <= self.K_max):
            raise ConfigError(f"need 1 <= K_min <= K_max, got K_min={self.K_min}")
        pn = noise_power_dbm(self.bandwidth_hz, self.noise_figure_db, self.n0_dbm_hz)
        if abs(pn - self.noise_power_dbm) > 0.01:
            raise ConfigError(
                f"noise power {pn:.4f} dBm from bandwidth/noise figure disagrees with "
                f"stored {self.noise_power_dbm} dBm by more than 0.01 dB"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")

    @property
    def side_km(self) -> float:
        return math.sqrt(self.area_km2)

    @property
    def noise_power_w(self) -> float:
        return 10.0 ** ((self.n0_dbm_hz + self.noise_figure_db - 30.0) / 10.0) * self.bandwidth_hz

    @property
    def zeta_p(self) -> float:
        return self.pilot_power_w / self.noise_power_w

    @property
    def zeta_d(self) -> float:
        return self.data_power_w / self.noise_power_w

    @property
    def prelog(self) -> float:
        return 1.0 - self.tau_p / self.tau

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelHyper:
    """Transformer widths (``M_bar = H * D``) plus the FCN hidden width."""

    M: int
    K_max: int
    M_bar: int = 80
    H: int = 5
    L: int = 3
    d_mod: int = 16
    M_hat: int | None = None
    ln_eps: float = 1e-5
    offset: float = 6.0

    def __post_init__(self):
        if self.H < 1 or self.M_bar % self.H:
            raise ConfigError(f"M_bar={self.M_bar} must be a multiple of H={self.H}")
        if self.L < 1:
            raise ConfigError("L must be >= 1")
        if self.M_bar <= self.M:
            raise ConfigError(f"M_bar={self.M_bar} must exceed M={self.M}")

    @property
    def D(self) -> int:
        return self.M_bar // self.H

    def replace(self, **changes) -> "ModelHyper":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class Preset:
    scenario: ScenarioConfig
    hyper: ModelHyper
    description: str = ""


def _preset(desc, hyper_kw, **scen_kw) -> Preset:
    scen = ScenarioConfig(**scen_kw)
    hyper = ModelHyper(M=scen.M, K_max=scen.K_max, **hyper_kw)
    return Preset(scen, hyper, desc)


PRESETS: dict[str, Preset] = {
    "scenario0": _preset(
        "small contamination-free network", dict(M_bar=80, M_hat=160, d_mod=16),
        M=10, K_max=4, area_km2=0.01,
    ),
    "scenario1": _preset(
        "large contamination-free network", dict(M_bar=500, M_hat=1000, d_mod=100),
        M=100, K_max=20, area_km2=0.1,
    ),
    "scenario2": _preset(
        "large network with pilot reuse", dict(M_bar=500, M_hat=571, d_mod=100),
        M=100, K_max=40, area_km2=0.1,
    ),
    "scenario3": _preset(
        "large network, heavy reuse, varying K", dict(M_bar=500, d_mod=100),
        M=100, K_max=80, K_min=40, area_km2=0.1,
    ),
    # desk-scale contaminated network at the same 1000 BS/km^2 density
    "mini": _preset(
        "desk-scale contaminated network", dict(M_bar=80, d_mod=16),
        M=20, K_max=8, tau_p=4, area_km2=0.02,
    ),
    "mini-vark": _preset(
        "desk-scale contaminated network, varying K", dict(M_bar=80, d_mod=16),
        M=20, K_max=8, K_min=4, tau_p=4, area_km2=0.02,
    ),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _coerce(value: str, typ):
    value = value.strip()
    if value.lower() in ("none", ""):
        return None
    if typ in (int, "int", "int | None"):
        return int(float(value)) if "e" in value.lower() else int(value)
    if typ in (float, "float", "float | None"):
        return float(value)
    if typ in (bool, "bool"):
        return value.lower() in ("1", "true", "yes", "on")
    return value


def field_types(cls) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def parse_config_text(text: str) -> dict[str, dict[str, str]]:
    """Split flat ``key = value`` text into ``{section: {key: value}}``."""
    out: dict[str, dict[str, str]] = {"scenario": {}}
    section = "scenario"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out.setdefault(section, {})[key.strip()] = value.strip()
    return out


def apply_overrides(obj, values: dict[str, str]):
    types = field_types(type(obj))
    changes = {}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown {type(obj).__name__} key {key!r}")
        changes[key] = _coerce(value, types[key])
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, base: Preset | None = None) -> tuple[Preset, dict[str, str]]:
    """Read a config file on top of ``base`` (or the preset named by its ``preset`` key).

    Returns the resulting preset and the raw ``[train]`` section for the trainer.
    """
    try:
        sections = parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    scen_kv = dict(sections.get("scenario", {}))
    name = scen_kv.pop("preset", None)
    if base is None:
        base = get_preset(name or "scenario0")
    scen = apply_overrides(base.scenario, scen_kv)
    model_kv = sections.get("model", {})
    hyper = base.hyper.replace(M=scen.M, K_max=scen.K_max)
    hyper = apply_overrides(hyper, model_kv)
    return Preset(scen, hyper, base.description), sections.get("train", {})


def config_snapshot(*objs) -> dict[str, dict]:
    snap = {}
    for obj in objs:
        if obj is None:
            continue
        snap[type(obj).__name__] = {
            k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(obj).items()
        }
    return snap


__all__ = [
    "PAD_FADING",
    "PRESETS",
    "ModelHyper",
    "Preset",
    "ScenarioConfig",
    "apply_overrides",
    "config_snapshot",
    "get_preset",
    "load_config",
    "noise_power_dbm",
    "parse_config_text",
]
