"""Study configuration: JSON file, schema validation and typed defaults."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .calibration import CalibrationConfig
from .density import GridSpec
from .errors import ConfigError

MODELS = ("LN", "HESTON", "BATES", "VG", "BLMALZ")
RISKS = ("RN", "CRRA2", "CRRA4", "IRRA")
PROFILE_NAMES = ("none", "low", "high")
CRRA_GAMMAS = {"RN": 0.0, "CRRA2": 2.0, "CRRA4": 4.0}


def load_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("config.schema.json").read_text())


@dataclass(frozen=True)
class DataPaths:
    options: Path | None = None
    settlements: Path | None = None
    volumes: Path | None = None
    prices: Path | None = None
    include: Path | None = None


@dataclass(frozen=True)
class SentimentSettings:
    alpha_tail: float = 0.05
    burn_in: int = 24
    august_adjust: bool = False
    theta3_sign: str = "flipped"


@dataclass(frozen=True)
class StudyConfig:
    data: DataPaths = field(default_factory=DataPaths)
    models: tuple[str, ...] = ("LN", "HESTON")
    risks: tuple[str, ...] = ("RN",)
    profiles: tuple[str, ...] = ("none",)
    recalibration: bool = False
    seed: int = 0
    output: Path = Path("out")
    workers: int = 1
    plot_dates: tuple[str, ...] = ()
    grid: GridSpec = field(default_factory=GridSpec)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    warm_start: bool = True
    blmalz_delta: float = 0.01
    sentiment: SentimentSettings = field(default_factory=SentimentSettings)
    irra_window: int = 30
    irra_bounds: tuple[float, float] = (-1.0, 6.0)
    normalization: str = "cross_model"
    simulation: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.models or not self.risks or not self.profiles:
            raise ConfigError("model, risk and profile lists must be non-empty")
        bad = [m for m in self.models if m not in MODELS] + [r for r in self.risks if r not in RISKS]
        bad += [p for p in self.profiles if p not in PROFILE_NAMES]
        if bad:
            raise ConfigError(f"unknown entries {bad}")

    def variants(self) -> list[str]:
        """Variant labels ``MODEL-RISK-PROFILE`` plus ``MODEL-RISK-recal`` when recalibration is on."""
        out = [f"{m}-{r}-{p}" for m in self.models for r in self.risks for p in self.profiles]
        if self.recalibration:
            out += [f"{m}-{r}-recal" for m in self.models for r in self.risks]
        return out

    def with_profile(self, profile: str) -> "StudyConfig":
        """Restrict sentiment variants to ``profile`` alongside the no-sentiment baseline."""
        if profile not in PROFILE_NAMES:
            raise ConfigError(f"unknown profile {profile!r}")
        return replace(self, profiles=("none",) if profile == "none" else ("none", profile))


def _path(raw, base: Path) -> Path | None:
    if raw is None:
        return None
    p = Path(raw)
    return p if p.is_absolute() else base / p


def parse_config(raw: dict, base: Path = Path(".")) -> StudyConfig:
    try:
        jsonschema.validate(raw, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None
    d = raw.get("data", {})
    data = DataPaths(**{k: _path(d.get(k), base) for k in ("options", "settlements", "volumes", "prices", "include")})
    cal_raw = dict(raw.get("calibration", {}))
    warm = cal_raw.pop("warm_start", True)
    s = dict(raw.get("sentiment", {}))
    profile = s.pop("profile", None)
    profiles = tuple(raw.get("profiles", ()))
    if not profiles:
        profiles = ("none",) if profile in (None, "none") else ("none", profile)
    irra = raw.get("irra", {})
    g = raw.get("grid", {})
    cfg = StudyConfig(
        data=data,
        models=tuple(raw.get("models", StudyConfig.models)),
        risks=tuple(raw.get("risks", StudyConfig.risks)),
        profiles=profiles,
        recalibration=bool(raw.get("recalibration", False)),
        seed=int(raw.get("seed", 0)),
        output=_path(raw.get("output", "out"), base),
        workers=int(raw.get("workers", 1)),
        plot_dates=tuple(raw.get("plot_dates", ())),
        grid=GridSpec(**g),
        calibration=CalibrationConfig(**cal_raw),
        warm_start=bool(warm),
        blmalz_delta=float(raw.get("blmalz", {}).get("delta_frac", 0.01)),
        sentiment=SentimentSettings(**s),
        irra_window=int(irra.get("window", 30)),
        irra_bounds=(float(irra.get("lower", -1.0)), float(irra.get("upper", 6.0))),
        normalization=raw.get("ifs", {}).get("normalization", "cross_model"),
        simulation=dict(raw.get("simulation", {})),
    )
    if "IRRA" in cfg.risks and cfg.data.options is not None and cfg.data.prices is None:
        raise ConfigError("IRRA needs a daily price series (data.prices)")
    if cfg.irra_bounds[0] >= cfg.irra_bounds[1]:
        raise ConfigError("irra.lower must be below irra.upper")
    return cfg


def load_config(path) -> StudyConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return parse_config(raw, path.parent)
