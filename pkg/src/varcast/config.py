"""Pipeline configuration: INI file with one section per stage.

Values resolve in the order defaults < ``--desk`` preset < config file <
``--set section.key=value`` flags.  Every section maps onto a frozen
dataclass whose own validation runs when the config is built.
"""
import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .bootstrap import BootstrapConfig
from .model import ModelConfig
from .obs import ObsConfig
from .scoring import ScoreConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class SimSection:
    design_size: int = 4000
    reps_per_keeper: int = 20
    wall_budget: float = 600.0
    end_day: int = 3650
    eval_locations: int = 4
    w_min: int = 8

    def __post_init__(self):
        if self.design_size < 1 or self.reps_per_keeper < 1 or self.end_day < 1 or self.w_min < 1:
            raise ValueError("design_size, reps_per_keeper, end_day and w_min must be >= 1")
        if not self.wall_budget > 0:
            raise ValueError("wall_budget must be > 0")
        if self.eval_locations < 1:
            raise ValueError("eval_locations must be >= 1")


@dataclass(frozen=True)
class DataSection:
    context: int = 20
    horizon: int = 4
    val_fraction: float = 0.1
    val_windows: int = 2048
    include_vac: bool = True

    def __post_init__(self):
        if self.context < 1 or self.horizon < 1 or self.val_windows < 1:
            raise ValueError("context, horizon and val_windows must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ForecastSection:
    n_draws: int = 100_000
    n_dates: int = 52
    last_date: int = -1  # -1: latest date whose full horizon has truth

    def __post_init__(self):
        if self.n_draws < 1 or self.n_dates < 1:
            raise ValueError("n_draws and n_dates must be >= 1")


@dataclass(frozen=True)
class ScoreSection:
    baseline: str = "persistence"
    alphas: tuple = (0.5, 0.2, 0.05)
    median_weight: float = 0.5
    min_lookback: int = 12

    def __post_init__(self):
        ScoreConfig(tuple(self.alphas), self.median_weight)
        if not self.baseline:
            raise ValueError("baseline must be a model name")

    @property
    def score_cfg(self):
        return ScoreConfig(tuple(self.alphas), self.median_weight)


@dataclass(frozen=True)
class BootstrapSection:
    n_reps: int = 5000
    n_blocks: int = 9
    block_len: int = 15
    modes: tuple = ("block", "iid")

    def __post_init__(self):
        for m in self.modes:
            BootstrapConfig(n_reps=self.n_reps, mode=m, n_blocks=self.n_blocks, block_len=self.block_len)
        if not self.modes:
            raise ValueError("need at least one bootstrap mode")

    def config(self, mode):
        return BootstrapConfig(n_reps=self.n_reps, mode=mode, n_blocks=self.n_blocks, block_len=self.block_len)


@dataclass(frozen=True)
class PipelineSection:
    master_seed: int = 0


SECTIONS = {
    "pipeline": PipelineSection,
    "sim": SimSection,
    "obs": ObsConfig,
    "data": DataSection,
    "model": ModelConfig,
    "train": TrainConfig,
    "forecast": ForecastSection,
    "score": ScoreSection,
    "bootstrap": BootstrapSection,
}
# derived from the master seed, never set directly
_RESERVED = {("train", "seed")}

DESK_PRESET = {
    "sim": {"design_size": 16, "reps_per_keeper": 3, "wall_budget": 120.0, "eval_locations": 3},
    "data": {"val_windows": 512},
    "model": {"d_model": 32, "d_ff": 64},
    "forecast": {"n_draws": 20_000, "n_dates": 30},
    "bootstrap": {"n_reps": 2000},
}


@dataclass(frozen=True)
class PipelineConfig:
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    sim: SimSection = field(default_factory=SimSection)
    obs: ObsConfig = field(default_factory=ObsConfig)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    forecast: ForecastSection = field(default_factory=ForecastSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    bootstrap: BootstrapSection = field(default_factory=BootstrapSection)

    def __post_init__(self):
        if (self.model.context, self.model.horizon) != (self.data.context, self.data.horizon):
            raise ConfigError("model.context/horizon must match data.context/horizon")

    @property
    def master_seed(self):
        return self.pipeline.master_seed

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in asdict(getattr(self, name)).items():
                if (name, k) in _RESERVED:
                    continue
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v):
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse(raw: str, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _apply(values: dict, section: str, key: str, raw, source):
    if section not in SECTIONS:
        raise ConfigError(f"{source}: unknown section [{section}]")
    names = {f.name: f for f in fields(SECTIONS[section])}
    if key not in names or (section, key) in _RESERVED:
        raise ConfigError(f"{source}: unknown key {section}.{key}")
    default = getattr(SECTIONS[section](), key)
    values.setdefault(section, {})[key] = _parse(raw, default, f"{source} {section}.{key}") \
        if isinstance(raw, str) else raw


def load_config(path=None, overrides=(), desk=False) -> PipelineConfig:
    """Resolve a :class:`PipelineConfig`.

    Parameters
    ----------
    path : str or None
        INI file; must exist when given.
    overrides : iterable of str
        ``section.key=value`` strings, highest precedence.
    desk : bool
        Start from the desk-scale preset instead of the full-scale defaults.
    """
    values = {}
    if desk:
        for section, kv in DESK_PRESET.items():
            for k, v in kv.items():
                _apply(values, section, k, v, "desk preset")
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(values, section, key, raw, str(path))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(values, section, key, raw, "--set")
    try:
        built = {name: SECTIONS[name](**values.get(name, {})) for name in SECTIONS}
        return PipelineConfig(**built)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def with_train_seed(train: TrainConfig, seed: int) -> TrainConfig:
    return replace(train, seed=int(seed))
