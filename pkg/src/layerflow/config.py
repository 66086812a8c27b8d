"""Run configuration: a JSON file with a schema version; unknown keys are errors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .flow import ADAPTER_TASKS

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    count: int = 16
    out_dir: str = "data"


@dataclass
class VaeSection:
    channels_rgb: int = 4
    channels_a: int = 2
    width: int = 32
    lambda_pix: float = 1.0
    lambda_patch: float = 1.0
    lambda_perc: float = 0.1
    lambda_kl: float = 1e-4
    patch_size: int = 4
    perc_seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class FlowSection:
    d_model: int = 128
    heads: int = 4
    blocks: int = 4
    lora_rank: int = 8
    lora_alpha: float = 8.0
    adapter_tasks: list = field(default_factory=lambda: list(ADAPTER_TASKS))
    base_steps: int = 3000
    adapter_steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 8
    sampler_steps: int = 16
    mask_dropout: float = 0.5


@dataclass
class DecomposeSection:
    k_max: int = 4
    stop_tau: float = 0.01


@dataclass
class EvalSection:
    mattes: list = field(default_factory=lambda: ["white", "black", "checker"])
    judge_endpoint: str | None = None
    judge_fixture_dir: str | None = None


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    image_size: int = 32
    dataset: DatasetSection = field(default_factory=DatasetSection)
    vae: VaeSection = field(default_factory=VaeSection)
    flow: FlowSection = field(default_factory=FlowSection)
    decompose: DecomposeSection = field(default_factory=DecomposeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def resolve(self, p: str | None) -> Path | None:
        """Paths in the config are relative to the config file."""
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


_SECTIONS = {
    "dataset": DatasetSection,
    "vae": VaeSection,
    "flow": FlowSection,
    "decompose": DecomposeSection,
    "eval": EvalSection,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS and cls is RunConfig:
            kwargs[k] = _build(_SECTIONS[k], v, k)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad {where}: {e}") from e


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if "schema_version" not in data:
        raise ConfigError("config is missing schema_version")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data['schema_version']} (expected {SCHEMA_VERSION})")
    cfg = _build(RunConfig, data, "config")
    cfg.base_dir = base_dir
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return parse_config(data, path.parent)


def validate(cfg: RunConfig) -> None:
    if cfg.image_size < 16 or cfg.image_size % 4:
        raise ConfigError("image_size must be a multiple of 4 and >= 16")
    if cfg.dataset.count < 1:
        raise ConfigError("dataset.count must be >= 1")
    if not cfg.dataset.out_dir or Path(cfg.dataset.out_dir).is_absolute():
        raise ConfigError("dataset.out_dir must be a relative path inside --out")
    bad = sorted(set(cfg.flow.adapter_tasks) - set(ADAPTER_TASKS))
    if bad:
        raise ConfigError(f"unknown adapter task(s): {', '.join(bad)}")
    if cfg.decompose.k_max < 1 or not 0 < cfg.decompose.stop_tau < 1:
        raise ConfigError("decompose needs k_max >= 1 and 0 < stop_tau < 1")
    if cfg.flow.d_model % cfg.flow.heads:
        raise ConfigError("flow.d_model must be divisible by flow.heads")
    for m in cfg.eval.mattes:
        if isinstance(m, str):
            if m not in ("white", "black", "checker"):
                raise ConfigError(f"unknown matte {m!r}")
        elif not (isinstance(m, list) and len(m) == 3 and all(0 <= c <= 1 for c in m)):
            raise ConfigError(f"matte {m!r} must be a name or an RGB triple in [0, 1]")
    if cfg.eval.judge_fixture_dir is not None and not cfg.resolve(cfg.eval.judge_fixture_dir).is_dir():
        raise ConfigError(f"judge_fixture_dir {cfg.eval.judge_fixture_dir} does not exist")
