"""Run configuration: one YAML file drives every command.

Sections map to the moving parts: dataset sizes, mask policy, stage
schedule, feedback-training weights, and eval/sample settings. Seeds are
mandatory so every command is reproducible from the file alone. Targeted
overrides come in as dotted ``key.path=value`` strings.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .masking import MaskPolicy
from .pefl import PeflConfig

OUT_ROOT_ENV = "REWARDEDIT_OUT_ROOT"


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    """A required upstream artifact (dataset, checkpoint, probe) is missing."""


@dataclass
class DataConfig:
    n_train_scenes: int = 2000
    n_candidates: int | None = None  # default: 2x n_train_scenes
    n_aes_prompts: int = 2000
    variants_per_prompt: int = 4
    n_align_scenes: int = 4000
    n_eval_scenes: int = 200
    k_clusters: int = 16
    k_nn: int = 5
    decorative_fraction: float = 0.2
    stoplist: list = field(
        default_factory=lambda: ["fantastic", "brilliant", "unbelievable", "amazing", "stunning", "incredible"]
    )
    # reserved for curation on real data, where weakly matched pairs are
    # selected below this score; the synthetic builder does not need it
    low_match_threshold: float | None = None
    workers: int = 1


@dataclass
class ScheduleConfig:
    kind: str = "linear"
    phase: int = 1


@dataclass
class TrainConfig:
    iters: int = 1000
    log_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    init_from: str | None = None  # generator checkpoint to start pefl_phase1 / baseline from
    phase1_checkpoint: str | None = None  # default: <out_dir>/checkpoints/pefl_phase1_final.pt
    rewards_epochs: int = 16
    rewards_lr: float = 1e-3
    rewards_batch: int = 64
    val_frac: float = 0.1


@dataclass
class EvalConfig:
    batch_size: int = 16
    steps: int | None = None  # default: full schedule length
    which: str = "ema"  # ema | live
    tasks: list = field(default_factory=lambda: ["outpainting", "inpainting-editing", "inpainting-erasing"])
    n_grid: int = 8


@dataclass
class SampleConfig:
    n: int = 8
    which: str = "ema"


@dataclass
class RunConfig:
    seed: int
    out_dir: str
    data_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    mask_policy: MaskPolicy = field(default_factory=MaskPolicy)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pefl: PeflConfig = field(default_factory=PeflConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def resolved_out_dir(self) -> Path:
        out = Path(self.out_dir)
        root = os.environ.get(OUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def resolved_data_dir(self) -> Path:
        if self.data_dir is not None:
            d = Path(self.data_dir)
            root = os.environ.get(OUT_ROOT_ENV)
            if root and not d.is_absolute():
                d = Path(root) / d
            return d
        return self.resolved_out_dir() / "data"

    def checkpoints_dir(self) -> Path:
        return self.resolved_out_dir() / "checkpoints"


_SECTIONS = {
    "data": DataConfig,
    "mask_policy": MaskPolicy,
    "schedule": ScheduleConfig,
    "pefl": PeflConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "sample": SampleConfig,
}


def _build_section(name: str, cls, payload: dict):
    if not isinstance(payload, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    coerced = dict(payload)
    for f in dataclasses.fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list) and "tuple" in str(f.type):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    if "seed" not in raw:
        raise ConfigError("seed: field is mandatory")
    if "out_dir" not in raw:
        raise ConfigError("out_dir: field is mandatory")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {"seed": int(raw["seed"]), "out_dir": str(raw["out_dir"])}
    if raw.get("data_dir") is not None:
        kwargs["data_dir"] = str(raw["data_dir"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(name, cls, raw[name])
    return RunConfig(**kwargs)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings onto the raw config dict (YAML-typed)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        path, _, value = item.partition("=")
        keys = path.strip().split(".")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a mapping")
        node[keys[-1]] = yaml.safe_load(value)
    return raw


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if raw is None:
        raw = {}
    if overrides:
        raw = apply_overrides(raw, overrides)
    return config_from_dict(raw)


def dump_config(cfg: RunConfig, path) -> None:
    """Write the fully resolved config next to the artifacts it produced."""
    Path(path).write_text(yaml.safe_dump(dataclasses.asdict(cfg), sort_keys=True))
