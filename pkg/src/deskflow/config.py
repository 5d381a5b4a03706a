"""Run configuration: one JSON document, every key also settable as a flag.

Precedence is flag > config file > default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class ModelSection:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    context: int = 64
    rope_base: float = 10000.0
    pi_scale: float = 1.0
    init_seed: int = 0


@dataclass
class TokenizerSection:
    path: str | None = None
    vocab_size: int = 259


@dataclass
class DataSection:
    path: str | None = None
    eval_path: str | None = None
    template_prefix: str = "###Input:\n"
    template_infix: str = "\n###Output:\n"
    template_suffix: str = ""
    loss_on_input: bool = False


@dataclass
class TrainSection:
    lr: float = 1e-3
    betas: list = field(default_factory=lambda: [0.9, 0.95])
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 10
    total_steps: int = 200
    batch_size: int = 8
    seq_len: int = 64
    grad_clip: float | None = 1.0
    seed: int = 0
    checkpoint_every: int = 0
    grad_checkpointing: bool = False
    lora_rank: int = 0
    lora_alpha: float = 16.0
    lora_targets: list = field(default_factory=lambda: ["wq", "wv"])
    new_rows_from: int | None = None


@dataclass
class RaftSection:
    b: int = 8
    accept_fraction: float = 0.125
    sample_temperature: float = 1.0
    iterations: int = 1
    prompts_per_iter: int = 0
    max_new_tokens: int = 32
    sft_epochs: int = 1
    seed: int = 0
    reward: str = "model"


@dataclass
class GenerationSection:
    prompt: str = ""
    max_new_tokens: int = 64
    temperature: float = 1.0
    top_k: int | None = None
    top_p: float | None = None
    seed: int = 0
    gamma: int = 4
    use_template: bool = False


@dataclass
class EvalSection:
    seeds: list = field(default_factory=lambda: list(range(8)))
    models: dict = field(default_factory=dict)


@dataclass
class PathsSection:
    runs: str = "runs"
    run_dir: str | None = None
    checkpoint: str | None = None
    draft: str | None = None
    reward_model: str | None = None
    out: str | None = None


SECTIONS = {
    "model": ModelSection,
    "tokenizer": TokenizerSection,
    "data": DataSection,
    "train": TrainSection,
    "raft": RaftSection,
    "generation": GenerationSection,
    "eval": EvalSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    raft: RaftSection = field(default_factory=RaftSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        sections = {}
        for name, klass in SECTIONS.items():
            values = doc.get(name, {}) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"config section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - known
            if bad:
                raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
            for f in dataclasses.fields(klass):
                if f.name in values:
                    _check_type(f"{name}.{f.name}", f.type, values[f.name])
            sections[name] = klass(**values)
        return cls(**sections)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:8]


_TYPES = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,), "list": (list,), "dict": (dict,)}


def _check_type(key: str, annotation: str, value: Any) -> None:
    names = [part.strip() for part in str(annotation).split("|")]
    if value is None and "None" in names:
        return
    for n in names:
        allowed = _TYPES.get(n)
        if allowed and isinstance(value, allowed) and not (n in ("int", "float") and isinstance(value, bool)):
            return
    raise ConfigError(f"{key} expects {annotation}, got {value!r}")


def flag_keys() -> list[tuple[str, str]]:
    """(section, key) for every configurable value."""
    return [(s, f.name) for s, klass in SECTIONS.items() for f in dataclasses.fields(klass)]


def parse_value(raw: str) -> Any:
    """Flag values are JSON when they parse as JSON, plain strings otherwise."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve(config_file: str | None, overrides: dict[str, Any]) -> RunConfig:
    """Merge defaults, the optional config file and ``{"section.key": value}`` overrides."""
    merged = RunConfig().to_dict()
    if config_file:
        try:
            doc = json.loads(Path(config_file).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {config_file!r} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_file!r} is not valid JSON: {exc.msg}") from exc
        RunConfig.from_dict(doc)
        for section, values in doc.items():
            merged[section].update(values or {})
    for dotted, value in overrides.items():
        section, key = dotted.split(".", 1)
        merged[section][key] = value
    return RunConfig.from_dict(merged)
