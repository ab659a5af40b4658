"""Run configuration for the command-line pipeline.

A run is described by one YAML file with four sections (``model``,
``prompts``, ``pipeline``, ``output``) plus a top-level ``seed``. Every
value has a default, so an empty file is a valid (if small) run. The
config hash is the SHA-256 of the canonical JSON form of the resolved
config, excluding the output directory, and is stamped into every artifact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .intervention import DEFAULT_LAMBDA_GRID
from .model import PRESETS


class ConfigFieldError(ValueError):
    """A config value is missing, of the wrong type, or out of range."""

    def __init__(self, field_path: str, msg: str):
        super().__init__(f"config field '{field_path}': {msg}")
        self.field_path = field_path


@dataclass
class BiasEntry:
    layer: int
    experts: list
    group: list  # [axis, group]
    delta: float = 0.05


@dataclass
class ModelSection:
    preset: str | None = None
    architecture: dict = field(default_factory=lambda: {
        "d_model": 32, "n_layers": 3, "moe_layer_indices": [1, 2], "n_experts": 32, "top_k": 12,
    })
    biased: list = field(default_factory=list)  # of BiasEntry
    knowledge: list = field(default_factory=list)  # [[layer, expert], ...]
    entangled: bool = False
    push: float = 6.0
    margin: float = 1.0


@dataclass
class PromptsSection:
    axes: list = field(default_factory=lambda: ["gender"])
    n_templates: int = 4
    n_professions: int = 8
    n_demographic: int | None = None
    ppl_prompts: int = 64
    length_matched: bool = False


@dataclass
class PipelineSection:
    weights: dict = field(default_factory=lambda: {"ard": 1.0, "jsd": 0.5, "pmi": 0.3, "entropy": 0.0})
    aggregation: str = "selection"
    lambda_probe: float = 1.0
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    beta: float = 1.0
    quantile: float = 0.75
    n_perm: int = 10_000
    n_boot: int = 1_000
    fdr_q: float = 0.05
    mask_group_size: int = 10
    n_random_seeds: int = 5
    ablation_lambda: float = 1.0


@dataclass
class OutputSection:
    dir: str = "run"
    log_format: str = "jsonl"
    plots: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    prompts: PromptsSection = field(default_factory=PromptsSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> "RunConfig":
        m, p, pl, o = self.model, self.prompts, self.pipeline, self.output
        if m.preset is not None and m.preset not in PRESETS:
            raise ConfigFieldError("model.preset", f"unknown preset {m.preset!r}; choose from {sorted(PRESETS)}")
        for i, b in enumerate(m.biased):
            if b.delta <= 0:
                raise ConfigFieldError(f"model.biased[{i}].delta", "must be > 0")
            if len(b.group) != 2:
                raise ConfigFieldError(f"model.biased[{i}].group", "must be [axis, group]")
            if b.group[0] not in p.axes:
                raise ConfigFieldError(f"model.biased[{i}].group", f"axis {b.group[0]!r} is not in prompts.axes")
        for i, k in enumerate(m.knowledge):
            if len(k) != 2:
                raise ConfigFieldError(f"model.knowledge[{i}]", "must be [layer, expert]")
        for name in ("n_templates", "n_professions", "ppl_prompts"):
            if getattr(p, name) < 1:
                raise ConfigFieldError(f"prompts.{name}", "must be >= 1")
        if pl.aggregation not in ("selection", "probability"):
            raise ConfigFieldError("pipeline.aggregation", "must be 'selection' or 'probability'")
        if not pl.lambda_grid or 0.0 not in [float(x) for x in pl.lambda_grid]:
            raise ConfigFieldError("pipeline.lambda_grid", "must be non-empty and contain 0")
        if any(float(x) < 0 for x in pl.lambda_grid):
            raise ConfigFieldError("pipeline.lambda_grid", "values must be >= 0")
        if pl.beta < 0:
            raise ConfigFieldError("pipeline.beta", "must be >= 0")
        if not 0 <= pl.quantile <= 1:
            raise ConfigFieldError("pipeline.quantile", "must lie in [0, 1]")
        if not 0 < pl.fdr_q < 1:
            raise ConfigFieldError("pipeline.fdr_q", "must lie in (0, 1)")
        for name in ("n_perm", "n_boot", "n_random_seeds"):
            if getattr(pl, name) < 1:
                raise ConfigFieldError(f"pipeline.{name}", "must be >= 1")
        if pl.mask_group_size < 0:
            raise ConfigFieldError("pipeline.mask_group_size", "must be >= 0")
        if set(pl.weights) != {"ard", "jsd", "pmi", "entropy"}:
            raise ConfigFieldError("pipeline.weights", "needs exactly the keys ard, jsd, pmi, entropy")
        if o.log_format not in ("jsonl", "npz"):
            raise ConfigFieldError("output.log_format", "must be 'jsonl' or 'npz'")
        return self


_SECTIONS = {"model": ModelSection, "prompts": PromptsSection, "pipeline": PipelineSection,
             "output": OutputSection}


def _coerce(path: str, value, default):
    """Check ``value`` against the type of ``default`` (ints may stand in for floats)."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigFieldError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigFieldError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigFieldError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigFieldError(path, f"expected a string, got {value!r}")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigFieldError(path, f"expected a list, got {value!r}")
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigFieldError(path, f"expected a mapping, got {value!r}")
    return value


def _section(name: str, cls, raw) -> object:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigFieldError(name, "expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigFieldError(f"{name}.{unknown[0]}", "unknown key")
    default = cls()
    kw = {k: _coerce(f"{name}.{k}", v, getattr(default, k)) for k, v in raw.items()}
    if cls is ModelSection and "biased" in kw:
        entries = []
        for i, b in enumerate(kw["biased"]):
            if not isinstance(b, dict):
                raise ConfigFieldError(f"model.biased[{i}]", "expected a mapping")
            try:
                entries.append(BiasEntry(**b))
            except TypeError as exc:
                raise ConfigFieldError(f"model.biased[{i}]", str(exc)) from None
        kw["biased"] = entries
    if cls is PipelineSection and "weights" in kw:
        kw["weights"] = {**default.weights, **{k: float(v) for k, v in kw["weights"].items()}}
    return cls(**kw)


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigFieldError("<root>", "expected a mapping")
    unknown = sorted(set(raw) - {"seed", *_SECTIONS})
    if unknown:
        raise ConfigFieldError(unknown[0], "unknown key")
    seed = _coerce("seed", raw.get("seed", 0), 0)
    sections = {name: _section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    return RunConfig(seed=seed, **sections).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigFieldError("--config", f"file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigFieldError("<root>", f"{path} is not valid YAML ({exc})") from None
    return config_from_dict(raw)
