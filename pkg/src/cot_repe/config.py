from __future__ import annotations

import hashlib
import importlib.resources
import os
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from cot_repe.enum import (
    FinalNorm,
    OrientationRule,
    ReportFormat,
    SelectionStrategy,
    SteeringSign,
    StimulusKind,
    TaskKind,
)
from cot_repe.exceptions import InvalidConfig, IoFailure

__all__ = ["ENV_PREFIX", "RunConfig", "derive_seed", "load_yaml"]

ENV_PREFIX = "ROT_"


def derive_seed(root: int, component: str) -> int:
    """
    Derives the seed of one pipeline component from the root seed.

    The sub-seed is the first 8 bytes of `blake2b("<root>:<component>")`, read little-endian, so
    each component draws from an independent stream that depends only on the root seed.

    Args:
        root (int): The root seed (`--seed`).
        component (str): Component name, e.g. `model`, `selection`, `demo-shuffle` or `task:coin-parity`.

    Returns:
        int: An unsigned 64-bit seed.

    """
    digest = hashlib.blake2b(f"{root}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def load_yaml(path: str | Path) -> Any:
    """Reads a YAML file, raising `IoFailure` when it is missing and `InvalidConfig` when it is malformed."""
    try:
        with open(path, encoding="utf-8") as f:
            return yaml.safe_load(f)
    except OSError as exc:
        raise IoFailure(f"Could not read '{path}': {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfig(f"Malformed YAML in '{path}': {exc}") from exc


def _bundled_config(name: str) -> Path | None:
    resource = importlib.resources.files("cot_repe").joinpath("data", "configs", f"{name}.yaml")
    return Path(str(resource)) if resource.is_file() else None


class RunConfig(BaseModel):
    """
    Every tunable of a pipeline run, with defaults matching the published experimental settings.

    Values are merged from four sources, highest precedence first: command-line flags,
    `ROT_<FIELD>` environment variables, a YAML config file, and the defaults below.

    Attributes:
        model (Path | None): Checkpoint to load; when omitted a toy model is built from `seed`.
        seed (int): Root seed; every component seed is derived from it.
        layer_count (int): Depth of a built toy model.
        hidden_dim (int): Width of a built toy model.
        head_count (int): Attention heads of a built toy model.
        final_norm (FinalNorm): Final normalization of a built toy model.
        layers (str): Layer specification, e.g. `last:5` or `8,9,10`.
        n_samples (int): Number of source queries N.
        select (SelectionStrategy): Query selection strategy.
        stimuli (StimulusKind): Zero-shot instructions or few-shot demonstrations.
        stimulus_index (int): Which bundled stimulus (0-based) the readers are fit on.
        m (int): Stimuli per query M.
        center (bool): Whether PCA mean-centers the population.
        orientation (OrientationRule): Read-time sign rule of reading vectors.
        delta (float): Localization threshold.
        alpha (float): Steering magnitude.
        alpha_by_task (dict[str, float]): Per-task steering magnitudes, overriding `alpha` for that task.
        sign (SteeringSign): Steering sign rule.
        max_new_tokens (int): Generation budget of the reasoning stage.
        answer_max_tokens (int): Generation budget of the answer-extraction stage.
        template (str | None): Template id; defaults to the id matching `stimuli`.
        task (str): Task file, or a bundled task name.
        task_kind (TaskKind | None): Answer format; inferred from the task answers when omitted.
        task_size (int): Number of items generated for a bundled task.
        eval_limit (int | None): Evaluate only the first items of the task.
        conditions (list[str]): Benchmark conditions.
        out (Path): Output directory.
        formats (list[ReportFormat]): Localization report renderings to write.
        workers (int): Worker threads; outputs do not depend on it.

    """

    model_config = ConfigDict(extra="forbid")

    model: Path | None = Field(default=None, description="Checkpoint to load; when omitted a toy model is built.")
    seed: int = Field(default=0, ge=0, description="Root seed; every component seed is derived from it.")
    layer_count: int = Field(default=6, ge=1, description="Depth of a built toy model.")
    hidden_dim: int = Field(default=64, ge=2, description="Width of a built toy model.")
    head_count: int = Field(default=4, ge=1, description="Attention heads of a built toy model.")
    final_norm: FinalNorm = Field(default=FinalNorm.STANDARD, description="Final normalization of a built toy model.")

    layers: str = Field(default="last:5", description="Layer specification, e.g. `last:5` or `8,9,10`.")
    n_samples: int = Field(default=128, ge=2, description="Number of source queries N.")
    select: SelectionStrategy = Field(default=SelectionStrategy.HIGH_PERPLEXITY, description="Query selection.")
    stimuli: StimulusKind = Field(default=StimulusKind.ZERO_SHOT, description="Form of the CoT stimulus.")
    stimulus_index: int = Field(default=0, ge=0, description="Bundled stimulus the readers are fit on.")
    m: int = Field(default=1, ge=1, description="Stimuli per query M.")
    center: bool = Field(default=False, description="Whether PCA mean-centers the population.")
    orientation: OrientationRule = Field(default=OrientationRule.MEAN_PROJECTION, description="Read-time sign rule.")

    delta: float = Field(default=10.0, allow_inf_nan=False, description="Localization threshold.")
    alpha: float = Field(default=1.0, allow_inf_nan=False, description="Steering magnitude.")
    alpha_by_task: dict[str, float] = Field(default_factory=dict, description="Per-task steering magnitudes.")
    sign: SteeringSign = Field(default=SteeringSign.FOLLOW_PROJECTION, description="Steering sign rule.")
    max_new_tokens: int = Field(default=512, ge=1, description="Generation budget of the reasoning stage.")
    answer_max_tokens: int = Field(default=8, ge=1, description="Generation budget of the answer stage.")

    template: str | None = Field(default=None, description="Template id; defaults to the id matching `stimuli`.")
    task: str = Field(default="coin-parity", description="Task file, or a bundled task name.")
    task_kind: TaskKind | None = Field(default=None, description="Answer format; inferred when omitted.")
    task_size: int = Field(default=256, ge=1, description="Number of items generated for a bundled task.")
    eval_limit: int | None = Field(default=None, ge=1, description="Evaluate only the first items of the task.")
    conditions: list[str] = Field(
        default_factory=lambda: ["base", "cot_z1", "cot_z2", "cot_z3", "rot_z1", "rot_z2", "rot_z3"],
        description="Benchmark conditions.",
    )

    out: Path = Field(default=Path("out"), description="Output directory.")
    formats: list[ReportFormat] = Field(
        default_factory=lambda: [ReportFormat.PLAIN, ReportFormat.ANSI, ReportFormat.HTML],
        description="Localization report renderings to write.",
    )
    workers: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1, description="Worker threads.")

    @field_validator("conditions", "formats", mode="before")
    @classmethod
    def split_comma_separated(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [item.strip() for item in value.split(",") if item.strip()]
        return value

    def alpha_for(self, task_name: str) -> float:
        return self.alpha_by_task.get(task_name, self.alpha)

    def seed_for(self, component: str) -> int:
        return derive_seed(self.seed, component)

    @classmethod
    def from_sources(
        cls,
        flags: Mapping[str, Any] | None = None,
        env: Mapping[str, str] | None = None,
        config_file: str | Path | None = None,
    ) -> RunConfig:
        """
        Merges configuration sources into a validated `RunConfig`.

        Args:
            flags (Mapping[str, Any] | None): Command-line values; `None` entries are treated as unset.
            env (Mapping[str, str] | None): Environment; defaults to `os.environ`. Only `ROT_<FIELD>` keys are read.
            config_file (str | Path | None): YAML file, or the name of a bundled config (e.g. `toy`).

        Returns:
            RunConfig: The merged configuration.

        Raises:
            InvalidConfig: If a value is out of range, or the file holds an unknown key.
            IoFailure: If the config file cannot be read.

        """
        merged: dict[str, Any] = {}

        if config_file is not None:
            path = Path(config_file)
            if not path.exists() and (bundled := _bundled_config(str(config_file))) is not None:
                path = bundled
            content = load_yaml(path) or {}
            if not isinstance(content, dict):
                raise InvalidConfig(f"Config file '{config_file}' must hold a mapping")
            merged.update(content)
            logger.debug(f"Loaded {len(content)} setting(s) from '{path}'")

        env = os.environ if env is None else env
        for name in cls.model_fields:
            key = f"{ENV_PREFIX}{name.upper()}"
            if key in env:
                merged[name] = env[key]

        merged.update({name: value for name, value in (flags or {}).items() if value is not None})

        try:
            return cls.model_validate(merged)
        except ValidationError as exc:
            raise InvalidConfig(f"Invalid configuration: {exc}") from exc
