import os
import logging
from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from exceptions import ConfigurationError

load_dotenv()

logger = logging.getLogger(__name__)

class Config:
    """Static settings and environment-derived values"""

    # Dataset Configuration
    DATA_ROOT_ENV = "PYRAMIDAT_DATA_ROOT"
    DATA_ROOT = os.getenv(DATA_ROOT_ENV)
    DEFAULT_DATA_ROOT = Path("data")

    CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
    CIFAR10_MD5 = "c32a1d4ab5d03f1284b67883e8d87530"
    CIFAR10_DIRNAME = "cifar-10-batches-bin"
    CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
    CIFAR10_EVAL_FILES = ["test_batch.bin"]
    CIFAR10_CLASSES = [
        "airplane", "automobile", "bird", "cat", "deer",
        "dog", "frog", "horse", "ship", "truck",
    ]

    # Download Configuration
    CHUNK_SIZE = 8192
    DOWNLOAD_TIMEOUT = 60

    # Artifact names
    RESOLVED_CONFIG_NAME = "resolved_config.yaml"
    METRICS_NAME = "metrics.csv"
    DIAGNOSTICS_NAME = "diagnostics.json"
    SUMMARY_NAME = "summary.json"
    REPORT_NAMES = {
        "clean": "clean_report.csv",
        "corruption": "corruption_report.csv",
        "whitebox": "whitebox_report.csv",
    }

    # Config files
    SCHEMA_VERSION = 1
    CONFIG_DIR = Path(__file__).resolve().parent / "configs"
    CORRUPTION_TABLE = CONFIG_DIR / "corruptions.yaml"
    CORRUPTION_TABLE_VERSION = 1

    @classmethod
    def data_root(cls, explicit=None):
        """
        Resolve the dataset root: explicit value, then PYRAMIDAT_DATA_ROOT, then ./data
        """
        if explicit:
            return Path(explicit)
        env_root = os.getenv(cls.DATA_ROOT_ENV) or cls.DATA_ROOT
        if env_root:
            return Path(env_root)
        logger.warning(f"{cls.DATA_ROOT_ENV} not set, using {cls.DEFAULT_DATA_ROOT}")
        return cls.DEFAULT_DATA_ROOT

    @classmethod
    def load_corruption_table(cls, path=None):
        """
        Load the frozen corruption severity table

        Returns:
            dict: kind -> list of 5 parameter dicts (severities 1-5)
        """
        path = Path(path or cls.CORRUPTION_TABLE)
        if not path.is_file():
            raise ConfigurationError(f"Corruption table not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            table = yaml.safe_load(f)
        if table.get("table_version") != cls.CORRUPTION_TABLE_VERSION:
            raise ConfigurationError(
                f"Corruption table {path} has version {table.get('table_version')}, "
                f"expected {cls.CORRUPTION_TABLE_VERSION}"
            )
        kinds = table.get("kinds", {})
        for kind, rows in kinds.items():
            if len(rows) != 5:
                raise ConfigurationError(f"Corruption '{kind}' needs 5 severity rows, got {len(rows)}")
        return kinds


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ModelSection(_Section):
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    n_heads: int = 4
    mlp_dim: int = 128
    n_classes: int = 10
    dropout_p: float = 0.1
    stochdepth_p: float = 0.1
    in_channels: int = 3
    use_pos_embed: bool = True

    def to_model_config(self):
        from backbone import ModelConfig
        return ModelConfig(**self.model_dump())


class SyntheticSection(_Section):
    n: int = 512
    seed: int = 7
    image_size: int = 32
    eval_fraction: float = 0.25
    texture_noise: float = 0.1


class DatasetSection(_Section):
    name: Literal["cifar10", "synthetic_shapes"] = "cifar10"
    root: Optional[str] = None
    download: bool = False
    train_limit: Optional[int] = None
    eval_limit: Optional[int] = None
    synthetic: SyntheticSection = Field(default_factory=SyntheticSection)


class AttackSection(_Section):
    preset: Literal["pixel", "patch", "two_level", "three_level", "four_level", "custom"] = "three_level"
    scales: Optional[List[int]] = None
    multipliers: Optional[List[float]] = None
    eps: Union[float, List[float]] = 6 / 255
    step_size: float = 1 / 255
    n_steps: int = 5
    target_mode: Literal["random_target", "untargeted"] = "random_target"
    level_schedule: Literal["joint", "coarse_to_fine"] = "joint"
    multiplier_scale: float = 1.0

    @model_validator(mode="after")
    def _custom_needs_levels(self):
        if self.preset == "custom" and (self.scales is None or self.multipliers is None):
            raise ValueError("attack.preset=custom requires attack.scales and attack.multipliers")
        if self.preset != "custom" and (self.scales is not None or self.multipliers is not None):
            raise ValueError("attack.scales/multipliers are only used with attack.preset=custom")
        return self

    def to_spec(self, image_size, patch_size):
        from pyramid_attack import PyramidSpec, pyramid_preset
        if self.preset == "custom":
            scales, multipliers = self.scales, self.multipliers
        else:
            base = pyramid_preset(self.preset, image_size, patch_size)
            scales, multipliers = base.scales, base.multipliers
        eps = self.eps if isinstance(self.eps, list) else [self.eps] * len(scales)
        spec = PyramidSpec(
            scales=scales,
            multipliers=multipliers,
            eps=eps,
            step_size=self.step_size,
            n_steps=self.n_steps,
            target_mode=self.target_mode,
            level_schedule=self.level_schedule,
        )
        return spec.scaled(self.multiplier_scale) if self.multiplier_scale != 1.0 else spec


class PixelAttackSection(_Section):
    eps: float = 4 / 255
    step_size: float = 1 / 255
    n_steps: int = 5
    target_mode: Literal["random_target", "untargeted"] = "random_target"

    def to_spec(self):
        from pyramid_attack import PyramidSpec
        return PyramidSpec(
            scales=[1], multipliers=[1.0], eps=[self.eps],
            step_size=self.step_size, n_steps=self.n_steps, target_mode=self.target_mode,
        )


class TrainerSection(_Section):
    regime: Literal["baseline", "pixel_at", "pyramid_at", "random_pixel", "random_pyramid"] = "baseline"
    lam: float = Field(1.0, alias="lambda", ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    base_lr: float = Field(1e-3, gt=0.0)
    warmup_steps: int = Field(200, ge=0)
    total_steps: int = Field(2000, gt=0)
    batch_size: int = Field(128, gt=0)
    drop_mode: Literal["matched", "unmatched", "disabled_adv", "disabled_all"] = "matched"
    adv_dropout_p: Optional[float] = None
    adv_stochdepth_p: Optional[float] = None
    checkpoint_every: int = Field(500, gt=0)
    deterministic: bool = True
    record_masks: bool = False
    resume_from: Optional[str] = None

    @model_validator(mode="after")
    def _warmup_before_end(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"trainer.warmup_steps ({self.warmup_steps}) must be < trainer.total_steps ({self.total_steps})"
            )
        return self


class EvalSection(_Section):
    suites: List[Literal["clean", "corruption", "whitebox"]] = ["clean", "corruption", "whitebox"]
    batch_size: int = 256
    corruption_kinds: List[Literal["gaussian_noise", "gaussian_blur", "contrast", "jpeg_blockiness_proxy"]] = [
        "gaussian_noise", "gaussian_blur", "contrast", "jpeg_blockiness_proxy",
    ]
    severities: List[int] = [1, 2, 3, 4, 5]
    reference_checkpoint: Optional[str] = None
    whitebox_attacks: List[Literal["pixel", "pyramid"]] = ["pixel", "pyramid"]


class AnalysisSection(_Section):
    n_samples: int = 256
    bands: List[Literal["low_pass", "high_pass"]] = ["low_pass", "high_pass"]
    cutoffs: List[int] = [0, 1, 2, 4, 8, 12, 16]
    l2_norm: float = 2.0
    checkpoint: Optional[str] = None


class AttackOutputSection(_Section):
    n_samples: int = 8
    batch_size: int = 8


class RunConfig(_Section):
    schema_version: Literal[1] = 1
    seed: int = 0
    output_dir: str = "runs/default"
    model: ModelSection = Field(default_factory=ModelSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    pixel_attack: PixelAttackSection = Field(default_factory=PixelAttackSection)
    attack_output: AttackOutputSection = Field(default_factory=AttackOutputSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    analysis: AnalysisSection = Field(default_factory=AnalysisSection)

    def pyramid_spec(self):
        return self.attack.to_spec(self.model.image_size, self.model.patch_size)

    def pixel_spec(self):
        return self.pixel_attack.to_spec()

    def to_dict(self):
        return self.model_dump(mode="json", by_alias=True)


def parse_override(text):
    """
    Split "section.key=value" into (["section", "key"], value), value parsed as YAML
    """
    if "=" not in text:
        raise ConfigurationError(f"Override '{text}' must look like key=value")
    key, raw = text.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigurationError(f"Override '{text}' has an empty key")
    return path, yaml.safe_load(raw)


def apply_overrides(data, overrides):
    for text in overrides or []:
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigurationError(f"Override '{text}': '{part}' is not a section")
            node = child
        node[path[-1]] = value
        logger.debug(f"Override {'.'.join(path)} = {value!r}")
    return data


def validate_run_config(data):
    """
    Validate a nested dict against the schema, naming the offending key on failure
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            key = ".".join(str(p) for p in err["loc"]) or "<root>"
            problems.append(f"{key}: {err['msg']}")
        raise ConfigurationError("Invalid config: " + "; ".join(problems)) from e


def load_run_config(path=None, overrides=None, seed=None, output_dir=None):
    """
    Load a YAML run config, apply --set overrides and global flags, validate

    Args:
        path (Path, optional): YAML config file; None means all defaults
        overrides (list, optional): "section.key=value" strings
        seed (int, optional): overrides the global seed
        output_dir (str, optional): overrides output_dir

    Returns:
        RunConfig: fully resolved configuration
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must contain a mapping")
        logger.info(f"Loaded config from: {path}")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return validate_run_config(data)


def save_resolved_config(run_config, out_dir):
    """Write the fully resolved config next to a command's outputs"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / Config.RESOLVED_CONFIG_NAME
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(run_config.to_dict(), f, sort_keys=False)
    logger.info(f"Saved resolved config to: {path}")
    return path
