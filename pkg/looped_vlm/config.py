"""
Configuration management for looped_vlm.

A run is described by a declarative RunConfig (nested dataclasses with explicit
defaults). Files are JSON; environment-level settings come from .env / the
process environment through RuntimeSettings.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from dotenv import load_dotenv

from .errors import ConfigError

TASK_KINDS = ("global_count", "local_attribute")
INJECTION_MODES = ("stride", "prefix")
INJECTION_PHIS = ("add", "gated_add")
MERGER_KINDS = ("grouped", "per_token")
TRAINABLE_SETS = ("aligner", "all")


@dataclass(frozen=True)
class NumericConstants:
    """Epsilons and tolerances shared by the numeric kernel and the optimizer."""
    rmsnorm_eps: float = 1e-6
    adam_eps: float = 1e-8
    gradcheck_step: float = 1e-4
    gradcheck_rtol: float = 1e-4


NUMERIC = NumericConstants()


@dataclass
class VisionConfig:
    """Toy vision encoder and tier selection."""
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    depth: int = 8
    width: int = 64
    heads: int = 4
    tier_layers: Tuple[int, ...] = (2, 4, 6, 8)
    merger_kind: str = "grouped"
    isolate_patches: bool = False

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_visual_tokens(self) -> int:
        return self.n_patches // 4

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


@dataclass
class ModelConfig:
    """Looped language backbone: prelude (E), recurrent core (R) and coda (H)."""
    hidden: int = 128
    heads: int = 4
    layers_e: int = 1
    layers_r: int = 2
    layers_h: int = 1
    sigma0: Optional[float] = None
    r_bar: int = 8
    r_max: int = 32
    k_grad: int = 4
    injection_mode: str = "stride"
    injection_phi: str = "add"
    use_hierarchy: bool = True
    cache_period: int = 4
    max_seq_len: int = 64
    mlp_ratio: int = 4
    init_std: float = 0.02

    @property
    def state_std(self) -> float:
        """Standard deviation of the initial latent state (1/sqrt(h) unless set)."""
        return self.sigma0 if self.sigma0 is not None else 1.0 / math.sqrt(self.hidden)


@dataclass
class DataConfig:
    """Synthetic visual-QA splits."""
    train_size: int = 8000
    eval_size: int = 1000
    calib_size: int = 500
    train_seed_start: int = 0
    eval_seed_start: int = 10_000
    calib_seed_start: int = 11_000
    mix: Dict[str, float] = field(default_factory=lambda: {"global_count": 0.5, "local_attribute": 0.5})
    supervise_question: bool = False
    workers: int = 4

    def seed_ranges(self) -> Dict[str, Tuple[int, int]]:
        return {
            "train": (self.train_seed_start, self.train_seed_start + self.train_size),
            "eval": (self.eval_seed_start, self.eval_seed_start + self.eval_size),
            "calib": (self.calib_seed_start, self.calib_seed_start + self.calib_size),
        }


@dataclass
class StageConfig:
    """One stage of the staged training pipeline."""
    stage: int = 1
    steps: int = 2000
    lr_scale: float = 1.0
    trainable: str = "aligner"


def _default_stages() -> List[StageConfig]:
    # lr scales keep the 1e-3 / 1e-5 / 1e-6 ratios against the toy peak
    return [
        StageConfig(stage=1, steps=2000, lr_scale=1.0, trainable="aligner"),
        StageConfig(stage=2, steps=10000, lr_scale=1e-2, trainable="all"),
        StageConfig(stage=3, steps=5000, lr_scale=1e-3, trainable="all"),
    ]


@dataclass
class TrainConfig:
    """Optimizer, depth sampling and stage schedule."""
    batch_size: int = 8
    peak_lr: float = 3e-2
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    sigma_lambda: float = 0.5
    fixed_depth: Optional[int] = None
    checkpoint_every: int = 500
    log_every: int = 50
    prefetch: int = 4
    stages: List[StageConfig] = field(default_factory=_default_stages)

    def stage_config(self, stage: int) -> StageConfig:
        for stage_config in self.stages:
            if stage_config.stage == stage:
                return stage_config
        raise ConfigError(f"Stage {stage} is not configured")


@dataclass
class InferenceConfig:
    """Adaptive early-exit decoding."""
    epsilon: float = 1e-2
    min_steps: int = 2
    r_max: Optional[int] = None
    prefill_steps: Optional[int] = None
    max_new_tokens: int = 4
    calibration_grid: Tuple[float, ...] = (1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 1e-1)
    target_exit_fraction: float = 0.5


@dataclass
class TraceConfig:
    """Latent-state trace export."""
    steady_step: int = 32
    plot: bool = False


@dataclass
class RunConfig:
    """Complete, serializable description of a run."""
    seed: int = 0
    output_dir: str = "runs/default"
    vision: VisionConfig = field(default_factory=VisionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    trace: TraceConfig = field(default_factory=TraceConfig)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        return _build_dataclass(cls, data, "")

    @property
    def inference_r_max(self) -> int:
        return self.inference.r_max if self.inference.r_max is not None else self.model.r_max

    @property
    def prefill_steps(self) -> int:
        return self.inference.prefill_steps if self.inference.prefill_steps is not None else self.inference_r_max


class RuntimeSettings:
    """Environment-level settings (output root, logging, workers)."""

    def __init__(self, load_env_file: bool = True):
        if load_env_file:
            load_dotenv()

        self.OUTPUT_ROOT = os.getenv("LOOPED_VLM_OUTPUT_ROOT", "")
        self.LOG_LEVEL = os.getenv("LOOPED_VLM_LOG_LEVEL", "INFO").upper()
        self.EVAL_WORKERS = int(os.getenv("LOOPED_VLM_EVAL_WORKERS", "4"))
        self.PROGRESS = os.getenv("LOOPED_VLM_PROGRESS", "true").lower() == "true"
        self.USE_DIRTYJSON = os.getenv("USE_DIRTYJSON", "true").lower() == "true"

    @classmethod
    def validate_settings(cls, load_env_file: bool = True) -> Dict[str, Any]:
        """Validate environment settings and return validation results"""
        settings = cls(load_env_file=load_env_file)
        issues = []
        warnings = []

        if settings.LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            issues.append(f"Unknown log level: {settings.LOG_LEVEL}")
        if settings.EVAL_WORKERS < 1:
            issues.append(f"Eval workers must be >= 1, got {settings.EVAL_WORKERS}")
        elif settings.EVAL_WORKERS > 32:
            warnings.append(f"Eval workers {settings.EVAL_WORKERS} may not be optimal")
        if settings.OUTPUT_ROOT and not os.path.isdir(settings.OUTPUT_ROOT):
            warnings.append(f"Output root does not exist yet: {settings.OUTPUT_ROOT}")

        return {
            "valid": len(issues) == 0,
            "issues": issues,
            "warnings": warnings
        }


def _type_name(hint: Any) -> str:
    return getattr(hint, "__name__", str(hint))


def _coerce(value: Any, hint: Any, path: str) -> Any:
    origin = get_origin(hint)
    args = get_args(hint)

    if origin is Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)

    if dataclasses.is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected an object", [f"{path}: expected an object"])
        return _build_dataclass(hint, value, path + ".")

    if origin in (list, List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list", [f"{path}: expected a list"])
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]

    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list", [f"{path}: expected a list"])
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))

    if origin in (dict, Dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected an object", [f"{path}: expected an object"])
        return {str(k): _coerce(v, args[1], f"{path}.{k}") for k, v in value.items()}

    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool", [f"{path}: expected bool, got {value!r}"])
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int", [f"{path}: expected int, got {value!r}"])
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number", [f"{path}: expected number, got {value!r}"])
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string", [f"{path}: expected string, got {value!r}"])
        return value
    raise ConfigError(f"{path}: unsupported type {_type_name(hint)}")


def _build_dataclass(cls: Any, data: Mapping[str, Any], prefix: str) -> Any:
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        paths = [f"{prefix}{key}" for key in unknown]
        raise ConfigError(f"Unknown config keys: {', '.join(paths)}", [f"unknown key {p}" for p in paths])
    kwargs = {}
    for name in names & set(data):
        kwargs[name] = _coerce(data[name], hints[name], f"{prefix}{name}")
    return cls(**kwargs)


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {dotted}: {part} is not an object")
    node[parts[-1]] = value


def validate_config(cfg: RunConfig) -> Dict[str, Any]:
    """
    Validate a run configuration.

    Args:
        cfg: The configuration to check

    Returns:
        Dict with "valid", "issues" and "warnings"
    """
    issues: List[str] = []
    warnings: List[str] = []
    v, m, d, t, inf = cfg.vision, cfg.model, cfg.data, cfg.train, cfg.inference

    if v.image_size % v.patch_size != 0:
        issues.append(f"vision.image_size {v.image_size} not divisible by patch_size {v.patch_size}")
    elif v.grid % 2 != 0:
        issues.append(f"vision patch grid {v.grid} must be even for 2x2 merging")
    if v.image_size % 8 != 0:
        issues.append("vision.image_size must be a multiple of 8 (4x4 scene grid)")
    if len(v.tier_layers) != 4:
        issues.append(f"vision.tier_layers must have exactly 4 entries, got {len(v.tier_layers)}")
    else:
        if any(b <= a for a, b in zip(v.tier_layers, v.tier_layers[1:])):
            issues.append("vision.tier_layers must be strictly increasing")
        if v.tier_layers[0] < 1 or v.tier_layers[-1] != v.depth:
            issues.append(f"vision.tier_layers must lie in [1, {v.depth}] and end at depth")
    if v.width % v.heads != 0:
        issues.append("vision.width must be divisible by vision.heads")
    if v.merger_kind not in MERGER_KINDS:
        issues.append(f"vision.merger_kind must be one of {MERGER_KINDS}")

    for name in ("hidden", "heads", "layers_e", "layers_r", "layers_h", "r_max", "cache_period", "max_seq_len"):
        if getattr(m, name) < 1:
            issues.append(f"model.{name} must be >= 1")
    if m.hidden % max(m.heads, 1) != 0:
        issues.append("model.hidden must be divisible by model.heads")
    if not 1 <= m.k_grad <= m.r_max:
        issues.append(f"model.k_grad must lie in [1, r_max={m.r_max}]")
    if m.r_bar < 1 and t.fixed_depth is None:
        issues.append("model.r_bar must be >= 1")
    if m.sigma0 is not None and m.sigma0 <= 0:
        issues.append("model.sigma0 must be > 0")
    if m.injection_mode not in INJECTION_MODES:
        issues.append(f"model.injection_mode must be one of {INJECTION_MODES}")
    if m.injection_phi not in INJECTION_PHIS:
        issues.append(f"model.injection_phi must be one of {INJECTION_PHIS}")

    unknown_kinds = sorted(set(d.mix) - set(TASK_KINDS))
    if unknown_kinds:
        issues.append(f"data.mix has unknown task kinds: {unknown_kinds}")
    if any(p < 0 for p in d.mix.values()) or abs(sum(d.mix.values()) - 1.0) > 1e-9:
        issues.append("data.mix proportions must be non-negative and sum to 1")
    ranges = sorted(d.seed_ranges().items(), key=lambda kv: kv[1])
    for (name_a, (_, stop_a)), (name_b, (start_b, stop_b)) in zip(ranges, ranges[1:]):
        if stop_b > start_b and start_b < stop_a:
            issues.append(f"data seed ranges of {name_a} and {name_b} overlap")

    if t.batch_size < 1:
        issues.append("train.batch_size must be >= 1")
    elif t.batch_size > 64:
        warnings.append(f"Batch size {t.batch_size} may be slow on CPU")
    if t.peak_lr <= 0:
        issues.append("train.peak_lr must be > 0")
    if t.sigma_lambda < 0:
        issues.append("train.sigma_lambda must be >= 0")
    if t.fixed_depth is not None and not 1 <= t.fixed_depth <= m.r_max:
        issues.append(f"train.fixed_depth must lie in [1, {m.r_max}]")
    seen = set()
    for s in t.stages:
        if s.stage not in (1, 2, 3) or s.stage in seen:
            issues.append(f"train.stages: invalid or duplicate stage {s.stage}")
        seen.add(s.stage)
        if s.steps < 0 or s.lr_scale <= 0:
            issues.append(f"train.stages[{s.stage}]: steps must be >= 0 and lr_scale > 0")
        if s.trainable not in TRAINABLE_SETS:
            issues.append(f"train.stages[{s.stage}]: trainable must be one of {TRAINABLE_SETS}")
        if s.stage == 1 and s.trainable != "aligner":
            issues.append("train.stages[1] must train the aligner only")

    if inf.epsilon < 0:
        issues.append("inference.epsilon must be >= 0")
    if inf.r_max is not None and not 1 <= inf.r_max <= m.r_max:
        issues.append(f"inference.r_max must lie in [1, {m.r_max}]")
    if not 1 <= inf.min_steps <= cfg.inference_r_max:
        issues.append("inference.min_steps must lie in [1, r_max]")
    if not 1 <= cfg.prefill_steps <= cfg.inference_r_max:
        issues.append("inference.prefill_steps must lie in [1, r_max]")
    if not inf.calibration_grid:
        issues.append("inference.calibration_grid must not be empty")
    if not 0 < inf.target_exit_fraction <= 1:
        issues.append("inference.target_exit_fraction must lie in (0, 1]")

    if not 1 <= cfg.trace.steady_step <= m.r_max:
        issues.append(f"trace.steady_step {cfg.trace.steady_step} beyond r_max {m.r_max}")

    return {
        "valid": len(issues) == 0,
        "issues": issues,
        "warnings": warnings
    }


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    settings: Optional[RuntimeSettings] = None
) -> RunConfig:
    """
    Load a run configuration from defaults, an optional JSON file and overrides.

    Args:
        path: Optional JSON config file
        overrides: Optional mapping of dotted keys (e.g. "model.r_max") to values
        settings: Optional runtime settings; loaded from the environment if omitted

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: If the file cannot be parsed or the result is invalid
    """
    settings = settings or RuntimeSettings()
    tree: Dict[str, Any] = {}

    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read config file {path}: {e}")
        try:
            if settings.USE_DIRTYJSON:
                import dirtyjson
                tree = json.loads(json.dumps(dirtyjson.loads(text)))
            else:
                tree = json.loads(text)
        except Exception as e:
            raise ConfigError(f"Cannot parse config file {path}: {e}")
        if not isinstance(tree, dict):
            raise ConfigError(f"Config file {path} must contain a JSON object")

    for dotted, value in (overrides or {}).items():
        _set_dotted(tree, dotted, value)

    cfg = RunConfig.from_dict(tree)
    result = validate_config(cfg)
    if not result["valid"]:
        raise ConfigError("Invalid configuration: " + "; ".join(result["issues"]), result["issues"])
    return cfg


def resolve_output_dir(cfg: RunConfig, settings: Optional[RuntimeSettings] = None) -> Path:
    """Resolve cfg.output_dir against LOOPED_VLM_OUTPUT_ROOT when it is relative."""
    settings = settings or RuntimeSettings()
    out = Path(cfg.output_dir)
    if out.is_absolute() or not settings.OUTPUT_ROOT:
        return out
    return Path(settings.OUTPUT_ROOT) / out


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Return a validated copy of cfg with dotted-key overrides applied."""
    tree = cfg.to_dict()
    for dotted, value in overrides.items():
        _set_dotted(tree, dotted, value)
    updated = RunConfig.from_dict(tree)
    result = validate_config(updated)
    if not result["valid"]:
        raise ConfigError("Invalid configuration: " + "; ".join(result["issues"]), result["issues"])
    return updated
