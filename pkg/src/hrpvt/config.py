"""Configuration schema for models and training runs.

Configs are JSON documents. Loading is strict: unknown keys are rejected and
every violated constraint is reported at once rather than stopping at the
first one.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

STRATEGIES = ("vanilla", "layer_wise", "stage_wise", "none")
LAYER_FORMS = ("standard", "literal")


class ConfigError(ValueError):
    """Raised with every validation problem found in a config document."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class StageConfig:
    depth: int = 1
    dim: int = 16
    heads: int = 1
    reduction: int = 8
    mlp_ratio: int = 4

    def problems(self, where: str) -> List[str]:
        out = []
        if self.depth < 0:
            out.append(f"{where}.depth must be >= 0")
        if self.dim < 1 or self.heads < 1 or self.dim % self.heads:
            out.append(f"{where}.dim ({self.dim}) must be divisible by heads ({self.heads})")
        if self.reduction < 1:
            out.append(f"{where}.reduction must be >= 1")
        if self.mlp_ratio < 1:
            out.append(f"{where}.mlp_ratio must be >= 1")
        return out


@dataclass
class HDCConfig:
    """Hybrid-dilated convolution pyramid: ``depth`` 3x3 layers of ``width`` channels."""

    depth: int = 6
    width: int = 16
    dilations: Optional[List[int]] = None
    mode: str = "chain"
    merge: str = "concat"
    enabled: bool = True

    def rates(self) -> List[int]:
        return list(self.dilations) if self.dilations is not None else list(range(1, self.depth + 1))

    def problems(self, where: str) -> List[str]:
        out = []
        if self.depth < 1:
            out.append(f"{where}.depth must be >= 1")
        if self.width < 1:
            out.append(f"{where}.width must be >= 1")
        if self.dilations is not None:
            if len(self.dilations) != self.depth:
                out.append(f"{where}.dilations has {len(self.dilations)} entries for depth {self.depth}")
            if any(d < 1 for d in self.dilations):
                out.append(f"{where}.dilations must all be >= 1")
        if self.mode not in ("chain", "parallel"):
            out.append(f"{where}.mode must be 'chain' or 'parallel', got {self.mode!r}")
        if self.merge not in ("concat", "sum"):
            out.append(f"{where}.merge must be 'concat' or 'sum', got {self.merge!r}")
        return out


def _default_v2() -> HDCConfig:
    return HDCConfig(depth=3, width=32, merge="sum")


@dataclass
class SimCCConfig:
    k: float = 4.0
    sigma: float = 6.0
    input_w: int = 64
    input_h: int = 96
    num_keypoints: int = 17

    @property
    def x_bins(self) -> int:
        return int(round(self.input_w * self.k))

    @property
    def y_bins(self) -> int:
        return int(round(self.input_h * self.k))

    def problems(self, where: str) -> List[str]:
        out = []
        if self.k <= 0:
            out.append(f"{where}.k must be > 0")
        if self.sigma <= 0:
            out.append(f"{where}.sigma must be > 0")
        if self.input_w < 1 or self.input_h < 1:
            out.append(f"{where}.input_w/input_h must be positive")
        if self.num_keypoints < 1:
            out.append(f"{where}.num_keypoints must be >= 1")
        for name, extent in (("input_w", self.input_w), ("input_h", self.input_h)):
            bins = extent * self.k
            if abs(bins - round(bins)) > 1e-9:
                out.append(f"{where}: {name}*k = {bins} is not an integer bin count")
        return out


def tiny_stages() -> List[StageConfig]:
    return [
        StageConfig(depth=1, dim=16, heads=1, reduction=8),
        StageConfig(depth=1, dim=32, heads=2, reduction=4),
        StageConfig(depth=1, dim=64, heads=4, reduction=2),
        StageConfig(depth=1, dim=128, heads=8, reduction=1),
    ]


@dataclass
class ModelConfig:
    stages: List[StageConfig] = field(default_factory=tiny_stages)
    hrpm_v1: HDCConfig = field(default_factory=HDCConfig)
    hrpm_v2: HDCConfig = field(default_factory=_default_v2)
    strategy: str = "vanilla"
    stage_wise_includes_last: bool = False
    simcc: SimCCConfig = field(default_factory=SimCCConfig)
    layer_form: str = "standard"
    dtype: str = "float64"
    seed: int = 0

    def problems(self, where: str = "model") -> List[str]:
        out: List[str] = []
        if len(self.stages) != 4:
            out.append(f"{where}.stages must list exactly 4 stages, got {len(self.stages)}")
        for i, s in enumerate(self.stages):
            out += s.problems(f"{where}.stages[{i}]")
        out += self.hrpm_v1.problems(f"{where}.hrpm_v1")
        out += self.hrpm_v2.problems(f"{where}.hrpm_v2")
        out += self.simcc.problems(f"{where}.simcc")
        if self.strategy not in STRATEGIES:
            out.append(f"{where}.strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.layer_form not in LAYER_FORMS:
            out.append(f"{where}.layer_form must be one of {LAYER_FORMS}, got {self.layer_form!r}")
        if self.dtype not in ("float32", "float64"):
            out.append(f"{where}.dtype must be 'float32' or 'float64'")
        if self.strategy == "layer_wise" and self.stages and self.stages[0].depth < 1:
            out.append(f"{where}: layer_wise insertion requires stage-1 depth >= 1")
        out += self._geometry_problems(where)
        return out

    def _geometry_problems(self, where: str) -> List[str]:
        out = []
        h, w = self.simcc.input_h, self.simcc.input_w
        if h % 32 or w % 32:
            out.append(f"{where}.simcc: input {h}x{w} must be divisible by 32 (stage-4 stride)")
            return out
        for i, s in enumerate(self.stages):
            stride = 2 ** (i + 2)
            hi, wi = h // stride, w // stride
            if hi % s.reduction or wi % s.reduction:
                out.append(f"{where}.stages[{i}].reduction {s.reduction} does not divide stage extent {hi}x{wi}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        problems: List[str] = []
        cfg = _build(cls, data, "model", problems)
        if not problems:
            problems += cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg


@dataclass
class SceneSpec:
    """Synthetic stick-figure scenes standing in for person crops."""

    canvas_w: int = 64
    canvas_h: int = 96
    scale_range: Tuple[float, float] = (0.6, 0.85)
    angle_jitter: float = 25.0
    noise: float = 0.05
    seed: int = 0

    def problems(self, where: str = "scene") -> List[str]:
        out = []
        lo, hi = self.scale_range
        if self.canvas_w < 8 or self.canvas_h < 8:
            out.append(f"{where}: canvas must be at least 8x8")
        if not 0 < lo <= hi:
            out.append(f"{where}.scale_range must satisfy 0 < lo <= hi")
        if hi > 0.95:
            out.append(f"{where}.scale_range upper bound {hi} leaves no margin: figure would exceed the canvas")
        if not 0 <= self.noise <= 1:
            out.append(f"{where}.noise must lie in [0, 1]")
        if not 0 <= self.angle_jitter <= 90:
            out.append(f"{where}.angle_jitter must lie in [0, 90] degrees")
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneSpec":
        problems: List[str] = []
        spec = _build(cls, data, "scene", problems)
        if not problems:
            problems += spec.problems()
        if problems:
            raise ConfigError(problems)
        return spec


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip: bool = True
    scale: Tuple[float, float] = (0.65, 1.35)
    rotation: Tuple[float, float] = (-45.0, 45.0)

    def problems(self, where: str) -> List[str]:
        out = []
        if not 0.65 <= self.scale[0] <= self.scale[1] <= 1.35:
            out.append(f"{where}.scale must lie within (0.65, 1.35)")
        if not -45.0 <= self.rotation[0] <= self.rotation[1] <= 45.0:
            out.append(f"{where}.rotation must lie within (-45, 45) degrees")
        return out


@dataclass
class OptimizerConfig:
    lr: float = 5e-4
    milestones: List[int] = field(default_factory=list)
    gamma: float = 0.1

    def problems(self, where: str) -> List[str]:
        out = []
        if self.lr <= 0:
            out.append(f"{where}.lr must be > 0")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            out.append(f"{where}.milestones must be strictly increasing")
        return out


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    count: int = 16
    scene: SceneSpec = field(default_factory=SceneSpec)

    def problems(self, where: str) -> List[str]:
        out = []
        if self.source not in ("synthetic", "coco"):
            out.append(f"{where}.source must be 'synthetic' or 'coco'")
        if self.source == "coco" and not self.path:
            out.append(f"{where}.path is required for source 'coco'")
        if self.count < 0:
            out.append(f"{where}.count must be >= 0")
        out += self.scene.problems(f"{where}.scene")
        return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 10
    batch_size: int = 16
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def problems(self) -> List[str]:
        out = self.model.problems("model")
        out += self.optimizer.problems("optimizer")
        out += self.augment.problems("augment")
        out += self.data.problems("data")
        if self.epochs < 1:
            out.append("epochs must be >= 1")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.optimizer.milestones and self.optimizer.milestones[-1] >= self.epochs:
            out.append("optimizer.milestones must fall before the final epoch")
        if self.model.simcc.input_w != self.data.scene.canvas_w or self.model.simcc.input_h != self.data.scene.canvas_h:
            out.append("data.scene canvas must match model.simcc input size")
        return out

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        problems: List[str] = []
        cfg = _build(cls, data, "run", problems)
        if not problems:
            problems += cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    return RunConfig.from_dict(data)


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


# -- strict dataclass construction ------------------------------------------


def _build(cls, data, where: str, problems: List[str]):
    if not isinstance(data, dict):
        problems.append(f"{where}: expected an object, got {type(data).__name__}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            problems.append(f"{where}: unknown key {key!r}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{where}.{f.name}", problems)
    try:
        return cls(**kwargs)
    except TypeError as exc:  # pragma: no cover - guarded by the key check above
        problems.append(f"{where}: {exc}")
        return cls()


def _coerce(tp, value, where: str, problems: List[str]):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where, problems)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where, problems)
    if origin in (list, List):
        if not isinstance(value, list):
            problems.append(f"{where}: expected a list")
            return []
        return [_coerce(args[0], v, f"{where}[{i}]", problems) for i, v in enumerate(value)]
    if origin in (tuple, Tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            problems.append(f"{where}: expected a list of {len(args)} values")
            return tuple()
        return tuple(_coerce(a, v, f"{where}[{i}]", problems) for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{where}: expected true/false")
        return bool(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{where}: expected an integer")
            return 0
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{where}: expected a number")
            return 0.0
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{where}: expected a string")
            return ""
        return value
    return value
