"""Run configuration shared by the CLI subcommands (JSON on disk)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SceneConfig
from .errors import ParameterError
from .loss import LossWeights
from .model import ModelConfig

PHASES = ("pretune", "prompt-tune")
SCHEDULES = ("constant", "cosine")


@dataclass
class OptimConfig:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "constant"
    steps: int = 1000
    batch_size: int = 8
    grad_clip: float = 1.0          # 0 disables clipping
    augment: bool = True            # random flips / transposes of each scene
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("adam", "sgd"):
            raise ParameterError(f"optimizer must be 'adam' or 'sgd', got {self.name!r}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ParameterError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")
        if self.grad_clip < 0:
            raise ParameterError("grad_clip must be non-negative")


def _prompt_model() -> ModelConfig:
    return ModelConfig(head="gtc", use_prompts=True)


@dataclass
class RunConfig:
    """Everything a run needs besides file paths.

    ``model`` describes the prompt-tune network; the pretune network is the
    same with a plain FC head and no prompts (see :meth:`model_for`).
    """
    model: ModelConfig = field(default_factory=_prompt_model)
    loss: LossWeights = field(default_factory=LossWeights)
    pretune: OptimConfig = field(default_factory=lambda: OptimConfig(steps=1000))
    prompt_tune: OptimConfig = field(default_factory=lambda: OptimConfig(steps=500))
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval_radius: float = 3.0
    init_seed: int = 0

    def __post_init__(self):
        if not self.eval_radius > 0:
            raise ParameterError(f"eval_radius must be positive, got {self.eval_radius}")
        if self.model.num_classes != self.scene.num_classes:
            raise ParameterError(f"model has {self.model.num_classes} classes, "
                                 f"scene config {self.scene.num_classes}")

    def model_for(self, phase: str) -> ModelConfig:
        if phase == "pretune":
            return replace(self.model, head="fc", use_prompts=False)
        if phase == "prompt-tune":
            return self.model
        raise ParameterError(f"phase must be one of {PHASES}, got {phase!r}")

    def optim_for(self, phase: str) -> OptimConfig:
        self.model_for(phase)
        return self.pretune if phase == "pretune" else self.prompt_tune

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ParameterError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "model" in kw:
                kw["model"] = ModelConfig.from_dict(kw["model"])
            if "loss" in kw:
                kw["loss"] = LossWeights(**kw["loss"])
            for key in ("pretune", "prompt_tune"):
                if key in kw:
                    kw[key] = OptimConfig(**kw[key])
            if "scene" in kw:
                kw["scene"] = SceneConfig.from_dict(kw["scene"])
            return cls(**kw)
        except TypeError as exc:
            raise ParameterError(f"bad config: {exc}") from exc


def load_config(path) -> RunConfig:
    """Read a config file; a missing path gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParameterError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(d)
