"""Full network: backbone, centroid detector and classification head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig, PromptBank
from .data import NucleusInstance
from .detector import DecoderSideOutput, Detector, DetectorConfig, Selection
from .errors import ParameterError
from .gtc import GroupingClassifier
from .loss import softmax_np
from .nn import MLP, Module
from .rng import Rng
from .tensor import Tensor

HEADS = ("fc", "gtc")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    head: str = "fc"
    num_groups: int = 64
    # inject the groups as prompt tokens into the backbone
    use_prompts: bool = False
    # GTC groups are the prompt tensor itself; False gives separate embeddings
    share_prompts: bool = True
    tau: float = 1.0
    # one classifier for all decoder layers instead of one per layer
    shared_head: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        if self.head not in HEADS:
            raise ParameterError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.num_groups < 0:
            raise ParameterError("num_groups must be non-negative")
        if self.head == "gtc" and self.num_groups < 1:
            raise ParameterError("the grouping head needs at least one group")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        self.backbone.validate(self.height, self.width)

    @property
    def dim(self) -> int:
        return self.backbone.embed_dim

    def feature_size(self) -> tuple[int, int]:
        f = self.backbone.patch_size * 2 ** (self.backbone.stages - 1)
        return self.height // f, self.width // f

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    sides: list[DecoderSideOutput]
    scores: list[Tensor]          # per side output, [B, Q, C+1]
    selection: Selection


class NucleusDetector(Module):
    """Prompted backbone + deformable detector + FC or grouping head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = Rng(seed, "init")
        d, c = cfg.dim, cfg.num_classes
        self.backbone = self.add_child("backbone", Backbone(cfg.backbone, rng.spawn("backbone")))
        self.detector = self.add_child("detector", Detector(cfg.detector, d, c, rng.spawn("detector")))
        self.prompts = None
        if cfg.use_prompts and cfg.num_groups:
            self.prompts = self.add_child("prompts", PromptBank(rng.spawn("prompts"), cfg.num_groups, d))
        layers = 1 if cfg.shared_head else cfg.detector.decoder_layers
        self.heads: list = []
        if cfg.head == "fc":
            for i in range(layers):
                self.heads.append(self.add_child(f"head{i}", MLP(rng.spawn(f"head{i}"), d, d, c + 1)))
        else:
            if self.prompts is not None and cfg.share_prompts:
                groups = self.prompts.prompts
            else:
                groups = self.add_param("groups", rng.spawn("groups").normal((cfg.num_groups, d)))
            for i in range(layers):
                head = GroupingClassifier(rng.spawn(f"head{i}"), d, c, groups, cfg.tau)
                self.heads.append(self.add_child(f"head{i}", head))

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def freeze_backbone(self) -> None:
        self.backbone.freeze()

    def __call__(self, images, rng: Rng | None = None, train: bool = False) -> ModelOutput:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        x = Tensor((images - 0.5) / 0.25)
        prompts = self.prompts.prompts if self.prompts is not None else None
        fmap = self.backbone(x, prompts)
        sides, sel = self.detector(fmap)
        scores = []
        for side in sides:
            head = self.heads[0 if len(self.heads) == 1 else side.layer]
            if self.cfg.head == "fc":
                scores.append(head(side.queries))
            else:
                layer_rng = rng.spawn(f"layer{side.layer}") if rng is not None else None
                scores.append(T.swapaxes(head(side.queries, layer_rng, train), -1, -2))
        return ModelOutput(sides, scores, sel)

    def predict(self, images) -> list[list[NucleusInstance]]:
        """Centroids of the last decoder layer whose best class is not empty."""
        with T.no_grad():
            out = self(images, train=False)
        return decode_predictions(out, self.cfg)


def decode_predictions(out: ModelOutput, cfg: ModelConfig) -> list[list[NucleusInstance]]:
    points = out.sides[-1].points.value
    probs = softmax_np(out.scores[-1].value)
    empty = cfg.num_classes
    results = []
    for pts, pr in zip(points, probs):
        best = pr.argmax(-1)
        keep = np.flatnonzero(best != empty)
        results.append([
            NucleusInstance(float(min(pts[q, 0] * cfg.width, np.nextafter(cfg.width, 0))),
                            float(min(pts[q, 1] * cfg.height, np.nextafter(cfg.height, 0))),
                            int(best[q]) + 1, float(pr[q, best[q]]))
            for q in keep
        ])
    return results
