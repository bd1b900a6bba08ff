"""Two-phase training: full pretune, then prompt tuning on a frozen backbone."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import NucleusInstance, Scene
from .errors import CheckpointError, DivergenceError
from .loss import Targets, pixel_loss, total_loss
from .model import ModelConfig, NucleusDetector
from .optim import clip_grad_norm, make_optimizer
from .rng import Rng


def dihedral(image: np.ndarray, nuclei: Sequence[NucleusInstance], code: int):
    """Apply one of the 8 flips/transposes of a square grid to a scene.

    Bit 0 flips x, bit 1 flips y, bit 2 transposes (after the flips).
    Centroids use continuous pixel coordinates, so a flip maps x to W - x.
    """
    h, w = image.shape[:2]
    img = image
    pts = np.array([[n.x, n.y] for n in nuclei], dtype=np.float64).reshape(-1, 2)
    if code & 1:
        img = img[:, ::-1]
        pts[:, 0] = w - pts[:, 0]
    if code & 2:
        img = img[::-1]
        pts[:, 1] = h - pts[:, 1]
    if code & 4:
        if h != w:
            raise ValueError("transpose augmentation needs a square image")
        img = img.transpose(1, 0, 2)
        pts = pts[:, ::-1]
    # a flipped coordinate can land exactly on the far border
    pts[:, 0] = np.minimum(pts[:, 0], np.nextafter(w, 0))
    pts[:, 1] = np.minimum(pts[:, 1], np.nextafter(h, 0))
    out = [NucleusInstance(float(x), float(y), n.class_id) for (x, y), n in zip(pts, nuclei)]
    return np.ascontiguousarray(img), out


@dataclass
class TrainResult:
    model: NucleusDetector
    log: list[dict] = field(default_factory=list)
    tuned_params: int = 0
    total_params: int = 0

    @property
    def ratio(self) -> float:
        return self.tuned_params / self.total_params if self.total_params else 0.0


def trainable(model: NucleusDetector):
    return [p for p in model.parameters() if p.trainable and not p.frozen]


def learning_rate(base: float, schedule: str, step: int, steps: int) -> float:
    if schedule == "cosine" and steps > 0:
        return base * 0.5 * (1.0 + math.cos(math.pi * step / steps))
    return base


def build_model(run: RunConfig, phase: str, init: ckpt_io.Checkpoint | None = None) -> NucleusDetector:
    """Construct the network of a phase; prompt tuning loads ``init`` and freezes the backbone."""
    cfg: ModelConfig = run.model_for(phase)
    model = NucleusDetector(cfg, seed=run.init_seed)
    if phase == "prompt-tune":
        if init is None:
            raise CheckpointError("prompt tuning needs a pretune checkpoint")
        ckpt_io.load_into(model, init, prefixes=("backbone.", "detector."), strict=True)
        if cfg.head == "fc":
            # the plain head carries over when shapes allow it
            ckpt_io.load_into(model, init, prefixes=("head",), strict=False)
        model.freeze_backbone()
    return model


def train(model: NucleusDetector, scenes: Sequence[Scene], run: RunConfig, phase: str,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train in place on ``scenes``; raises :class:`DivergenceError` on a non-finite loss."""
    opt_cfg = run.optim_for(phase)
    cfg = model.cfg
    params = trainable(model)
    for p in params:
        p.grad = np.zeros_like(p.value)
    optimizer = make_optimizer(opt_cfg.name, params, opt_cfg.lr, opt_cfg.momentum, opt_cfg.weight_decay)
    result = TrainResult(model, [], sum(p.value.size for p in params), model.num_parameters())
    if not scenes or opt_cfg.steps == 0:
        return result

    root = Rng(opt_cfg.seed, f"train-{phase}")
    n = len(scenes)
    bs = min(opt_cfg.batch_size, n)
    per_epoch = max(1, n // bs)
    order = np.zeros(0, dtype=np.intp)
    epoch_losses: list[float] = []
    started = time.perf_counter()
    for step in range(opt_cfg.steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = root.spawn(f"epoch-{epoch}").permutation(n)
        idx = order[pos * bs:(pos + 1) * bs]
        images, targets = [], []
        aug = root.spawn(f"aug-{step}")
        codes = aug.integers(0, 8, len(idx)) if opt_cfg.augment else np.zeros(len(idx), dtype=int)
        for i, code in zip(idx, codes):
            img, nuclei = dihedral(scenes[i].image, scenes[i].nuclei, int(code))
            images.append(img)
            targets.append(Targets.from_instances(nuclei, cfg.width, cfg.height))

        out = model(np.stack(images), rng=root.spawn(f"gumbel-{step}"), train=True)
        loss, _ = total_loss([s.points for s in out.sides], out.scores, targets, run.loss)
        if run.loss.pixel_supervision:
            fh, fw = cfg.feature_size()
            loss = loss + pixel_loss(out.selection.pixel_scores, targets, fh, fw, run.loss)
        value = float(loss.value)
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss {value} at step {step} ({phase})")
        for p in params:
            p.grad[...] = 0.0
        loss.backward()
        if opt_cfg.grad_clip:
            clip_grad_norm(params, opt_cfg.grad_clip)
        optimizer.lr = learning_rate(opt_cfg.lr, opt_cfg.schedule, step, opt_cfg.steps)
        optimizer.step()
        epoch_losses.append(value)

        if pos == per_epoch - 1 or step == opt_cfg.steps - 1:
            record = {"phase": phase, "epoch": epoch, "step": step + 1,
                      "loss": float(np.mean(epoch_losses)), "lr": optimizer.lr}
            result.log.append(record)
            if on_epoch is not None:
                on_epoch(dict(record, seconds=round(time.perf_counter() - started, 2)))
            epoch_losses = []
    return result


def checkpoint_meta(run: RunConfig, phase: str, result: TrainResult) -> dict:
    return {"phase": phase, "run": run.to_dict(), "model": result.model.cfg.to_dict(),
            "tuned_params": result.tuned_params, "total_params": result.total_params}


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> NucleusDetector:
    """Rebuild the network stored in a checkpoint (exact names and shapes required)."""
    try:
        cfg = ModelConfig.from_dict(ck.meta["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint lacks a usable model config ({exc})") from exc
    model = NucleusDetector(cfg, seed=0)
    ckpt_io.load_into(model, ck, strict=True)
    names = {n for n, _ in model.named_parameters()}
    extra = set(ck.values) - names
    if extra:
        raise CheckpointError(f"checkpoint has parameters the model lacks: {sorted(extra)[:3]}")
    frozen = {r.name for r in ck.records if r.frozen}
    for name, p in model.named_parameters():
        if name in frozen:
            p.frozen, p.trainable, p.requires_grad = True, False, False
    return model


def predict_scenes(model: NucleusDetector, scenes: Sequence[Scene], batch_size: int = 16):
    preds = []
    for start in range(0, len(scenes), batch_size):
        chunk = scenes[start:start + batch_size]
        preds.extend(model.predict(np.stack([s.image for s in chunk])))
    return preds


def write_log(path, records: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

