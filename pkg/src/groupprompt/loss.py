"""Matching cost, focal loss and the deep-supervised detection loss."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .matching import MatchResult, hungarian
from .tensor import Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    coord: float = 5.0          # weight of squared centroid error on matched queries
    matched_cls: float = 2.0    # focal term on matched queries
    unmatched_cls: float = 2.0  # focal term on unmatched queries (empty target)
    alpha: float = 0.25
    gamma: float = 2.0
    cost_loc: float = 5.0       # matching cost: distance weight
    cost_cls: float = 2.0       # matching cost: class-probability weight
    pixel_supervision: bool = False

    def __post_init__(self):
        for name in ("coord", "matched_cls", "unmatched_cls", "alpha", "gamma", "cost_loc", "cost_cls"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise ParameterError(f"loss weight {name} must be finite and non-negative, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Targets:
    """Ground truth of one image: normalised (x, y) and 0-based class rows."""
    points: np.ndarray   # [K, 2]
    classes: np.ndarray  # [K] int

    @classmethod
    def from_instances(cls, instances, width: int, height: int) -> "Targets":
        if not instances:
            return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.intp))
        pts = np.array([[n.x / width, n.y / height] for n in instances])
        classes = np.array([n.class_id - 1 for n in instances], dtype=np.intp)
        return cls(pts, classes)


def softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def match_cost(points: np.ndarray, probs: np.ndarray, target_points: np.ndarray,
               target_classes: np.ndarray, loc_weight: float = 5.0,
               cls_weight: float = 2.0) -> np.ndarray:
    """``[Q, K]`` cost: weighted L2 distance plus one minus the target-class probability."""
    dist = np.sqrt(((points[:, None, :] - target_points[None, :, :]) ** 2).sum(-1))
    return loc_weight * dist + cls_weight * (1.0 - probs[:, target_classes])


def focal_loss(scores: Tensor, target, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """``-alpha (1 - p_t)^gamma log p_t`` with ``p_t`` the softmax probability of the target.

    ``scores`` is ``[..., K]`` and ``target`` an integer (array) of matching
    leading shape; the result has the leading shape.
    """
    target = np.asarray(target, dtype=np.intp)
    lead = scores.shape[:-1]
    k = scores.shape[-1]
    if target.shape != lead:
        raise ParameterError(f"target shape {target.shape} does not match scores {scores.shape}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ParameterError(f"target class outside 0..{k - 1}")
    prob = T.softmax(T.reshape(scores, (-1, k)), axis=-1)
    flat_t = target.reshape(-1)
    p_t = T.index_select(prob, (np.arange(flat_t.size), flat_t))
    loss = T.log(T.clamp(p_t, low=LOG_FLOOR)) * (-alpha)
    if gamma:
        loss = loss * T.power(1.0 - p_t, gamma)
    return T.reshape(loss, lead)


@dataclass
class LayerMatch:
    layer: int
    matches: list[MatchResult]


def total_loss(side_points: Sequence[Tensor], side_scores: Sequence[Tensor],
               targets: Sequence[Targets], weights: LossWeights,
               matches: Sequence[Sequence[MatchResult]] | None = None):
    """Deep-supervised detection loss averaged over the images of a batch.

    ``side_points[l]`` is ``[B, Q, 2]`` and ``side_scores[l]`` ``[B, Q, C+1]``
    for decoder layer ``l``.  Matching is redone per layer unless ``matches``
    supplies it.  Returns ``(loss, per-layer matches)``.
    """
    if not side_points:
        raise ParameterError("need at least one side output")
    total = None
    used: list[LayerMatch] = []
    for layer, (points, scores) in enumerate(zip(side_points, side_scores)):
        b, q, k = scores.shape
        empty = k - 1
        if matches is None:
            probs = softmax_np(scores.value)
            layer_matches = []
            for i, tgt in enumerate(targets):
                if len(tgt.classes) > q:
                    warnings.warn(f"{len(tgt.classes)} targets exceed {q} queries; extra targets ignored")
                if len(tgt.classes) == 0:
                    layer_matches.append(MatchResult([], list(range(q)), [], 0.0))
                    continue
                cost = match_cost(points.value[i], probs[i], tgt.points, tgt.classes,
                                  weights.cost_loc, weights.cost_cls)
                layer_matches.append(hungarian(cost))
        else:
            layer_matches = list(matches[layer])
        used.append(LayerMatch(layer, layer_matches))

        pos_idx, pos_xy, pos_cls, pos_w, neg_idx = [], [], [], [], []
        for i, (tgt, res) in enumerate(zip(targets, layer_matches)):
            if res.pairs:
                rows, cols = res.rows, res.cols
                pos_idx.append(i * q + rows)
                pos_xy.append(tgt.points[cols])
                pos_cls.append(tgt.classes[cols])
                pos_w.append(np.full(len(rows), 1.0 / len(rows)))
            neg_idx.append(i * q + np.asarray(res.unmatched_proposals, dtype=np.intp))
        flat_scores = T.reshape(scores, (b * q, k))
        parts = []
        if pos_idx:
            pos_idx = np.concatenate(pos_idx)
            pos_w = np.concatenate(pos_w)
            diff = T.take_rows(T.reshape(points, (b * q, 2)), pos_idx) - np.concatenate(pos_xy)
            sq = T.sum_(diff * diff, axis=-1)
            fl = focal_loss(T.take_rows(flat_scores, pos_idx), np.concatenate(pos_cls),
                            weights.alpha, weights.gamma)
            parts.append(T.sum_((sq * weights.coord + fl * weights.matched_cls) * pos_w))
        neg_idx = np.concatenate(neg_idx) if neg_idx else np.zeros(0, dtype=np.intp)
        if neg_idx.size:
            fl = focal_loss(T.take_rows(flat_scores, neg_idx), np.full(neg_idx.size, empty),
                            weights.alpha, weights.gamma)
            parts.append(T.sum_(fl) * weights.unmatched_cls)
        layer_loss = parts[0] if len(parts) == 1 else parts[0] + parts[1]
        layer_loss = layer_loss * (1.0 / b)
        total = layer_loss if total is None else total + layer_loss
    return total, used


def pixel_loss(pixel_scores: Tensor, targets: Sequence[Targets], h: int, w: int,
               weights: LossWeights) -> Tensor:
    """Focal loss on the per-pixel scores: a pixel's target is the class of a
    nucleus whose centroid falls inside it, otherwise the empty class."""
    b, n, k = pixel_scores.shape
    labels = np.full((b, n), k - 1, dtype=np.intp)
    for i, tgt in enumerate(targets):
        if len(tgt.classes):
            cols = np.clip((tgt.points[:, 0] * w).astype(int), 0, w - 1)
            rows = np.clip((tgt.points[:, 1] * h).astype(int), 0, h - 1)
            labels[i, rows * w + cols] = tgt.classes
    fl = focal_loss(pixel_scores, labels, weights.alpha, weights.gamma)
    return T.mean(fl) * float(k)
