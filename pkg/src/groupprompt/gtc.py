"""Grouping transformer classifier.

Two hard-grouping stages share one mechanism.  Stage one assigns each query
embedding to a grouping prompt and merges the members into primary groups;
stage two assigns the primary groups to class embeddings the same way.  A
query's class scores are its inner products with the updated class
embeddings.

Assignment uses Gumbel-softmax over the slot axis with a straight-through
one-hot in the forward pass::

    S    = softmax(((Wq·slots)(Wk·members)^T + gumbel) / tau)   (over slots)
    Ŝ    = one_hot(argmax S) + (S - stop_gradient(S))
    new  = slots + Wo · (Ŝ · Wv·members) / max(rowsum(Ŝ), 1)
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ParameterError
from .nn import Linear, Module
from .rng import Rng
from .tensor import Tensor


class GroupingStage(Module):
    def __init__(self, rng: Rng, dim: int):
        super().__init__()
        self.wq = self.add_child("wq", Linear(rng.spawn("wq"), dim, dim, bias=False))
        self.wk = self.add_child("wk", Linear(rng.spawn("wk"), dim, dim, bias=False))
        self.wv = self.add_child("wv", Linear(rng.spawn("wv"), dim, dim, bias=False))
        self.wo = self.add_child("wo", Linear(rng.spawn("wo"), dim, dim, bias=False))


def group_similarity(slots: Tensor, members: Tensor, stage: GroupingStage, rng: Rng | None,
                     tau: float, train: bool) -> Tensor:
    """Soft assignment ``[..., slots, members]``; columns sum to one.

    Gumbel noise is added only when ``train`` (and an ``rng`` is given).
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    logits = T.matmul(stage.wq(slots), T.swapaxes(stage.wk(members), -1, -2))
    if train and rng is not None:
        logits = logits + T.gumbel_sample(logits.shape, rng)
    return T.softmax(logits, axis=-2, temperature=tau)


def hard_assign(soft: Tensor) -> Tensor:
    """Straight-through one-hot over the slot axis (ties go to the lowest slot).

    ``soft - stop_gradient(soft)`` is exactly zero in the forward pass, so the
    value is an exact one-hot while the backward pass equals that of ``soft``.
    """
    return T.one_hot_argmax(soft, axis=-2) + (soft - T.stop_gradient(soft))


def merge_groups(slots: Tensor, members: Tensor, assign: Tensor, stage: GroupingStage) -> Tensor:
    """Residual update of every slot with the mean of its assigned members.

    Slots with no members keep their value (the count is floored at one).
    """
    pooled = T.matmul(assign, stage.wv(members))
    count = T.clamp(T.sum_(assign, axis=-1, keepdims=True), low=1.0)
    return slots + stage.wo(pooled / count)


class GroupingClassifier(Module):
    """Scores ``[B, C+1, Q]`` for queries ``[B, Q, D]``; the last row is the empty class."""

    def __init__(self, rng: Rng, dim: int, num_classes: int, groups: Tensor, tau: float = 1.0):
        super().__init__()
        if not tau > 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        self.tau = tau
        self.num_classes = num_classes
        # shared by identity with the prompt bank when prompts are tied to groups
        self.groups = self.share_param("groups", groups)
        self.class_embed = self.add_param("class_embed", rng.spawn("class").normal((num_classes + 1, dim)))
        self.stage1 = self.add_child("stage1", GroupingStage(rng.spawn("stage1"), dim))
        self.stage2 = self.add_child("stage2", GroupingStage(rng.spawn("stage2"), dim))
        self.straight_through = True
        self.last_soft: list[Tensor] = []
        self.last_hard: list[Tensor] = []

    def __call__(self, queries: Tensor, rng: Rng | None = None, train: bool = False) -> Tensor:
        scores, self.last_soft, self.last_hard = _two_stage(
            queries, self.groups, self.class_embed, self.stage1, self.stage2,
            rng, self.tau, train, self.straight_through)
        return scores

    def assignments(self) -> tuple[np.ndarray, np.ndarray]:
        """Cached ``(query -> group [B, Q], group -> class [B, G])`` from the last call."""
        if not self.last_hard:
            raise ParameterError("no forward pass cached yet")
        a1, a2 = self.last_hard
        return np.argmax(a1.value, axis=-2), np.argmax(a2.value, axis=-2)


def _two_stage(queries, groups, class_embed, stage1, stage2, rng, tau, train, straight_through):
    r1 = rng.spawn("stage1") if rng is not None else None
    r2 = rng.spawn("stage2") if rng is not None else None
    s1 = group_similarity(groups, queries, stage1, r1, tau, train)
    a1 = hard_assign(s1) if straight_through else s1
    primary = merge_groups(groups, queries, a1, stage1)
    s2 = group_similarity(class_embed, primary, stage2, r2, tau, train)
    a2 = hard_assign(s2) if straight_through else s2
    advanced = merge_groups(class_embed, primary, a2, stage2)
    return T.matmul(advanced, T.swapaxes(queries, -1, -2)), [s1, s2], [a1, a2]


def classify(queries: Tensor, groups: Tensor, class_embed: Tensor, stage1: GroupingStage,
             stage2: GroupingStage, rng: Rng | None, tau: float, train: bool) -> Tensor:
    """Functional form of :class:`GroupingClassifier`: ``c = c_a · q^T``."""
    return _two_stage(queries, groups, class_embed, stage1, stage2, rng, tau, train, True)[0]
