"""Detection and classification F-scores and Welch's t-test."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .data import NucleusInstance
from .errors import ParameterError, StatisticsError
from .matching import hungarian


def f_score(tp: int, fp: int, fn: int) -> float:
    """``2PR / (P + R)``, i.e. ``2TP / (2TP + FP + FN)``, with 0/0 taken as 0."""
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class ImageMatch:
    pairs: list[tuple[int, int]]        # (pred index, gt index), distance <= radius
    false_positives: list[int]
    false_negatives: list[int]
    pred_classes: list[int]
    gt_classes: list[int]


def match_detections(preds: Sequence[NucleusInstance], gts: Sequence[NucleusInstance],
                     radius: float) -> ImageMatch:
    """One-to-one matching of predictions to ground truth within ``radius`` pixels.

    Pairs further apart than the radius are barred; among the remaining
    pairs the assignment maximises the number of matches, then minimises the
    total distance.
    """
    if not radius > 0:
        raise ParameterError(f"matching radius must be positive, got {radius}")
    pc = [p.class_id for p in preds]
    gc = [g.class_id for g in gts]
    if not preds or not gts:
        return ImageMatch([], list(range(len(preds))), list(range(len(gts))), pc, gc)
    p = np.array([[n.x, n.y] for n in preds])
    g = np.array([[n.x, n.y] for n in gts])
    dist = np.sqrt(((p[:, None, :] - g[None, :, :]) ** 2).sum(-1))
    feasible = dist <= radius
    barrier = radius * (min(len(preds), len(gts)) + 1) + 1.0
    res = hungarian(np.where(feasible, dist, barrier))
    pairs = [(i, j) for i, j in res.pairs if feasible[i, j]]
    hit_p = {i for i, _ in pairs}
    hit_g = {j for _, j in pairs}
    return ImageMatch(pairs,
                      [i for i in range(len(preds)) if i not in hit_p],
                      [j for j in range(len(gts)) if j not in hit_g],
                      pc, gc)


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f(self) -> float:
        return f_score(self.tp, self.fp, self.fn)


@dataclass
class EvalReport:
    num_classes: int
    detection: Counts
    per_class: list[Counts]
    f_d: float
    f_c: list[float]
    mean_f_c: float
    per_image_f_d: list[float] = field(default_factory=list)
    radius: float | None = None

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "detection": asdict(self.detection),
            "per_class": [asdict(c) for c in self.per_class],
            "f_d": self.f_d,
            "f_c": self.f_c,
            "mean_f_c": self.mean_f_c,
            "per_image_f_d": self.per_image_f_d,
            "radius": self.radius,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(int(d["num_classes"]), Counts(**d["detection"]),
                   [Counts(**c) for c in d["per_class"]], float(d["f_d"]),
                   [float(v) for v in d["f_c"]], float(d["mean_f_c"]),
                   [float(v) for v in d.get("per_image_f_d", [])],
                   None if d.get("radius") is None else float(d["radius"]))

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def f_scores(matches: Sequence[ImageMatch], num_classes: int) -> EvalReport:
    """Aggregate counts over all images, then compute F-scores.

    A classification true positive for class ``k`` is a matched pair where
    both sides are class ``k``; any other prediction of class ``k`` is a false
    positive and any other ground truth of class ``k`` a false negative.
    """
    if not matches:
        raise ParameterError("f_scores needs at least one image")
    det = Counts()
    per_class = [Counts() for _ in range(num_classes)]
    per_image = []
    for m in matches:
        tp = len(m.pairs)
        fp, fn = len(m.false_positives), len(m.false_negatives)
        det.tp += tp
        det.fp += fp
        det.fn += fn
        per_image.append(f_score(tp, fp, fn))
        hits = np.zeros(num_classes, dtype=int)
        for i, j in m.pairs:
            if m.pred_classes[i] == m.gt_classes[j]:
                hits[m.pred_classes[i] - 1] += 1
        pred_n = np.bincount(np.asarray(m.pred_classes, dtype=int) - 1, minlength=num_classes)[:num_classes] \
            if m.pred_classes else np.zeros(num_classes, dtype=int)
        gt_n = np.bincount(np.asarray(m.gt_classes, dtype=int) - 1, minlength=num_classes)[:num_classes] \
            if m.gt_classes else np.zeros(num_classes, dtype=int)
        for k in range(num_classes):
            per_class[k].tp += int(hits[k])
            per_class[k].fp += int(pred_n[k] - hits[k])
            per_class[k].fn += int(gt_n[k] - hits[k])
    f_c = [c.f for c in per_class]
    return EvalReport(num_classes, det, per_class, det.f, f_c,
                      float(np.mean(f_c)) if f_c else 0.0, per_image)


def evaluate(preds: Sequence[Sequence[NucleusInstance]], gts: Sequence[Sequence[NucleusInstance]],
             radius: float, num_classes: int) -> EvalReport:
    if len(preds) != len(gts):
        raise ParameterError(f"{len(preds)} prediction sets for {len(gts)} images")
    report = f_scores([match_detections(p, g, radius) for p, g in zip(preds, gts)], num_classes)
    report.radius = float(radius)
    return report


@dataclass
class TTest:
    t: float
    p: float
    df: float


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> TTest:
    """Two-sided Welch t-test for samples with unequal variances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise StatisticsError("each sample needs at least two values")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 <= 0:
        raise StatisticsError("both samples have zero variance")
    t = float((a.mean() - b.mean()) / np.sqrt(se2))
    df = float(se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1)))
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return TTest(t, min(max(p, 0.0), 1.0), df)
