"""Evaluation metrics on hard label masks: Dice, IoU, NSD and instance F1."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


def _binary(mask, c):
    return np.asarray(mask) == c


def dice_score(pred, gt, c) -> float:
    p, g = _binary(pred, c), _binary(gt, c)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / total)


def iou_score(pred, gt, c) -> float:
    p, g = _binary(pred, c), _binary(gt, c)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def surface(mask) -> np.ndarray:
    """Foreground pixels touching background (4-neighbourhood) or the image border."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return m & ~interior


def nsd_score(pred, gt, c, tau=1.0) -> float:
    """Fraction of both surfaces lying within ``tau`` pixels of the other surface."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    sp, sg = surface(_binary(pred, c)), surface(_binary(gt, c))
    n_p, n_g = int(sp.sum()), int(sg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~sg)
    dist_to_pred = ndimage.distance_transform_edt(~sp)
    hits = (dist_to_gt[sp] <= tau).sum() + (dist_to_pred[sg] <= tau).sum()
    return float(hits / (n_p + n_g))


def instance_f1(pred_instances, gt_instances, threshold=0.5):
    """Detection F1 where a prediction matches a ground-truth instance at IoU > threshold.

    Returns ``(f1, precision, recall)``.  Label 0 is background.
    """
    pred = np.asarray(pred_instances)
    gt = np.asarray(gt_instances)
    if pred.shape != gt.shape:
        raise ValueError(f"instance maps differ in shape: {pred.shape} vs {gt.shape}")
    if (pred.size and pred.min() < 0) or (gt.size and gt.min() < 0):
        raise ValueError("instance labels must be non-negative")
    pred_ids = np.unique(pred[pred > 0])
    gt_ids = np.unique(gt[gt > 0])
    tp = 0
    if len(pred_ids) and len(gt_ids):
        p_idx = np.searchsorted(pred_ids, pred)
        g_idx = np.searchsorted(gt_ids, gt)
        both = (pred > 0) & (gt > 0)
        inter = np.zeros((len(pred_ids), len(gt_ids)), dtype=np.int64)
        np.add.at(inter, (p_idx[both], g_idx[both]), 1)
        area_p = np.array([(pred == i).sum() for i in pred_ids])
        area_g = np.array([(gt == j).sum() for j in gt_ids])
        iou = inter / (area_p[:, None] + area_g[None, :] - inter)
        cand = np.argwhere(iou > threshold)
        order = sorted(cand.tolist(), key=lambda ij: (-iou[ij[0], ij[1]], ij[0], ij[1]))
        used_p, used_g = set(), set()
        for i, j in order:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            tp += 1
    fp = len(pred_ids) - tp
    fn = len(gt_ids) - tp
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(f1), float(precision), float(recall)


def label_instances(mask) -> np.ndarray:
    """Connected components (4-connectivity) of the foreground of a label mask."""
    labeled, _ = ndimage.label(np.asarray(mask) > 0)
    return labeled


@dataclass
class MetricsReport:
    num_classes: int
    tau: float
    n_samples: int
    dice: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    nsd: list = field(default_factory=list)
    mean_foreground_dice: float = 0.0
    mean_foreground_iou: float = 0.0
    mean_foreground_nsd: float = 0.0
    f1: float = 0.0
    precision: float = 0.0
    recall: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def sample_metrics(pred, gt, num_classes, tau=1.0) -> dict:
    """All per-sample scores for one H×W prediction / ground-truth pair."""
    f1, precision, recall = instance_f1(label_instances(pred), label_instances(gt))
    return {
        "dice": [dice_score(pred, gt, c) for c in range(num_classes)],
        "iou": [iou_score(pred, gt, c) for c in range(num_classes)],
        "nsd": [nsd_score(pred, gt, c, tau) for c in range(num_classes)],
        "f1": f1,
        "precision": precision,
        "recall": recall,
    }


def aggregate(per_sample, num_classes, tau) -> MetricsReport:
    """Mean over samples, in sample order."""
    n = len(per_sample)
    if n == 0:
        raise ValueError("cannot aggregate metrics over zero samples")

    def avg(key):
        return np.mean([s[key] for s in per_sample], axis=0)

    dice, iou, nsd = avg("dice"), avg("iou"), avg("nsd")
    fg = slice(1, None) if num_classes > 1 else slice(None)
    return MetricsReport(
        num_classes=num_classes,
        tau=float(tau),
        n_samples=n,
        dice=[float(v) for v in dice],
        iou=[float(v) for v in iou],
        nsd=[float(v) for v in nsd],
        mean_foreground_dice=float(dice[fg].mean()),
        mean_foreground_iou=float(iou[fg].mean()),
        mean_foreground_nsd=float(nsd[fg].mean()),
        f1=float(avg("f1")),
        precision=float(avg("precision")),
        recall=float(avg("recall")),
    )
