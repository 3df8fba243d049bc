"""Independent reference computations used as test oracles.

Written for clarity over speed and deliberately sharing no code with
``modtr.metrics``.
"""

from fractions import Fraction

import numpy as np


def grid_iou(a, b):
    """IoU of integer xywh boxes by counting unit cells."""
    cells_a = {(i, j) for i in range(a[0], a[0] + a[2]) for j in range(a[1], a[1] + a[3])}
    cells_b = {(i, j) for i in range(b[0], b[0] + b[2]) for j in range(b[1], b[1] + b[3])}
    union = cells_a | cells_b
    return Fraction(len(cells_a & cells_b), len(union)) if union else Fraction(0)


def _iou(a, b):
    ax2, ay2 = a[0] + a[2], a[1] + a[3]
    bx2, by2 = b[0] + b[2], b[1] + b[3]
    iw = max(0.0, min(ax2, bx2) - max(a[0], b[0]))
    ih = max(0.0, min(ay2, by2) - max(a[1], b[1]))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(images, iou_thresholds=None):
    """COCO-style AP by exhaustive precision/recall enumeration.

    ``images`` is a list of ``(dets, gts)``; ``dets`` holds ``(xywh, class, score)``
    already in descending-score order per image, ``gts`` holds ``(xywh, class)``.
    Interpolated precision at recall ``r`` is the maximum precision over all
    ranks whose recall reaches ``r``.
    Returns ``(ap, ap50, ap75)`` or ``None`` when there is no ground truth.
    """
    if iou_thresholds is None:
        iou_thresholds = [round(0.5 + 0.05 * i, 2) for i in range(10)]
    classes = sorted({c for _, gts in images for _, c in gts})
    if not classes:
        return None
    recall_points = np.linspace(0.0, 1.0, 101)
    per_class = []
    for cls in classes:
        n_gt = sum(1 for _, gts in images for _, c in gts if c == cls)
        curve = []
        for thr in iou_thresholds:
            ranked = []  # (score, image index, det index, is_tp)
            for img_idx, (dets, gts) in enumerate(images):
                g = [box for box, c in gts if c == cls]
                used = [False] * len(g)
                for det_idx, (box, c, score) in enumerate([d for d in dets if d[1] == cls]):
                    options = [(_iou(box, gb), -k) for k, gb in enumerate(g) if not used[k]]
                    options = [o for o in options if o[0] >= thr]
                    hit = False
                    if options:
                        _, neg_k = max(options)
                        used[-neg_k] = True
                        hit = True
                    ranked.append((score, img_idx, det_idx, hit))
            ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
            precisions, recalls = [], []
            tp = 0
            for k, r in enumerate(ranked, start=1):
                tp += r[3]
                precisions.append(tp / k)
                recalls.append(tp / n_gt)
            interp = []
            for rp in recall_points:
                reachable = [p for p, rc in zip(precisions, recalls) if rc >= rp]
                interp.append(max(reachable) if reachable else 0.0)
            curve.append(float(np.mean(interp)))
        per_class.append(curve)
    per_class = np.array(per_class)
    return float(per_class.mean()), float(per_class[:, 0].mean()), float(per_class[:, 5].mean())
