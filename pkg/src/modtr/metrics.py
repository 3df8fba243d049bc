"""COCO-style AP / AP50 / AP75 and the knowledge-preservation comparison.

Conventions follow ``pycocotools`` COCOeval with ``iscrowd=0`` everywhere:
IoU grid 0.50:0.05:0.95, 101-point interpolated precision, at most 100
detections per image and class, classes without ground truth excluded from
the mean.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .boxes import AnnotationSet, BoxAnnotation, DetectionSet, iou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass
class APReport:
    ap: float
    ap50: float
    ap75: float
    per_class: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    n_images: int = 0
    n_gt: int = 0
    undefined: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {k: list(v) for k, v in self.per_class.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "APReport":
        d = dict(d)
        d["per_class"] = {k: tuple(v) for k, v in d.get("per_class", {}).items()}
        return cls(**d)


def match_detections(dets: DetectionSet, gts: AnnotationSet, iou_threshold: float,
                     ignore: Sequence[bool] | None = None) -> list[bool]:
    """Greedy COCO matching for one image; returns a TP flag per detection.

    Detections are visited in score order. Each takes the still-unmatched
    same-class ground truth with the highest IoU >= ``iou_threshold`` (ties go
    to the lower ground-truth index). Ground truth flagged in ``ignore`` is
    only used when no regular box qualifies; detections matched to it are
    reported as TP here and filtered by the caller.
    """
    flags, _ = _match(list(dets), list(gts), iou_threshold, ignore)
    return flags


def _match(dets, gts, thr, ignore=None):
    ignore = list(ignore) if ignore is not None else [False] * len(gts)
    taken = [False] * len(gts)
    tp = []
    matched_ignored = []
    for d in dets:
        best, best_iou, best_ign = -1, -1.0, True
        for g, gt in enumerate(gts):
            if taken[g] or gt.class_id != d.class_id:
                continue
            v = iou(d.box, gt)
            if v < thr:
                continue
            # a regular box always beats an ignored one
            if best >= 0 and not best_ign and ignore[g]:
                continue
            if best < 0 or (best_ign and not ignore[g]) or v > best_iou:
                best, best_iou, best_ign = g, v, ignore[g]
        if best >= 0:
            taken[best] = True
        tp.append(best >= 0)
        matched_ignored.append(best >= 0 and ignore[best])
    return tp, matched_ignored


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP for a score-sorted TP flag array."""
    if n_gt == 0:
        return float("nan")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # make precision monotonically non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    q = np.where(idx < precision.size, precision[np.minimum(idx, precision.size - 1)], 0.0)
    return float(q.mean())


def average_precision(all_dets: Sequence[DetectionSet], all_gts: Sequence[AnnotationSet],
                      class_map: dict[int, str] | None = None,
                      iou_thresholds: Sequence[float] = IOU_THRESHOLDS,
                      max_dets: int = 100,
                      area_range: tuple[float, float] = (0.0, math.inf)) -> APReport:
    """Evaluate detections against ground truth over a list of images.

    ``all_dets[i]`` and ``all_gts[i]`` belong to image ``i``. Ground truth
    outside ``area_range`` is ignored, as are unmatched detections outside it.
    """
    if len(all_dets) != len(all_gts):
        raise ValueError(f"{len(all_dets)} detection sets for {len(all_gts)} images")
    iou_thresholds = [float(t) for t in iou_thresholds]
    class_ids = set(class_map) if class_map is not None else set()
    for g in all_gts:
        class_ids |= g.class_ids()
    n_gt_total = sum(len(g) for g in all_gts)

    per_class_curves: dict[int, list[float]] = {}
    lo, hi = area_range
    for cid in sorted(class_ids):
        n_valid = 0
        scores: list[float] = []
        flags: list[list[bool]] = [[] for _ in iou_thresholds]
        keep: list[list[bool]] = [[] for _ in iou_thresholds]
        for dets, gts in zip(all_dets, all_gts):
            g = [b for b in gts if b.class_id == cid]
            ign = [not (lo <= b.area <= hi) for b in g]
            # regular boxes first, as COCOeval does
            order = sorted(range(len(g)), key=lambda i: ign[i])
            g = [g[i] for i in order]
            ign = [ign[i] for i in order]
            n_valid += sum(not x for x in ign)
            d = [x for x in dets if x.class_id == cid][:max_dets]
            scores.extend(x.score for x in d)
            for t, thr in enumerate(iou_thresholds):
                tp, on_ignored = _match(d, g, thr, ign)
                for det, is_tp, is_ign in zip(d, tp, on_ignored):
                    dropped = is_ign or (not is_tp and not (lo <= det.box.area <= hi))
                    flags[t].append(is_tp)
                    keep[t].append(not dropped)
        if n_valid == 0:
            continue
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        curve = []
        for t in range(len(iou_thresholds)):
            f = np.asarray(flags[t], dtype=bool)[order]
            k = np.asarray(keep[t], dtype=bool)[order]
            curve.append(_interpolated_ap(f[k], n_valid))
        per_class_curves[cid] = curve

    if not per_class_curves:
        return APReport(0.0, 0.0, 0.0, {}, len(all_gts), n_gt_total, undefined=True)

    def at(thr: float, curve: list[float]) -> float:
        for t, v in zip(iou_thresholds, curve):
            if abs(t - thr) < 1e-9:
                return v
        return float("nan")

    per_class = {}
    for cid, curve in per_class_curves.items():
        name = class_map.get(cid, str(cid)) if class_map else str(cid)
        per_class[name] = (float(np.mean(curve)), at(0.5, curve), at(0.75, curve))
    ap = float(np.mean([v[0] for v in per_class.values()]))
    ap50 = float(np.mean([v[1] for v in per_class.values()]))
    ap75 = float(np.mean([v[2] for v in per_class.values()]))
    return APReport(ap, ap50, ap75, per_class, len(all_gts), n_gt_total)


def format_table(rows: Sequence[tuple[str, APReport]], title: str = "") -> str:
    """Plain-text table, one method per row, AP/AP50/AP75 in percent."""
    width = max([len("Method")] + [len(name) for name, _ in rows])
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'Method':<{width}}  {'AP':>6}  {'AP50':>6}  {'AP75':>6}")
    lines.append("-" * (width + 26))
    for name, r in rows:
        lines.append(f"{name:<{width}}  {100 * r.ap:6.2f}  {100 * r.ap50:6.2f}  {100 * r.ap75:6.2f}")
    return "\n".join(lines) + "\n"


def format_mean_std_table(rows: Sequence[tuple[str, Sequence[APReport]]], title: str = "") -> str:
    """Like :func:`format_table` but aggregates several runs (seeds) as ``mean ± std``."""
    def cell(vals):
        vals = 100 * np.asarray(vals, dtype=np.float64)
        return f"{vals.mean():.2f} ± {vals.std():.2f}"

    body = [(name, [cell([getattr(r, k) for r in reps]) for k in ("ap", "ap50", "ap75")]) for name, reps in rows]
    width = max([len("Method")] + [len(n) for n, _ in body])
    cw = max([6] + [len(c) for _, cells in body for c in cells])
    lines = [title] if title else []
    lines.append(f"{'Method':<{width}}  " + "  ".join(f"{h:>{cw}}" for h in ("AP", "AP50", "AP75")))
    lines.append("-" * (width + 3 * (cw + 2)))
    for name, cells in body:
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>{cw}}" for c in cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# knowledge preservation


class Strategy(str, enum.Enum):
    N_DETECTORS = "N-Detectors"
    ONE_DETECTOR = "One-Detector"
    N_MODTR_1_DETECTOR = "N-ModTr-1-Detector"


@dataclass
class PreservationRow:
    detector: str
    dataset: str
    strategy: Strategy
    ap: float
    ap50: float = float("nan")
    ap75: float = float("nan")


@dataclass
class PreservationRoute:
    """One evaluation route: a dataset seen through an optional translator or detector override.

    ``translator`` is anything with ``forward(batch) -> list[DetectionSet]``
    (a ``ModTrModel``). ``detector`` replaces the shared detector for this
    route, which is how the fine-tuning baselines are expressed.
    """

    dataset: str
    data: object
    modality: str = "rgb"
    translator: object | None = None
    detector: object | None = None


def predict_dataset(predict: Callable, data, batch_size: int = 16) -> list[DetectionSet]:
    out: list[DetectionSet] = []
    samples = list(data)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        batch = torch.stack([s.load_image() for s in chunk])
        out.extend(predict(batch))
    return out


def evaluate_dataset(predict: Callable, data, class_map=None, batch_size: int = 16) -> APReport:
    dets = predict_dataset(predict, data, batch_size)
    return average_precision(dets, [s.annotations for s in data], class_map or getattr(data, "class_map", None))


def evaluate_preservation(detector, routes: Sequence[PreservationRoute],
                          strategy: "Strategy | str" = Strategy.N_MODTR_1_DETECTOR,
                          detector_name: str | None = None) -> list[PreservationRow]:
    """AP of each route under one deployment strategy.

    For ``N-ModTr-1-Detector`` the shared detector must be frozen; routes
    without a translator feed it raw source-modality images, which is what
    keeps its zero-shot AP intact.
    """
    strategy = Strategy(strategy)
    name = detector_name or getattr(getattr(detector, "architecture", None), "value", "detector")
    if strategy is Strategy.N_MODTR_1_DETECTOR and not getattr(detector, "frozen", False):
        raise ValueError("N-ModTr-1-Detector evaluation needs a frozen detector")
    rows = []
    for route in routes:
        if strategy is Strategy.N_MODTR_1_DETECTOR:
            if route.translator is None:
                channels = route.data[0].channels if len(route.data) else 3
                if channels != 3:
                    raise ValueError(
                        f"route {route.dataset!r} ({route.modality}) references no translator "
                        f"but its images have {channels} channel(s)"
                    )
                predict = detector.predict
            else:
                if route.translator.detector.fingerprint() != detector.fingerprint():
                    raise ValueError(f"route {route.dataset!r} uses a different detector than the shared one")
                predict = route.translator.forward
        else:
            det = route.detector or detector
            if route.translator is not None:
                predict = route.translator.forward
            else:
                predict = det.predict
        report = evaluate_dataset(predict, route.data, getattr(route.data, "class_map", None))
        rows.append(PreservationRow(name, route.dataset, strategy, report.ap, report.ap50, report.ap75))
    return rows


def format_preservation(rows: Sequence[PreservationRow]) -> str:
    strategies = [s for s in Strategy if any(r.strategy is s for r in rows)]
    keys = []
    for r in rows:
        if (r.detector, r.dataset) not in keys:
            keys.append((r.detector, r.dataset))
    table = {(r.detector, r.dataset, r.strategy): r.ap for r in rows}
    header = f"{'Detector':<16}{'Dataset':<18}" + "".join(f"{s.value:>22}" for s in strategies)
    lines = [header, "-" * len(header)]
    for det, ds in keys:
        cells = []
        for s in strategies:
            v = table.get((det, ds, s))
            cells.append(f"{'-' if v is None else f'{100 * v:.2f}':>22}")
        lines.append(f"{det:<16}{ds:<18}" + "".join(cells))
    return "\n".join(lines) + "\n"
