"""Box, annotation and detection records shared by the detector, data and metrics code.

Boxes are ``(x, y, w, h)`` in pixels with ``(x, y)`` the top-left corner,
matching COCO's ``bbox`` field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import torch
from torch import Tensor


@dataclass(frozen=True)
class BoxAnnotation:
    x: float
    y: float
    w: float
    h: float
    class_id: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box must have positive width and height, got w={self.w}, h={self.h}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"box corner must be non-negative, got x={self.x}, y={self.y}")

    @property
    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class AnnotationSet:
    """Ground truth for one image. May be empty (negative image)."""

    boxes: tuple[BoxAnnotation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def __iter__(self) -> Iterator[BoxAnnotation]:
        return iter(self.boxes)

    def __getitem__(self, i):
        return self.boxes[i]

    def xyxy_tensor(self, dtype=torch.float32) -> Tensor:
        if not self.boxes:
            return torch.zeros((0, 4), dtype=dtype)
        return torch.tensor([b.xyxy for b in self.boxes], dtype=dtype)

    def labels_tensor(self) -> Tensor:
        return torch.tensor([b.class_id for b in self.boxes], dtype=torch.int64)

    def class_ids(self) -> set[int]:
        return {b.class_id for b in self.boxes}


@dataclass(frozen=True)
class Detection:
    box: BoxAnnotation
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass(frozen=True)
class DetectionSet:
    """Scored predictions for one image, kept in descending score order.

    The sort is stable, so equal scores keep their construction order.
    """

    detections: tuple[Detection, ...] = field(default=())

    def __post_init__(self):
        dets = sorted(self.detections, key=lambda d: -d.score)
        object.__setattr__(self, "detections", tuple(dets))

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.detections)

    def __getitem__(self, i):
        return self.detections[i]

    def to_json(self, class_map: dict[int, str] | None = None) -> list[dict]:
        out = []
        for d in self.detections:
            rec = {"bbox": d.box.to_list(), "category_id": d.class_id, "score": d.score}
            if class_map is not None:
                rec["category_name"] = class_map.get(d.class_id, str(d.class_id))
            out.append(rec)
        return out

    @classmethod
    def from_json(cls, records: Iterable[dict]) -> "DetectionSet":
        return cls(tuple(
            Detection(BoxAnnotation(*r["bbox"], class_id=int(r["category_id"])), float(r["score"]))
            for r in records
        ))


def iou(a: BoxAnnotation, b: BoxAnnotation) -> float:
    ax1, ay1, ax2, ay2 = a.xyxy
    bx1, by1, bx2, by2 = b.xyxy
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_iou_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def nms(boxes: Tensor, scores: Tensor, iou_threshold: float) -> Tensor:
    """Greedy NMS returning kept indices in descending score order.

    Ties in score are broken by lower index, which makes the result
    independent of the sorting backend.
    """
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.int64)
    order = torch.sort(scores, descending=True, stable=True).indices
    ious = box_iou_matrix(boxes[order], boxes[order])
    n = order.numel()
    suppressed = torch.zeros(n, dtype=torch.bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return order[torch.tensor(keep, dtype=torch.int64)]


def batched_nms(boxes: Tensor, scores: Tensor, labels: Tensor, iou_threshold: float) -> Tensor:
    """Class-aware NMS: boxes of different labels never suppress each other."""
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.int64)
    # Offsetting by label keeps classes disjoint in coordinate space.
    offset = labels.to(boxes.dtype)[:, None] * (boxes.max() + 1.0)
    return nms(boxes + offset, scores, iou_threshold)


def xywh_to_xyxy(boxes: Sequence[Sequence[float]]) -> list[tuple[float, float, float, float]]:
    return [(x, y, x + w, y + h) for x, y, w, h in boxes]
