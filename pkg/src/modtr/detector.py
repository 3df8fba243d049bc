"""Frozen-detector contract: predictions, an input-differentiable loss, and a weight fingerprint.

``TinyAnchorFree`` is a small FCOS-style detector trained from scratch at desk
scale. ``PluginFCOS``, ``PluginRetinaNet`` and ``PluginFasterRCNN`` wrap the
torchvision detectors so COCO checkpoints can be consumed unchanged.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .boxes import AnnotationSet, BoxAnnotation, Detection, DetectionSet, batched_nms

DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_IOU = 0.5
MAX_DETECTIONS = 100


class DetectorLoadError(RuntimeError):
    pass


class Architecture(str, enum.Enum):
    TINY_ANCHOR_FREE = "TinyAnchorFree"
    PLUGIN_FCOS = "PluginFCOS"
    PLUGIN_RETINANET = "PluginRetinaNet"
    PLUGIN_FASTER_RCNN = "PluginFasterRCNN"


# ---------------------------------------------------------------------------
# TinyAnchorFree


def _conv_gn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(math.gcd(8, cout), cout),
        nn.ReLU(inplace=True),
    )


class TinyAnchorFree(nn.Module):
    """Single-level (stride 8) anchor-free detector.

    Every feature location predicts per-class logits and distances to the
    four box sides. GroupNorm is used throughout so train and eval modes
    compute the same function and no running statistics exist.
    """

    stride = 8

    def __init__(self, num_classes: int, width: int = 64):
        super().__init__()
        self.num_classes = num_classes
        w = width
        self.backbone = nn.Sequential(
            _conv_gn(3, w // 4, stride=2),
            _conv_gn(w // 4, w // 2, stride=2),
            _conv_gn(w // 2, w // 2),
            _conv_gn(w // 2, w, stride=2),
            _conv_gn(w, w),
            _conv_gn(w, w),
        )
        self.cls_tower = _conv_gn(w, w)
        self.reg_tower = _conv_gn(w, w)
        self.cls_logits = nn.Conv2d(w, num_classes, 3, padding=1)
        self.bbox_pred = nn.Conv2d(w, 4, 3, padding=1)
        nn.init.normal_(self.cls_logits.weight, std=0.01)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - 0.01) / 0.01))
        nn.init.normal_(self.bbox_pred.weight, std=0.01)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(logits (B, K, h, w), ltrb distances in pixels (B, 4, h, w))``."""
        x = (images - 0.45) / 0.25
        feat = self.backbone(x)
        logits = self.cls_logits(self.cls_tower(feat))
        reg = self.bbox_pred(self.reg_tower(feat))
        ltrb = torch.exp(reg.clamp(max=8.0)) * self.stride
        return logits, ltrb

    def locations(self, h: int, w: int, device=None) -> Tensor:
        """Pixel centres ``(h*w, 2)`` of the feature cells, x first."""
        s = self.stride
        ys = torch.arange(h, device=device, dtype=torch.float32) * s + s // 2
        xs = torch.arange(w, device=device, dtype=torch.float32) * s + s // 2
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        return torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=1)


def sigmoid_focal_loss(logits: Tensor, targets: Tensor, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
    return alpha_t * loss


def giou_loss(pred: Tensor, target: Tensor, eps: float = 1e-7) -> Tensor:
    """``1 - GIoU`` for matched ``(N, 4)`` xyxy boxes."""
    px1, py1, px2, py2 = pred.unbind(-1)
    tx1, ty1, tx2, ty2 = target.unbind(-1)
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = area_p + area_t - inter
    iou = inter / (union + eps)
    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    hull = cw * ch + eps
    giou = iou - (hull - union) / hull
    return 1.0 - giou


def assign_targets(locations: Tensor, gt_xyxy: Tensor, gt_labels: Tensor, num_classes: int,
                   stride: int, center_radius: float = 1.5) -> tuple[Tensor, Tensor, Tensor]:
    """FCOS-style assignment for one image.

    A location is positive for a box when it lies inside the box and within
    ``center_radius * stride`` of the box centre. Ambiguous locations go to
    the smallest box. Returns ``(cls_targets (L, K), box_targets (L, 4), pos_mask (L,))``.
    """
    L = locations.shape[0]
    cls_t = torch.zeros((L, num_classes), dtype=torch.float32)
    box_t = torch.zeros((L, 4), dtype=torch.float32)
    if gt_xyxy.numel() == 0:
        return cls_t, box_t, torch.zeros(L, dtype=torch.bool)
    xs, ys = locations[:, 0:1], locations[:, 1:2]
    x1, y1, x2, y2 = gt_xyxy.unbind(-1)
    inside = (xs > x1) & (xs < x2) & (ys > y1) & (ys < y2)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    r = center_radius * stride
    near = ((xs - cx).abs() <= r) & ((ys - cy).abs() <= r)
    ok = inside & near
    area = ((x2 - x1) * (y2 - y1)).expand(L, -1)
    area = torch.where(ok, area, torch.full_like(area, float("inf")))
    best_area, best = area.min(dim=1)
    pos = torch.isfinite(best_area)
    cls_t[pos, gt_labels[best[pos]]] = 1.0
    box_t[pos] = gt_xyxy[best[pos]]
    return cls_t, box_t, pos


# ---------------------------------------------------------------------------
# Torchvision plugins


_PLUGIN_BUILDERS = {
    Architecture.PLUGIN_FCOS: "fcos_resnet50_fpn",
    Architecture.PLUGIN_RETINANET: "retinanet_resnet50_fpn",
    Architecture.PLUGIN_FASTER_RCNN: "fasterrcnn_resnet50_fpn",
}


def _build_plugin(arch: Architecture, class_map: dict[int, str], **kwargs) -> nn.Module:
    """Class ids pass through as torchvision labels; label 0 is background.

    A COCO checkpoint therefore pairs with a class map keyed by the COCO
    category ids (1..90), giving the usual 91 outputs.
    """
    import torchvision.models.detection as tvd

    if 0 in class_map:
        raise DetectorLoadError("torchvision detectors reserve class id 0 for background")
    builder = getattr(tvd, _PLUGIN_BUILDERS[arch])
    return builder(weights=None, weights_backbone=None, num_classes=max(class_map) + 1, **kwargs)


# ---------------------------------------------------------------------------
# Handle


class DetectorHandle:
    """A detector ``f_theta`` plus its class map and frozen flag.

    ``predict`` and ``detection_loss`` never write to the weights. After
    :meth:`freeze` no parameter takes gradients, so training code that
    optimises other modules through :meth:`detection_loss` leaves the
    fingerprint unchanged.
    """

    def __init__(self, architecture: "Architecture | str", model: nn.Module, class_map: dict[int, str],
                 source: str | None = None):
        self.architecture = Architecture(architecture)
        self.model = model
        self.class_map = {int(k): str(v) for k, v in class_map.items()}
        self.source = source
        self.frozen = False
        self.model.eval()

    # -- identity -------------------------------------------------------

    def fingerprint(self) -> str:
        """sha256 over a canonical serialization of every tensor in the state dict."""
        h = hashlib.sha256()
        h.update(self.architecture.value.encode())
        for name, tensor in sorted(self.model.state_dict().items()):
            t = tensor.detach().cpu().contiguous()
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(str(tuple(t.shape)).encode())
            arr = t.numpy()
            h.update(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def freeze(self) -> "DetectorHandle":
        for p in self.model.parameters():
            p.requires_grad_(False)
            p.grad = None  # stale gradients from pretraining would otherwise survive
        self.model.eval()
        self.frozen = True
        return self

    def trainable_copy(self) -> "DetectorHandle":
        """Deep copy with gradients enabled; the original handle is untouched."""
        clone = DetectorHandle(self.architecture, copy.deepcopy(self.model), dict(self.class_map), self.source)
        for p in clone.model.parameters():
            p.requires_grad_(True)
        return clone

    def parameters(self):
        return self.model.parameters()

    # -- inference ------------------------------------------------------

    @torch.no_grad()
    def predict(self, image: Tensor, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                nms_iou: float = DEFAULT_NMS_IOU):
        """Detect objects in a ``(3, H, W)`` image or a ``(B, 3, H, W)`` batch.

        Scores must exceed ``score_threshold`` strictly. Returns a
        :class:`DetectionSet` for a single image, a list of them for a batch.
        """
        single = image.dim() == 3
        batch = image.unsqueeze(0) if single else image
        _check_rgb(batch)
        if self.architecture is Architecture.TINY_ANCHOR_FREE:
            results = self._predict_tiny(batch, score_threshold, nms_iou)
        else:
            results = self._predict_plugin(batch, score_threshold, nms_iou)
        return results[0] if single else results

    def _predict_tiny(self, batch, score_threshold, nms_iou):
        model: TinyAnchorFree = self.model
        was_training = model.training
        model.eval()
        logits, ltrb = model(batch)
        model.train(was_training)
        B, K, h, w = logits.shape
        locs = model.locations(h, w)
        H, W = batch.shape[-2:]
        out = []
        for i in range(B):
            scores = torch.sigmoid(logits[i]).reshape(K, -1).t()  # (L, K)
            d = ltrb[i].reshape(4, -1).t()
            boxes = torch.stack([
                (locs[:, 0] - d[:, 0]).clamp(0, W),
                (locs[:, 1] - d[:, 1]).clamp(0, H),
                (locs[:, 0] + d[:, 2]).clamp(0, W),
                (locs[:, 1] + d[:, 3]).clamp(0, H),
            ], dim=1)
            loc_idx, cls_idx = torch.nonzero(scores > score_threshold, as_tuple=True)
            out.append(_finalize(boxes[loc_idx], scores[loc_idx, cls_idx], cls_idx, nms_iou))
        return out

    def _predict_plugin(self, batch, score_threshold, nms_iou):
        model = self.model
        was_training = model.training
        model.eval()
        raw = model(list(batch))
        model.train(was_training)
        out = []
        for r in raw:
            labels = r["labels"]
            keep = (r["scores"] > score_threshold) & (labels > 0)
            out.append(_finalize(r["boxes"][keep], r["scores"][keep], labels[keep], nms_iou))
        return out

    # -- loss -----------------------------------------------------------

    def detection_loss(self, images: Tensor, targets: "AnnotationSet | Sequence[AnnotationSet]") -> Tensor:
        """Average detection loss over the batch, differentiable w.r.t. ``images``.

        Gradients reach the weights only when the handle is not frozen.
        """
        single = images.dim() == 3
        batch = images.unsqueeze(0) if single else images
        _check_rgb(batch)
        if isinstance(targets, AnnotationSet):
            targets = [targets]
        if len(targets) != batch.shape[0]:
            raise ValueError(f"{batch.shape[0]} images but {len(targets)} annotation sets")
        for t in targets:
            unknown = t.class_ids() - set(self.class_map)
            if unknown:
                raise ValueError(f"annotation class ids {sorted(unknown)} not in detector class map")
        if self.architecture is Architecture.TINY_ANCHOR_FREE:
            return self._loss_tiny(batch, targets)
        return self._loss_plugin(batch, targets)

    def _loss_tiny(self, batch: Tensor, targets: Sequence[AnnotationSet]) -> Tensor:
        model: TinyAnchorFree = self.model
        logits, ltrb = model(batch)
        B, K, h, w = logits.shape
        locs = model.locations(h, w)
        cls_ts, box_ts, pos_ms = [], [], []
        for t in targets:
            c, b, p = assign_targets(locs, t.xyxy_tensor(), t.labels_tensor(), K, model.stride)
            cls_ts.append(c)
            box_ts.append(b)
            pos_ms.append(p)
        cls_t = torch.stack(cls_ts).to(logits.dtype)
        box_t = torch.stack(box_ts).to(logits.dtype)
        pos = torch.stack(pos_ms)
        logits = logits.reshape(B, K, -1).transpose(1, 2)  # (B, L, K)
        ltrb = ltrb.reshape(B, 4, -1).transpose(1, 2)
        num_pos = max(1.0, float(pos.sum()))
        cls_loss = sigmoid_focal_loss(logits, cls_t).sum() / num_pos
        if pos.any():
            l = locs.unsqueeze(0).expand(B, -1, -1)[pos].to(ltrb.dtype)
            d = ltrb[pos]
            pred = torch.stack([l[:, 0] - d[:, 0], l[:, 1] - d[:, 1], l[:, 0] + d[:, 2], l[:, 1] + d[:, 3]], dim=1)
            reg_loss = giou_loss(pred, box_t[pos]).sum() / num_pos
        else:
            reg_loss = logits.sum() * 0.0
        return cls_loss + reg_loss

    def _loss_plugin(self, batch: Tensor, targets: Sequence[AnnotationSet]) -> Tensor:
        model = self.model
        was_training = model.training
        model.train()
        # running BatchNorm statistics are part of theta; never update them here
        for m in model.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()
        tv_targets = [
            {"boxes": t.xyxy_tensor(batch.dtype), "labels": t.labels_tensor()} for t in targets
        ]
        try:
            losses = model(list(batch), tv_targets)
        finally:
            model.train(was_training)
            if not was_training:
                model.eval()
        return sum(losses.values())

    # -- persistence ----------------------------------------------------

    def save(self, path: "str | Path") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "architecture": self.architecture.value,
            "class_map": self.class_map,
            "config": getattr(self.model, "config_dict", None),
            "state_dict": self.model.state_dict(),
        }
        torch.save(payload, path)
        return path


def _check_rgb(batch: Tensor) -> None:
    if batch.dim() != 4 or batch.shape[1] != 3:
        raise ValueError(f"detector expects 3-channel images, got shape {tuple(batch.shape)}")


def _finalize(boxes: Tensor, scores: Tensor, labels: Tensor, nms_iou: float) -> DetectionSet:
    keep = batched_nms(boxes, scores, labels, nms_iou)[:MAX_DETECTIONS]
    dets = []
    for i in keep.tolist():
        x1, y1, x2, y2 = boxes[i].tolist()
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            continue
        dets.append(Detection(BoxAnnotation(x1, y1, x2 - x1, y2 - y1, int(labels[i])), float(scores[i])))
    return DetectionSet(tuple(dets))


def _build_model(arch: Architecture, class_map: dict[int, str], config: dict | None = None) -> nn.Module:
    cfg = dict(config or {})
    if arch is Architecture.TINY_ANCHOR_FREE:
        if sorted(class_map) != list(range(len(class_map))):
            raise DetectorLoadError("TinyAnchorFree needs dense class ids 0..K-1")
        model = TinyAnchorFree(len(class_map), **cfg)
    else:
        model = _build_plugin(arch, class_map, **cfg)
    model.config_dict = cfg
    return model


def load_detector(architecture: "Architecture | str", weights_source: str,
                  class_map: dict[int, str] | None = None, config: dict | None = None) -> DetectorHandle:
    """Load a detector from ``"random:<seed>"`` or a saved weights file.

    ``config`` carries architecture keyword arguments (e.g. ``width`` for
    TinyAnchorFree, ``min_size``/``max_size`` for the torchvision plugins).
    """
    arch = Architecture(architecture)
    source = str(weights_source)
    if source.startswith("random:"):
        if not class_map:
            raise DetectorLoadError("a class_map is required for randomly initialised detectors")
        class_map = {int(k): str(v) for k, v in class_map.items()}
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError:
            raise DetectorLoadError(f"bad random seed in weights source {source!r}") from None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = _build_model(arch, class_map, config)
        return DetectorHandle(arch, model, class_map, source)

    path = Path(source)
    if not path.is_file():
        raise DetectorLoadError(f"detector weights not readable: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise DetectorLoadError(f"corrupted detector weights {path}: {exc}") from exc

    if isinstance(payload, dict) and "state_dict" in payload:
        state = payload["state_dict"]
        stored_arch = payload.get("architecture")
        if stored_arch and Architecture(stored_arch) is not arch:
            raise DetectorLoadError(f"{path} holds a {stored_arch} detector, not {arch.value}")
        stored_map = {int(k): v for k, v in (payload.get("class_map") or {}).items()}
        config = payload.get("config") or config
    else:
        state, stored_map = payload, {}
    if not class_map:
        class_map = stored_map
    class_map = {int(k): str(v) for k, v in class_map.items()}
    if not class_map:
        raise DetectorLoadError(f"{path} carries no class map and none was given")
    if stored_map and stored_map != class_map:
        raise DetectorLoadError(f"class map mismatch with weights in {path}")

    model = _build_model(arch, class_map, config)
    try:
        model.load_state_dict(state)
    except (RuntimeError, KeyError) as exc:
        raise DetectorLoadError(f"class map / weights head mismatch for {path}: {exc}") from exc
    return DetectorHandle(arch, model, class_map, source)


def freeze(handle: DetectorHandle) -> DetectorHandle:
    return handle.freeze()


def fingerprint(handle: DetectorHandle) -> str:
    return handle.fingerprint()
