"""The ModTr model: translator -> fusion -> frozen detector, and its training loops."""

from __future__ import annotations

import copy
import enum
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor, nn

from . import translator as tr
from .boxes import AnnotationSet, BoxAnnotation
from .detector import DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD, DetectorHandle
from .fusion import FusionKind, fuse

log = logging.getLogger(__name__)


class TrainMode(str, enum.Enum):
    TRANSLATOR_ONLY = "translator"
    JOINT = "joint"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    mode: TrainMode = TrainMode.TRANSLATOR_ONLY
    checkpoint_every: int = 0
    val_every: int = 0
    output_dir: str | None = None
    hflip: bool = False
    detector_learning_rate: float | None = None

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class History:
    mode: TrainMode
    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    @property
    def val_ap50(self) -> list[tuple[int, float]]:
        return [(r["step"], r["val_ap50"]) for r in self.records if "val_ap50" in r]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path: "str | Path") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_jsonl())
        return path


class ModTrModel(nn.Module):
    """``detector(fuse(translator(x), x))`` for one input modality.

    Only the translator is a registered submodule; the detector handle is
    held by reference so ``model.parameters()`` never includes its weights.
    """

    def __init__(self, translator: tr.TranslationNetwork, detector: DetectorHandle,
                 fusion: "FusionKind | str" = FusionKind.HADAMARD, modality_id: str = "ir"):
        super().__init__()
        self.translator = translator
        self.fusion = FusionKind.parse(fusion)
        self.modality_id = modality_id
        self.detector = detector

    @property
    def in_channels(self) -> int:
        return self.translator.config.in_channels

    def _check(self, x: Tensor) -> None:
        c = x.shape[-3] if x.dim() >= 3 else None
        if c != self.in_channels:
            raise ValueError(f"modality {self.modality_id!r} expects {self.in_channels}-channel input, got {c}")

    def intermediate_representation(self, x: Tensor) -> Tensor:
        """The fused RGB-like image handed to the detector."""
        self._check(x)
        return fuse(self.fusion, self.translator(x), x)

    @torch.no_grad()
    def forward(self, x: Tensor, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                nms_iou: float = DEFAULT_NMS_IOU):
        return self.detector.predict(self.intermediate_representation(x), score_threshold, nms_iou)

    def modtr_loss(self, x: Tensor, gt: "AnnotationSet | Sequence[AnnotationSet]") -> Tensor:
        return self.detector.detection_loss(self.intermediate_representation(x), gt)


def build_model(translator_config: tr.TranslatorConfig, detector: DetectorHandle,
                fusion: "FusionKind | str" = FusionKind.HADAMARD, modality_id: str = "ir",
                seed: int = 0) -> ModTrModel:
    model = ModTrModel(tr.build_translator(translator_config, seed), detector, fusion, modality_id)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# training


def _stack(samples) -> tuple[Tensor, list[AnnotationSet]]:
    images = [s.load_image() for s in samples]
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) > 1:
        raise ValueError(f"cannot batch images of different shapes {sorted(shapes)}; set a resize")
    return torch.stack(images), [s.annotations for s in samples]


def _hflip(images: Tensor, targets: list[AnnotationSet]) -> tuple[Tensor, list[AnnotationSet]]:
    W = images.shape[-1]
    flipped = [
        AnnotationSet(tuple(BoxAnnotation(max(0.0, W - b.x - b.w), b.y, b.w, b.h, b.class_id) for b in t))
        for t in targets
    ]
    return images.flip(-1), flipped


def _batches(n: int, batch_size: int, steps: int, generator: torch.Generator):
    """Yield index batches for ``steps`` steps, reshuffling each epoch."""
    perm: list[int] = []
    for _ in range(steps):
        batch = []
        while len(batch) < batch_size:
            if not perm:
                perm = torch.randperm(n, generator=generator).tolist()
            batch.append(perm.pop(0))
        yield batch


def evaluate_loss(model: ModTrModel, data, batch_size: int = 16) -> float:
    """Mean ModTr loss over ``data`` in eval mode (no parameter updates)."""
    was = model.training
    model.eval()
    total, n = 0.0, 0
    samples = list(data)
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            x, y = _stack(samples[i:i + batch_size])
            total += float(model.modtr_loss(x, y)) * len(y)
            n += len(y)
    model.train(was)
    return total / max(n, 1)


def evaluate_ap(model: ModTrModel, data, batch_size: int = 16):
    from .metrics import evaluate_dataset

    was = model.training
    model.eval()
    try:
        return evaluate_dataset(model.forward, data, getattr(data, "class_map", None), batch_size)
    finally:
        model.train(was)


def _run(model: ModTrModel, params: list[dict], train_data, val_data, config: TrainConfig,
         extra_checkpoint=None) -> History:
    samples = list(train_data)
    if not samples:
        raise ValueError("train_data is empty")
    history = History(config.mode)
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")
    gen = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=0.0)
    best_ap = -math.inf
    model.train()
    if config.mode is TrainMode.JOINT:
        model.detector.model.train()
    start = time.time()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for step, idx in enumerate(_batches(len(samples), config.batch_size, config.steps, gen), start=1):
            x, y = _stack([samples[i] for i in idx])
            if config.hflip and bool(torch.rand((), generator=gen) < 0.5):
                x, y = _hflip(x, y)
            loss = model.modtr_loss(x, y)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at step {step} (lr={config.learning_rate}, batch={idx})"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            record = {"step": step, "loss": value, "lr": config.learning_rate}
            if val_data is not None and config.val_every and step % config.val_every == 0:
                report = evaluate_ap(model, val_data)
                record["val_ap50"] = report.ap50
                if out_dir is not None and report.ap50 > best_ap:
                    best_ap = report.ap50
                    _save(model, out_dir / "best", config, extra_checkpoint, {"val_ap50": report.ap50, "step": step})
                model.train()
            history.records.append(record)
            if out_dir is not None:
                with open(out_dir / "history.jsonl", "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    _save(model, out_dir / "last", config, extra_checkpoint, {"step": step})
    model.eval()
    if config.mode is TrainMode.JOINT:
        model.detector.model.eval()
    if out_dir is not None:
        _save(model, out_dir / "last", config, extra_checkpoint, {"step": config.steps})
    log.info("trained %d steps in %.1fs, final loss %.4f", config.steps, time.time() - start, history.losses[-1])
    return history


def _save(model: ModTrModel, stem: Path, config: TrainConfig, extra_checkpoint, info: dict) -> None:
    extra = {
        "fusion": model.fusion.value,
        "modality_id": model.modality_id,
        "detector_architecture": model.detector.architecture.value,
        "detector_fingerprint": model.detector.fingerprint(),
        "mode": config.mode.value,
    }
    extra.update(info)
    tr.save_checkpoint(model.translator, stem / "translator", config, extra)
    if extra_checkpoint is not None:
        extra_checkpoint(stem)


def train(model: ModTrModel, train_data, val_data=None, config: TrainConfig | None = None):
    """Optimise the translator against the frozen detector's loss.

    Returns ``(model, history)``; the model is updated in place.
    """
    config = config or TrainConfig()
    if config.mode is not TrainMode.TRANSLATOR_ONLY:
        raise ValueError("train() runs TranslatorOnly mode; use train_joint() for joint training")
    if not model.detector.frozen:
        raise ValueError("the detector must be frozen before ModTr training")
    before = model.detector.fingerprint()
    params = [{"params": list(model.translator.parameters())}]
    history = _run(model, params, train_data, val_data, config)
    if model.detector.fingerprint() != before:
        raise RuntimeError("detector weights changed during translator-only training")
    return model, history


def train_joint(model: ModTrModel, train_data, val_data=None, config: TrainConfig | None = None):
    """Jointly fine-tune a copy of the translator and a copy of the detector.

    The caller's model and detector handle are left untouched; the returned
    model owns both copies.
    """
    config = config or TrainConfig(mode=TrainMode.JOINT)
    if config.mode is not TrainMode.JOINT:
        raise ValueError("train_joint() needs mode=joint")
    detector = model.detector.trainable_copy()
    joint = ModTrModel(copy.deepcopy(model.translator), detector, model.fusion, model.modality_id)
    det_lr = config.detector_learning_rate or config.learning_rate
    params = [
        {"params": list(joint.translator.parameters())},
        {"params": list(detector.model.parameters()), "lr": det_lr},
    ]
    history = _run(joint, params, train_data, val_data, config,
                   extra_checkpoint=lambda stem: detector.save(stem / "detector.pt"))
    return joint, history


def load_model(translator_path: "str | Path", detector: DetectorHandle,
               fusion: "FusionKind | str | None" = None, modality_id: str | None = None) -> ModTrModel:
    """Rebuild a ModTr model from a translator checkpoint and a detector handle."""
    net, manifest = tr.load_checkpoint(translator_path)
    fusion = fusion or manifest.get("fusion", FusionKind.HADAMARD)
    model = ModTrModel(net, detector, fusion, modality_id or manifest.get("modality_id", "ir"))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# detector training (source-modality pretraining and N-Detectors fine-tuning)


@dataclass
class DetectorTrainConfig:
    steps: int = 800
    batch_size: int = 16
    learning_rate: float = 2e-3
    seed: int = 0
    # random per-image contrast in [0.7, 1.3] and brightness shift in [-0.075, 0.075]
    jitter: bool = True

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("steps and batch_size must be >= 1 and learning_rate > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def train_detector(detector: DetectorHandle, train_data, config: DetectorTrainConfig | None = None) -> History:
    """Train the detector's own weights on ``train_data`` (updated in place).

    Used to pretrain a source-modality detector at desk scale, or to build
    the per-modality detectors of the N-Detectors baseline from a
    :meth:`DetectorHandle.trainable_copy`.
    """
    config = config or DetectorTrainConfig()
    if detector.frozen:
        raise ValueError("cannot train a frozen detector; use trainable_copy()")
    samples = list(train_data)
    if not samples:
        raise ValueError("train_data is empty")
    images, targets = _stack(samples)
    if images.shape[1] == 1:
        images = images.expand(-1, 3, -1, -1)
    gen = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(detector.parameters(), lr=config.learning_rate)
    history = History(TrainMode.JOINT)
    detector.model.train()
    for step, idx in enumerate(_batches(len(samples), config.batch_size, config.steps, gen), start=1):
        x = images[idx]
        if config.jitter:
            scale = 0.7 + 0.6 * torch.rand(len(idx), 1, 1, 1, generator=gen)
            shift = 0.15 * (torch.rand(len(idx), 1, 1, 1, generator=gen) - 0.5)
            x = (x * scale + shift).clamp(0, 1)
        loss = detector.detection_loss(x, [targets[i] for i in idx])
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite detector loss {value} at step {step}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.records.append({"step": step, "loss": value, "lr": config.learning_rate})
    detector.model.eval()
    return history
