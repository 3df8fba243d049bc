"""Paired-modality detection data: COCO JSON I/O, LLVIP/FLIR converters, splits and a synthetic generator.

Images are ``(C, H, W)`` float tensors in ``[0, 1]``. Boxes follow COCO
``[x, y, w, h]``.
"""

from __future__ import annotations

import colorsys
import json
import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .boxes import AnnotationSet, BoxAnnotation

log = logging.getLogger(__name__)

SYNTHETIC_VERSION = "synthetic-v1"
SYNTHETIC_CLASSES = {0: "rectangle", 1: "ellipse"}
FLIR_CLASSES = {0: "person", 1: "bicycle", 2: "car", 3: "dog"}
LLVIP_CLASSES = {0: "person"}


class DataError(ValueError):
    pass


@dataclass
class DetectionSample:
    image: Tensor | None
    annotations: AnnotationSet
    modality: str = "rgb"
    pair_id: str = ""
    image_id: int = 0
    path: Path | None = None
    resize: tuple[int, int] | None = None

    def load_image(self, channels: int | None = None) -> Tensor:
        if self.image is not None:
            return self.image
        if self.path is None:
            raise DataError(f"sample {self.image_id} has neither pixels nor a path")
        if channels is None:
            channels = 1 if self.modality in ("ir", "thermal", "depth") else 3
        return load_image(self.path, channels, self.resize)

    @property
    def channels(self) -> int:
        if self.image is not None:
            return int(self.image.shape[0])
        return 1 if self.modality in ("ir", "thermal", "depth") else 3


@dataclass
class Dataset:
    """A list of samples plus the class map their ``class_id`` values refer to."""

    samples: list[DetectionSample]
    class_map: dict[int, str]
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    @property
    def n_boxes(self) -> int:
        return sum(len(s.annotations) for s in self.samples)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], dict(self.class_map), self.name, dict(self.meta))


# ---------------------------------------------------------------------------
# image decoding


def decode_image(img: Image.Image, channels: int) -> Tensor:
    """PIL image -> ``(channels, H, W)`` float tensor in ``[0, 1]``.

    16-bit and 32-bit single-channel images (raw thermal) are min-max
    normalised per image; 8-bit images are divided by 255.
    """
    if img.mode in ("I;16", "I;16B", "I;16L", "I", "F"):
        arr = np.asarray(img, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        arr = arr[None]
        if channels == 3:
            arr = np.repeat(arr, 3, axis=0)
        return torch.from_numpy(arr.astype(np.float32))
    img = img.convert("L" if channels == 1 else "RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def load_image(path: "str | Path", channels: int = 3, resize: tuple[int, int] | None = None) -> Tensor:
    with Image.open(path) as img:
        if resize is not None:
            img = img.resize((resize[1], resize[0]), Image.BILINEAR)
        return decode_image(img, channels)


def to_pil(image: Tensor) -> Image.Image:
    """``(C, H, W)`` unit-range tensor -> 8-bit PIL image."""
    arr = (image.detach().clamp(0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    if arr.shape[0] == 1:
        return Image.fromarray(arr[0])
    return Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)))


# ---------------------------------------------------------------------------
# COCO JSON


def load_coco_annotations(path: "str | Path", image_root: "str | Path | None" = None,
                          modality: str | None = None, resize: tuple[int, int] | None = None) -> Dataset:
    """Read a COCO-style detection file. Every image yields one sample, annotated or not."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read COCO file {path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DataError(f"{path}: missing or malformed '{key}' array")
    class_map = {int(c["id"]): str(c["name"]) for c in doc["categories"]}
    if image_root is None:
        # converters record where the pixels live; otherwise resolve next to the JSON
        image_root = (doc.get("info") or {}).get("image_root") or path.parent
    root = Path(image_root)
    by_image: dict[int, list[BoxAnnotation]] = {int(im["id"]): [] for im in doc["images"]}
    for ann in doc["annotations"]:
        aid = ann.get("id")
        x, y, w, h = ann["bbox"]
        if not (w > 0 and h > 0):
            raise DataError(f"{path}: annotation id {aid} has non-positive bbox size w={w}, h={h}")
        if int(ann["category_id"]) not in class_map:
            raise DataError(f"{path}: annotation id {aid} references unknown category {ann['category_id']}")
        if int(ann["image_id"]) not in by_image:
            raise DataError(f"{path}: annotation id {aid} references unknown image {ann['image_id']}")
        try:
            box = BoxAnnotation(x, y, w, h, int(ann["category_id"]))
        except ValueError as exc:
            raise DataError(f"{path}: annotation id {aid}: {exc}") from exc
        by_image[int(ann["image_id"])].append(box)
    samples = []
    for im in doc["images"]:
        iid = int(im["id"])
        fname = im.get("file_name", "")
        samples.append(DetectionSample(
            image=None,
            annotations=AnnotationSet(tuple(by_image[iid])),
            modality=modality or im.get("modality", "rgb"),
            pair_id=str(im.get("pair_id", Path(fname).stem)),
            image_id=iid,
            path=root / fname if fname else None,
            resize=resize,
        ))
    return Dataset(samples, class_map, name=path.stem, meta={"source": str(path)})


def to_coco_json(dataset: Dataset, image_root: "str | Path | None" = None) -> dict:
    """Serialize a dataset back to a COCO-style dict; bbox floats are written unchanged.

    With ``image_root``, file names are stored relative to it and the root is
    recorded under ``info`` so the file can be loaded from anywhere.
    """
    images, annotations = [], []
    ann_id = 1
    for s in dataset.samples:
        entry = {"id": s.image_id, "pair_id": s.pair_id, "modality": s.modality}
        if s.path is not None:
            entry["file_name"] = str(s.path.relative_to(image_root)) if image_root else s.path.name
        if s.image is not None:
            entry["height"], entry["width"] = int(s.image.shape[-2]), int(s.image.shape[-1])
        images.append(entry)
        for b in s.annotations:
            annotations.append({
                "id": ann_id, "image_id": s.image_id, "category_id": b.class_id,
                "bbox": b.to_list(), "area": b.area, "iscrowd": 0,
            })
            ann_id += 1
    categories = [{"id": k, "name": v} for k, v in sorted(dataset.class_map.items())]
    doc = {"images": images, "annotations": annotations, "categories": categories}
    if image_root is not None:
        doc["info"] = {"image_root": str(Path(image_root).resolve())}
    return doc


def write_coco_json(dataset: Dataset, path: "str | Path", image_root: "str | Path | None" = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_coco_json(dataset, image_root), indent=1))
    return path


# ---------------------------------------------------------------------------
# class filtering and splits


def filter_classes(dataset: Dataset, drop: Sequence[str]) -> tuple[Dataset, dict[int, int]]:
    """Remove every annotation of the named classes and renumber the rest densely.

    Images are kept even when all their boxes are dropped. Returns the new
    dataset and the ``old id -> new id`` mapping of surviving classes.
    """
    names = set(dataset.class_map.values())
    unknown = [d for d in drop if d not in names]
    if unknown:
        raise DataError(f"unknown class names {unknown}; known: {sorted(names)}")
    drop = set(drop)
    kept = [cid for cid in sorted(dataset.class_map) if dataset.class_map[cid] not in drop]
    mapping = {old: new for new, old in enumerate(kept)}
    class_map = {mapping[old]: dataset.class_map[old] for old in kept}
    samples = []
    for s in dataset.samples:
        boxes = tuple(
            replace(b, class_id=mapping[b.class_id]) for b in s.annotations if b.class_id in mapping
        )
        samples.append(replace(s, annotations=AnnotationSet(boxes)))
    return Dataset(samples, class_map, dataset.name, dict(dataset.meta)), mapping


def split_train_val(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded split at pair granularity: aligned samples always land on the same side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie strictly between 0 and 1, got {train_fraction}")
    pair_ids = sorted({s.pair_id for s in dataset.samples})
    order = np.random.default_rng(seed).permutation(len(pair_ids))
    n_train = int(round(train_fraction * len(pair_ids)))
    train_ids = {pair_ids[i] for i in order[:n_train]}
    train = [i for i, s in enumerate(dataset.samples) if s.pair_id in train_ids]
    val = [i for i, s in enumerate(dataset.samples) if s.pair_id not in train_ids]
    return dataset.subset(train), dataset.subset(val)


# ---------------------------------------------------------------------------
# synthetic paired shapes


def _smooth_noise(rng: np.random.Generator, size: int, grid: int, channels: int) -> np.ndarray:
    coarse = torch.from_numpy(rng.random((1, channels, grid, grid)).astype(np.float32))
    fine = torch.nn.functional.interpolate(coarse, size=(size, size), mode="bilinear", align_corners=False)
    return fine[0].numpy()


def _shape_mask(kind: int, x: int, y: int, w: int, h: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    if kind == 0:
        mask[y:y + h, x:x + w] = True
        return mask
    rows = np.arange(size)[:, None] + 0.5
    cols = np.arange(size)[None, :] + 0.5
    cx, cy, rx, ry = x + w / 2, y + h / 2, w / 2, h / 2
    return ((cols - cx) / rx) ** 2 + ((rows - cy) / ry) ** 2 <= 1.0


def _mask_box(mask: np.ndarray, class_id: int) -> BoxAnnotation:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    x0, y0 = int(cols[0]), int(rows[0])
    return BoxAnnotation(float(x0), float(y0), float(cols[-1] + 1 - x0), float(rows[-1] + 1 - y0), class_id)


def _blur3(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25], dtype=img.dtype)
    p = np.pad(img, 1, mode="edge")
    p = k[0] * p[:-2] + k[1] * p[1:-1] + k[2] * p[2:]
    return k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]


def rgb_to_pseudo_ir(rgb: np.ndarray) -> np.ndarray:
    """Fixed degradation from a ``(3, H, W)`` pseudo-RGB array to a ``(1, H, W)`` pseudo-IR one.

    Luminance, intensity inversion, contrast remap into ``[0.15, 0.55]`` with a
    gamma of 1.5, then a 3x3 binomial blur.
    """
    lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
    inv = 1.0 - lum
    remapped = 0.15 + 0.40 * np.power(inv, 1.5)
    return _blur3(remapped)[None].astype(np.float32)


def synth_shapes_dataset(n_images: int, image_size: int = 96, max_boxes: int = 3, seed: int = 0,
                         min_size: int = 14, max_size: int = 36) -> tuple[Dataset, Dataset]:
    """Generate aligned pseudo-RGB / pseudo-IR detection pairs.

    Each pseudo-RGB image holds 1..``max_boxes`` non-overlapping bright
    rectangles (class 0) or ellipses (class 1) on a dark textured background.
    Boxes are the exact bounding boxes of the drawn pixel masks. The IR
    twin comes from :func:`rgb_to_pseudo_ir` and shares annotations and
    ``pair_id``.
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    max_size = min(max_size, image_size - 2)
    min_size = min(min_size, max_size)
    rng = np.random.default_rng(seed)
    rgb_samples, ir_samples = [], []
    for i in range(n_images):
        bg = 0.08 + 0.22 * _smooth_noise(rng, image_size, 6, 3)
        bg += 0.03 * rng.standard_normal(bg.shape).astype(np.float32)
        img = bg
        occupied = np.zeros((image_size, image_size), dtype=bool)
        boxes = []
        n_obj = int(rng.integers(1, max_boxes + 1))
        for _ in range(n_obj):
            for _attempt in range(100):
                kind = int(rng.integers(0, 2))
                w = int(rng.integers(min_size, max_size + 1))
                h = int(rng.integers(min_size, max_size + 1))
                x = int(rng.integers(0, image_size - w + 1))
                y = int(rng.integers(0, image_size - h + 1))
                y0, y1 = max(0, y - 2), min(image_size, y + h + 2)
                x0, x1 = max(0, x - 2), min(image_size, x + w + 2)
                if not occupied[y0:y1, x0:x1].any():
                    break
            else:
                continue
            occupied[y0:y1, x0:x1] = True
            mask = _shape_mask(kind, x, y, w, h, image_size)
            hue = rng.random()
            sat = 0.5 + 0.5 * rng.random()
            color = np.array(colorsys.hsv_to_rgb(hue, sat, 1.0), dtype=np.float32)
            # lift dim hues (blue) so every object is clearly brighter than the background
            lum = 0.299 * color[0] + 0.587 * color[1] + 0.114 * color[2]
            if lum < 0.6:
                color = color + (0.6 - lum)
            texture = 0.04 * rng.standard_normal((3, image_size, image_size)).astype(np.float32)
            img = np.where(mask[None], color[:, None, None] + texture, img)
            boxes.append(_mask_box(mask, kind))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        ann = AnnotationSet(tuple(boxes))
        pair_id = f"synth-{seed}-{i:05d}"
        rgb_samples.append(DetectionSample(torch.from_numpy(img), ann, "rgb", pair_id, i))
        ir = np.clip(rgb_to_pseudo_ir(img), 0.0, 1.0)
        ir_samples.append(DetectionSample(torch.from_numpy(ir), ann, "ir", pair_id, i))
    meta = {"version": SYNTHETIC_VERSION, "seed": seed, "image_size": image_size}
    return (Dataset(rgb_samples, dict(SYNTHETIC_CLASSES), "synthetic-rgb", dict(meta)),
            Dataset(ir_samples, dict(SYNTHETIC_CLASSES), "synthetic-ir", dict(meta)))


# ---------------------------------------------------------------------------
# LLVIP / FLIR-aligned converters


def _parse_voc(path: Path, class_ids: dict[str, int]) -> list[BoxAnnotation]:
    root = ET.parse(path).getroot()
    boxes = []
    for obj in root.iter("object"):
        name = obj.findtext("name", "").strip().lower()
        if name not in class_ids:
            log.debug("skipping class %r in %s", name, path)
            continue
        bb = obj.find("bndbox")
        x1, y1 = float(bb.findtext("xmin")), float(bb.findtext("ymin"))
        x2, y2 = float(bb.findtext("xmax")), float(bb.findtext("ymax"))
        if x2 <= x1 or y2 <= y1:
            raise DataError(f"{path}: degenerate box {(x1, y1, x2, y2)}")
        boxes.append(BoxAnnotation(max(0.0, x1), max(0.0, y1), x2 - max(0.0, x1), y2 - max(0.0, y1), class_ids[name]))
    return boxes


def convert_llvip(root: "str | Path", output_dir: "str | Path") -> list[Path]:
    """LLVIP layout: ``{visible,infrared}/{train,test}/<id>.jpg`` and ``Annotations/<id>.xml``.

    Both modalities share one VOC annotation per pair id.
    """
    root, output_dir = Path(root), Path(output_dir)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    class_ids = {v: k for k, v in LLVIP_CLASSES.items()}
    written = []
    for split in ("train", "test"):
        for modality, folder in (("rgb", "visible"), ("ir", "infrared")):
            img_dir = root / folder / split
            if not img_dir.is_dir():
                continue
            samples = []
            for idx, img_path in enumerate(sorted(img_dir.glob("*.jpg"))):
                xml = root / "Annotations" / f"{img_path.stem}.xml"
                boxes = _parse_voc(xml, class_ids) if xml.exists() else []
                samples.append(DetectionSample(None, AnnotationSet(tuple(boxes)), modality,
                                               img_path.stem, idx, path=img_path))
            ds = Dataset(samples, dict(LLVIP_CLASSES))
            written.append(write_coco_json(ds, output_dir / f"annotations_{split}_{modality}.json", root))
    if not written:
        raise DataError(f"no LLVIP image folders found under {root}")
    return written


def convert_flir_aligned(root: "str | Path", output_dir: "str | Path") -> list[Path]:
    """FLIR-aligned layout: ``JPEGImages/<id>_PreviewData.jpeg`` (IR), ``JPEGImages/<id>_RGB.jpg``,
    ``Annotations/<id>_PreviewData.xml`` and split lists ``align_{train,validation}.txt`` of ids.

    The validation list becomes the ``test`` split, matching how the aligned
    release is normally used.
    """
    root, output_dir = Path(root), Path(output_dir)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    class_ids = {v: k for k, v in FLIR_CLASSES.items()}
    written = []
    for split, listing in (("train", "align_train.txt"), ("test", "align_validation.txt")):
        list_path = root / listing
        if not list_path.exists():
            continue
        ids = [line.strip() for line in list_path.read_text().splitlines() if line.strip()]
        for modality, suffix in (("ir", "_PreviewData.jpeg"), ("rgb", "_RGB.jpg")):
            samples = []
            for idx, pid in enumerate(ids):
                xml = root / "Annotations" / f"{pid}_PreviewData.xml"
                boxes = _parse_voc(xml, class_ids) if xml.exists() else []
                samples.append(DetectionSample(None, AnnotationSet(tuple(boxes)), modality, pid, idx,
                                               path=root / "JPEGImages" / f"{pid}{suffix}"))
            ds = Dataset(samples, dict(FLIR_CLASSES))
            written.append(write_coco_json(ds, output_dir / f"annotations_{split}_{modality}.json", root))
    if not written:
        raise DataError(f"no FLIR split lists found under {root}")
    return written


def load_images(dataset: Dataset, channels: int | None = None) -> Dataset:
    """Decode every path-backed sample into memory."""
    samples = [replace(s, image=s.load_image(channels)) for s in dataset.samples]
    return Dataset(samples, dict(dataset.class_map), dataset.name, dict(dataset.meta))
