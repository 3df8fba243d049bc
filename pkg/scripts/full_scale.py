"""Full-scale LLVIP / FLIR-aligned experiments with COCO-pretrained torchvision detectors.

NOT run in CI and NOT reproducible on a desk machine: it needs the datasets
(converted with ``modtr convert``), COCO detector weights, ImageNet encoder
weights and a GPU-days budget. The numbers in ``EXPECTED`` are the published
test-set AP values (mean ± std over three seeds, percent) that a faithful
full-scale run is expected to land near. Desk-scale evidence for the same
claims comes from ``scripts/desk_scale.py`` and the acceptance tests.

Usage (after ``modtr convert --dataset llvip --data-root /data/LLVIP --output-dir /data/llvip-coco``)::

    python scripts/full_scale.py --dataset llvip --data-root /data/llvip-coco \
        --detector fasterrcnn --detector-weights coco_fasterrcnn.pth \
        --encoder-weights resnet34_imagenet.pth --fusion hadamard --seeds 0 1 2

Weight files are plain ``state_dict`` saves of the torchvision models
(``fasterrcnn_resnet50_fpn``, ``fcos_resnet50_fpn``, ``retinanet_resnet50_fpn``
with their COCO_V1 weights; ``resnet34`` with IMAGENET1K_V1 weights).
"""

import argparse
import json
from pathlib import Path

import torch

from modtr.boxes import AnnotationSet, BoxAnnotation
from modtr.core import TrainConfig, TrainMode, build_model, train, train_joint
from modtr.data import Dataset, filter_classes, load_coco_annotations, split_train_val
from modtr.detector import load_detector
from modtr.metrics import evaluate_dataset, format_mean_std_table
from modtr.translator import Backbone, TranslatorConfig, load_encoder_weights

# Published test-set AP (%) as (mean, std). Keys: (dataset, detector, method).
EXPECTED = {
    # image translation comparison, ModTr with Hadamard fusion
    ("llvip", "fcos", "ModTr-hadamard"): (57.63, 0.66),
    ("llvip", "retinanet", "ModTr-hadamard"): (54.83, 0.61),
    ("llvip", "fasterrcnn", "ModTr-hadamard"): (57.97, 0.85),
    ("flir", "fcos", "ModTr-hadamard"): (35.49, 0.94),
    ("flir", "retinanet", "ModTr-hadamard"): (34.27, 0.27),
    ("flir", "fasterrcnn", "ModTr-hadamard"): (37.21, 0.46),
    # fusion variants and detector fine-tuning
    ("llvip", "fcos", "FT"): (57.37, 2.19),
    ("llvip", "retinanet", "FT"): (53.79, 1.79),
    ("llvip", "fasterrcnn", "FT"): (59.62, 1.23),
    ("llvip", "fcos", "ModTr-add"): (56.44, 0.75),
    ("llvip", "retinanet", "ModTr-add"): (53.18, 1.03),
    ("llvip", "fasterrcnn", "ModTr-add"): (57.14, 0.50),
    ("llvip", "fcos", "ModTr-softmax"): (57.01, 0.71),
    ("llvip", "retinanet", "ModTr-softmax"): (54.43, 0.35),
    ("llvip", "fasterrcnn", "ModTr-softmax"): (56.95, 0.37),
    ("flir", "fcos", "FT"): (27.97, 0.59),
    ("flir", "retinanet", "FT"): (28.46, 0.50),
    ("flir", "fasterrcnn", "FT"): (30.93, 0.46),
    ("flir", "fcos", "ModTr-add"): (34.63, 0.24),
    ("flir", "retinanet", "ModTr-add"): (33.70, 0.59),
    ("flir", "fasterrcnn", "ModTr-add"): (37.09, 0.74),
    ("flir", "fcos", "ModTr-softmax"): (34.94, 0.52),
    ("flir", "retinanet", "ModTr-softmax"): (33.72, 0.22),
    ("flir", "fasterrcnn", "ModTr-softmax"): (37.16, 0.47),
    # knowledge preservation: COCO AP of each deployment after IR adaptation
    ("coco", "fcos", "N-Detectors"): (0.18, 0.01),
    ("coco", "fcos", "1-Detector"): (0.33, 0.04),
    ("coco", "fcos", "N-ModTr-1-Detector"): (38.41, 0.00),
    ("coco", "retinanet", "N-Detectors"): (0.22, 0.02),
    ("coco", "retinanet", "1-Detector"): (0.29, 0.01),
    ("coco", "retinanet", "N-ModTr-1-Detector"): (35.48, 0.00),
    ("coco", "fasterrcnn", "N-Detectors"): (0.31, 0.01),
    ("coco", "fasterrcnn", "1-Detector"): (0.40, 0.00),
    ("coco", "fasterrcnn", "N-ModTr-1-Detector"): (39.78, 0.00),
}

ARCH = {"fcos": "PluginFCOS", "retinanet": "PluginRetinaNet", "fasterrcnn": "PluginFasterRCNN"}

# dataset class name -> COCO category id, so the COCO heads are reused unchanged
COCO_IDS = {"person": 1, "bicycle": 2, "car": 3}


def to_coco_ids(ds: Dataset) -> Dataset:
    mapping = {cid: COCO_IDS[name] for cid, name in ds.class_map.items()}
    samples = []
    for s in ds:
        boxes = tuple(BoxAnnotation(b.x, b.y, b.w, b.h, mapping[b.class_id]) for b in s.annotations)
        samples.append(type(s)(s.image, AnnotationSet(boxes), s.modality, s.pair_id, s.image_id, s.path, s.resize))
    return Dataset(samples, {COCO_IDS[n]: n for n in ds.class_map.values()}, ds.name, ds.meta)


def coco_class_map() -> dict[int, str]:
    """torchvision's 91-entry COCO label space (ids without a category keep a placeholder name)."""
    from torchvision.models.detection import FasterRCNN_ResNet50_FPN_Weights

    names = FasterRCNN_ResNet50_FPN_Weights.COCO_V1.meta["categories"]
    return {i: n for i, n in enumerate(names) if i > 0}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dataset", choices=["llvip", "flir"], required=True)
    ap.add_argument("--data-root", type=Path, required=True)
    ap.add_argument("--detector", choices=sorted(ARCH), default="fasterrcnn")
    ap.add_argument("--detector-weights", type=Path, required=True)
    ap.add_argument("--encoder-weights", type=Path)
    ap.add_argument("--backbone", default="resnet34", choices=[b.value for b in Backbone if b is not Backbone.TINY])
    ap.add_argument("--fusion", default="hadamard", choices=["add", "hadamard", "softmax"])
    ap.add_argument("--mode", default="translator", choices=["translator", "joint"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--batch-size", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--resize", type=int, nargs=2, metavar=("H", "W"))
    ap.add_argument("--out", type=Path, default=Path("runs/full"))
    args = ap.parse_args()

    resize = tuple(args.resize) if args.resize else None
    full = load_coco_annotations(args.data_root / "annotations_train_ir.json", modality="ir", resize=resize)
    test = load_coco_annotations(args.data_root / "annotations_test_ir.json", modality="ir", resize=resize)
    if args.dataset == "flir":
        full, _ = filter_classes(full, ["dog"])
        test, _ = filter_classes(test, ["dog"])
    full, test = to_coco_ids(full), to_coco_ids(test)

    detector = load_detector(ARCH[args.detector], str(args.detector_weights), coco_class_map()).freeze()
    print(f"detector fingerprint {detector.fingerprint()}")
    label = f"ModTr{'+FT' if args.mode == 'joint' else ''}-{args.fusion}"
    reports = []
    for seed in args.seeds:
        train_ds, val_ds = split_train_val(full, 0.8, seed=seed)
        model = build_model(TranslatorConfig.standard(Backbone(args.backbone), in_channels=1), detector,
                            args.fusion, "ir", seed=seed)
        if args.encoder_weights:
            load_encoder_weights(model.translator, torch.load(args.encoder_weights, map_location="cpu"))
        cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr, seed=seed,
                          mode=TrainMode(args.mode), val_every=1000, checkpoint_every=1000, hflip=True,
                          output_dir=str(args.out / f"{args.dataset}-{args.detector}-{label}-s{seed}"))
        if cfg.mode is TrainMode.JOINT:
            model, _ = train_joint(model, train_ds, val_ds, cfg)
        else:
            model, _ = train(model, train_ds, val_ds, cfg)
        reports.append(evaluate_dataset(model.forward, test, test.class_map))

    print(format_mean_std_table([(label, reports)], title=f"{args.dataset} IR test, {args.detector}"))
    expected = EXPECTED.get((args.dataset, args.detector, label))
    if expected:
        print(f"published: {expected[0]:.2f} ± {expected[1]:.2f}")
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"{args.dataset}-{args.detector}-{label}.json").write_text(json.dumps({
        "ap": [r.ap for r in reports], "ap50": [r.ap50 for r in reports], "expected_ap": expected,
    }, indent=2))


if __name__ == "__main__":
    main()
