"""Desk-scale version of the full experiment grid on the synthetic paired shapes data.

Runs on one CPU in roughly 15-40 minutes depending on ``--seeds`` and ``--steps``:

1. pretrain TinyAnchorFree on pseudo-RGB and freeze it;
2. measure its zero-shot AP on pseudo-IR (channel replication);
3. train one translator per fusion and seed against the frozen detector;
4. fine-tuning baselines: detector FT on IR, and ModTr+FT (joint);
5. knowledge preservation: N-Detectors vs One-Detector vs N-ModTr-1-Detector
   on both the pseudo-RGB and pseudo-IR validation sets.

    python scripts/desk_scale.py --seeds 0 1 2 --steps 300 --out runs/desk
"""

import argparse
import json
import time
from pathlib import Path

from modtr.core import (
    DetectorTrainConfig,
    TrainConfig,
    TrainMode,
    build_model,
    evaluate_loss,
    train,
    train_detector,
    train_joint,
)
from modtr.data import Dataset, DetectionSample, split_train_val, synth_shapes_dataset
from modtr.detector import load_detector
from modtr.fusion import FusionKind
from modtr.metrics import (
    PreservationRoute,
    Strategy,
    evaluate_dataset,
    evaluate_preservation,
    format_mean_std_table,
    format_preservation,
)
from modtr.translator import TranslatorConfig


def replicated(ds: Dataset) -> Dataset:
    """Single-channel samples shown to an RGB detector by channel replication."""
    return Dataset([DetectionSample(s.image.expand(3, -1, -1).contiguous(), s.annotations, s.modality, s.pair_id,
                                    s.image_id) for s in ds], ds.class_map, ds.name, ds.meta)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--pretrain-steps", type=int, default=700)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    rgb, ir = synth_shapes_dataset(250, 96, 3, seed=0)
    rgb_train, rgb_val = split_train_val(rgb, 0.8, seed=0)
    ir_train, ir_val = split_train_val(ir, 0.8, seed=0)

    t0 = time.time()
    detector = load_detector("TinyAnchorFree", "random:0", rgb.class_map)
    train_detector(detector, rgb_train, DetectorTrainConfig(steps=args.pretrain_steps))
    detector.freeze()
    detector.save(args.out / "detector_rgb.pt")
    print(f"pretrained in {time.time() - t0:.0f}s, fingerprint {detector.fingerprint()[:16]}")

    zero_shot = evaluate_dataset(detector.predict, replicated(ir_val))
    rgb_ap = evaluate_dataset(detector.predict, rgb_val)
    print(f"RGB val AP50 {rgb_ap.ap50:.3f}; zero-shot IR val AP50 (baseline B) {zero_shot.ap50:.3f}")

    results: dict[str, list] = {"Zero-shot": [zero_shot]}
    final_losses: dict[str, list] = {}
    translators = {}
    for seed in args.seeds:
        for kind in FusionKind:
            model = build_model(TranslatorConfig(), detector, kind, seed=seed)
            cfg = TrainConfig(steps=args.steps, batch_size=8, learning_rate=args.lr, seed=seed,
                              output_dir=str(args.out / f"modtr-{kind.value}-s{seed}"))
            train(model, ir_train, config=cfg)
            results.setdefault(f"ModTr-{kind.value}", []).append(evaluate_dataset(model.forward, ir_val))
            final_losses.setdefault(f"ModTr-{kind.value}", []).append(evaluate_loss(model, ir_train))
            translators[(kind, seed)] = model

        base = build_model(TranslatorConfig(), detector, FusionKind.HADAMARD, seed=seed)
        joint_cfg = TrainConfig(steps=args.steps, batch_size=8, learning_rate=args.lr, seed=seed, mode=TrainMode.JOINT,
                                detector_learning_rate=args.lr / 10, output_dir=str(args.out / f"joint-s{seed}"))
        joint, _ = train_joint(base, ir_train, config=joint_cfg)
        results.setdefault("ModTr+FT-hadamard", []).append(evaluate_dataset(joint.forward, ir_val))
        final_losses.setdefault("ModTr+FT-hadamard", []).append(evaluate_loss(joint, ir_train))

        ft = detector.trainable_copy()
        train_detector(ft, replicated(ir_train), DetectorTrainConfig(steps=args.steps, learning_rate=args.lr, seed=seed))
        results.setdefault("FT", []).append(evaluate_dataset(ft.predict, replicated(ir_val)))

    table = format_mean_std_table(list(results.items()), title="Synthetic pseudo-IR validation")
    print(table)

    # knowledge preservation on both modalities with the last seed's models
    seed = args.seeds[-1]
    ft_ir = detector.trainable_copy()
    train_detector(ft_ir, replicated(ir_train), DetectorTrainConfig(steps=args.steps, learning_rate=args.lr, seed=seed))
    one = detector.trainable_copy()
    mixed = Dataset(list(rgb_train) + list(replicated(ir_train)), rgb.class_map)
    train_detector(one, mixed, DetectorTrainConfig(steps=args.steps, learning_rate=args.lr, seed=seed))
    rows = []
    rows += evaluate_preservation(detector, [
        PreservationRoute("pseudo-RGB", rgb_val, "rgb", detector=detector),
        PreservationRoute("pseudo-IR", replicated(ir_val), "ir", detector=ft_ir),
    ], Strategy.N_DETECTORS, "TinyAnchorFree")
    rows += evaluate_preservation(one, [
        PreservationRoute("pseudo-RGB", rgb_val, "rgb"),
        PreservationRoute("pseudo-IR", replicated(ir_val), "ir"),
    ], Strategy.ONE_DETECTOR, "TinyAnchorFree")
    rows += evaluate_preservation(detector, [
        PreservationRoute("pseudo-RGB", rgb_val, "rgb"),
        PreservationRoute("pseudo-IR", ir_val, "ir", translator=translators[(FusionKind.HADAMARD, seed)]),
    ], Strategy.N_MODTR_1_DETECTOR, "TinyAnchorFree")
    preservation = format_preservation(rows)
    print(preservation)

    (args.out / "results.txt").write_text(table + "\n" + preservation)
    (args.out / "results.json").write_text(json.dumps({
        "zero_shot_ap50": zero_shot.ap50,
        "rgb_ap50": rgb_ap.ap50,
        "ap50": {k: [r.ap50 for r in v] for k, v in results.items()},
        "final_train_loss": final_losses,
        "preservation_ap": [{"strategy": r.strategy.value, "dataset": r.dataset, "ap": r.ap} for r in rows],
    }, indent=2))


if __name__ == "__main__":
    main()
