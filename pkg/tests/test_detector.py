import pytest
import torch

from modtr.boxes import AnnotationSet, BoxAnnotation, iou
from modtr.core import DetectorTrainConfig, train_detector
from modtr.data import synth_shapes_dataset
from modtr.detector import (
    Architecture,
    DetectorLoadError,
    assign_targets,
    giou_loss,
    load_detector,
)

CLASSES = {0: "rectangle", 1: "ellipse"}


def gt(*boxes):
    return AnnotationSet(tuple(BoxAnnotation(*b) for b in boxes))


def test_random_source_is_deterministic():
    a = load_detector("TinyAnchorFree", "random:7", CLASSES)
    b = load_detector("TinyAnchorFree", "random:7", CLASSES)
    c = load_detector("TinyAnchorFree", "random:8", CLASSES)
    assert a.fingerprint() == b.fingerprint() != c.fingerprint()


def test_random_source_needs_class_map():
    with pytest.raises(DetectorLoadError):
        load_detector("TinyAnchorFree", "random:0")


def test_save_load_keeps_fingerprint(tmp_path, small_detector):
    path = small_detector.save(tmp_path / "det.pt")
    again = load_detector("TinyAnchorFree", str(path))
    assert again.fingerprint() == small_detector.fingerprint()
    assert again.class_map == CLASSES


def test_corrupted_file(tmp_path):
    bad = tmp_path / "det.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(DetectorLoadError, match="corrupted"):
        load_detector("TinyAnchorFree", str(bad))
    with pytest.raises(DetectorLoadError, match="not readable"):
        load_detector("TinyAnchorFree", str(tmp_path / "missing.pt"))


def test_wrong_architecture_or_class_map(tmp_path, small_detector):
    path = small_detector.save(tmp_path / "det.pt")
    with pytest.raises(DetectorLoadError):
        load_detector("PluginFCOS", str(path))
    with pytest.raises(DetectorLoadError, match="class map"):
        load_detector("TinyAnchorFree", str(path), {0: "a", 1: "b", 2: "c"})


def test_freeze_is_idempotent(small_detector):
    fp = small_detector.fingerprint()
    small_detector.freeze().freeze()
    assert small_detector.frozen
    assert not any(p.requires_grad for p in small_detector.parameters())
    assert small_detector.fingerprint() == fp


def test_freeze_drops_gradients_left_by_training(small_detector):
    x = torch.rand(1, 3, 32, 32)
    small_detector.detection_loss(x, [AnnotationSet((BoxAnnotation(4, 4, 10, 10, 0),))]).backward()
    assert any(p.grad is not None for p in small_detector.parameters())
    small_detector.freeze()
    assert all(p.grad is None for p in small_detector.parameters())


def test_fingerprint_sees_tiny_perturbation(small_detector):
    fp = small_detector.fingerprint()
    with torch.no_grad():
        next(small_detector.parameters()).view(-1)[0] += 1e-6
    assert small_detector.fingerprint() != fp


def test_threshold_is_exclusive(small_detector):
    img = torch.rand(3, 64, 64)
    assert len(small_detector.predict(img, score_threshold=1.0)) == 0
    everything = small_detector.predict(img, score_threshold=0.0, nms_iou=1.0)
    assert len(everything) <= 100


def test_predict_batch_and_rejects_single_channel(small_detector):
    out = small_detector.predict(torch.rand(2, 3, 32, 32), score_threshold=0.0)
    assert isinstance(out, list) and len(out) == 2
    with pytest.raises(ValueError, match="3-channel"):
        small_detector.predict(torch.rand(1, 32, 32))


def test_predict_does_not_change_weights(small_detector):
    fp = small_detector.fingerprint()
    small_detector.predict(torch.rand(3, 40, 40))
    small_detector.detection_loss(torch.rand(3, 40, 40), gt((4, 4, 10, 10, 0)))
    assert small_detector.fingerprint() == fp


def test_empty_ground_truth_loss_is_finite(small_detector):
    loss = small_detector.detection_loss(torch.rand(3, 48, 48), AnnotationSet())
    assert torch.isfinite(loss) and loss > 0


def test_loss_gradient_reaches_frozen_detector_input(small_detector):
    small_detector.freeze()
    x = torch.rand(3, 48, 48, requires_grad=True)
    small_detector.detection_loss(x, gt((8, 8, 20, 16, 1))).backward()
    assert x.grad is not None and x.grad.abs().sum() > 0
    assert all(p.grad is None for p in small_detector.parameters())


def test_direct_image_optimisation_lowers_loss(small_detector):
    small_detector.freeze()
    target = gt((10, 12, 20, 18, 0), (34, 30, 14, 14, 1))
    x = torch.full((3, 56, 56), 0.5, requires_grad=True)
    opt = torch.optim.Adam([x], lr=0.02)
    first = None
    for _ in range(50):
        loss = small_detector.detection_loss(x, target)
        first = first if first is not None else float(loss.detach())
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert float(small_detector.detection_loss(x, target).detach()) < first


def test_unknown_class_in_annotations(small_detector):
    with pytest.raises(ValueError, match="not in detector class map"):
        small_detector.detection_loss(torch.rand(3, 32, 32), gt((1, 1, 5, 5, 4)))


def test_batch_target_count_mismatch(small_detector):
    with pytest.raises(ValueError):
        small_detector.detection_loss(torch.rand(2, 3, 32, 32), [AnnotationSet()])


def test_giou_loss_examples():
    b = torch.tensor([[0.0, 0.0, 10.0, 10.0]])
    assert float(giou_loss(b, b)) == pytest.approx(0.0, abs=1e-6)
    far = torch.tensor([[20.0, 0.0, 30.0, 10.0]])
    # IoU 0, hull 300, union 200 -> GIoU = -1/3
    assert float(giou_loss(b, far)) == pytest.approx(4 / 3, abs=1e-6)


def test_assignment_prefers_smaller_box():
    locs = torch.tensor([[20.0, 20.0], [60.0, 60.0]])
    boxes = torch.tensor([[0.0, 0.0, 40.0, 40.0], [10.0, 10.0, 30.0, 30.0]])
    cls_t, box_t, pos = assign_targets(locs, boxes, torch.tensor([0, 1]), 2, stride=8)
    assert pos.tolist() == [True, False]
    assert cls_t[0].tolist() == [0.0, 1.0]
    assert box_t[0].tolist() == [10.0, 10.0, 30.0, 30.0]


def test_tiny_needs_dense_class_ids():
    with pytest.raises(DetectorLoadError):
        load_detector("TinyAnchorFree", "random:0", {1: "a", 3: "b"})


def test_overfit_single_image():
    rgb, _ = synth_shapes_dataset(1, image_size=64, max_boxes=1, seed=3)
    det = load_detector("TinyAnchorFree", "random:0", rgb.class_map, config={"width": 32})
    train_detector(det, rgb, DetectorTrainConfig(steps=150, batch_size=1, learning_rate=3e-3, jitter=False))
    target = rgb[0].annotations[0]
    top = det.predict(rgb[0].image)[0]
    assert top.class_id == target.class_id
    assert iou(top.box, target) >= 0.5


def test_train_detector_refuses_frozen(small_detector):
    rgb, _ = synth_shapes_dataset(2, image_size=32, seed=0)
    with pytest.raises(ValueError, match="frozen"):
        train_detector(small_detector.freeze(), rgb, DetectorTrainConfig(steps=1))


def test_trainable_copy_leaves_original(small_detector):
    small_detector.freeze()
    fp = small_detector.fingerprint()
    clone = small_detector.trainable_copy()
    with torch.no_grad():
        next(clone.parameters()).add_(1.0)
    assert small_detector.fingerprint() == fp != clone.fingerprint()
    assert all(p.requires_grad for p in clone.parameters())


def test_plugin_rejects_background_class():
    with pytest.raises(DetectorLoadError, match="background"):
        load_detector("PluginFCOS", "random:0", {0: "person"})


@pytest.mark.slow
@pytest.mark.parametrize("arch", [Architecture.PLUGIN_FCOS, Architecture.PLUGIN_RETINANET,
                                  Architecture.PLUGIN_FASTER_RCNN])
def test_plugin_contract(arch):
    det = load_detector(arch, "random:0", {1: "person", 2: "car"}, config={"min_size": 64, "max_size": 64})
    det.freeze()
    fp = det.fingerprint()
    x = torch.rand(3, 64, 64, requires_grad=True)
    loss = det.detection_loss(x, gt((8, 8, 30, 30, 1)))
    loss.backward()
    assert torch.isfinite(loss) and x.grad.abs().sum() > 0
    dets = det.predict(x.detach(), score_threshold=0.0)
    assert all(d.class_id in (1, 2) for d in dets)
    assert det.fingerprint() == fp
