import json

import pytest
import torch

from modtr.core import (
    ModTrModel,
    TrainConfig,
    TrainingDiverged,
    TrainMode,
    build_model,
    evaluate_loss,
    load_model,
    train,
    train_joint,
)
from modtr.data import Dataset, DetectionSample, synth_shapes_dataset
from modtr.fusion import FusionKind, broadcast_channels, fuse
from modtr.translator import TranslatorConfig, flat_parameters

SMALL = TranslatorConfig(base_width=8, depth=2)


@pytest.fixture(scope="module")
def tiny_ir():
    _, ir = synth_shapes_dataset(12, image_size=48, max_boxes=2, seed=4)
    return ir


@pytest.fixture
def frozen(small_detector):
    return small_detector.freeze()


def same_detections(a, b):
    return [(d.box, d.score) for d in a] == [(d.box, d.score) for d in b]


def test_saturated_hadamard_translator_is_transparent(frozen, tiny_ir):
    model = build_model(SMALL, frozen, FusionKind.HADAMARD)
    with torch.no_grad():
        model.translator.head.weight.zero_()
        model.translator.head.bias.fill_(50.0)  # sigmoid(50) == 1.0 in float32
    x = tiny_ir[0].image
    assert same_detections(model(x, score_threshold=0.0), frozen.predict(broadcast_channels(x), 0.0))


@pytest.mark.parametrize("kind", list(FusionKind))
def test_forward_is_the_composition(frozen, tiny_ir, kind):
    model = build_model(SMALL, frozen, kind, seed=2)
    x = tiny_ir[1].image
    with torch.no_grad():
        manual = frozen.predict(fuse(kind, model.translator(x), x), 0.0)
    assert same_detections(model(x, score_threshold=0.0), manual)


def test_gradient_partition(frozen, tiny_ir):
    model = build_model(SMALL, frozen)
    loss = model.modtr_loss(tiny_ir[0].image, tiny_ir[0].annotations)
    loss.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in model.translator.parameters())
    assert all(p.grad is None for p in frozen.parameters())
    detector_ids = {id(p) for p in frozen.parameters()}
    assert not detector_ids & {id(p) for p in model.parameters()}


def test_wrong_channel_count(frozen):
    model = build_model(SMALL, frozen)
    with pytest.raises(ValueError, match="1-channel"):
        model(torch.rand(3, 32, 32))


def test_train_keeps_detector_and_writes_history(frozen, tiny_ir, tmp_path):
    fp = frozen.fingerprint()
    model = build_model(SMALL, frozen)
    before = flat_parameters(model.translator).clone()
    cfg = TrainConfig(steps=6, batch_size=4, learning_rate=1e-3, output_dir=str(tmp_path), checkpoint_every=3,
                      val_every=3)
    _, history = train(model, tiny_ir, tiny_ir, cfg)
    assert frozen.fingerprint() == fp
    assert len(history) == 6 and len(history.val_ap50) == 2
    assert len((tmp_path / "history.jsonl").read_text().splitlines()) == 6
    assert not torch.equal(before, flat_parameters(model.translator))
    manifest = json.loads((tmp_path / "last" / "translator.json").read_text())
    assert manifest["detector_fingerprint"] == fp and manifest["mode"] == "translator"
    assert (tmp_path / "best" / "translator.json").exists()


def test_training_is_seeded(frozen, tiny_ir):
    runs = []
    for _ in range(2):
        model = build_model(SMALL, frozen, seed=1)
        train(model, tiny_ir, config=TrainConfig(steps=4, batch_size=3, learning_rate=1e-3, seed=9, hflip=True))
        runs.append(flat_parameters(model.translator))
    assert torch.equal(*runs)


def test_train_requires_frozen_detector(small_detector, tiny_ir):
    with pytest.raises(ValueError, match="frozen"):
        train(build_model(SMALL, small_detector), tiny_ir, config=TrainConfig(steps=1))


def test_empty_training_data(frozen):
    with pytest.raises(ValueError, match="empty"):
        train(build_model(SMALL, frozen), Dataset([], {0: "a", 1: "b"}), config=TrainConfig(steps=1))


def test_non_finite_loss_aborts(frozen, tiny_ir):
    bad = DetectionSample(torch.full((1, 48, 48), float("nan")), tiny_ir[0].annotations, "ir")
    with pytest.raises(TrainingDiverged, match="step 1"):
        train(build_model(SMALL, frozen), [bad], config=TrainConfig(steps=2, batch_size=1))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(mode="sideways")
    assert TrainConfig(mode="joint").to_dict()["mode"] == "joint"


def test_joint_leaves_inputs_untouched(frozen, tiny_ir, tmp_path):
    model = build_model(SMALL, frozen)
    fp = frozen.fingerprint()
    tr_before = flat_parameters(model.translator).clone()
    cfg = TrainConfig(steps=3, batch_size=4, learning_rate=1e-3, mode=TrainMode.JOINT, output_dir=str(tmp_path))
    joint, history = train_joint(model, tiny_ir, config=cfg)
    assert history.mode is TrainMode.JOINT
    assert frozen.fingerprint() == fp
    assert torch.equal(flat_parameters(model.translator), tr_before)
    assert joint.detector.fingerprint() != fp
    assert json.loads((tmp_path / "last" / "translator.json").read_text())["mode"] == "joint"
    assert (tmp_path / "last" / "detector.pt").exists()
    with pytest.raises(ValueError):
        train_joint(model, tiny_ir, config=TrainConfig(steps=1))


def test_checkpoint_reload_predicts_identically(frozen, tiny_ir, tmp_path):
    model = build_model(SMALL, frozen, FusionKind.SOFTMAX, modality_id="thermal")
    train(model, tiny_ir, config=TrainConfig(steps=2, batch_size=2, output_dir=str(tmp_path)))
    again = load_model(tmp_path / "last" / "translator.json", frozen)
    assert again.fusion is FusionKind.SOFTMAX and again.modality_id == "thermal"
    x = tiny_ir[3].image
    assert same_detections(again(x, 0.0), model(x, 0.0))


def test_single_sample_overfit(pretrained_detector, synthetic):
    sample = synthetic["ir_train"][0]
    model = build_model(TranslatorConfig(), pretrained_detector, FusionKind.HADAMARD)
    initial = evaluate_loss(model, [sample])
    _, history = train(model, [sample], config=TrainConfig(steps=150, batch_size=1, learning_rate=1e-3))
    final = evaluate_loss(model, [sample])
    assert final < 0.1 * initial, (initial, final, history.losses[-5:])


def test_model_holds_detector_by_reference(frozen):
    model = ModTrModel(build_model(SMALL, frozen).translator, frozen)
    assert model.detector is frozen
    assert all(not k.startswith("detector") for k in model.state_dict())
