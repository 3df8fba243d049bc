"""Shared fixtures. The pretrained detector is built once per session (about a minute on one CPU)."""

import pytest
import torch

from modtr.core import DetectorTrainConfig, train_detector
from modtr.data import split_train_val, synth_shapes_dataset
from modtr.detector import load_detector

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def synthetic():
    """250 pseudo-RGB / pseudo-IR pairs split 200/50 at pair level."""
    rgb, ir = synth_shapes_dataset(250, image_size=96, max_boxes=3, seed=0)
    rgb_train, rgb_val = split_train_val(rgb, 0.8, seed=0)
    ir_train, ir_val = split_train_val(ir, 0.8, seed=0)
    return {"rgb_train": rgb_train, "rgb_val": rgb_val, "ir_train": ir_train, "ir_val": ir_val}


@pytest.fixture(scope="session")
def pretrained_detector(synthetic):
    """TinyAnchorFree trained on the pseudo-RGB half, then frozen."""
    det = load_detector("TinyAnchorFree", "random:0", synthetic["rgb_train"].class_map)
    train_detector(det, synthetic["rgb_train"], DetectorTrainConfig(steps=700, batch_size=16, learning_rate=2e-3))
    return det.freeze()


@pytest.fixture
def small_detector():
    return load_detector("TinyAnchorFree", "random:7", {0: "rectangle", 1: "ellipse"}, config={"width": 16})


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
