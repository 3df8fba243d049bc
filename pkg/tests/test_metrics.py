import json
import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from modtr.boxes import AnnotationSet, BoxAnnotation, Detection, DetectionSet, iou
from modtr.metrics import APReport, average_precision, format_mean_std_table, format_table, match_detections

from oracles import brute_force_ap, grid_iou


def box(x, y, w, h, c=0):
    return BoxAnnotation(x, y, w, h, c)


def det(x, y, w, h, c=0, s=0.9):
    return Detection(box(x, y, w, h, c), s)


def test_iou_examples():
    a = box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, box(20, 20, 5, 5)) == 0.0
    assert iou(a, box(5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_against_grid_enumeration():
    cases = [((0, 0, 10, 10), (5, 0, 10, 10)), ((2, 3, 7, 4), (4, 1, 3, 9)), ((0, 0, 3, 3), (3, 3, 2, 2))]
    for a, b in cases:
        assert iou(box(*a), box(*b)) == pytest.approx(float(grid_iou(a, b)), abs=1e-12)
    # the 1/3 example: 50 shared cells out of 150
    assert grid_iou((0, 0, 10, 10), (5, 0, 10, 10)) == Fraction(50, 150)


def test_match_examples():
    gt = AnnotationSet((box(0, 0, 10, 10),))
    assert match_detections(DetectionSet((det(0, 0, 10, 10),)), gt, 0.5) == [True]
    two = DetectionSet((det(0, 0, 10, 10, s=0.8), det(0, 0, 10, 9, s=0.9)))
    assert match_detections(two, gt, 0.5) == [True, False]
    assert two[0].score == 0.9
    wrong_class = DetectionSet((det(0, 0, 10, 10, c=1),))
    assert match_detections(wrong_class, gt, 0.5) == [False]


def test_match_prefers_higher_iou_then_lower_index():
    gts = AnnotationSet((box(0, 0, 10, 10), box(1, 0, 10, 10), box(1, 0, 10, 10)))
    d = DetectionSet((det(1, 0, 10, 10, s=0.9), det(1, 0, 10, 10, s=0.8)))
    # first det takes gt 1 (IoU 1.0, lower index of the tied pair); second takes gt 2
    assert match_detections(d, gts, 0.95) == [True, True]
    d3 = DetectionSet((det(1, 0, 10, 10, s=0.9), det(1, 0, 10, 10, s=0.8), det(1, 0, 10, 10, s=0.7)))
    assert match_detections(d3, gts, 0.95) == [True, True, False]


def test_ap_perfect_detection():
    r = average_precision([DetectionSet((det(0, 0, 10, 10, s=0.9),))], [AnnotationSet((box(0, 0, 10, 10),))])
    assert (r.ap, r.ap50, r.ap75) == (1.0, 1.0, 1.0)
    assert r.n_gt == 1 and r.n_images == 1


def test_ap_fp_then_tp():
    dets = DetectionSet((det(50, 50, 10, 10, s=0.9), det(0, 0, 10, 10, s=0.8)))
    r = average_precision([dets], [AnnotationSet((box(0, 0, 10, 10),))])
    assert r.ap50 == pytest.approx(0.5, abs=1e-12)
    assert brute_force_ap([([((50, 50, 10, 10), 0, 0.9), ((0, 0, 10, 10), 0, 0.8)], [((0, 0, 10, 10), 0)])])[1] == 0.5


def test_no_ground_truth_is_flagged():
    r = average_precision([DetectionSet((det(0, 0, 5, 5),))], [AnnotationSet()])
    assert r.undefined and r.n_gt == 0 and r.ap == 0.0


def test_missing_class_detections_score_zero():
    gts = AnnotationSet((box(0, 0, 10, 10, 0), box(20, 20, 10, 10, 1)))
    dets = DetectionSet((det(0, 0, 10, 10, 0),))
    r = average_precision([dets], [gts], {0: "a", 1: "b", 2: "c"})
    assert r.per_class["a"][1] == 1.0 and r.per_class["b"][1] == 0.0
    assert "c" not in r.per_class  # no ground truth -> excluded from the mean
    assert r.ap50 == 0.5


def test_area_range_ignores_small_ground_truth():
    gts = AnnotationSet((box(0, 0, 2, 2), box(20, 20, 10, 10)))
    dets = DetectionSet((det(0, 0, 2, 2, s=0.95), det(20, 20, 10, 10, s=0.9)))
    r = average_precision([dets], [gts], area_range=(10, math.inf))
    assert r.ap50 == 1.0


def test_max_dets_cap():
    gts = AnnotationSet((box(0, 0, 10, 10),))
    dets = DetectionSet(tuple(det(40, 40, 5, 5, s=0.9 - i * 0.01) for i in range(3)) + (det(0, 0, 10, 10, s=0.1),))
    assert average_precision([dets], [gts], max_dets=3).ap50 == 0.0
    assert average_precision([dets], [gts], max_dets=4).ap50 > 0.0


def test_report_json_round_trip():
    r = average_precision([DetectionSet((det(0, 0, 10, 10),))], [AnnotationSet((box(0, 0, 10, 10),))], {0: "x"})
    again = APReport.from_dict(json.loads(r.to_json()))
    assert again == r


def test_tables():
    r = APReport(0.5, 0.75, 0.5)
    text = format_table([("ModTr-hadamard", r)])
    assert "ModTr-hadamard" in text and "75.00" in text
    agg = format_mean_std_table([("x", [APReport(0.5, 0.6, 0.4), APReport(0.7, 0.8, 0.6)])])
    assert "60.00 ± 10.00" in agg


# -- random tiny instances ---------------------------------------------------

coord = st.integers(0, 12)
size = st.integers(1, 8)
cls = st.integers(0, 2)


@st.composite
def instances(draw):
    n_images = draw(st.integers(1, 3))
    out = []
    for _ in range(n_images):
        gts = draw(st.lists(st.tuples(coord, coord, size, size, cls), max_size=4))
        dets = draw(st.lists(st.tuples(coord, coord, size, size, cls, st.floats(0.01, 1.0)), max_size=4))
        out.append((gts, dets))
    return out


def to_library(inst):
    all_dets, all_gts = [], []
    for gts, dets in inst:
        all_gts.append(AnnotationSet(tuple(box(*g) for g in gts)))
        all_dets.append(DetectionSet(tuple(det(*d[:5], s=d[5]) for d in dets)))
    return all_dets, all_gts


def to_oracle(all_dets, all_gts):
    images = []
    for ds, gs in zip(all_dets, all_gts):
        images.append((
            [(tuple(d.box.to_list()), d.class_id, d.score) for d in ds],
            [(tuple(g.to_list()), g.class_id) for g in gs],
        ))
    return images


@settings(max_examples=300, deadline=None)
@given(instances())
def test_matches_brute_force_oracle(inst):
    all_dets, all_gts = to_library(inst)
    report = average_precision(all_dets, all_gts)
    expected = brute_force_ap(to_oracle(all_dets, all_gts))
    if expected is None:
        assert report.undefined
        return
    assert report.ap == pytest.approx(expected[0], abs=1e-9)
    assert report.ap50 == pytest.approx(expected[1], abs=1e-9)
    assert report.ap75 == pytest.approx(expected[2], abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(instances())
def test_ap_gating_invariants(inst):
    all_dets, all_gts = to_library(inst)
    r = average_precision(all_dets, all_gts)
    assert 0.0 <= r.ap <= r.ap50 + 1e-12 <= 1.0 + 1e-12
    assert r.ap75 <= r.ap50 + 1e-12
    for ds, gs in zip(all_dets, all_gts):
        counts = [sum(match_detections(ds, gs, t)) for t in (0.1, 0.5, 0.75, 0.95)]
        assert counts == sorted(counts, reverse=True)


@settings(max_examples=200, deadline=None)
@given(instances(), st.floats(0.05, 1.0))
def test_score_scaling_invariance(inst, factor):
    all_dets, all_gts = to_library(inst)
    scaled = [
        DetectionSet(tuple(Detection(d.box, d.score * factor) for d in ds)) for ds in all_dets
    ]
    a, b = average_precision(all_dets, all_gts), average_precision(scaled, all_gts)
    assert (a.ap, a.ap50, a.ap75) == (b.ap, b.ap50, b.ap75)
