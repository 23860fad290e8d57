import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emoloc.episode import Episode
from emoloc.inference import Detection
from emoloc.metrics import (
    average_precision,
    evaluate,
    ground_truth_of,
    mean_ap,
    recall_and_miou,
    temporal_iou,
)

from oracles import exhaustive_best_ap, oracle_map, oracle_recall_miou, random_instance, set_iou


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    assert temporal_iou((2, 5), (4, 7)) == pytest.approx(2 / 6)
    assert temporal_iou((3, 3), (3, 3)) == 1.0
    assert temporal_iou((0, 1), (2, 3)) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 30), st.integers(0, 10), st.integers(0, 30), st.integers(0, 10))
def test_iou_matches_set_definition(a0, la, b0, lb):
    a, b = (a0, a0 + la), (b0, b0 + lb)
    assert temporal_iou(a, b) == pytest.approx(set_iou(a, b), abs=1e-15)
    assert temporal_iou(a, b) == temporal_iou(b, a)


# ---------------------------------------------------------------- definitional oracles


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_definitional_oracles(seed):
    dets, gt = random_instance(seed)
    rep = evaluate(dets, gt)
    rec, miou = oracle_recall_miou(dets, gt)
    for t in (0.5, 0.7):
        assert abs(rep.recall_at[t] - rec[t]) <= 1e-9
    assert abs(rep.mean_iou - miou) <= 1e-9
    assert abs(rep.mean_ap - oracle_map(dets, gt)) <= 1e-9


@pytest.mark.parametrize("seed", range(40))
def test_greedy_ap_for_single_interval_gt_is_optimal(seed):
    # with one interval per (episode, emotion), greedy matching is optimal
    rng = random.Random(seed)
    gt = {(f"e{i}", 0): [(a, a + rng.randint(0, 3))] for i, a in enumerate(rng.sample(range(10), 3))}
    dets = [Detection(f"e{rng.randrange(3)}", 0, a, a + rng.randint(0, 3), rng.random())
            for a in (rng.randrange(10) for _ in range(rng.randint(0, 5)))]
    for t in (0.1, 0.5):
        assert average_precision(dets, gt, 0, t) == pytest.approx(exhaustive_best_ap(dets, gt, 0, t), abs=1e-12)


# ---------------------------------------------------------------- boundary cases


def _gt():
    return {("a", 0): [(2, 5)], ("a", 1): [(0, 0), (7, 9)], ("b", 0): [(1, 3)]}


def test_perfect_detections():
    dets = [Detection(ep, e, s[0], s[1], 1.0) for (ep, e), spans in _gt().items() for s in spans]
    rep = evaluate(dets, _gt())
    assert rep.mean_iou == 100.0
    assert rep.recall_at == {0.5: 100.0, 0.7: 100.0}
    assert rep.mean_ap == 100.0


def test_no_detections():
    rep = evaluate([], _gt())
    assert rep.mean_iou == 0.0 and rep.mean_ap == 0.0
    assert rep.recall_at == {0.5: 0.0, 0.7: 0.0}
    assert rep.n_instances == 3 and rep.n_intervals == 4


def test_empty_ground_truth():
    rep = evaluate([Detection("a", 0, 0, 1, 0.5)], {})
    assert rep.mean_iou == 0.0 and rep.mean_ap == 0.0


def test_top1_uses_most_confident_detection():
    gt = {("a", 0): [(2, 5)]}
    dets = [Detection("a", 0, 2, 5, 0.4), Detection("a", 0, 8, 9, 0.9)]
    assert recall_and_miou(dets, gt).mean_iou == 0.0


def test_ap_counts_duplicates_as_false_positives():
    gt = {("a", 0): [(0, 3)]}
    dets = [Detection("a", 0, 0, 3, 0.9), Detection("a", 0, 0, 3, 0.8)]
    assert average_precision(dets, gt, 0, 0.5) == 1.0
    dets = [Detection("a", 0, 8, 9, 0.95)] + dets
    assert average_precision(dets, gt, 0, 0.5) == 0.5


@pytest.mark.parametrize("seed", range(30))
def test_metrics_ignore_detection_order(seed):
    dets, gt = random_instance(seed)
    shuffled = dets[:]
    random.Random(seed).shuffle(shuffled)
    a, b = evaluate(dets, gt), evaluate(shuffled, gt)
    assert (a.recall_at, a.mean_iou, a.mean_ap) == (b.recall_at, b.mean_iou, b.mean_ap)


@pytest.mark.parametrize("seed", range(30))
def test_zero_confidence_extras_never_lower_map(seed):
    dets, gt = random_instance(seed)
    base = mean_ap(dets, gt)[0]
    extra = dets + [Detection(ep, e, 0, 0, 0.0) for (ep, e) in gt]
    assert mean_ap(extra, gt)[0] >= base - 1e-12


def test_report_text_and_table():
    rep = evaluate([Detection("a", 0, 2, 5, 1.0)], _gt())
    text = rep.text()
    assert text.startswith("R@0.5=")
    assert "mIoU=" in text and "mAP=" in text
    table = rep.class_table().splitlines()
    assert table[0] == "class,AP@0.1,AP@0.3,AP@0.5,AP@0.7,mean"
    assert len(table) == 3


def test_ground_truth_of_episodes():
    V = np.zeros((4, 2))
    eps = [Episode("x", V, V, (0, 1), {0: [(0, 1)], 1: [(2, 3)]}), Episode("y", V, V, (0,))]
    assert ground_truth_of(eps) == {("x", 0): [(0, 1)], ("x", 1): [(2, 3)]}
