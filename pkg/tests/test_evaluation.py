from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import eval_oracle
from stdet.evaluation import (
    COLUMNS,
    IOU_THRESHOLDS,
    EvalResult,
    MatchRecord,
    average_precision,
    emit_table,
    format_predictions,
    map_range,
    match_detections,
    parse_predictions,
    parse_table_csv,
)
from stdet.geometry import PixelBox

GOLDEN = Path(__file__).parent / "fixtures" / "table_golden.csv"
GOLDEN_INPUT = {
    "turtle": (12, 0.9, 0.75, 0.8, 0.5),
    "fish": (30, 0.8, 0.7, 0.6, 0.4),
    "octopus": (8, 0.5, 0.25, 0.3, 0.1),
}


def random_scene(rng, n_images=3, max_boxes=5, n_classes=2):
    """Ground truth plus noisy, partly spurious detections; at most ``max_boxes`` of each per image."""
    dets, gts = {}, {}
    for i in range(n_images):
        img = f"im{i}"
        g = []
        for _ in range(rng.integers(0, max_boxes + 1)):
            x, y = rng.uniform(0, 80, 2)
            w, h = rng.uniform(5, 30, 2)
            g.append(PixelBox(x, y, x + w, y + h, int(rng.integers(n_classes))))
        d = []
        for b in g:
            if rng.random() < 0.8 and len(d) < max_boxes:
                j = rng.normal(0, 3, 4)
                d.append(PixelBox(b.x1 + j[0], b.y1 + j[1], b.x2 + j[2] + 1, b.y2 + j[3] + 1,
                                  b.class_id if rng.random() < 0.9 else int(rng.integers(n_classes)),
                                  float(rng.choice([0.3, 0.5, 0.9]) if rng.random() < 0.3 else rng.random())))
        while len(d) < max_boxes and rng.random() < 0.4:
            x, y = rng.uniform(0, 80, 2)
            d.append(PixelBox(x, y, x + 15, y + 12, int(rng.integers(n_classes)), float(rng.random())))
        gts[img] = g
        dets[img] = d
    return dets, gts


def rec(conf, matched, img="a"):
    return MatchRecord(conf, matched, 0, img)


def test_thresholds():
    assert len(IOU_THRESHOLDS) == 10
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == 0.95
    with pytest.raises(ValueError):
        map_range({}, {}, thresholds=(0.5, 0.5))
    with pytest.raises(ValueError):
        map_range({}, {}, thresholds=(0.3, 0.5))


def test_ap_hand_cases():
    assert average_precision([rec(0.9, True)], 1) == 1.0
    assert average_precision([rec(0.9, False)], 1) == 0.0
    # precision 1 up to recall 0.5 covers recall points 0.00..0.50
    assert average_precision([rec(0.9, True)], 2) == pytest.approx(51 / 101, abs=1e-12)
    assert average_precision([], 3) == 0.0
    assert average_precision([rec(0.9, True)], 0) == 0.0


def test_all_point_ap():
    assert average_precision([rec(0.9, True)], 2, method="all") == pytest.approx(0.5)
    with pytest.raises(ValueError):
        average_precision([rec(0.9, True)], 1, method="11pt")


def test_match_single_rule():
    g = [PixelBox(0, 0, 10, 10, 0)]
    d = [PixelBox(0, 0, 10, 10, 0, 0.6), PixelBox(0, 0, 10, 10, 0, 0.9)]
    recs = match_detections(d, g, 0.5)
    assert [(r.confidence, r.matched) for r in recs] == [(0.9, True), (0.6, False)]
    assert match_detections([PixelBox(0, 0, 10, 10, 0, 0.9)], g, 1.0)[0].matched
    assert not match_detections([PixelBox(0, 0, 10, 10, 1, 0.9)], g, 0.5)[0].matched


def test_perfect_scene_scores_one():
    rng = np.random.default_rng(0)
    _, gts = random_scene(rng)
    dets = {k: [PixelBox(b.x1, b.y1, b.x2, b.y2, b.class_id, 0.8) for b in v] for k, v in gts.items()}
    res = map_range(dets, gts)
    assert res.map50 == 1.0 and res.map50_95 == 1.0
    assert len(res.thresholds) == 10


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        dets, gts = random_scene(rng)
        res = map_range(dets, gts)
        m50, m5095 = eval_oracle.evaluate(dets, gts, IOU_THRESHOLDS)
        assert abs(res.map50 - m50) < 1e-9 and abs(res.map50_95 - m5095) < 1e-9


def test_classes_without_gt_are_excluded():
    g = {"a": [PixelBox(0, 0, 10, 10, 0)]}
    d = {"a": [PixelBox(0, 0, 10, 10, 0, 0.9), PixelBox(50, 50, 60, 60, 3, 0.9)]}
    res = map_range(d, g)
    assert set(res.per_class) == {0} and res.map50 == 1.0
    assert map_range({}, {}).map50 == 0.0


def test_precision_recall_at_conf_threshold():
    g = {"a": [PixelBox(0, 0, 10, 10, 0), PixelBox(20, 20, 30, 30, 0)]}
    d = {"a": [PixelBox(0, 0, 10, 10, 0, 0.9), PixelBox(50, 50, 60, 60, 0, 0.8), PixelBox(20, 20, 30, 30, 0, 0.1)]}
    res = map_range(d, g)
    assert res.precision == 0.5 and res.recall == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_map50_dominates_and_order_invariance(seed):
    rng = np.random.default_rng(seed)
    dets, gts = random_scene(rng)
    res = map_range(dets, gts)
    assert res.map50 >= res.map50_95 - 1e-12
    assert 0.0 <= res.map50_95 <= res.map50 <= 1.0
    # reversing each image's list only changes tie order, which is broken by insertion index;
    # with distinct confidences the result is unchanged
    distinct = {k: [PixelBox(b.x1, b.y1, b.x2, b.y2, b.class_id, b.confidence + 1e-7 * i) for i, b in enumerate(v)]
                for k, v in dets.items()}
    shuffled = {k: v[::-1] for k, v in distinct.items()}
    a, b = map_range(distinct, gts), map_range(shuffled, gts)
    assert a.map50 == b.map50 and a.map50_95 == b.map50_95


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.booleans()), min_size=1, max_size=12), st.data())
def test_ap_monotone_under_relabel(items, data):
    n_gt = sum(m for _, m in items) + data.draw(st.integers(0, 3))
    records = [rec(c, m) for c, m in items]
    tps = [i for i, r in enumerate(records) if r.matched]
    if not tps or n_gt == 0:
        return
    k = data.draw(st.sampled_from(tps))
    worse = list(records)
    worse[k] = rec(records[k].confidence, False)
    assert average_precision(worse, n_gt) <= average_precision(records, n_gt) + 1e-12


def test_equal_confidence_tiebreak_is_image_then_insertion():
    a = [rec(0.5, False, "b"), rec(0.5, True, "a")]
    b = [rec(0.5, True, "a"), rec(0.5, False, "b")]
    assert average_precision(a, 1) == average_precision(b, 1) == 1.0


def test_table_golden():
    table = emit_table(GOLDEN_INPUT)
    assert table.to_csv() == GOLDEN.read_text()
    assert tuple(GOLDEN.read_text().splitlines()[0].split(",")) == COLUMNS


def test_table_edge_cases():
    assert emit_table({}).to_csv() == "Class,Instances,P,R,mAP50,mAP50-95\n"
    t = emit_table({"fish": (4, 0.5, 0.25, 0.75, 0.3)})
    assert t.rows[0].name == "all" and t.rows[0].values()[1:] == t.rows[1].values()[1:]
    assert parse_table_csv(t.to_csv()).to_csv() == t.to_csv()
    assert t.to_text().splitlines()[0].split() == list(COLUMNS)


def test_table_from_result_uses_names():
    g = {"a": [PixelBox(0, 0, 10, 10, 1)], "b": [PixelBox(0, 0, 10, 10, 0), PixelBox(0, 0, 5, 5, 0)]}
    d = {"a": [PixelBox(0, 0, 10, 10, 1, 0.9)]}
    t = emit_table(map_range(d, g), ["zebra", "ant"])
    assert [r.name for r in t.rows] == ["all", "ant", "zebra"]
    assert t.all_row.instances == 3
    assert isinstance(map_range(d, g), EvalResult)


def test_prediction_format_round_trip():
    dets = {"v/00002": [PixelBox(1.5, 2.25, 10.0, 12.125, 2, 0.75)], "v/00001": []}
    text = format_predictions(dets)
    assert text == "v/00002 2 0.750000 1.500 2.250 10.000 12.125\n"
    assert parse_predictions(text)["v/00002"][0] == dets["v/00002"][0]
    with pytest.raises(ValueError):
        parse_predictions("x 1 2\n")
