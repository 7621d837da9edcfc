import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from serialtrack.mot_metrics import (TABLE_COLUMNS, FrameMismatch, FrameSet, MalformedLine, MotRecord,
                                     NonPositiveSize, assignment_cost, clear_mot, evaluate, format_table,
                                     hungarian, id_metrics, parse_line, parse_mot15, write_mot15)

from .oracles import brute_assignment, brute_idtp, random_instance, random_mot_line


def fs(*rows):
    return FrameSet(MotRecord(*r) for r in rows)


SWITCH_GT = fs((1, 1, 0, 0, 10, 10), (2, 1, 0, 0, 10, 10))
SWITCH_HYP = fs((1, 1, 0, 0, 10, 10), (2, 2, 0, 0, 10, 10))


# --- hungarian ---------------------------------------------------------------

def test_hungarian_examples(rng):
    pairs = hungarian([[1, 2], [2, 1]])
    assert pairs == [(0, 0), (1, 1)] and assignment_cost([[1, 2], [2, 1]], pairs) == 2
    assert hungarian([[5.0]]) == [(0, 0)]
    assert hungarian(np.zeros((0, 3))) == []
    for _ in range(20):
        c = rng.uniform(0, 10, size=(6, 6))
        assert assignment_cost(c, hungarian(c)) == pytest.approx(brute_assignment(c), abs=1e-9)


@pytest.mark.parametrize("shape", [(2, 5), (5, 2), (3, 4), (4, 3), (1, 6)])
def test_hungarian_rectangular(shape, rng):
    for _ in range(10):
        c = rng.integers(0, 5, size=shape).astype(float)  # many ties
        pairs = hungarian(c)
        assert len(pairs) == min(shape)
        assert len({r for r, _ in pairs}) == len({k for _, k in pairs}) == min(shape)
        assert assignment_cost(c, pairs) == pytest.approx(brute_assignment(c))


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        hungarian([[1.0, math.inf]])


# --- CLEAR-MOT -----------------------------------------------------------------

def test_clear_perfect_match():
    gt = fs((1, 1, 0, 0, 10, 10), (1, 2, 50, 50, 10, 10), (2, 1, 1, 1, 10, 10), (2, 2, 51, 50, 10, 10))
    s = evaluate(gt, gt)
    assert (s.mota, s.motp, s.ids, s.fp, s.fn, s.mt) == (100, 100, 0, 0, 0, 2)
    assert (s.idf1, s.idp, s.idr) == (100, 100, 100)


def test_clear_id_switch_fixture():
    s = clear_mot(SWITCH_GT, SWITCH_HYP)
    assert (s.ids, s.fp, s.fn) == (1, 0, 0)
    assert s.mota == 50.0
    assert s.motal == pytest.approx(100 * (1 - math.log10(2) / 2))


def test_clear_empty_hypothesis():
    gt = fs((1, 1, 0, 0, 10, 10), (2, 1, 0, 0, 10, 10), (2, 2, 30, 0, 10, 10))
    s = clear_mot(gt, FrameSet())
    assert s.fn == 3 and s.mota == 0.0 and s.ml == s.gt == 2


def test_clear_persistence_prevents_spurious_switch():
    # frame 2: hypothesis 2 overlaps object 1 better, but 1 keeps its previous partner (IoU >= 0.5)
    gt = fs((1, 1, 0, 0, 10, 10), (2, 1, 0, 0, 10, 10))
    hyp = fs((1, 1, 0, 0, 10, 10), (2, 1, 2, 0, 10, 10), (2, 2, 0, 0, 10, 10))
    s = clear_mot(gt, hyp)
    assert s.ids == 0 and s.fp == 1


def test_fragmentation_and_coverage_classes():
    rows = [(f, 1, 0, 0, 10, 10) for f in range(1, 11)]
    hyp_rows = [(f, 1, 0, 0, 10, 10) for f in (1, 2, 3, 6, 7, 8, 9, 10)]  # gap at 4-5
    s = clear_mot(fs(*rows), fs(*hyp_rows))
    assert s.fm == 1 and s.mt == 1 and s.fn == 2


def test_frame_mismatch():
    with pytest.raises(FrameMismatch):
        clear_mot(FrameSet(), SWITCH_HYP)
    with pytest.raises(FrameMismatch):
        clear_mot(SWITCH_GT, fs((3, 1, 0, 0, 10, 10)))


# --- identity metrics -------------------------------------------------------------

def test_id_metrics_examples():
    im = id_metrics(SWITCH_GT, SWITCH_GT)
    assert (im.idf1, im.idp, im.idr) == (100, 100, 100)
    im = id_metrics(SWITCH_GT, SWITCH_HYP)
    assert (im.idtp, im.idfp, im.idfn) == (1, 1, 1)
    assert im.idf1 == 50.0


def test_id_metrics_match_brute_force(rng):
    for _ in range(50):
        gt, hyp = random_instance(rng)
        assert id_metrics(gt, hyp).idtp == brute_idtp(gt, hyp)


# --- invariants ----------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_metric_invariants(seed):
    rng = np.random.default_rng(seed)
    gt, hyp = random_instance(rng)
    s = evaluate(gt, hyp)
    assert s.mt + s.pt + s.ml == s.gt
    assert 0 <= s.motp <= 100
    if s.idp + s.idr > 0:
        assert s.idf1 == pytest.approx(2 * s.idp * s.idr / (s.idp + s.idr), abs=1e-9)
    n = s.extra["gt_boxes"]
    assert s.motal - s.mota == pytest.approx(100 * (s.ids - math.log10(s.ids + 1)) / n, abs=1e-9)
    assert s.motal >= s.mota - 1e-12

    # global relabelling of hypothesis ids changes nothing
    labels = sorted(hyp.ids())
    perm = dict(zip(labels, rng.permutation(labels).tolist()))
    hyp2 = FrameSet(MotRecord(r.frame, perm[r.id], r.left, r.top, r.width, r.height) for r in hyp.records())
    assert evaluate(gt, hyp2).row() == s.row()

    # a common translation leaves every metric unchanged (boxes stay axis-aligned)
    dx, dy = rng.uniform(-1000, 1000, 2)

    def moved(f):
        return FrameSet(MotRecord(r.frame, r.id, r.left + dx, r.top + dy, r.width, r.height)
                        for r in f.records())
    for k, v in evaluate(moved(gt), moved(hyp)).row().items():
        assert v == pytest.approx(s.row()[k], abs=1e-9)


def test_rotation_by_right_angle_is_metric_invariant(rng):
    gt, hyp = random_instance(rng)

    def rot(f):  # (x, y) -> (-y, x) maps boxes to boxes
        return FrameSet(MotRecord(r.frame, r.id, -(r.top + r.height), r.left, r.height, r.width)
                        for r in f.records())
    a, b = evaluate(gt, hyp).row(), evaluate(rot(gt), rot(hyp)).row()
    for k in a:
        assert b[k] == pytest.approx(a[k], abs=1e-9)


# --- MOT15 I/O -------------------------------------------------------------------------------

def test_parse_examples():
    r = parse_line("1,3,10.0,20.0,30.0,40.0,1,-1,-1,-1")
    assert (r.frame, r.id) == (1, 3)
    b = r.box
    assert (b.x_min, b.y_min, b.x_max, b.y_max) == (10, 20, 40, 60)
    with pytest.raises(NonPositiveSize):
        parse_line("1,3,10,20,-5,40,1,-1,-1,-1")


@pytest.mark.parametrize("line,reason", [
    ("1,2,3", "fields"),
    ("x,2,3,4,5,6", "frame"),
    ("1.5,2,3,4,5,6", "integer"),
    ("0,2,3,4,5,6", "frame"),
    ("1,2,3,4,nan,6", "finite"),
    ("1,2,3,4,5,abc", "bb_height"),
])
def test_malformed_lines_are_line_numbered(line, reason):
    text = "1,1,0,0,1,1,1,-1,-1,-1\n\n" + line + "\n"
    with pytest.raises(MalformedLine) as exc:
        parse_mot15(text)
    assert exc.value.lineno == 3
    assert "line 3" in str(exc.value) and reason in str(exc.value)


def test_duplicate_id_in_frame_is_malformed():
    with pytest.raises(MalformedLine) as exc:
        parse_mot15("1,1,0,0,1,1\n1,1,5,5,1,1\n")
    assert exc.value.lineno == 2


def test_round_trip_fuzz_corpus(rng):
    lines = sorted((random_mot_line(rng) for _ in range(100)), key=lambda l: int(l.split(",")[0]))
    text = "".join(l + "\n" for l in lines)
    out = io.StringIO()
    write_mot15(parse_mot15(text, check_ids=False), out)
    assert out.getvalue() == text


def test_short_lines_get_defaults():
    r = parse_line("2,5,1,2,3,4")
    assert (r.conf, r.x, r.y, r.z) == (1.0, -1.0, -1.0, -1.0)


def test_format_table_columns():
    s = evaluate(SWITCH_GT, SWITCH_HYP)
    head, row = format_table(s).splitlines()
    assert head.split() == list(TABLE_COLUMNS)
    assert "50.0" in row.split()
    assert list(s.row()) == list(TABLE_COLUMNS)
