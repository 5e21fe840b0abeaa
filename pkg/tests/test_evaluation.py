from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointkws.engine import MULTIPLY_CONVENTION
from jointkws.evaluation import (
    EvalReport,
    MetricError,
    RocPoint,
    ScoredTrial,
    accuracy,
    auc,
    confusion,
    eer,
    frr_at_far,
    roc,
    trials_from_posteriors,
    write_roc_csv,
)


def make_trials(kw_scores, non_scores):
    return [ScoredTrial(s, True, 0, 0) for s in kw_scores] + [ScoredTrial(s, False, 10, 10) for s in non_scores]


def brute_point(trials, th):
    kw = [t for t in trials if t.is_keyword]
    non = [t for t in trials if not t.is_keyword]
    far = sum(t.score >= th for t in non) / len(non)
    frr = sum(t.score < th for t in kw) / len(kw)
    return far, frr


def brute_auc(kw, non):
    """Area under FRR(FAR) from the step curve, integrated on a fine threshold grid."""
    trials = make_trials(kw, non)
    ths = np.concatenate([np.sort(np.unique(kw + non)), [np.inf]])
    pts = [brute_point(trials, th) for th in ths]
    pts = [(0.0, max(p[1] for p in pts))] + pts + [(max(p[0] for p in pts), 0.0)]
    pts.sort(key=lambda p: (p[0], -p[1]))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


scores = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=25)


def test_eer_worked_example():
    pts = roc(make_trials([0.9, 0.8, 0.3], [0.7, 0.2, 0.1]))
    assert eer(pts) == pytest.approx(1 / 3, abs=1e-12)


def test_all_equal_scores():
    pts = roc(make_trials([0.5] * 4, [0.5] * 6))
    assert auc(pts) == pytest.approx(0.5, abs=1e-12)
    assert eer(pts) == pytest.approx(0.5, abs=1e-12)


def test_perfect_separation():
    pts = roc(make_trials([0.8, 0.9, 0.95], [0.1, 0.2]))
    assert auc(pts) == 0.0
    assert eer(pts) == 0.0
    assert frr_at_far(pts) == 0.0


def test_fully_inverted_scores():
    pts = roc(make_trials([0.1, 0.2], [0.8, 0.9]))
    assert auc(pts) == pytest.approx(1.0)
    assert eer(pts) == pytest.approx(1.0)


@given(scores, scores)
def test_roc_matches_brute_force(kw, non):
    trials = make_trials(kw, non)
    for p in roc(trials):
        assert (p.far, p.frr) == pytest.approx(brute_point(trials, p.threshold))


@given(scores, scores)
def test_roc_is_monotone(kw, non):
    pts = roc(make_trials(kw, non))
    far = [p.far for p in pts]
    frr = [p.frr for p in pts]
    assert all(a >= b for a, b in zip(far, far[1:]))
    assert all(a <= b for a, b in zip(frr, frr[1:]))
    assert pts[-1].far == 0.0 and pts[-1].frr == 1.0


@given(scores, scores)
def test_auc_matches_oracle_and_bounds(kw, non):
    pts = roc(make_trials(kw, non))
    a = auc(pts)
    assert a == pytest.approx(brute_auc(kw, non), abs=1e-12)
    assert 0.0 <= a <= 1.0
    e = eer(pts)
    assert 0.0 <= e <= 1.0


@given(scores, scores)
def test_metrics_invariant_under_increasing_transform(kw, non):
    base = roc(make_trials(kw, non))
    warped = roc(make_trials([s**3 + 2 * s for s in kw], [s**3 + 2 * s for s in non]))
    assert auc(warped) == pytest.approx(auc(base), abs=1e-12)
    assert eer(warped) == pytest.approx(eer(base), abs=1e-12)


def test_eer_lies_between_bracketing_points():
    pts = roc(make_trials([0.9, 0.6, 0.4, 0.35], [0.5, 0.3, 0.2]))
    e = eer(pts)
    assert min(p.far for p in pts) <= e <= max(p.far for p in pts)
    crossing = [(a, b) for a, b in zip(pts, pts[1:]) if a.far - a.frr >= 0 >= b.far - b.frr]
    a, b = crossing[0]
    assert min(a.far, b.far) <= e <= max(a.far, b.far)
    assert min(a.frr, b.frr) <= e <= max(a.frr, b.frr)


def test_errors():
    with pytest.raises(MetricError):
        accuracy([])
    with pytest.raises(MetricError):
        roc(make_trials([0.5], []))
    with pytest.raises(MetricError):
        ScoredTrial(float("nan"), True, 0, 0)
    with pytest.raises(MetricError):
        auc([])


def test_trials_from_posteriors_and_confusion():
    p = np.zeros((3, 12))
    p[0, 2] = 1.0
    p[1, 10] = 0.7
    p[1, 0] = 0.3
    p[2, 11] = 1.0
    trials = trials_from_posteriors(p, [2, 10, 0])
    assert [t.score for t in trials] == pytest.approx([1.0, 0.3, 0.0])
    assert [t.is_keyword for t in trials] == [True, False, True]
    assert accuracy(trials) == pytest.approx(2 / 3)
    c = np.array(confusion(trials))
    assert c[2, 2] == 1 and c[10, 10] == 1 and c[0, 11] == 1 and c.sum() == 3


def test_report_round_trip(tmp_path):
    pts = roc(make_trials([0.9, 0.8, 0.3], [0.7, 0.2, 0.1]))
    rep = EvalReport(0.5, auc(pts), eer(pts), frr_at_far(pts), pts, [[1]], {"kws": {"params": 1, "multiplies": 2}}, 6, "baseline")
    rep.write(tmp_path / "r.json", tmp_path / "roc.csv")
    back = EvalReport.from_json((tmp_path / "r.json").read_text())
    assert back == rep
    assert back.roc[-1].threshold == float("inf")
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == "threshold,far,frr" and len(lines) == len(pts) + 1
    saved = json.loads((tmp_path / "r.json").read_text())
    assert saved["strategy"] == "baseline"
    assert saved["multiply_convention"] == MULTIPLY_CONVENTION


def test_roc_csv_writes_repr(tmp_path):
    write_roc_csv(tmp_path / "x.csv", [RocPoint(0.1, 1 / 3, 0.0)])
    assert (tmp_path / "x.csv").read_text().splitlines()[1] == f"0.1,{1 / 3!r},0.0"
