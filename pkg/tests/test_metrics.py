import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phdrank.dataset import Dataset, UserRecord
from phdrank.metrics import (
    CSV_COLUMNS, MetricError, NoPositivesError, RankedVideo, average_precision, evaluate, nmsd,
    rank_order, recall_at_n,
)
from phdrank.scorers import MaxSimilarityScorer, OracleScorer, RandomScorer, TransformedScorer

import oracles
from conftest import make_video, windows


def _ranked(bounds, gt, scores, duration=None):
    v = make_video(bounds, gt, duration=duration)
    return RankedVideo.from_scores(v, scores)


# ---------------------------------------------------------------------------
# examples


@pytest.mark.parametrize("labels,scores,expected", [
    ((1, 0, 0), (3, 2, 1), 1.0),
    ((1, 0, 0), (1, 2, 3), 1 / 3),
    ((1, 0, 1), (3, 2, 1), 5 / 6),
])
def test_ap_examples(labels, scores, expected):
    assert average_precision(labels, scores) == pytest.approx(expected, abs=1e-15)


def test_ap_needs_positive():
    with pytest.raises(NoPositivesError):
        average_precision([0, 0], [1, 2])


def test_rank_order_stable_ties():
    np.testing.assert_array_equal(rank_order([1.0, 3.0, 1.0, 3.0]), [1, 3, 0, 2])


def test_nmsd_gt_segment_first():
    r = _ranked([(0, 5), (5, 12), (12, 20)], [(5, 12)], [0.0, 1.0, 0.5])
    assert nmsd(r) == pytest.approx(7 / 20)


def test_nmsd_gt_last_is_one():
    r = _ranked(windows(4), [(15, 20)], [4.0, 3.0, 2.0, 1.0])
    assert nmsd(r) == pytest.approx(1.0)


def test_nmsd_half_coverage_needs_majority_only():
    # GT spans two segments; covering one half is enough at alpha 0.5
    r = _ranked(windows(4), [(5, 15)], [0.0, 1.0, 0.5, 0.0])
    assert nmsd(r) == pytest.approx(5 / 20)
    assert nmsd(r, alpha=0.6) == pytest.approx(10 / 20)


def test_nmsd_excess_normalization():
    r = _ranked(windows(4), [(15, 20)], [4.0, 3.0, 2.0, 1.0])
    assert nmsd(r, normalization="excess") == pytest.approx((20 - 2.5) / (20 - 2.5))
    with pytest.raises(ValueError):
        nmsd(r, normalization="bogus")


def test_nmsd_uncoverable_gt_errors():
    r = _ranked([(0, 5), (5, 10)], [(30, 40)], [0.0, 1.0], duration=40.0)
    with pytest.raises(MetricError):
        nmsd(r)


def test_recall_examples():
    bounds = windows(8)
    assert recall_at_n(_ranked(bounds, [(5, 15)], [0, 9, 8, 0, 0, 0, 0, 0])) == 1.0
    assert recall_at_n(_ranked(bounds, [(7, 13)], [9, 9, 0, 9, 9, 9, 0, 0])) == pytest.approx(0.5)
    assert recall_at_n(_ranked(windows(5), [(2, 7), (21, 23)], [5, 4, 3, 2, 1])) == 1.0


def test_scores_shape_and_finiteness_checked():
    v = make_video(windows(3), [(0, 5)])
    with pytest.raises(MetricError):
        RankedVideo.from_scores(v, [1.0, 2.0])
    with pytest.raises(MetricError):
        RankedVideo.from_scores(v, [1.0, np.nan, 2.0])


# ---------------------------------------------------------------------------
# brute-force equivalence


@settings(max_examples=150)
@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.5, 10.0), min_size=n, max_size=n),
    st.lists(st.tuples(st.floats(0.0, 1.0), st.floats(0.01, 0.5)), min_size=1, max_size=3),
    st.lists(st.integers(0, 3), min_size=n, max_size=n),
)))
def test_brute_force_equivalence(case):
    lengths, gt_rel, int_scores = case
    lengths = np.round(lengths, 2)
    ends = np.cumsum(lengths)
    duration = float(ends[-1])
    bounds = np.stack([np.concatenate([[0.0], ends[:-1]]), ends], 1)
    gt = [(s * duration, min(duration, (s + w) * duration)) for s, w in gt_rel]
    gt = [(a, b) for a, b in gt if b > a]
    if not gt:
        return
    video = make_video(bounds, gt, duration=duration)
    scores = np.array(int_scores, dtype=float)  # small integer range forces ties
    perm = oracles.ranking(scores)
    ranked = RankedVideo.from_scores(video, scores)
    assert tuple(ranked.ranking) == perm
    labels = video.labels()
    gt_arr = [tuple(g) for g in video.gt_frames]
    b = [tuple(x) for x in bounds]
    assert nmsd(ranked) == pytest.approx(oracles.nmsd(b, gt_arr, duration, perm), abs=1e-9)
    assert recall_at_n(ranked) == pytest.approx(oracles.recall_at(b, gt_arr, perm), abs=1e-9)
    if labels.any():
        assert average_precision(labels, scores) == pytest.approx(
            oracles.average_precision(list(labels), perm), abs=1e-9)


def test_brute_force_over_all_permutations_six_segments():
    bounds = [(0, 3), (3, 9), (9, 10), (10, 18), (18, 19.5), (19.5, 25)]
    gt = [(2, 4), (9.5, 14)]
    video = make_video(bounds, gt)
    labels = video.labels()
    for order in itertools.permutations(range(6)):
        scores = np.empty(6)
        scores[list(order)] = np.arange(6, 0, -1)
        ranked = RankedVideo.from_scores(video, scores)
        assert tuple(ranked.ranking) == order
        assert nmsd(ranked) == pytest.approx(oracles.nmsd(bounds, gt, 25.0, order), abs=1e-9)
        assert recall_at_n(ranked) == pytest.approx(oracles.recall_at(bounds, gt, order), abs=1e-9)
        assert average_precision(labels, scores) == pytest.approx(
            oracles.average_precision(list(labels), order), abs=1e-9)


# ---------------------------------------------------------------------------
# invariants


@given(st.lists(st.booleans(), min_size=2, max_size=12).filter(any), st.randoms())
def test_ap_range_and_perfect_iff_positives_first(labels, rnd):
    labels = np.array(labels, dtype=int)
    scores = np.array([rnd.random() for _ in labels])
    ap = average_precision(labels, scores)
    assert 0 < ap <= 1
    positives_first = np.all(np.diff(labels[rank_order(scores)]) <= 0)
    assert (ap == 1.0) == positives_first


@given(st.integers(3, 10), st.integers(0, 9), st.randoms())
def test_nmsd_promotion_never_hurts(n, g, rnd):
    g = g % n
    video = make_video(windows(n), [(5 * g, 5 * g + 5)])
    scores = np.array([rnd.random() for _ in range(n)])
    before = nmsd(RankedVideo.from_scores(video, scores))
    promoted = scores.copy()
    promoted[g] = scores.max() + 1
    assert nmsd(RankedVideo.from_scores(video, promoted)) <= before


@given(st.integers(1, 10), st.randoms())
def test_recall_monotone_in_n(n_seg, rnd):
    video = make_video(windows(n_seg), [(1.0, 5.0 * n_seg - 1)])
    ranked = RankedVideo.from_scores(video, [rnd.random() for _ in range(n_seg)])
    values = [recall_at_n(ranked, n) for n in range(1, n_seg + 2)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# evaluate


def test_oracle_scorer_perfect_ap(tiny_dataset):
    rep = evaluate(tiny_dataset, OracleScorer(), "test")
    assert rep["oracle"]["mAP"] == 1.0
    assert rep["oracle"]["n_videos"] == 20
    # with GT of one or two 5 s windows the top five windows hold all of it
    assert rep["oracle"]["recall_at_5"] == pytest.approx(1.0)


def test_aggregates_are_row_means(tiny_dataset):
    rep = evaluate(tiny_dataset, MaxSimilarityScorer(), "test")
    agg = rep["max_similarity"]
    for key, col in (("mAP", "ap"), ("nMSD", "nmsd"), ("recall_at_5", "recall_at_5")):
        assert agg[key] == pytest.approx(np.mean([r[col] for r in rep.rows]), abs=1e-15)


def test_monotone_transform_gives_identical_report(tiny_dataset):
    a = evaluate(tiny_dataset, MaxSimilarityScorer(), "test", name="s")
    b = evaluate(tiny_dataset, TransformedScorer(MaxSimilarityScorer(), lambda x: np.exp(3 * x) - 2), "test", name="s")
    assert a.to_json() == b.to_json()


def test_evaluate_deterministic(tiny_dataset):
    a = evaluate(tiny_dataset, RandomScorer(1), "val").to_json()
    assert evaluate(tiny_dataset, RandomScorer(1), "val").to_json() == a


def test_evaluate_threads_match(tiny_dataset, monkeypatch):
    a = evaluate(tiny_dataset, MaxSimilarityScorer(), "test").to_json()
    monkeypatch.setenv("PHD_THREADS", "4")
    assert evaluate(tiny_dataset, MaxSimilarityScorer(), "test").to_json() == a


class _Flaky:
    name = "flaky"
    uses_history = False

    def score_video(self, video, history):
        if video.video_id.endswith(("1_v03", "2_v04")) or int(video.video_id[1:6]) % 3 == 0:
            raise ValueError("boom")
        return np.arange(video.n_segments, dtype=float)


def test_failures_counted_not_dropped(tiny_dataset):
    rep = evaluate(tiny_dataset, _Flaky(), "test")
    failed = [r for r in rep.rows if r["status"] == "failed"]
    agg = rep["flaky"]
    assert failed and agg["n_failed"] == len(failed)
    assert agg["n_videos"] + agg["n_failed"] == 20
    assert all(r["error"] == "boom" for r in failed)


def test_no_positive_target_excluded_with_count():
    hist = make_video(windows(3), [(0, 5)], video_id="h", split="test")
    bad = make_video(windows(4), [(0, 1)], video_id="t0", split="test")
    good = make_video(windows(4), [(0, 5)], video_id="t1", split="test")
    ds = Dataset({"a": UserRecord("a", "test", (hist,), bad), "b": UserRecord("b", "test", (hist,), good)}, 3)
    agg = evaluate(ds, OracleScorer(), "test")["oracle"]
    assert agg["n_videos"] == 1 and agg["n_excluded_no_positive"] == 1


def test_report_json_and_csv(tmp_path, tiny_dataset):
    rep = evaluate(tiny_dataset, RandomScorer(0), "test", name="random")
    rep.metadata["seed"] = 0
    rep.write_json(tmp_path / "r.json")
    rep.write_csv(tmp_path / "r.csv")
    loaded = json.loads((tmp_path / "r.json").read_text())
    assert loaded["scorers"]["random"]["n_videos"] == 20 and loaded["metadata"]["seed"] == 0
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 21
