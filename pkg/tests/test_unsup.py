import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from phdrank.dataset import UserHistory
from phdrank.metrics import average_precision
from phdrank.scorers import MaxSimilarityScorer, RandomScorer, VideoMmrScorer
from phdrank.unsup import max_similarity, random_scorer, video_mmr

from conftest import make_video, windows
from oracles import expected_random_ap


def test_max_similarity_examples():
    G = np.array([[1.0, 0.0], [1.0, 1.0]]) / np.array([[1.0], [np.sqrt(2)]])
    assert max_similarity(G[1], G) == pytest.approx(1.0)
    assert max_similarity([0.0, 0.0, 1.0], [[1.0, 0, 0], [0, 2.0, 0]]) == pytest.approx(0.0)
    assert max_similarity([1.0, 0.0], G) == pytest.approx(1.0)
    assert video_mmr([1.0, 0.0], G) < 1.0


def test_video_mmr_examples():
    assert video_mmr([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.5)
    s, g = [0.3, 0.4], [[-1.0, 2.0]]
    assert video_mmr(s, g) == pytest.approx(max_similarity(s, g))


def test_empty_history_rejected():
    with pytest.raises(ValueError):
        max_similarity([1.0, 0.0], np.zeros((0, 2)))
    with pytest.raises(ValueError):
        video_mmr([1.0, 0.0], np.zeros((0, 2)))


def test_batch_matches_single():
    rng = np.random.default_rng(0)
    S, G = rng.standard_normal((5, 4)), rng.standard_normal((3, 4))
    h = UserHistory.from_elements("u", G)
    np.testing.assert_allclose(MaxSimilarityScorer().score_features(S, h), [max_similarity(s, G) for s in S])
    np.testing.assert_allclose(VideoMmrScorer().score_features(S, h), [video_mmr(s, G) for s in S])


nonzero_rows = arrays(np.float64, (5, 3), elements=st.floats(-5, 5)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3))


@given(nonzero_rows, nonzero_rows, st.integers(0, 4), st.floats(1e-2, 1e2), st.randoms())
def test_invariants(S, G, row, c, rnd):
    mx, mean = max_similarity(S, G), video_mmr(S, G)
    assert np.all(mx >= mean - 1e-12)
    G2 = G.copy()
    G2[row] *= c
    np.testing.assert_allclose(max_similarity(S, G2), mx, atol=1e-9)
    np.testing.assert_allclose(video_mmr(S, G2), mean, atol=1e-9)
    idx = list(range(5))
    rnd.shuffle(idx)
    np.testing.assert_allclose(video_mmr(S, G[idx]), mean, atol=1e-12)


def test_random_deterministic_per_video_and_seed():
    v = make_video(windows(8), [(0, 5)], video_id="abc")
    w = make_video(windows(8), [(0, 5)], video_id="abd")
    np.testing.assert_array_equal(random_scorer(v, 3), random_scorer(v, 3))
    assert not np.array_equal(random_scorer(v, 3), random_scorer(v, 4))
    assert not np.array_equal(random_scorer(v, 3), random_scorer(w, 3))
    assert np.all((0 <= random_scorer(v)) & (random_scorer(v) < 1))
    assert RandomScorer(3).score_video(v).tolist() == random_scorer(v, 3).tolist()


@pytest.mark.parametrize("labels", [(1, 0, 0, 0, 0, 0), (1, 1, 0, 0, 0), (1, 0, 1, 0), (0, 1, 1, 1, 0, 1)])
def test_random_expected_ap_matches_permutation_average(labels):
    labels = np.array(labels)
    n = len(labels)
    gt = [tuple(w) for w, l in zip(windows(n), labels) if l]
    v = make_video(windows(n), gt, video_id="rv")
    aps = [average_precision(labels, random_scorer(v, seed)) for seed in range(4000)]
    # the sample mean of 4000 APs has standard error below 0.005
    assert np.mean(aps) == pytest.approx(expected_random_ap(labels), abs=0.015)
