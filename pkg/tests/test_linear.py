import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phdrank.linear import (
    ConvergenceError, LinearModel, ResidualModel, dual_certificate, load_linear, pair_accuracy,
    rank_svm_objective, save_linear, svm_score, train_rank_svm, train_residual,
)

from oracles import subgradient_svm, svm_objective


def test_single_pair_large_C():
    m = train_rank_svm([([1.0, 0.0], [0.0, 0.0])], C=100.0)
    np.testing.assert_allclose(m.weights, [1.0, 0.0], atol=1e-4)
    assert pair_accuracy(m, [([1.0, 0.0], [0.0, 0.0])]) == 1.0


def test_single_pair_small_C():
    # below C = 1 the hinge is never closed: w = C * d
    m = train_rank_svm([([2.0, 0.0], [0.0, 0.0])], C=0.1)
    np.testing.assert_allclose(m.weights, [0.2, 0.0], atol=1e-4)


def test_identical_pairs_keep_unit_hinge():
    x = np.array([0.3, -0.7])
    m = train_rank_svm([(x, x), (x, x)], C=2.0)
    np.testing.assert_array_equal(m.weights, [0.0, 0.0])
    assert rank_svm_objective(m.weights, np.zeros((2, 2)), 2.0) == 4.0


def test_identical_pairs_mixed_with_informative():
    pairs = [([1.0, 0.0], [0.0, 0.0]), ([0.5, 0.5], [0.5, 0.5])]
    m = train_rank_svm(pairs, C=10.0)
    diffs = np.array([[1.0, 0.0], [0.0, 0.0]])
    best, _ = subgradient_svm([diffs], [10.0], iters=20_000)
    assert rank_svm_objective(m.weights, diffs, 10.0) == pytest.approx(best[0], rel=1e-3)


def test_separable_toy_all_pairs_correct():
    rng = np.random.default_rng(0)
    u = np.array([0.6, 0.8])
    pos, neg = [], []
    while len(pos) < 20:
        a, b = rng.uniform(-3, 3, 2), rng.uniform(-3, 3, 2)
        if abs((a - b) @ u) > 0.2:
            pos.append(a if (a - b) @ u > 0 else b)
            neg.append(b if (a - b) @ u > 0 else a)
    pairs = (np.array(pos), np.array(neg))
    # brute-force separability: some direction on a fine circle orders every pair
    thetas = np.linspace(0, 2 * np.pi, 3600, endpoint=False)
    dirs = np.stack([np.cos(thetas), np.sin(thetas)], 1)
    assert np.any(np.all((pairs[0] - pairs[1]) @ dirs.T > 0, axis=0))
    m = train_rank_svm(pairs, C=1000.0)
    assert pair_accuracy(m, pairs) == 1.0


def test_validation_errors():
    with pytest.raises(ValueError):
        train_rank_svm([])
    with pytest.raises(ValueError):
        train_rank_svm((np.zeros((3, 0)), np.zeros((3, 0))))
    with pytest.raises(ValueError):
        train_rank_svm([([1.0], [0.0])], C=0)


def test_convergence_error_carries_objective():
    rng = np.random.default_rng(0)
    Xp, Xn = rng.standard_normal((400, 30)), rng.standard_normal((400, 30))
    with pytest.raises(ConvergenceError) as err:
        train_rank_svm((Xp, Xn), C=100.0, tol=1e-14, max_iter=2)
    assert np.isfinite(err.value.objective) and err.value.objective > 0


def test_svm_score_examples():
    assert svm_score(LinearModel(np.zeros(3), 0.3), [5.0, -2.0, 1.0]) == 0.3
    assert svm_score(LinearModel(np.array([1.0, -1.0])), [0.2, 0.5]) == pytest.approx(-0.3)
    a, b = np.array([0.1, 0.9]), np.array([-0.4, 0.2])
    m0, m1 = LinearModel(np.array([2.0, 1.0]), 0.0), LinearModel(np.array([2.0, 1.0]), 7.5)
    assert svm_score(m0, a) - svm_score(m0, b) == pytest.approx(svm_score(m1, a) - svm_score(m1, b))
    with pytest.raises(ValueError):
        svm_score(m0, [1.0, 2.0, 3.0])


def _instance(seed, n=60, d=8, noise=1.0):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(d)
    Xp, Xn = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    swap = (Xp - Xn) @ w + noise * rng.standard_normal(n) < 0
    Xp[swap], Xn[swap] = Xn[swap].copy(), Xp[swap].copy()
    return Xp, Xn


def test_matches_subgradient_oracle_small_batch():
    instances, Cs, models = [], [], []
    for seed in range(6):
        Xp, Xn = _instance(seed, n=40 + 20 * seed, d=3 + 3 * seed)
        C = [0.01, 0.1, 1.0, 3.0, 10.0, 0.5][seed]
        models.append(train_rank_svm((Xp, Xn), C=C))
        instances.append(Xp - Xn)
        Cs.append(C)
    best, _ = subgradient_svm(instances, Cs, iters=100_000)
    for m, d, C, ref in zip(models, instances, Cs, best):
        assert svm_objective(m.weights, d, C) <= ref * (1 + 1e-3)


def test_returned_point_beats_perturbations():
    Xp, Xn = _instance(7, n=150, d=12)
    m = train_rank_svm((Xp, Xn), C=1.0)
    D = Xp - Xn
    f0 = rank_svm_objective(m.weights, D, 1.0)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        delta = rng.standard_normal(12)
        delta *= 1e-2 / np.linalg.norm(delta)
        # slack of the certified gap: the solver is exact only up to tol*(1+f)
        assert f0 <= rank_svm_objective(m.weights + delta, D, 1.0) + 1e-4 * (1 + f0)


def test_certificate_is_a_lower_bound():
    Xp, Xn = _instance(3)
    D = Xp - Xn
    m = train_rank_svm((Xp, Xn), C=0.7)
    primal, dual, alpha = dual_certificate(m.weights, D, 0.7)
    assert dual <= primal + 1e-9
    assert np.all((alpha >= 0) & (alpha <= 0.7 + 1e-12))
    best, _ = subgradient_svm([D], [0.7], iters=50_000)
    assert dual <= best[0] + 1e-9


@settings(max_examples=15)
@given(st.integers(0, 1000), st.floats(0.1, 10.0))
def test_scaling_covariance(seed, c):
    # features scaled by c and C by 1/c^2 give w/c, hence identical orderings
    Xp, Xn = _instance(seed, n=30, d=4)
    a = train_rank_svm((Xp, Xn), C=1.0, tol=1e-7)
    b = train_rank_svm((c * Xp, c * Xn), C=1.0 / c**2, tol=1e-7)
    np.testing.assert_allclose(b.weights * c, a.weights, rtol=1e-3, atol=1e-4)
    test = np.random.default_rng(seed + 1).standard_normal((20, 4))
    sa, sb = svm_score(a, test), svm_score(b, c * test)
    clear = np.abs(sa[:, None] - sa[None, :]) > 1e-2
    assert np.all((np.sign(sa[:, None] - sa[None, :]) == np.sign(sb[:, None] - sb[None, :]))[clear])


def test_deterministic():
    Xp, Xn = _instance(4)
    a, b = train_rank_svm((Xp, Xn), C=1.0, seed=3), train_rank_svm((Xp, Xn), C=1.0, seed=3)
    np.testing.assert_array_equal(a.weights, b.weights)


# ---------------------------------------------------------------------------
# residual


def test_residual_identity_reproduces_generic():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((10, 4))
    generic = rng.standard_normal(10)
    m = ResidualModel(LinearModel(np.array([0, 0, 0, 0, 1.0])), 0.3, 2.0)
    np.testing.assert_array_equal(np.argsort(-m.score(S, generic)), np.argsort(-generic))


def test_residual_learns_shared_axis():
    rng = np.random.default_rng(1)
    n = 30
    pos = rng.standard_normal((n, 3)) * 0.3
    pos[:, 1] += 2.0
    neg = rng.standard_normal((n, 3)) * 0.3
    model = train_residual(pos, neg, rng.standard_normal(n), rng.standard_normal(n), C=100.0)
    assert model.linear.dim == 4
    assert model.linear.weights[1] > 0
    assert model.linear.weights[1] == max(model.linear.weights, key=abs)
    assert pair_accuracy(model.linear, (np.hstack([pos, np.zeros((n, 1))]), np.hstack([neg, np.zeros((n, 1))]))) == 1.0


def test_residual_no_pairs_returns_none():
    assert train_residual(np.zeros((0, 3)), np.zeros((0, 3)), [], []) is None


def test_residual_standardizes_generic_scores():
    rng = np.random.default_rng(2)
    pos, neg = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    gp, gn = rng.normal(10, 3, 5), rng.normal(10, 3, 5)
    m = train_residual(pos, neg, gp, gn)
    pool = np.concatenate([gp, gn])
    assert m.score_mean == pytest.approx(pool.mean())
    assert m.score_std == pytest.approx(pool.std())


# ---------------------------------------------------------------------------
# checkpoint


def test_checkpoint_roundtrip(tmp_path):
    m = LinearModel(np.array([0.1, -2.5, 3.25]), 0.75)
    save_linear(m, tmp_path / "m.phdsvm")
    raw = (tmp_path / "m.phdsvm").read_bytes()
    assert raw[:8] == b"PHDSVM01" and len(raw) == 8 + 4 + 3 * 8 + 8
    back = load_linear(tmp_path / "m.phdsvm")
    np.testing.assert_array_equal(back.weights, m.weights)
    assert back.bias == 0.75
    (tmp_path / "bad").write_bytes(b"nope" * 4)
    with pytest.raises(ValueError):
        load_linear(tmp_path / "bad")
