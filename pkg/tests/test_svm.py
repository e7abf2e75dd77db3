import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occluflow.svm import (ClassifierError, Hyper, RegionCVScorer, block_indices, cross_validate, fit_sigmoid,
                           load_model, model_from_bytes, model_to_bytes, predict_proba, project, save_model,
                           sigmoid_proba, solve_dual, sq_dists, stratified_folds, train)

from conftest import blobs


def test_blobs_training_accuracy_matches_centroid_rule():
    X, y = blobs(sep=5.0, seed=1)
    m = train(X, y)
    pred = m.predict(X)
    ca, cb = X[y].mean(0), X[~y].mean(0)
    centroid = ((X - ca) ** 2).sum(1) < ((X - cb) ** 2).sum(1)
    assert np.array_equal(pred, y)
    assert np.array_equal(centroid, pred)


def test_xor_four_points():
    X = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    y = np.array([True, True, False, False])
    m = train(X, y, Hyper(C=10.0), calibrate=False)
    assert np.array_equal(m.predict(X), y)


def test_duplicate_rows_same_sign():
    # duplicating rows doubles the slack penalty, so the optimum is only
    # unchanged when no multiplier sits at the bound: use a hard margin
    X, y = blobs(20, 2, sep=8.0, seed=2)
    a = train(X, y, Hyper(C=100.0), calibrate=False)
    b = train(np.vstack([X, X]), np.concatenate([y, y]), Hyper(C=100.0), calibrate=False)
    assert np.abs(a.dual_coef).max() < 100.0
    g = np.stack(np.meshgrid(np.linspace(-4, 12, 25), np.linspace(-4, 12, 25)), -1).reshape(-1, 2)
    assert np.array_equal(a.predict(g), b.predict(g))


def test_errors():
    X, y = blobs(5, 2)
    with pytest.raises(ClassifierError):
        train(X, np.ones(len(y), dtype=bool))
    bad = X.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ClassifierError):
        train(bad, y)
    m = train(X, y)
    with pytest.raises(ClassifierError):
        m.predict_proba(np.zeros((1, 3)))
    with pytest.raises(ClassifierError):
        Hyper(C=0)
    with pytest.raises(ClassifierError):
        Hyper(gamma=-1.0)


def test_proba_examples():
    X, y = blobs(30, 3, sep=3.0, seed=3)
    m = train(X, y)
    f = m.decision_function(X)
    deep = X[np.argmax(f)]
    assert predict_proba(m, deep)[0] > 0.5
    assert sigmoid_proba(np.array([0.0]), m.calib_a, m.calib_b)[0] == pytest.approx(1 / (1 + np.exp(m.calib_b)))
    assert sigmoid_proba(np.array([0.0]), -2.0, 0.0)[0] == 0.5
    probe = np.random.default_rng(0).normal(1.5, 3.0, (200, 3))
    order = np.argsort(m.decision_function(probe))
    p = m.predict_proba(probe)[order, 0]
    assert m.calib_a < 0
    assert np.all(np.diff(p) >= 0)


def test_proba_pairs_sum_to_one_exactly():
    X, y = blobs(30, 3, sep=2.0, seed=4)
    m = train(X, y)
    probe = np.random.default_rng(1).normal(1.0, 4.0, (2000, 3))
    p = m.predict_proba(probe)
    assert np.all(p[:, 0] + p[:, 1] == 1.0)
    assert np.all((p >= 0) & (p <= 1))


def test_fit_sigmoid_recovers_parameters():
    rng = np.random.default_rng(5)
    f = rng.normal(0, 2, 5000)
    y = rng.random(5000) < 1 / (1 + np.exp(-1.5 * f + 0.3))
    a, b = fit_sigmoid(f, y)
    assert a == pytest.approx(-1.5, abs=0.15)
    assert b == pytest.approx(0.3, abs=0.15)


def test_cv_separable_is_perfect():
    X, y = blobs(30, 4, sep=8.0, seed=6)
    res = cross_validate(X, y, 10)
    assert res.mean == 1.0 and len(res.folds) == 10


def test_cv_permuted_near_chance():
    X, y = blobs(30, 4, sep=8.0, seed=7)
    means = []
    for s in range(10):
        perm = np.random.default_rng(s).permutation(y)
        means.append(cross_validate(X, perm, 10, seed=s).mean)
    assert abs(np.mean(means) - 0.5) <= 0.1


def test_cv_errors():
    X, y = blobs(5, 2)
    with pytest.raises(ClassifierError):
        cross_validate(X, y, 1)
    with pytest.raises(ClassifierError):
        cross_validate(X, y, 7)


def test_leave_one_out_folds():
    labels = ["a"] * 4 + ["b"] * 3
    folds = stratified_folds(labels, 7, 0)
    assert sorted(np.bincount(folds).tolist()) == [1] * 7
    X, y = blobs(4, 2, sep=9.0)
    assert cross_validate(X, y, 8).mean == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from("abc"), min_size=6, max_size=40), st.integers(2, 6), st.integers(0, 1000))
def test_folds_stratified_and_order_free(labels, k, seed):
    ids = [f"s{i:03d}" for i in range(len(labels))]
    folds = stratified_folds(labels, k, seed, ids)
    perm = np.random.default_rng(seed).permutation(len(labels))
    again = stratified_folds([labels[i] for i in perm], k, seed, [ids[i] for i in perm])
    assert np.array_equal(folds[perm], again)
    sizes = np.bincount(folds, minlength=k)
    assert sizes.max() - sizes.min() <= 1 or len(labels) < k
    for c in set(labels):
        per = np.bincount(folds[np.array(labels) == c], minlength=k)
        assert per.max() - per.min() <= 1


def test_shuffled_rows_same_model():
    X, y = blobs(15, 3, sep=2.0, seed=8)
    ids = [f"r{i:02d}" for i in range(len(y))]
    perm = np.random.default_rng(0).permutation(len(y))
    a = train(X, y, ids=ids, seed=4)
    b = train(X[perm], y[perm], ids=[ids[i] for i in perm], seed=4)
    probe = np.random.default_rng(2).normal(1, 2, (50, 3))
    assert np.array_equal(a.predict_proba(probe), b.predict_proba(probe))


def test_dual_feasibility():
    X, y = blobs(25, 3, sep=1.5, seed=9)
    yy = np.where(y, 1.0, -1.0)
    K = np.exp(-0.3 * sq_dists(X, X))
    alpha, rho, it, conv = solve_dual(K, yy, 0.7)
    assert conv
    assert np.all(alpha >= 0) and np.all(alpha <= 0.7 + 1e-12)
    assert abs(alpha @ yy) <= 1e-3


def test_matches_reference_solver():
    from sklearn.svm import SVC

    X, y = blobs(40, 5, sep=1.2, seed=10)
    m = train(X, y, Hyper(C=2.0), calibrate=False)
    Z = (X - m.mean) / m.std
    ref = SVC(C=2.0, gamma=m.gamma, tol=1e-6).fit(Z, np.where(y, 1, -1))
    ours = m.decision_function(X)
    theirs = ref.decision_function(Z)
    assert np.max(np.abs(ours - theirs)) < 2e-2
    clear = np.abs(theirs) > 0.05
    assert np.array_equal(ours[clear] > 0, theirs[clear] > 0)


def test_selected_dims_and_projection():
    rng = np.random.default_rng(11)
    x = rng.random((2, 300))
    assert np.array_equal(project(x, list(range(1, 26))), x)
    assert np.array_equal(project(x[0], [12]), x[0, 132:144])
    assert block_indices([3, 1]).tolist() == list(range(0, 12)) + list(range(24, 36))
    with pytest.raises(ClassifierError):
        block_indices([26])


def test_region_scorer_matches_cv():
    rng = np.random.default_rng(12)
    X = rng.random((40, 36)) * 5
    y = np.arange(40) % 2 == 0
    X[y, 12:24] += 2.0
    ids = [f"q{i:02d}" for i in range(40)]
    sc = RegionCVScorer(X, y, 5, Hyper(), 3, ids, 12, [1, 2, 3])
    for conf in ([1], [2], [1, 2], [1, 2, 3]):
        ref = cross_validate(X, y, 5, Hyper(), 3, ids, selected=block_indices(conf, 12, [1, 2, 3]))
        assert sc.score(conf) == pytest.approx(ref.mean, abs=1e-12)


def test_cv_eval_features():
    X, y = blobs(20, 4, sep=6.0, seed=13)
    same = cross_validate(X, y, 5, X_eval=X)
    assert same.mean == cross_validate(X, y, 5).mean
    flipped = cross_validate(X, y, 5, X_eval=X[:, ::-1] * 0 + X.mean(0))
    assert flipped.mean == pytest.approx(0.5)


def test_model_roundtrip(tmp_path):
    X, y = blobs(15, 6, sep=3.0, seed=14)
    m = train(X, y, Hyper(C=3.0, gamma=0.2), selected=[0, 2, 5])
    save_model(tmp_path / "m.model", m)
    back = load_model(tmp_path / "m.model")
    assert model_to_bytes(back) == model_to_bytes(m)
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    with pytest.raises(ClassifierError):
        model_from_bytes(model_to_bytes(m)[:-8])
    with pytest.raises(ClassifierError):
        model_from_bytes(b"x" * 100)
