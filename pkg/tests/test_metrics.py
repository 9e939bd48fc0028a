import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ch_oracle, hc_oracle, nmi_oracle, random_instance, silhouette_oracle
from rbfmap.errors import ContractError
from rbfmap.metrics import (
    accuracy,
    calinski_harabasz,
    homogeneity_completeness,
    mutual_info_score,
    pca_project,
    separability,
    silhouette,
)


# -- accuracy ----------------------------------------------------------------

def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75
    with pytest.raises(ContractError):
        accuracy([], [])


# -- silhouette / CH -----------------------------------------------------------

def test_silhouette_hand_example():
    assert silhouette(np.array([[0.0], [0.0], [10.0], [10.0]]), [0, 0, 1, 1]) == 1.0


def test_silhouette_identical_points_is_zero():
    assert silhouette(np.zeros((4, 3)), [0, 0, 1, 1]) == 0.0


def test_silhouette_one_class_errors():
    with pytest.raises(ContractError):
        silhouette(np.zeros((4, 2)), [1, 1, 1, 1])


def test_ch_hand_example():
    assert calinski_harabasz(np.array([[-1.0], [1.0], [9.0], [11.0]]), [0, 0, 1, 1]) == 50.0


def test_ch_zero_within_dispersion_warns():
    with pytest.warns(RuntimeWarning):
        assert calinski_harabasz(np.array([[0.0], [0.0], [5.0], [5.0]]), [0, 0, 1, 1]) == math.inf


def test_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X, labels = random_instance(rng)
        Xl, ll = X.tolist(), labels.tolist()
        assert abs(silhouette(X, labels) - silhouette_oracle(Xl, ll)) <= 1e-9
        assert abs(calinski_harabasz(X, labels) - ch_oracle(Xl, ll)) <= 1e-9 * max(1.0, ch_oracle(Xl, ll))
        other = rng.integers(0, int(rng.integers(1, 5)), len(labels)).tolist()
        assert abs(mutual_info_score(other, ll) - nmi_oracle(other, ll)) <= 1e-9
        h, c = homogeneity_completeness(other, ll)
        ho, co = hc_oracle(other, ll)
        assert abs(h - ho) <= 1e-9 and abs(c - co) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_geometry_scores_invariant_to_order_rotation_and_scale(seed):
    rng = np.random.default_rng(seed)
    X, labels = random_instance(rng)
    perm = rng.permutation(len(X))
    Q, _ = np.linalg.qr(rng.normal(size=(X.shape[1], X.shape[1])))
    s, ch = silhouette(X, labels), calinski_harabasz(X, labels)
    assert silhouette(X[perm], labels[perm]) == pytest.approx(s, abs=1e-12)
    assert silhouette(X @ Q, labels) == pytest.approx(s, abs=1e-9)
    assert calinski_harabasz(X @ Q, labels) == pytest.approx(ch, rel=1e-9)
    assert calinski_harabasz(2 * X, labels) == pytest.approx(ch, rel=1e-12)
    assert -1 <= s <= 1 and ch >= 0


# -- label scores ----------------------------------------------------------------

def test_nmi_examples():
    assert mutual_info_score([0, 0, 1, 1], [0, 0, 1, 1]) == pytest.approx(1.0, abs=1e-15)
    assert mutual_info_score([0, 0, 0, 0], [1, 1, 1, 1]) == 1.0
    assert mutual_info_score([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        u, v = rng.integers(0, 3, 4).tolist(), rng.integers(0, 3, 4).tolist()
        assert abs(mutual_info_score(u, v) - nmi_oracle(u, v)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=25), st.integers(0, 2 ** 31))
def test_label_scores_relabeling_invariant(u, seed):
    rng = np.random.default_rng(seed)
    v = rng.integers(0, 3, len(u))
    relabel = rng.permutation(10)
    u2 = [int(relabel[a]) + 100 for a in u]
    assert mutual_info_score(u2, v) == pytest.approx(mutual_info_score(u, v), abs=1e-12)
    assert homogeneity_completeness(u2, v) == pytest.approx(homogeneity_completeness(u, v), abs=1e-12)
    for score in (mutual_info_score(u, v), *homogeneity_completeness(u, v)):
        assert 0.0 <= score <= 1.0


def test_homogeneity_completeness_examples():
    assert homogeneity_completeness([0, 0, 1, 1], [0, 0, 1, 1]) == (1.0, 1.0)
    assert homogeneity_completeness([0, 0, 0, 0], [0, 0, 1, 1]) == (0.0, 1.0)
    rng = np.random.default_rng(2)
    a, b = rng.integers(0, 3, 15), rng.integers(0, 4, 15)
    h, c = homogeneity_completeness(a, b)
    assert homogeneity_completeness(b, a) == pytest.approx((c, h), abs=1e-12)


def test_separability_report_fields():
    rng = np.random.default_rng(3)
    X = np.concatenate([rng.normal(loc=0, size=(10, 3)), rng.normal(loc=5, size=(10, 3))])
    y = np.repeat([0, 1], 10)
    rep = separability(X, y, y)
    assert rep.silhouette > 0.5 and rep.mutual_info == pytest.approx(1.0)
    assert set(rep.to_dict()) == {"silhouette", "calinski_harabasz", "mutual_info", "homogeneity", "completeness"}


# -- PCA -----------------------------------------------------------------------

def test_pca_collinear():
    t = np.linspace(-1, 1, 9)
    X = np.outer(t, [1.0, 2.0, -1.0]) + 3.0
    _, ratios = pca_project(X)
    assert ratios[0] == pytest.approx(1.0, abs=1e-12) and ratios[1] == pytest.approx(0.0, abs=1e-12)


def test_pca_preserves_distances_of_2d_data():
    X = np.random.default_rng(4).normal(size=(15, 2))
    proj, ratios = pca_project(X)
    d = lambda Z: np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    np.testing.assert_allclose(d(proj), d(X), atol=1e-10)
    assert ratios.sum() == pytest.approx(1.0)


def test_pca_matches_dense_eigensolve_oracle():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(30, 4)) @ rng.normal(size=(4, 4))
    proj, ratios = pca_project(X, 2)
    Xc = X - X.mean(axis=0)
    cov = np.zeros((4, 4))
    for row in Xc:
        cov += np.outer(row, row)
    cov /= len(X)
    vals, vecs = np.linalg.eig(cov)  # general solver, independent of eigh
    order = np.argsort(vals.real)[::-1]
    vals, vecs = vals.real[order], vecs.real[:, order]
    for j in range(2):
        v = vecs[:, j]
        if v[np.flatnonzero(np.abs(v) > 1e-12)[0]] < 0:
            v = -v
        np.testing.assert_allclose(proj[:, j], Xc @ v, atol=1e-8)
    np.testing.assert_allclose(ratios, vals[:2] / vals.sum(), atol=1e-8)


def test_pca_zero_variance():
    proj, ratios = pca_project(np.ones((5, 3)))
    assert not proj.any() and not ratios.any()
