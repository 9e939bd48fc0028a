"""Accuracy, cluster separability scores and a PCA projection for feature maps."""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError, DimensionError

MI_VARIANT = "normalized mutual information, geometric mean of entropies, natural log"


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise DimensionError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def _prepare(features, labels):
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    labels = np.asarray(labels)
    if len(X) != len(labels):
        raise DimensionError(f"{len(X)} feature rows but {len(labels)} labels")
    if len(X) < 2:
        raise ContractError("need at least two samples")
    classes, idx = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ContractError("separability needs at least two distinct labels")
    return X, idx, len(classes)


def silhouette(features, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton classes score 0, as do points with a = b = 0.
    """
    X, idx, k = _prepare(features, labels)
    dist = cdist(X, X)
    counts = np.bincount(idx, minlength=k)
    onehot = np.zeros((len(X), k))
    onehot[np.arange(len(X)), idx] = 1.0
    sums = dist @ onehot  # (N, k): total distance from each point to each class
    own = counts[idx]
    a = np.divide(sums[np.arange(len(X)), idx], own - 1, out=np.zeros(len(X)), where=own > 1)
    means = sums / counts
    means[np.arange(len(X)), idx] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros(len(X)), where=denom > 0)
    s[own == 1] = 0.0
    return float(s.mean())


def calinski_harabasz(features, labels) -> float:
    """Between/within dispersion ratio, each normalized by its degrees of freedom."""
    X, idx, k = _prepare(features, labels)
    n = len(X)
    if n <= k:
        raise ContractError(f"need more samples ({n}) than classes ({k})")
    mean = X.mean(axis=0)
    between = within = 0.0
    for c in range(k):
        members = X[idx == c]
        centroid = members.mean(axis=0)
        between += len(members) * float(((centroid - mean) ** 2).sum())
        within += float(((members - centroid) ** 2).sum())
    if within == 0.0:
        warnings.warn("zero within-class dispersion; Calinski-Harabasz is +inf", RuntimeWarning)
        return float("inf")
    return (between / (k - 1)) / (within / (n - k))


def contingency(a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"labelings have shapes {a.shape} and {b.shape}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    return table


def _entropy(counts) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_info(table) -> float:
    n = table.sum()
    pij = table / n
    outer = np.outer(table.sum(axis=1), table.sum(axis=0)) / n ** 2
    nz = pij > 0
    return float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())


def mutual_info_score(cluster_labels, class_labels) -> float:
    """Normalized mutual information ``I(U;V) / sqrt(H(U) H(V))``."""
    if len(cluster_labels) < 2:
        raise ContractError("need at least two samples")
    table = contingency(cluster_labels, class_labels)
    hu, hv = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if hu == 0.0 and hv == 0.0:
        return 1.0
    if hu == 0.0 or hv == 0.0:
        return 0.0
    return float(min(max(_mutual_info(table) / np.sqrt(hu * hv), 0.0), 1.0))


def homogeneity_completeness(cluster_labels, class_labels) -> tuple[float, float]:
    """(homogeneity, completeness) of a clustering against reference classes."""
    table = contingency(class_labels, cluster_labels)  # rows: classes C, cols: clusters K
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    mi = _mutual_info(table)
    # H(C|K) = H(C) - I, H(K|C) = H(K) - I
    homogeneity = 1.0 if h_c == 0.0 else 1.0 - (h_c - mi) / h_c
    completeness = 1.0 if h_k == 0.0 else 1.0 - (h_k - mi) / h_k
    clip = lambda v: float(min(max(v, 0.0), 1.0))
    return clip(homogeneity), clip(completeness)


@dataclass
class SeparabilityReport:
    silhouette: float
    calinski_harabasz: float
    mutual_info: float
    homogeneity: float
    completeness: float

    def to_dict(self) -> dict:
        return asdict(self)


def separability(features, labels, predictions) -> SeparabilityReport:
    """Geometry scores use true labels as clusters; label scores compare predictions to labels."""
    homo, comp = homogeneity_completeness(predictions, labels)
    return SeparabilityReport(
        silhouette=silhouette(features, labels),
        calinski_harabasz=calinski_harabasz(features, labels),
        mutual_info=mutual_info_score(predictions, labels),
        homogeneity=homo,
        completeness=comp,
    )


def pca_project(features, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top principal axes.

    Returns the ``(N, dims)`` projection and the explained-variance ratios.
    Each axis is oriented so its first nonzero component is positive.
    """
    X = np.asarray(features, dtype=np.float64)
    X = X.reshape(len(X), -1)
    if len(X) < 2:
        raise ContractError("PCA needs at least two samples")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / len(X)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:dims]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = float(np.clip(np.linalg.eigvalsh(cov), 0.0, None).sum())
    if total <= 0.0:
        return np.zeros((len(X), dims)), np.zeros(dims)
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > 1e-12)
        if nz.size and vecs[nz[0], j] < 0:
            vecs[:, j] = -vecs[:, j]
    proj = Xc @ vecs
    if proj.shape[1] < dims:
        pad = dims - proj.shape[1]
        proj = np.hstack([proj, np.zeros((len(X), pad))])
        vals = np.concatenate([vals, np.zeros(pad)])
    return proj, vals / total
