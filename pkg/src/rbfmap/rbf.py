"""Radial basis mapping block with a learnable Mahalanobis-like metric.

Every spatial feature vector ``f`` (length K) of a channel-last map is
compared against P learnable centers using the quadratic form
``D_k = (f - c_k)^T M (f - c_k)`` with ``M = A A^T``, so M is positive
semi-definite for any A.  M plays the role of the inverse metric directly,
so no matrix is ever inverted.  Output channel k is
``w_k * exp(-beta_k * D_k) + b_k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, _as_tensor, _emit, concat_channels
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class RbfBlockConfig:
    K: int
    P: int = 8
    learn_A: bool = True
    learn_beta: bool = True

    def __post_init__(self):
        if self.K < 1 or self.P < 1:
            raise ConfigError(f"RBF block needs K >= 1 and P >= 1, got K={self.K}, P={self.P}")


@dataclass
class RbfBlockParams:
    A: Parameter
    centers: Parameter
    betas: Parameter
    weights: Parameter
    bias: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.A, self.centers, self.betas, self.weights, self.bias]

    @property
    def K(self) -> int:
        return self.A.shape[0]

    @property
    def P(self) -> int:
        return self.centers.shape[0]


def init_rbf_params(
    config: RbfBlockConfig,
    rng: np.random.Generator,
    prefix: str = "rbf",
    center_std: float = 0.05,
    beta0: float = 0.5,
    weight_std: float = 0.1,
) -> RbfBlockParams:
    K, P = config.K, config.P
    return RbfBlockParams(
        A=Parameter(f"{prefix}.A", np.eye(K), trainable=config.learn_A),
        centers=Parameter(f"{prefix}.centers", rng.normal(0.0, center_std, size=(P, K))),
        betas=Parameter(f"{prefix}.betas", np.full(P, beta0), trainable=config.learn_beta, lower=0.0),
        weights=Parameter(f"{prefix}.weights", rng.normal(0.0, weight_std, size=P)),
        bias=Parameter(f"{prefix}.bias", np.zeros(P)),
    )


def kmeans_init_centers(params: RbfBlockParams, features: np.ndarray, seed: int = 0) -> None:
    """Overwrite the centers with k-means centroids of sampled feature vectors."""
    from scipy.cluster.vq import kmeans2

    vecs = np.asarray(features, dtype=np.float64).reshape(-1, params.K)
    centroids, _ = kmeans2(vecs, params.P, minit="++", seed=seed)
    params.centers.data[...] = centroids


def project_betas(params: RbfBlockParams) -> None:
    """Clamp widths to be nonnegative; negative widths would invert locality."""
    np.maximum(params.betas.data, 0.0, out=params.betas.data)


def metric(A) -> np.ndarray:
    """The PSD matrix ``A A^T`` used inside the quadratic form."""
    A = A.data if isinstance(A, Tensor) else np.asarray(A, dtype=np.float64)
    return A @ A.T


def mahalanobis_distance(f, c, M) -> float:
    f, c, M = (np.asarray(v, dtype=np.float64) for v in (f, c, M))
    if f.shape != c.shape or M.shape != (f.size, f.size):
        raise DimensionError(
            f"mahalanobis_distance: f{f.shape}, c{c.shape}, M{M.shape} do not agree"
        )
    d = f - c
    return max(float(d @ M @ d), 0.0)


def rbf_activation(D, beta):
    return np.exp(-np.asarray(beta) * np.asarray(D))


def _pairwise_distances(X: np.ndarray, C: np.ndarray, M: np.ndarray) -> np.ndarray:
    XM = X @ M
    xmx = np.einsum("lk,lk->l", XM, X)
    cmc = np.einsum("pk,pk->p", C @ M, C)
    D = xmx[:, None] - 2.0 * XM @ C.T + cmc[None, :]
    return np.maximum(D, 0.0)


def rbf_block_forward(features: Tensor, params: RbfBlockParams) -> Tensor:
    """Map (N,H,W,K) features to (N,H,W,P) radial basis responses."""
    features = _as_tensor(features)
    K, P = params.K, params.P
    if features.shape[-1] != K:
        raise DimensionError(
            f"rbf block expects {K} input channels, got {features.shape[-1]}"
        )
    lead = features.shape[:-1]
    X = features.data.reshape(-1, K)
    A = params.A.data
    M = A @ A.T
    C = params.centers.data
    beta = params.betas.data
    w = params.weights.data

    D = _pairwise_distances(X, C, M)
    phi = np.exp(-beta * D)
    out = (w * phi + params.bias.data).reshape(*lead, P)

    def backward(g, needs):
        G = g.reshape(-1, P)
        dphi = G * w
        E = -beta * phi * dphi  # dL/dD
        row = E.sum(axis=1)
        col = E.sum(axis=0)
        dX = dA = dC = dbeta = dw = db = None
        if needs[0]:
            dX = (2.0 * (X * row[:, None] - E @ C) @ M).reshape(features.shape)
        if needs[1]:
            XtE_C = X.T @ (E @ C)
            dM = (X.T * row) @ X - XtE_C - XtE_C.T + (C.T * col) @ C
            dA = (dM + dM.T) @ A
        if needs[2]:
            dC = -2.0 * (E.T @ X - C * col[:, None]) @ M
        if needs[3]:
            dbeta = -(D * phi * dphi).sum(axis=0)
        if needs[4]:
            dw = (G * phi).sum(axis=0)
        if needs[5]:
            db = G.sum(axis=0)
        return dX, dA, dC, dbeta, dw, db

    inputs = (features, params.A, params.centers, params.betas, params.weights, params.bias)
    return _emit("rbf_map", inputs, out, backward)


def rbf_layer_output(features: Tensor, params: RbfBlockParams) -> Tensor:
    """Mapped channels followed by the untouched input channels: ``[g(f), f]``."""
    return concat_channels(rbf_block_forward(features, params), features)
