"""Relation co-occurrence graph, attractive propagation and repulsive penalty."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numcore as nc


@dataclass(frozen=True)
class TiesGraph:
    k: int
    N: np.ndarray
    M: np.ndarray
    P_hat: np.ndarray
    U: np.ndarray
    theta: float = 0.18

    @classmethod
    def from_bags(cls, bags, k, theta=0.18, renormalize=False):
        M, N = build_cooccurrence(bags, k)
        return cls.from_counts(M, N, theta, renormalize)

    @classmethod
    def from_counts(cls, M, N, theta=0.18, renormalize=False):
        M = np.asarray(M, dtype=np.int64)
        N = np.asarray(N, dtype=np.int64)
        return cls(len(N), N, M, build_transition(M, N, theta, renormalize), build_exclusion(M), theta)

    def without_propagation(self):
        """Same counts and exclusion mask, identity transition matrix."""
        return replace(self, P_hat=np.eye(self.k))

    def edge_count(self):
        off = ~np.eye(self.k, dtype=bool)
        return int(np.count_nonzero(np.triu(self.M * off)))

    def filtered_edge_count(self):
        off = ~np.eye(self.k, dtype=bool)
        return int(np.count_nonzero(self.P_hat * off))


def build_cooccurrence(bags, k):
    """Counts over unique entity pairs: N_i pairs with i, M_ij pairs with both."""
    labels_by_pair = {}
    for bag in bags:
        labels_by_pair.setdefault((bag.head, bag.tail), set()).update(bag.labels)
    Y = np.zeros((len(labels_by_pair), k), dtype=np.int64)
    for row, labels in enumerate(labels_by_pair.values()):
        Y[row, sorted(labels)] = 1
    M = Y.T @ Y
    return M, np.diag(M).copy()


def build_transition(M, N, theta=0.18, renormalize=False):
    if not 0.0 <= theta < 1.0:
        raise nc.ConfigError(f"theta must lie in [0, 1), got {theta}")
    M = np.asarray(M, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64)
    P = np.zeros_like(M)
    seen = N > 0
    P[seen] = M[seen] / N[seen, None]
    P[P < theta] = 0.0
    np.fill_diagonal(P, 1.0)
    if renormalize:
        P /= P.sum(axis=1, keepdims=True)
    return P


def build_exclusion(M):
    U = (np.asarray(M) == 0).astype(np.float64)
    np.fill_diagonal(U, 1.0)
    return U


@dataclass
class GcnParams:
    H0: nc.Tensor
    W: list = field(default_factory=list)

    def tensors(self):
        return [self.H0, *self.W]


def gcn_forward(P_hat, params: GcnParams, act="tanh") -> nc.Tensor:
    """H^l = f(P_hat H^{l-1} W^{l-1}) for each layer."""
    if not params.W:
        raise nc.DimensionError("gcn_forward needs at least one layer")
    k, d = params.H0.shape
    P_hat = np.asarray(P_hat, dtype=params.H0.values.dtype)
    if P_hat.shape != (k, k):
        raise nc.DimensionError(f"transition matrix {P_hat.shape} does not match H0 {params.H0.shape}")
    f = nc.activation(act)
    P = nc.Tensor(P_hat)
    H = params.H0
    for W in params.W:
        if W.shape != (d, d):
            raise nc.DimensionError(f"GCN weight {W.shape} should be {(d, d)}")
        H = f(nc.matmul(nc.matmul(P, H), W))
    return H


def exclusion_penalty(H: nc.Tensor, U) -> nc.Tensor:
    """Masked dot-product similarity summed over pairs and scaled by 1/(k*k*d)."""
    k, d = H.shape
    U = np.asarray(U, dtype=H.values.dtype)
    if U.shape != (k, k):
        raise nc.DimensionError(f"exclusion mask {U.shape} does not match H {H.shape}")
    sim = nc.matmul(H, nc.transpose(H))
    return nc.scale(nc.sum_all(nc.mul(sim, nc.Tensor(U))), 1.0 / (k * k * d))
