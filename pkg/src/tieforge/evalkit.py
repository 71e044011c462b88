"""Held-out evaluation, ties-recovery scoring and embedding projection."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import NA
from .trainer import predict_bag, relation_matrix


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    bag_id: str
    relation: int
    score: float
    is_correct: bool


@dataclass
class PrCurve:
    points: list       # (precision, recall) per ranked prefix
    thresholds: list   # score at each prefix
    auc: float


def collect_predictions(test_bags, params, graph, config):
    H = relation_matrix(params, graph, config)
    records = []
    for bag in test_bags:
        probs = predict_bag(bag, params, graph, config, H=H)
        for r in range(1, len(probs)):
            records.append(PredictionRecord(bag.bag_id, r, float(probs[r]), r in bag.labels))
    return records


def rank(records):
    return sorted(records, key=lambda x: (-x.score, x.bag_id, x.relation))


def pr_curve(records, total_gold=None) -> PrCurve:
    """Precision/recall at every prefix of the score ranking.

    ``total_gold`` defaults to the number of correct records, i.e. every gold
    non-NA fact of the test set has a record.  The area is trapezoidal over
    recall, starting from recall 0 at the first point's precision.
    """
    if not records:
        raise EvaluationError("no prediction records")
    ranked = rank(records)
    if total_gold is None:
        total_gold = sum(r.is_correct for r in ranked)
    if total_gold <= 0:
        raise EvaluationError("no gold facts to compute recall against")
    hits = np.cumsum([r.is_correct for r in ranked])
    n = np.arange(1, len(ranked) + 1)
    precision = hits / n
    recall = hits / total_gold
    prev_r = np.concatenate([[0.0], recall[:-1]])
    prev_p = np.concatenate([[precision[0]], precision[:-1]])
    auc = float(np.sum((recall - prev_r) * (precision + prev_p) / 2.0))
    return PrCurve(list(zip(precision.tolist(), recall.tolist())), [r.score for r in ranked], auc)


def p_at_n(records, n):
    if n < 1 or n > len(records):
        raise ValueError(f"p_at_n: n={n} outside 1..{len(records)}")
    return sum(r.is_correct for r in rank(records)[:n]) / n


def write_pr_csv(curve: PrCurve, path):
    lines = ["threshold,precision,recall"]
    lines += [f"{t!r},{p!r},{r!r}" for t, (p, r) in zip(curve.thresholds, curve.points)]
    lines.append(f"auc={curve.auc!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- topology

def cosine_matrix(H):
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    norms = np.linalg.norm(H, axis=1)
    norms[norms == 0] = 1.0
    X = H / norms[:, None]
    return X @ X.T


def _mean_pairs(C, pairs):
    pairs = list(pairs)
    return float(np.mean([C[i, j] for i, j in pairs])) if pairs else float("nan")


def masked_mean_cosine(H, U):
    """Mean cosine over off-diagonal pairs marked in the exclusion mask."""
    C = cosine_matrix(H)
    U = np.asarray(U)
    mask = (U > 0) & ~np.eye(len(U), dtype=bool)
    return float(C[mask].mean()) if mask.any() else float("nan")


@dataclass
class RecoveryReport:
    implication_cosine: float
    exclusion_cosine: float
    margin: float
    na_centrality: float
    mask_cosine: float

    def to_text(self):
        return "".join(f"{k}={v!r}\n" for k, v in vars(self).items())


def ties_recovery_report(H, ties, U=None, P_hat=None) -> RecoveryReport:
    C = cosine_matrix(H)
    imp = _mean_pairs(C, [(i, j) for i, j, _ in ties.implications])
    exc = _mean_pairs(C, ties.exclusions)
    na = _mean_pairs(C, [(NA, j) for j in range(len(C)) if j != NA])
    mask = masked_mean_cosine(H, U) if U is not None else float("nan")
    return RecoveryReport(imp, exc, imp - exc, na, mask)


def _power_top(A, rng, tol=1e-9, max_iter=10000):
    v = rng.standard_normal(len(A))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, v
        w /= nw
        new_lam = float(w @ A @ w)
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)) and np.linalg.norm(w - v) < 1e-6:
            return new_lam, w
        v, lam = w, new_lam
    return lam, v


def project_embeddings(H, seed=0):
    """Coordinates of mean-centred rows on the top two principal axes.

    Eigenvectors of the k x k Gram matrix come from power iteration with
    deflation; coordinates are u * sqrt(eigenvalue).
    """
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    if H.shape[0] < 2:
        raise ValueError("projection needs at least two relations")
    X = H - H.mean(axis=0)
    G = X @ X.T
    rng = np.random.default_rng(seed)
    coords = np.zeros((len(X), 2))
    for c in range(2):
        lam, u = _power_top(G, rng)
        lam = max(lam, 0.0)
        # fix the sign so repeated runs agree
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        coords[:, c] = u * np.sqrt(lam)
        G = G - lam * np.outer(u, u)
    return coords


def write_projection(coords, names, path):
    Path(path).write_text("".join(f"{n}\t{x!r}\t{y!r}\n" for n, (x, y) in zip(names, coords)),
                          encoding="utf-8")
