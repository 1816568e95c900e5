"""Exhaustive Hamming ranking and retrieval metrics.

An item is relevant to a query when the two share at least one label.
Rankings sort by Hamming distance with ties broken by database index, so
every metric here is deterministic.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RetrievalResult:
    query_index: int
    ranking: np.ndarray
    distances: np.ndarray
    relevance: np.ndarray | None = None


def _codes(a):
    a = getattr(a, "values", a)
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def hamming_distance(a, b) -> int:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"code lengths differ: {a.size} vs {b.size}")
    return int(np.count_nonzero(a != b))


def hamming_matrix(query_codes, db_codes) -> np.ndarray:
    """Pairwise distances (p, N) between query (q, p) and database (q, N) codes."""
    Q = _codes(query_codes)
    D = _codes(db_codes)
    if Q.shape[0] != D.shape[0]:
        raise ValueError(f"code lengths differ: {Q.shape[0]} vs {D.shape[0]}")
    # Exact for +-1 entries: inner product = q - 2 * distance.
    return np.rint(0.5 * (Q.shape[0] - Q.T @ D)).astype(np.int64)


def relevance_matrix(query_labels, db_labels) -> np.ndarray:
    Lq = np.asarray(getattr(query_labels, "values", query_labels), dtype=np.float64)
    Ld = np.asarray(getattr(db_labels, "values", db_labels), dtype=np.float64)
    if Lq.shape[0] != Ld.shape[0]:
        raise ValueError(f"label dimensions differ: {Lq.shape[0]} vs {Ld.shape[0]}")
    return (Lq.T @ Ld) > 0


def rank(query_code, db_codes, query_index=0) -> RetrievalResult:
    D = _codes(db_codes)
    if D.shape[1] == 0:
        return RetrievalResult(query_index, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    dist = hamming_matrix(np.asarray(query_code, dtype=np.float64).reshape(-1, 1), D)[0]
    order = np.argsort(dist, kind="stable")
    return RetrievalResult(query_index, order, dist[order])


def average_precision(relevance, cutoff=None) -> float:
    """AP of one ranked relevance list.

    Mean over relevant ranks ``r`` of precision at ``r``. With ``cutoff`` only
    the top ``cutoff`` ranks count and the mean runs over the relevant items
    found there. No relevant item gives 0.
    """
    rel = np.asarray(relevance, dtype=bool)
    if cutoff is not None:
        rel = rel[:cutoff]
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(np.mean(precision_at_hits))


def _ranked_relevance(query_codes, db_codes, query_labels, db_labels, exclude_self=False):
    dist = hamming_matrix(query_codes, db_codes)
    rel = relevance_matrix(query_labels, db_labels)
    if dist.shape != rel.shape:
        raise ValueError(
            f"{dist.shape[0]} query codes / {dist.shape[1]} db codes do not match "
            f"{rel.shape[0]} query labels / {rel.shape[1]} db labels"
        )
    if exclude_self:
        if dist.shape[0] != dist.shape[1]:
            raise ValueError("exclude_self needs identical query and database sets")
        big = np.iinfo(np.int64).max
        np.fill_diagonal(dist, big)
        np.fill_diagonal(rel, False)
    order = np.argsort(dist, axis=1, kind="stable")
    ranked = np.take_along_axis(rel, order, axis=1)
    if exclude_self:
        ranked = ranked[:, :-1]
    return ranked


def per_query_ap(query_codes, db_codes, query_labels, db_labels, cutoff=None, exclude_self=False):
    ranked = _ranked_relevance(query_codes, db_codes, query_labels, db_labels, exclude_self)
    return np.array([average_precision(row, cutoff) for row in ranked])


def mean_ap(query_codes, db_codes, query_labels, db_labels, cutoff=None, exclude_self=False) -> float:
    ap = per_query_ap(query_codes, db_codes, query_labels, db_labels, cutoff, exclude_self)
    return float(np.mean(ap)) if ap.size else 0.0


def _clamp_k(K, size):
    if K > size:
        warnings.warn(f"K={K} exceeds database size {size}; clamping", stacklevel=3)
        return size
    return K


def top_k_precision(query_codes, db_codes, query_labels, db_labels, K=50, exclude_self=False) -> float:
    ranked = _ranked_relevance(query_codes, db_codes, query_labels, db_labels, exclude_self)
    K = _clamp_k(K, ranked.shape[1])
    if K == 0 or ranked.shape[0] == 0:
        return 0.0
    return float(np.mean(ranked[:, :K].sum(axis=1) / K))


def pr_curve(query_codes, db_codes, query_labels, db_labels, exclude_self=False):
    """Precision and recall at every Hamming radius 0..q.

    Returns rows ``(radius, precision, recall)`` averaged over queries. A
    query retrieving nothing at a radius is left out of that radius's
    precision mean (precision 0 if no query retrieves anything); a query with
    no relevant items has recall 0.
    """
    q = _codes(query_codes).shape[0]
    dist = hamming_matrix(query_codes, db_codes)
    rel = relevance_matrix(query_labels, db_labels)
    if dist.shape != rel.shape:
        raise ValueError("code and label counts do not match")
    if exclude_self:
        mask = ~np.eye(dist.shape[0], dtype=bool)
    else:
        mask = np.ones(dist.shape, dtype=bool)
    rel = rel & mask
    total_rel = rel.sum(axis=1)
    rows = []
    for radius in range(q + 1):
        hit = (dist <= radius) & mask
        retrieved = hit.sum(axis=1)
        rel_retrieved = (hit & rel).sum(axis=1)
        some = retrieved > 0
        precision = float(np.mean(rel_retrieved[some] / retrieved[some])) if some.any() else 0.0
        recall_q = np.divide(rel_retrieved, total_rel, out=np.zeros(len(total_rel)), where=total_rel > 0)
        recall = float(np.mean(recall_q)) if recall_q.size else 0.0
        rows.append((radius, precision, recall))
    return rows
