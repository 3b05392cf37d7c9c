"""Independent reference implementations used as test oracles.

Everything here is plain Python or numpy written from the definitions, with
no calls into the package under test.
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np


def topk_by_sort(values: Sequence[float], k: int) -> List[int]:
    """Indices of the k largest values; equal values keep ascending index order."""
    return sorted(range(len(values)), key=lambda i: (-values[i], i))[:k]


def softmax(row: Sequence[float]) -> np.ndarray:
    x = np.asarray(row, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    c = sum(x * y for x, y in zip(a, b)) / (na * nb)
    return max(-1.0, min(1.0, c))


def neighbors_by_sort(query: np.ndarray, patches: np.ndarray, k: int) -> List[int]:
    sims = [cosine(query, p) for p in patches]
    return topk_by_sort(sims, k)


def brute_force_cmc_map(
    dist: np.ndarray,
    q_labels: Sequence[int],
    g_labels: Sequence[int],
    q_cams: Sequence[int],
    g_cams: Sequence[int],
    rule: bool = True,
) -> Tuple[List[float], float, int]:
    """CMC curve (length G), mAP and skipped-query count, straight from the definitions."""
    nq, ng = len(q_labels), len(g_labels)
    first_hits = []
    aps = []
    skipped = 0
    for i in range(nq):
        candidates = [
            j for j in range(ng)
            if not (rule and g_labels[j] == q_labels[i] and g_cams[j] == q_cams[i])
        ]
        ranked = sorted(candidates, key=lambda j: (float(dist[i][j]), j))
        relevant = [g_labels[j] == q_labels[i] for j in ranked]
        if not any(relevant):
            skipped += 1
            continue
        precisions = []
        hits = 0
        for pos, rel in enumerate(relevant, start=1):
            if rel:
                hits += 1
                precisions.append(hits / pos)
        aps.append(sum(precisions) / len(precisions))
        first_hits.append(relevant.index(True))
    valid = nq - skipped
    cmc = [sum(1 for f in first_hits if f <= r) / valid if valid else 0.0 for r in range(ng)]
    m = sum(aps) / len(aps) if aps else 0.0
    return cmc, m, skipped


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    a = np.clip(np.asarray(adj, dtype=np.float64), 0.0, 1.0)
    d = a.sum(axis=1)
    n = len(a)
    out = np.zeros_like(a)
    for i in range(n):
        for j in range(n):
            out[i, j] = a[i, j] / math.sqrt(d[i] * d[j])
    return out


def batch_hard_triplet(feats: np.ndarray, labels: Sequence[int], margin: float) -> float:
    b = len(labels)
    total = 0.0
    for a in range(b):
        d = [float(((feats[a] - feats[j]) ** 2).sum()) for j in range(b)]
        pos = max(d[j] for j in range(b) if j != a and labels[j] == labels[a])
        neg = min(d[j] for j in range(b) if labels[j] != labels[a])
        total += max(0.0, pos - neg + margin)
    return total / b
