"""Evaluation and reward primitives.

Noun-sequence alignment (global DP with cosine match rewards and -1 gaps),
assignment-based soft IoU over noun sets, CIDEr-D, a deterministic Hungarian
solver and rank statistics. Everything here is pure and reentrant.

Word vectors are synthetic: per-class orthonormal centroids with small
within-class spread, so same-class nouns have cosine > 0.9 and cross-class
nouns stay below 0.3 by construction.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .errors import MetricError, UsageError


class NounEmbeddingTable:
    """Map from noun token to a unit-norm embedding vector."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        self.vectors = {}
        for noun, v in vectors.items():
            v = np.asarray(v, dtype=np.float64)
            n = np.linalg.norm(v)
            if not math.isclose(n, 1.0, rel_tol=1e-9, abs_tol=1e-9):
                raise MetricError(f"embedding for {noun!r} is not unit norm (|v|={n})")
            self.vectors[noun] = v

    def __contains__(self, noun):
        return noun in self.vectors

    def vector(self, noun: str) -> np.ndarray:
        try:
            return self.vectors[noun]
        except KeyError:
            raise MetricError(f"noun {noun!r} missing from embedding table") from None

    def cosine(self, a: str, b: str) -> float:
        return float(self.vector(a) @ self.vector(b))

    @classmethod
    def build(cls, classes: dict[str, list[str]], dim: int, seed: int, spread: float = 0.1):
        """Build per-class synthetic embeddings.

        Class centroids are rows of a random orthonormal matrix; each noun is
        its class centroid tilted by `spread` towards a random orthogonal
        direction. Returns (table, centroid dict). Requires len(classes) <= dim.
        """
        names = list(classes)
        if len(names) > dim:
            raise MetricError(
                f"{len(names)} classes do not fit in {dim}-d orthonormal centroids"
            )
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        centroids = {name: q[i] for i, name in enumerate(names)}
        vectors = {}
        for name in names:
            c = centroids[name]
            for noun in classes[name]:
                u = rng.standard_normal(dim)
                u -= (u @ c) * c
                u /= np.linalg.norm(u)
                vectors[noun] = math.sqrt(1.0 - spread**2) * c + spread * u
        return cls(vectors), centroids


# ------------------------------------------------------- sequence alignment

GAP_PENALTY = -1.0


def nw_align(nouns_a, nouns_b, table: NounEmbeddingTable):
    """Optimal global alignment between two noun lists.

    Match reward is the embedding cosine, a gap scores -1. Returns one optimal
    alignment as a list of (index_a | None, index_b | None) pairs plus the raw
    score. Backtrace prefers match, then gap-in-a, then gap-in-b.
    """
    na, nb = len(nouns_a), len(nouns_b)
    sim = np.empty((na, nb))
    for i, x in enumerate(nouns_a):
        for j, y in enumerate(nouns_b):
            sim[i, j] = table.cosine(x, y)

    dp = np.empty((na + 1, nb + 1))
    dp[0, :] = GAP_PENALTY * np.arange(nb + 1)
    dp[:, 0] = GAP_PENALTY * np.arange(na + 1)
    for i in range(1, na + 1):
        for j in range(1, nb + 1):
            dp[i, j] = max(
                dp[i - 1, j - 1] + sim[i - 1, j - 1],
                dp[i, j - 1] + GAP_PENALTY,
                dp[i - 1, j] + GAP_PENALTY,
            )

    alignment = []
    i, j = na, nb
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + sim[i - 1, j - 1]:
            alignment.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and dp[i, j] == dp[i, j - 1] + GAP_PENALTY:
            alignment.append((None, j - 1))
            j -= 1
        else:
            alignment.append((i - 1, None))
            i -= 1
    alignment.reverse()
    return alignment, float(dp[na, nb])


def nw_score(nouns_a, nouns_b, table: NounEmbeddingTable) -> float:
    """Alignment score normalized by the longer noun list; in [-1, 1].

    Two empty lists score 1.0 (vacuously perfect alignment).
    """
    if not nouns_a and not nouns_b:
        return 1.0
    _, raw = nw_align(nouns_a, nouns_b, table)
    return raw / max(len(nouns_a), len(nouns_b))


# ------------------------------------------------------------- assignment


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost assignment of a finite rectangular matrix.

    The matrix is padded to square with zeros internally; only pairs over real
    rows and columns are returned, sorted by row. Ties break deterministically
    towards the lowest row index (rows are processed in order).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise UsageError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if cost.size and not np.all(np.isfinite(cost)):
        raise UsageError("cost matrix contains non-finite entries")
    m, n = cost.shape
    if m == 0 or n == 0:
        return []
    size = max(m, n)
    a = np.zeros((size, size))
    a[:m, :n] = cost

    # shortest augmenting path formulation with potentials, 1-indexed
    inf = float("inf")
    u = [0.0] * (size + 1)
    v = [0.0] * (size + 1)
    p = [0] * (size + 1)  # p[j] = row matched to column j
    way = [0] * (size + 1)
    for i in range(1, size + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (size + 1)
        used = [False] * (size + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, size + 1):
                if used[j]:
                    continue
                cur = a[i0 - 1][j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(size + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = [(p[j] - 1, j - 1) for j in range(1, size + 1) if p[j] != 0]
    return sorted((i, j) for i, j in pairs if i < m and j < n)


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in pairs))


def soft_iou(nouns_pred, nouns_gt, table: NounEmbeddingTable) -> float:
    """Assignment-based intersection-over-union between two noun sets.

    Profits are cosines clamped to [0, 1], so the intersection never exceeds
    the smaller set and the ratio stays in [0, 1]. Two empty sets score 1.0.
    """
    na, nb = len(nouns_pred), len(nouns_gt)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    profit = np.empty((na, nb))
    for i, x in enumerate(nouns_pred):
        for j, y in enumerate(nouns_gt):
            profit[i, j] = min(max(table.cosine(x, y), 0.0), 1.0)
    pairs = hungarian(-profit)
    inter = float(sum(profit[i, j] for i, j in pairs))
    return inter / (na + nb - inter)


# ------------------------------------------------------------------ CIDEr-D


@dataclass
class CiderStats:
    """Document frequencies of 1..4-grams over an evaluation corpus."""

    doc_freq: dict
    num_docs: int


def _ngram_counts(tokens, max_n=4):
    counts = defaultdict(int)
    for n in range(1, max_n + 1):
        for k in range(len(tokens) - n + 1):
            counts[tuple(tokens[k : k + n])] += 1
    return counts


def cider_stats(ref_groups: list[list[list]]) -> CiderStats:
    """Build n-gram document frequencies; one document per reference group."""
    doc_freq = defaultdict(int)
    for refs in ref_groups:
        seen = set()
        for ref in refs:
            seen.update(_ngram_counts(ref).keys())
        for ngram in seen:
            doc_freq[ngram] += 1
    return CiderStats(doc_freq=dict(doc_freq), num_docs=len(ref_groups))


def _tfidf_vec(tokens, stats: CiderStats, max_n=4):
    counts = _ngram_counts(tokens, max_n)
    log_docs = math.log(max(stats.num_docs, 1))
    vecs = [defaultdict(float) for _ in range(max_n)]
    norms = [0.0] * max_n
    for ngram, tf in counts.items():
        idf = log_docs - math.log(max(stats.doc_freq.get(ngram, 0), 1.0))
        n = len(ngram) - 1
        vecs[n][ngram] = tf * idf
        norms[n] += (tf * idf) ** 2
    return vecs, [math.sqrt(x) for x in norms], len(tokens)


def cider_d(candidate, refs, stats: CiderStats, sigma: float = 6.0, max_n: int = 4) -> float:
    """CIDEr-D of a candidate against its references; in [0, 10].

    Clipped TF-IDF similarity per n-gram order, a gaussian length penalty and
    a x10 scaling, averaged over n and over references.
    """
    if not refs:
        raise UsageError("cider_d requires at least one reference")
    if not candidate:
        return 0.0
    cvec, cnorm, clen = _tfidf_vec(candidate, stats, max_n)
    total = 0.0
    for ref in refs:
        rvec, rnorm, rlen = _tfidf_vec(ref, stats, max_n)
        penalty = math.exp(-((clen - rlen) ** 2) / (2.0 * sigma**2))
        for n in range(max_n):
            if cnorm[n] == 0.0 or rnorm[n] == 0.0:
                continue
            num = 0.0
            for ngram, w in cvec[n].items():
                num += min(w, rvec[n].get(ngram, 0.0)) * rvec[n].get(ngram, 0.0)
            total += penalty * num / (cnorm[n] * rnorm[n])
    return 10.0 * total / (max_n * len(refs))


# ------------------------------------------------------------------- ranking


def kendall_tau(perm_pred, perm_gt) -> float:
    """Tau-a rank correlation between two orderings of the same items."""
    if len(perm_pred) != len(perm_gt):
        raise UsageError(
            f"permutation length mismatch: {len(perm_pred)} vs {len(perm_gt)}"
        )
    if sorted(perm_pred) != sorted(perm_gt):
        raise UsageError("sequences are not permutations of the same items")
    n = len(perm_pred)
    if n < 2:
        return 1.0
    pos_pred = {item: k for k, item in enumerate(perm_pred)}
    pos_gt = {item: k for k, item in enumerate(perm_gt)}
    items = list(perm_gt)
    concordant = discordant = 0
    for i in range(n):
        for j in range(i + 1, n):
            s = (pos_pred[items[i]] - pos_pred[items[j]]) * (
                pos_gt[items[i]] - pos_gt[items[j]]
            )
            if s > 0:
                concordant += 1
            elif s < 0:
                discordant += 1
    return (concordant - discordant) / (n * (n - 1) / 2)


def ranking_accuracy(batch: list[tuple]) -> float:
    """Fraction of (predicted, ground-truth) ordering pairs matching exactly."""
    if not batch:
        raise UsageError("ranking_accuracy needs a nonempty batch")
    hits = sum(1 for pred, gt in batch if list(pred) == list(gt))
    return hits / len(batch)
