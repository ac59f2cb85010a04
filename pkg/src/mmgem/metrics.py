"""Evaluation metric kernels: Recall@K, BLEU@4, CIDEr-D.

Caption metrics operate on pre-tokenized sequences (lists of hashables).
N-gram sums iterate in sorted order so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from collections import Counter


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# retrieval

def recall_at_k(sims, ks):
    """Fraction of queries whose diagonal match ranks in the top k.

    ``sims`` is (Q, C) with ground truth on the index diagonal; ties are
    broken in favor of the lower candidate index.
    """
    import numpy as np

    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] > s.shape[1]:
        raise MetricError(f"similarity matrix {s.shape} needs >= queries "
                          "candidates and diagonal ground truth")
    q, c = s.shape
    for k in ks:
        if not 1 <= k <= c:
            raise MetricError(f"k={k} outside [1, {c}]")
    true = s[np.arange(q), np.arange(q)]
    better = (s > true[:, None]).sum(axis=1)
    tied_before = np.array([(s[i, :i] == true[i]).sum() for i in range(q)])
    ranks = 1 + better + tied_before
    return {int(k): float((ranks <= k).mean()) for k in ks}


# ---------------------------------------------------------------------------
# BLEU@4

def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def bleu4(candidate, references):
    """Geometric mean of clipped 1-4-gram precisions times brevity penalty.

    Zero clipped counts for n >= 2 get add-one smoothing; a zero unigram
    precision yields 0. Reference length is the closest to the candidate
    (ties to the shorter).
    """
    candidate = list(candidate)
    if not candidate:
        raise MetricError("empty candidate")
    refs = [list(r) for r in references]
    if not refs:
        raise MetricError("no references")
    precisions = []
    for n in range(1, 5):
        cand_counts = Counter(_ngrams(candidate, n))
        max_ref = Counter()
        for ref in refs:
            for gram, cnt in Counter(_ngrams(ref, n)).items():
                if cnt > max_ref[gram]:
                    max_ref[gram] = cnt
        guess = max(0, len(candidate) - n + 1)
        clipped = sum(min(cnt, max_ref[g])
                      for g, cnt in sorted(cand_counts.items()))
        if guess == 0:
            precisions.append(0.0 if n == 1 else 1.0)
        elif clipped == 0 and n >= 2:
            precisions.append(1.0 / (guess + 1))
        else:
            precisions.append(clipped / guess)
    if precisions[0] == 0.0:
        return 0.0
    c_len = len(candidate)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    prod = precisions[0] * precisions[1] * precisions[2] * precisions[3]
    return bp * prod ** 0.25


# ---------------------------------------------------------------------------
# CIDEr-D

CIDER_SIGMA = 6.0
CIDER_N = 4


class CiderStats:
    """Corpus document frequencies over the evaluation reference set."""

    def __init__(self, doc_freq, n_docs):
        if n_docs < 1:
            raise MetricError("empty corpus stats")
        self.doc_freq = doc_freq
        self.n_docs = n_docs
        self.log_ref_len = math.log(float(n_docs))


def build_cider_stats(all_references):
    """all_references: one list of reference token-lists per image."""
    if not all_references:
        raise MetricError("empty corpus stats")
    df = Counter()
    for refs in all_references:
        grams = set()
        for ref in refs:
            for n in range(1, CIDER_N + 1):
                grams.update(_ngrams(list(ref), n))
        for g in grams:
            df[g] += 1
    return CiderStats(df, len(all_references))


def _tfidf_vec(tokens, stats):
    vecs = [{} for _ in range(CIDER_N)]
    norms = [0.0] * CIDER_N
    for n in range(1, CIDER_N + 1):
        for gram, tf in sorted(Counter(_ngrams(tokens, n)).items()):
            idf = stats.log_ref_len - math.log(max(1.0, stats.doc_freq[gram]))
            w = tf * idf
            vecs[n - 1][gram] = w
            norms[n - 1] += w * w
    return vecs, [math.sqrt(v) for v in norms]


def cider_d(candidate, references, stats):
    """Length-penalized clipped TF-IDF cosine, averaged over n, scaled by 10."""
    candidate = list(candidate)
    if not candidate:
        raise MetricError("empty candidate")
    refs = [list(r) for r in references]
    if not refs:
        raise MetricError("no references")
    cv, cn = _tfidf_vec(candidate, stats)
    score_n = [0.0] * CIDER_N
    for ref in refs:
        rv, rn = _tfidf_vec(ref, stats)
        delta = float(len(candidate) - len(ref))
        penalty = math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA ** 2))
        for n in range(CIDER_N):
            acc = 0.0
            for gram, w in sorted(cv[n].items()):
                acc += min(w, rv[n].get(gram, 0.0)) * rv[n].get(gram, 0.0)
            if cn[n] != 0.0 and rn[n] != 0.0:
                acc /= cn[n] * rn[n]
            else:
                acc = 0.0
            score_n[n] += acc * penalty
    return 10.0 * sum(s / len(refs) for s in score_n) / CIDER_N
