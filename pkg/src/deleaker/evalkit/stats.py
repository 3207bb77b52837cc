"""Rater aggregation and agreement statistics on the 5-point verdict scale."""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .verdict import Label

K = 5  # scale size


def majority_vote(labels: Sequence) -> Label:
    """Modal label; on a tie, the median of all labels, rounded half towards NO_CHANGE."""
    vals = [int(x) for x in labels]
    if not vals:
        raise ValueError("no labels")
    counts = Counter(vals).most_common()
    if len(counts) == 1 or counts[0][1] > counts[1][1]:
        return Label(counts[0][0])
    med = float(np.median(vals))
    centre = int(Label.NO_CHANGE)
    if med != math.floor(med):
        med = math.floor(med) if med > centre else math.ceil(med)
    return Label(int(med))


def fleiss_kappa_qw(ratings, k: int = K) -> float:
    """Quadratic-weighted Fleiss' kappa for an items x raters matrix of labels 1..k.

    Agreement weights are ``1 - ((a - b) / (k - 1))**2``; chance agreement
    comes from the pooled category proportions.
    """
    r = np.asarray([[int(x) for x in row] for row in ratings], dtype=np.int64)
    if r.ndim != 2:
        raise ValueError("ratings must be an items x raters matrix")
    N, n = r.shape
    if N < 2 or n < 2:
        raise ValueError("need at least 2 items and 2 raters")
    if r.min() < 1 or r.max() > k:
        raise ValueError(f"labels must lie in 1..{k}")
    cats = np.arange(1, k + 1)
    w = 1.0 - ((cats[:, None] - cats[None, :]) / (k - 1)) ** 2
    counts = np.stack([(r == c).sum(axis=1) for c in cats], axis=1)  # N x k
    # weighted agreeing ordered rater pairs per item, excluding self-pairs
    agree = np.einsum("ia,ab,ib->i", counts, w, counts) - counts.sum(axis=1) * w[0, 0]
    p_o = float(agree.sum()) / (N * n * (n - 1))
    p = counts.sum(axis=0) / (N * n)
    p_e = float(p @ w @ p)
    if abs(1.0 - p_e) < 1e-15:
        raise ValueError("undefined agreement: expected agreement is 1")
    return (p_o - p_e) / (1.0 - p_e)


def average_ranks(x) -> np.ndarray:
    """1-based ranks, tied values sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if len(x) < 3:
        raise ValueError("need at least 3 observations")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0:
        raise ValueError("zero variance in ranks")
    return float(dx @ dy) / den
