"""Slow, obviously-correct reference implementations shared by the test files."""

import itertools
import math

import numpy as np


def ap_oracle(scores, labels):
    # each positive contributes the precision over everything scored at least as high
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    total = 0.0
    for i in np.flatnonzero(labels == 1):
        above = scores >= scores[i]
        total += labels[above].sum() / above.sum()
    return total / labels.sum()


def threshold_oracle(scores, ratio):
    n = len(scores)
    k = math.ceil(round(ratio * n, 9))
    flags = []
    for i in range(n):
        beaten_by = sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
        flags.append(int(beaten_by < k))
    return flags


def consensus_oracle(votes, majority):
    consensus = [int(sum(row) >= majority) for row in votes]
    n_models = len(votes[0])
    match = []
    for m in range(n_models):
        match.append(sum(int(row[m] == c) for row, c in zip(votes, consensus)) / len(votes))
    return consensus, match


def label_patterns(n):
    for bits in itertools.product((0, 1), repeat=n):
        if 0 < sum(bits) < n:
            yield np.array(bits)


def lof_oracle(X, k):
    """Quadratic local outlier factor straight from the definitions."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    d = [[math.dist(X[i], X[j]) for j in range(n)] for i in range(n)]
    kdist, neigh = [], []
    for i in range(n):
        others = sorted(d[i][j] for j in range(n) if j != i)
        kd = others[k - 1]
        kdist.append(kd)
        neigh.append([j for j in range(n) if j != i and d[i][j] <= kd])
    lrd = []
    for i in range(n):
        reach = [max(kdist[j], d[i][j]) for j in neigh[i]]
        lrd.append(len(reach) / sum(reach) if sum(reach) > 0 else math.inf)
    out = []
    for i in range(n):
        if math.isinf(lrd[i]):
            out.append(1.0)
            continue
        out.append(sum(lrd[j] for j in neigh[i]) / (len(neigh[i]) * lrd[i]))
    return np.array(out)


def planted_outliers(seed, n=500, d=10, ratio=0.05, radius=(6.0, 8.0)):
    """Standard Gaussian inliers plus a ratio of points on a far spherical shell."""
    rng = np.random.default_rng(seed)
    n_out = int(round(ratio * n))
    inliers = rng.standard_normal((n - n_out, d))
    direction = rng.standard_normal((n_out, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    outliers = direction * rng.uniform(*radius, size=(n_out, 1))
    X = np.vstack([inliers, outliers])
    y = np.r_[np.zeros(n - n_out, dtype=np.uint8), np.ones(n_out, dtype=np.uint8)]
    order = rng.permutation(n)
    return X[order], y[order]
