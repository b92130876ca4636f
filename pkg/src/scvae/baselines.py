"""Classical unsupervised detectors on flattened windows.

Every detector follows the same small protocol: ``fit(X)``, ``score(X)`` for
new rows and ``fit_score(X)`` for the training rows themselves. Scores are
oriented so that higher means more anomalous.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

EULER_GAMMA = 0.5772156649015329


def _check_data(X, min_rows=2):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D (rows, columns) array, got shape {X.shape}")
    if X.shape[1] == 0:
        raise ValueError("data has zero columns")
    if X.shape[0] < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("data contains non-finite values")
    return X


# ---------------------------------------------------------------------------
# Isolation Forest
# ---------------------------------------------------------------------------


def average_path_length(n) -> np.ndarray:
    """c(n): mean unsuccessful-search path length in a binary search tree of n points."""
    n = np.asarray(n, dtype=np.float64)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


class _ITree:
    """Array-encoded isolation tree."""

    def __init__(self, X, height_limit, rng):
        self.feature, self.threshold, self.left, self.right, self.size = [], [], [], [], []
        self._grow(X, 0, height_limit, rng)
        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.size = np.array(self.size)

    def _new(self):
        for lst in (self.feature, self.threshold, self.left, self.right, self.size):
            lst.append(-1)
        return len(self.feature) - 1

    def _grow(self, X, depth, limit, rng):
        node = self._new()
        self.size[node] = len(X)
        if depth >= limit or len(X) <= 1:
            return node
        lo, hi = X.min(axis=0), X.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            return node
        q = int(candidates[rng.integers(len(candidates))])
        p = rng.uniform(lo[q], hi[q])
        mask = X[:, q] < p
        self.feature[node] = q
        self.threshold[node] = p
        self.left[node] = self._grow(X[mask], depth + 1, limit, rng)
        self.right[node] = self._grow(X[~mask], depth + 1, limit, rng)
        return node

    def path_length(self, X):
        out = np.zeros(len(X))
        stack = [(0, np.arange(len(X)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if self.feature[node] < 0:
                out[idx] = depth + average_path_length(self.size[node])
                continue
            go_left = X[idx, self.feature[node]] < self.threshold[node]
            if go_left.any():
                stack.append((self.left[node], idx[go_left], depth + 1))
            if (~go_left).any():
                stack.append((self.right[node], idx[~go_left], depth + 1))
        return out


class IsolationForest:
    def __init__(self, n_trees: int = 100, subsample: int = 256, seed: int = 0):
        self.n_trees = n_trees
        self.subsample = subsample
        self.seed = seed

    def fit(self, X):
        X = _check_data(X, min_rows=1)
        n = len(X)
        psi = min(self.subsample, n)
        self.psi_ = psi
        limit = int(math.ceil(math.log2(max(psi, 2))))
        self.trees_ = []
        for t in range(self.n_trees):
            rng = np.random.default_rng((self.seed, t))
            idx = rng.choice(n, size=psi, replace=False)
            self.trees_.append(_ITree(X[idx], limit, rng))
        return self

    def score(self, X):
        X = _check_data(X, min_rows=1)
        depth = np.mean([t.path_length(X) for t in self.trees_], axis=0)
        c = float(average_path_length(self.psi_)) if self.psi_ > 1 else 1.0
        return np.power(2.0, -depth / c)

    def fit_score(self, X):
        return self.fit(X).score(X)


# ---------------------------------------------------------------------------
# Local Outlier Factor
# ---------------------------------------------------------------------------


def _sq_dists(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


class LocalOutlierFactor:
    """Exact LOF; the k-distance neighbourhood includes every point tied at the k-distance."""

    def __init__(self, k: int = 20, chunk: int = 1024):
        self.k = k
        self.chunk = chunk

    def _neighbourhoods(self, Q, exclude_self: bool):
        """Per query: (k-distance, neighbour indices, distances to them)."""
        kd = np.empty(len(Q))
        nbrs, dists = [], []
        for start in range(0, len(Q), self.chunk):
            block = np.sqrt(_sq_dists(Q[start : start + self.chunk], self.X_))
            if exclude_self:
                rows = np.arange(block.shape[0])
                block[rows, start + rows] = np.inf
            kth = np.partition(block, self.k - 1, axis=1)[:, self.k - 1]
            kd[start : start + len(block)] = kth
            for row, r in zip(block, kth):
                idx = np.flatnonzero(row <= r)
                nbrs.append(idx)
                dists.append(row[idx])
        return kd, nbrs, dists

    def _lrd(self, nbrs, dists):
        out = np.empty(len(nbrs))
        for i, (idx, d) in enumerate(zip(nbrs, dists)):
            reach = np.maximum(self.kdist_[idx], d)
            out[i] = len(idx) / max(reach.sum(), 1e-300)
        return out

    def fit(self, X):
        X = _check_data(X)
        if self.k >= len(X):
            raise ValueError(f"k={self.k} must be smaller than the number of rows ({len(X)})")
        self.X_ = X
        self.kdist_, nbrs, dists = self._neighbourhoods(X, exclude_self=True)
        self.lrd_ = self._lrd(nbrs, dists)
        self.train_scores_ = np.array([self.lrd_[idx].mean() for idx in nbrs]) / self.lrd_
        return self

    def score(self, X):
        """LOF of new points w.r.t. the fitted set (a query never counts as its own neighbour)."""
        Q = _check_data(X, min_rows=1)
        _, nbrs, dists = self._neighbourhoods(Q, exclude_self=False)
        lrd_q = self._lrd(nbrs, dists)
        return np.array([self.lrd_[idx].mean() for idx in nbrs]) / lrd_q

    def fit_score(self, X):
        return self.fit(X).train_scores_.copy()


# ---------------------------------------------------------------------------
# One-Class SVM
# ---------------------------------------------------------------------------


class ConvergenceError(RuntimeError):
    def __init__(self, message, kkt_violation):
        super().__init__(message)
        self.kkt_violation = kkt_violation


def spread_gamma(X, quantile: float = 0.99, max_rows: int = 1000) -> float:
    """RBF width from the data spread: 1 / (quantile of pairwise squared distances).

    A kernel this wide leaves no training row isolated. With narrower kernels
    (e.g. 1/D) far outliers become self-supporting free vectors that sit
    exactly on the decision boundary and are never ranked above inliers.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) > max_rows:
        X = X[np.linspace(0, len(X) - 1, max_rows).astype(int)]
    d = _sq_dists(X, X)[np.triu_indices(len(X), 1)]
    q = float(np.quantile(d, quantile)) if d.size else 0.0
    return 1.0 / q if q > 0 else 1.0


class OneClassSVM:
    """RBF one-class SVM, dual solved by maximal-violating-pair coordinate descent.

    min 0.5 a'Ka  s.t.  sum(a) = 1,  0 <= a_i <= 1 / (nu N).
    ``gamma=None`` picks the width with :func:`spread_gamma`.
    """

    def __init__(self, nu: float = 0.05, gamma: float | None = None, tolerance: float = 1e-4,
                 max_iter: int = 200_000, cache_rows: int = 4096):
        if not 0.0 < nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {nu}")
        if gamma is not None and gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.nu = nu
        self.gamma = gamma
        self.tolerance = tolerance
        self.max_iter = max_iter
        self.cache_rows = cache_rows

    def _kernel(self, A, B):
        return np.exp(-self.gamma_ * _sq_dists(A, B))

    def fit(self, X):
        X = _check_data(X)
        n, d = X.shape
        self.gamma_ = self.gamma if self.gamma is not None else spread_gamma(X)
        self.X_ = X
        sq = (X * X).sum(1)
        cache = OrderedDict()

        def row(i):
            r = cache.get(i)
            if r is None:
                r = np.exp(-self.gamma_ * np.maximum(sq[i] + sq - 2.0 * X @ X[i], 0.0))
                cache[i] = r
                if len(cache) > self.cache_rows:
                    cache.popitem(last=False)
            else:
                cache.move_to_end(i)
            return r

        C = 1.0 / (self.nu * n)
        alpha = np.zeros(n)
        n_full = int(math.floor(self.nu * n))
        alpha[:n_full] = C
        if n_full < n:
            alpha[n_full] = 1.0 - C * n_full
        grad = np.zeros(n)
        for i in np.flatnonzero(alpha):
            grad += alpha[i] * row(i)

        eps = 1e-12 * C
        violation = np.inf
        for it in range(self.max_iter):
            up = alpha < C - eps
            low = alpha > eps
            gu = np.where(up, grad, np.inf)
            gl = np.where(low, grad, -np.inf)
            i = int(np.argmin(gu))
            j = int(np.argmax(gl))
            violation = gl[j] - gu[i]
            if violation <= self.tolerance:
                break
            ki, kj = row(i), row(j)
            curv = max(ki[i] + kj[j] - 2.0 * ki[j], 1e-12)
            t = min((grad[j] - grad[i]) / curv, C - alpha[i], alpha[j])
            alpha[i] += t
            alpha[j] -= t
            grad += t * (ki - kj)
        else:
            raise ConvergenceError(
                f"one-class SVM did not converge in {self.max_iter} iterations "
                f"(KKT violation {violation:.3g})",
                violation,
            )
        self.n_iter_ = it
        self.kkt_violation_ = float(violation)
        self.alpha_ = alpha
        free = (alpha > eps) & (alpha < C - eps)
        if free.any():
            self.rho_ = float(grad[free].mean())
        else:
            up = alpha < C - eps
            low = alpha > eps
            self.rho_ = float(0.5 * (grad[up].min() + grad[low].max()))
        self.C_ = C
        sv = alpha > eps
        self.support_ = np.flatnonzero(sv)
        self._grad = grad
        return self

    def decision(self, X):
        X = _check_data(X, min_rows=1)
        sv = self.support_
        return self._kernel(X, self.X_[sv]) @ self.alpha_[sv] - self.rho_

    def score(self, X):
        return -self.decision(X)

    def fit_score(self, X):
        return self.fit(X).score(X)


# ---------------------------------------------------------------------------
# Elliptic Envelope (minimum covariance determinant)
# ---------------------------------------------------------------------------


class SingularCovarianceError(ValueError):
    pass


@dataclass
class _Fit:
    logdet: float
    subset: np.ndarray
    trace: list = field(default_factory=list)


class EllipticEnvelope:
    """Robust Gaussian fit by FastMCD-style concentration steps; scores are Mahalanobis distances.

    Every covariance is ridge-regularized by a fixed ``1e-6 * trace / D`` of the
    full-data covariance; with a fixed ridge the c-step still never increases
    the determinant.
    """

    def __init__(self, support_fraction: float = 0.9, n_restarts: int = 10, seed: int = 0,
                 max_steps: int = 100):
        self.support_fraction = support_fraction
        self.n_restarts = n_restarts
        self.seed = seed
        self.max_steps = max_steps

    def _stats(self, X, subset):
        mu = X[subset].mean(axis=0)
        diff = X[subset] - mu
        cov = diff.T @ diff / len(subset)
        cov[np.diag_indices_from(cov)] += self.ridge_
        try:
            cf = cho_factor(cov, lower=True, check_finite=False)
        except LinAlgError as err:
            raise SingularCovarianceError("covariance is singular after regularization") from err
        logdet = 2.0 * np.log(np.diag(cf[0])).sum()
        return mu, cf, logdet

    @staticmethod
    def _mahalanobis_sq(X, mu, cf):
        diff = X - mu
        return np.einsum("ij,ij->i", diff, cho_solve(cf, diff.T, check_finite=False).T)

    def _concentrate(self, X, start, h):
        # the (D+1)-point seed only proposes the first h-subset; c-steps start there
        mu, cf, _ = self._stats(X, start)
        subset = np.sort(np.argpartition(self._mahalanobis_sq(X, mu, cf), h - 1)[:h])
        mu, cf, logdet = self._stats(X, subset)
        trace = [logdet]
        for _ in range(self.max_steps):
            d2 = self._mahalanobis_sq(X, mu, cf)
            new = np.sort(np.argpartition(d2, h - 1)[:h])
            if np.array_equal(new, subset):
                break
            mu_n, cf_n, logdet_n = self._stats(X, new)
            if logdet_n >= logdet - 1e-12 * max(1.0, abs(logdet)):
                # no strict decrease: a tie swap, stop at the current subset
                break
            subset, mu, cf, logdet = new, mu_n, cf_n, logdet_n
            trace.append(logdet)
        return _Fit(logdet, subset, trace)

    def fit(self, X):
        X = _check_data(X)
        n, d = X.shape
        if n <= d:
            raise ValueError(f"elliptic envelope needs more rows than columns (got {n} x {d})")
        full_cov = np.cov(X, rowvar=False, bias=True).reshape(d, d)
        tr = float(np.trace(full_cov))
        self.ridge_ = 1e-6 * tr / d if tr > 0 else 1e-6
        h = min(n, max(d + 1, int(math.ceil(self.support_fraction * n))))
        best = None
        self.traces_ = []
        for r in range(self.n_restarts):
            rng = np.random.default_rng((self.seed, r))
            start = np.sort(rng.choice(n, size=min(n, d + 1), replace=False))
            fit = self._concentrate(X, start, h)
            self.traces_.append(fit.trace)
            if best is None or fit.logdet < best.logdet:
                best = fit
        self.subset_ = best.subset
        self.location_, self._cf, self.logdet_ = self._stats(X, best.subset)
        L = np.tril(self._cf[0])
        self.covariance_ = L @ L.T
        return self

    def score(self, X):
        X = _check_data(X, min_rows=1)
        return np.sqrt(self._mahalanobis_sq(X, self.location_, self._cf))

    def fit_score(self, X):
        return self.fit(X).score(X)


# ---------------------------------------------------------------------------


DETECTORS = {
    "IF": IsolationForest,
    "LOF": LocalOutlierFactor,
    "OCSVM": OneClassSVM,
    "EE": EllipticEnvelope,
}


def default_params(kind: str, n_rows: int, n_cols: int, anomaly_ratio: float = 0.05, seed: int = 0) -> dict:
    if kind == "IF":
        return {"n_trees": 100, "subsample": min(256, n_rows), "seed": seed}
    if kind == "LOF":
        return {"k": min(20, n_rows - 1)}
    if kind == "OCSVM":
        return {"nu": anomaly_ratio, "gamma": None, "tolerance": 1e-4}
    if kind == "EE":
        return {"support_fraction": 0.9, "n_restarts": 10, "seed": seed}
    raise ValueError(f"unknown detector {kind!r}; expected one of {sorted(DETECTORS)}")


def make_detector(kind: str, **params):
    try:
        return DETECTORS[kind](**params)
    except KeyError:
        raise ValueError(f"unknown detector {kind!r}; expected one of {sorted(DETECTORS)}")
