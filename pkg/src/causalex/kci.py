"""Kernel-based (conditional) independence tests.

Both tests use Gaussian kernels on z-scored data with the median pairwise
distance as bandwidth, doubly centered kernel matrices, and a moment-matched
gamma null by default.  A permutation null (200 draws) is available as an
independent check.
"""

from __future__ import annotations

import warnings
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist, squareform

DEFAULT_EPSILON = 1e-3
DEFAULT_PERMUTATIONS = 200


class KCIError(RuntimeError):
    """Raised when the regularized conditional system cannot be solved."""


@dataclass(frozen=True)
class CITestResult:
    statistic: float
    p_value: float
    conditioning_set: tuple[int, ...] = ()
    method: str = "gamma"
    degenerate: bool = False

    def independent(self, alpha: float) -> bool:
        return self.p_value > alpha


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1)


def standardize(x) -> tuple[np.ndarray, bool]:
    """Z-score each column; the flag reports a constant column."""
    x = _as_2d(x)
    sd = x.std(axis=0)
    if (sd == 0).any():
        return x - x.mean(axis=0), True
    return (x - x.mean(axis=0)) / sd, False


def rbf_kernel(x: np.ndarray) -> np.ndarray:
    sq = squareform(pdist(x, "sqeuclidean"))
    off = sq[np.triu_indices_from(sq, k=1)]
    off = off[off > 0]
    width2 = np.median(off) if off.size else 1.0
    return np.exp(-sq / (2.0 * width2))


def center(K: np.ndarray) -> np.ndarray:
    row = K.mean(axis=0)
    return K - row[None, :] - row[:, None] + row.mean()


def centered_kernel(x) -> tuple[np.ndarray, bool]:
    xs, const = standardize(x)
    return center(rbf_kernel(xs)), const


def gamma_pvalue(stat: float, mean: float, var: float) -> float:
    if mean <= 0 or var <= 0:
        return 1.0
    shape = mean * mean / var
    scale = var / mean
    return float(np.clip(stats.gamma.sf(stat, shape, scale=scale), 0.0, 1.0))


def _perm_pvalue(stat, Kx, Ky, rng, permutations):
    m = len(Kx)
    hits = 0
    for _ in range(permutations):
        p = rng.permutation(m)
        if np.sum(Kx * Ky[np.ix_(p, p)]) / m >= stat:
            hits += 1
    return (hits + 1) / (permutations + 1)


def hsic_stat(Kx: np.ndarray, Ky: np.ndarray) -> float:
    """(1/m) trace(Kx Ky) for symmetric centered kernels."""
    return float(np.sum(Kx * Ky) / len(Kx))


def _unconditional(Kx, Ky, method, rng, permutations):
    m = len(Kx)
    stat = hsic_stat(Kx, Ky)
    if method == "permutation":
        return stat, _perm_pvalue(stat, Kx, Ky, np.random.default_rng(rng), permutations)
    # null moments of (1/m) tr(Kx Ky) under independence
    mean = np.trace(Kx) * np.trace(Ky) / m ** 2
    var = 2.0 * np.sum(Kx * Kx) * np.sum(Ky * Ky) / m ** 4
    return stat, gamma_pvalue(stat, mean, var)


def kci_unconditional(x, y, alpha: float = 0.05, method: str = "gamma", rng=None,
                      permutations: int = DEFAULT_PERMUTATIONS) -> CITestResult:
    """Test x ⊥ y.  Independence is declared when ``p_value > alpha``."""
    x, y = _as_2d(x), _as_2d(y)
    if len(x) != len(y):
        raise ValueError("x and y must have the same number of samples")
    if len(x) < 10:
        raise ValueError("need at least 10 samples")
    Kx, cx = centered_kernel(x)
    Ky, cy = centered_kernel(y)
    if cx or cy:
        warnings.warn("constant column in KCI test; declaring independence", RuntimeWarning)
        return CITestResult(0.0, 1.0, (), method, degenerate=True)
    stat, p = _unconditional(Kx, Ky, method, rng, permutations)
    return CITestResult(max(stat, 0.0), p, (), method)


def residual_operator(Kz: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """R = eps (Kz + eps I)^-1, retrying once with a larger ridge."""
    m = len(Kz)
    for eps in (epsilon, 10.0 * epsilon):
        try:
            R = eps * np.linalg.solve(Kz + eps * np.eye(m), np.eye(m))
        except np.linalg.LinAlgError:
            continue
        if np.isfinite(R).all():
            return 0.5 * (R + R.T)
    raise KCIError(f"regularized conditioning system is singular (epsilon={epsilon})")


def residualize(K: np.ndarray, R: np.ndarray) -> np.ndarray:
    out = R @ K @ R
    return 0.5 * (out + out.T)


def _conditional(Kxz, Kyz, method, rng, permutations):
    m = len(Kxz)
    stat = hsic_stat(Kxz, Kyz)
    if method == "permutation":
        return stat, _perm_pvalue(stat, Kxz, Kyz, np.random.default_rng(rng), permutations)
    # Null is a weighted chi-square over products of the two kernels'
    # eigenvectors.  Its first two moments collapse to diagonal and elementwise
    # products: tr(UU^T) = sum_t Kxz[t,t] Kyz[t,t] and tr((UU^T)^2) = ||Kxz * Kyz||_F^2.
    mean = float(np.sum(np.diag(Kxz) * np.diag(Kyz))) / m
    var = 2.0 * float(np.sum((Kxz * Kyz) ** 2)) / m ** 2
    return stat, gamma_pvalue(stat, mean, var)


def kci_conditional(x, y, z, alpha: float = 0.05, epsilon: float = DEFAULT_EPSILON,
                    method: str = "gamma", rng=None,
                    permutations: int = DEFAULT_PERMUTATIONS) -> CITestResult:
    """Test x ⊥ y | z.

    x is augmented with z before kernelization; both kernels are residualized
    by kernel ridge regression on z.
    """
    x, y, z = _as_2d(x), _as_2d(y), _as_2d(z)
    if not (len(x) == len(y) == len(z)):
        raise ValueError("x, y and z must have the same number of samples")
    if len(x) < 30:
        raise ValueError("need at least 30 samples for a conditional test")
    if z.shape[1] == 0:
        raise ValueError("conditioning set must be nonempty")
    xs, cx = standardize(x)
    ys, cy = standardize(y)
    if cx or cy:
        warnings.warn("constant column in KCI test; declaring independence", RuntimeWarning)
        return CITestResult(0.0, 1.0, (), method, degenerate=True)
    zs, _ = standardize(z)
    Kx = center(rbf_kernel(np.hstack([xs, zs])))
    Ky = center(rbf_kernel(ys))
    Kz = center(rbf_kernel(zs))
    R = residual_operator(Kz, epsilon)
    stat, p = _conditional(residualize(Kx, R), residualize(Ky, R), method, rng, permutations)
    return CITestResult(max(stat, 0.0), p, (), method)


class KCIContext:
    """Cached kernel computations over a fixed data matrix.

    Columns are addressed by integer index.  Centered kernels, residual
    operators and residualized kernels are reused across the many tests of a
    PC run; caches are bounded so large sample counts stay within memory.
    """

    def __init__(self, data: np.ndarray, epsilon: float = DEFAULT_EPSILON, method: str = "gamma",
                 seed=0, permutations: int = DEFAULT_PERMUTATIONS, cache_bytes: float = 1.5e9):
        self.data = np.asarray(data, dtype=float)
        self.m = len(self.data)
        self.epsilon = epsilon
        self.method = method
        self.permutations = permutations
        self._rng = np.random.default_rng(seed)
        sd = self.data.std(axis=0)
        self.constant = sd == 0
        self.z = (self.data - self.data.mean(axis=0)) / np.where(sd == 0, 1.0, sd)
        self._cache: OrderedDict = OrderedDict()
        self._max_items = max(4, int(cache_bytes // (8 * self.m * self.m)))
        self.tests_run = 0

    def _cached(self, key, build):
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        val = build()
        self._cache[key] = val
        if len(self._cache) > self._max_items:
            self._cache.popitem(last=False)
        return val

    def kernel(self, cols: tuple[int, ...]) -> np.ndarray:
        return self._cached(("K", cols), lambda: center(rbf_kernel(self.z[:, list(cols)])))

    def residual(self, S: tuple[int, ...]) -> np.ndarray:
        return self._cached(("R", S), lambda: residual_operator(self.kernel(S), self.epsilon))

    def test(self, x: int, y: int, S: tuple[int, ...] = ()) -> CITestResult:
        self.tests_run += 1
        S = tuple(sorted(S))
        if self.constant[x] or self.constant[y]:
            return CITestResult(0.0, 1.0, S, self.method, degenerate=True)
        rng = self._rng if self.method == "permutation" else None
        if not S:
            stat, p = _unconditional(self.kernel((x,)), self.kernel((y,)), self.method, rng,
                                     self.permutations)
            return CITestResult(max(stat, 0.0), p, S, self.method)
        R = self.residual(S)
        Kxz = residualize(self.kernel((x,) + S), R)
        Kyz = self._cached(("RK", y, S), lambda: residualize(self.kernel((y,)), R))
        stat, p = _conditional(Kxz, Kyz, self.method, rng, self.permutations)
        return CITestResult(max(stat, 0.0), p, S, self.method)
