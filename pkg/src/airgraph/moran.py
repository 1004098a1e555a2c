"""Local Moran statistics used as the auxiliary forecasting target."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adaptive import haversine_matrix
from .tensor import Tensor

DEFAULT_K = 8
_DEN_EPS = 1e-12


@dataclass
class SpatialWeights:
    w: np.ndarray  # (n, n), zero diagonal, rows sum to 1 or are empty

    @property
    def n(self) -> int:
        return self.w.shape[0]


def knn_weights(stations, k: int = DEFAULT_K) -> SpatialWeights:
    """Row-standardised k-nearest-neighbour weights on haversine distance.

    Ties (including duplicate coordinates) go to the lower station index.
    """
    d = haversine_matrix(stations)
    n = d.shape[0]
    if k < 1 or k >= n:
        raise ValueError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    w = np.zeros((n, n))
    for i in range(n):
        order = [j for j in np.argsort(d[i], kind="stable") if j != i]
        w[i, order[:k]] = 1.0 / k
    return SpatialWeights(w)


def local_moran(x, w: SpatialWeights | np.ndarray) -> np.ndarray:
    """M_i = (n - 1) z_i sum_j w_ij z_j / sum_k z_k^2, zero for a constant field.

    ``x`` may carry extra leading axes; the statistic is taken over the last axis.
    """
    w = w.w if isinstance(w, SpatialWeights) else np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if w.shape != (n, n):
        raise ValueError(f"local_moran: {n} values but weights are {w.shape}")
    z = x - x.mean(axis=-1, keepdims=True)
    ss = (z ** 2).sum(axis=-1, keepdims=True)
    lag = z @ w.T
    m = (n - 1) * z * lag / (ss + _DEN_EPS)
    # constant field: z is zero up to rounding, so force the documented convention
    scale = np.abs(x).max(axis=-1, keepdims=True)
    flat = ss <= (1e-12 * np.maximum(scale, 1.0)) ** 2 * n
    return np.where(flat, 0.0, m)


def global_moran(x, w: SpatialWeights | np.ndarray) -> float:
    """Global Moran's I from its double-sum definition."""
    w = w.w if isinstance(w, SpatialWeights) else np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = x - x.mean()
    return float(len(x) / w.sum() * (z @ w @ z) / (z @ z))


def moran_targets(y, w: SpatialWeights | np.ndarray) -> np.ndarray:
    """Local Moran of each future snapshot. ``y`` is (..., N, tau, 1); same shape out."""
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.ndim < 3 or y.shape[-1] != 1:
        raise ValueError(f"moran_targets expects (..., N, tau, 1), got {y.shape}")
    snap = np.swapaxes(y[..., 0], -1, -2)  # (..., tau, N)
    m = local_moran(snap, w)
    return np.swapaxes(m, -1, -2)[..., None]
