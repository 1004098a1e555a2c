"""Adaptive graph structure learning: geographic prior, macro and micro adjacencies, fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, conv2d, matmul, relu, reshape, where

EARTH_RADIUS_KM = 6371.0
DEFAULT_SIGMA_KM = 500.0
DEFAULT_THRESHOLD = 0.05


def haversine_matrix(stations: Sequence[tuple[float, float]]) -> np.ndarray:
    """Pairwise great-circle distances in km for (lat, lon) pairs in degrees."""
    coords = np.asarray(stations, dtype=np.float64).reshape(-1, 2)
    if np.any(np.abs(coords[:, 0]) > 90) or np.any(np.abs(coords[:, 1]) > 180):
        raise ValueError("station coordinates out of range (lat in [-90, 90], lon in [-180, 180])")
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    h = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def build_initial_adjacency(stations, sigma: float = DEFAULT_SIGMA_KM,
                            threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Gaussian kernel on haversine distance, sparsified below ``threshold``, self-loops = 1."""
    if len(stations) < 1:
        raise ValueError("need at least one station")
    d = haversine_matrix(stations)
    w = np.exp(-(d ** 2) / sigma ** 2)
    w[w < threshold] = 0.0
    np.fill_diagonal(w, 1.0)
    return w


@dataclass
class MacroParams:
    phi_weight: Tensor  # (C, d_e)
    phi_bias: Tensor  # (d_e,)

    @classmethod
    def init(cls, in_features: int, dim: int, rng: np.random.Generator) -> "MacroParams":
        if dim < 1:
            raise ValueError("macro embedding width must be >= 1")
        bound = math.sqrt(6.0 / (in_features + dim))
        return cls(Tensor(rng.uniform(-bound, bound, (in_features, dim)), requires_grad=True),
                   Tensor(np.zeros(dim), requires_grad=True))


def macro_adjacency(x_mean, p: MacroParams, a0) -> Tensor:
    """ReLU(h h^T / sqrt(d_e)) + A0, with h the projected time-mean node attributes.

    ``x_mean`` is (..., N, C); the result is (..., N, N).
    """
    x_mean = as_tensor(x_mean)
    a0 = as_tensor(a0)
    if x_mean.shape[-1] != p.phi_weight.shape[0]:
        raise ShapeError(f"macro: features {x_mean.shape} vs phi_weight {p.phi_weight.shape}")
    if a0.shape[-1] != x_mean.shape[-2]:
        raise ShapeError(f"macro: {x_mean.shape[-2]} nodes but A0 is {a0.shape}")
    h = matmul(x_mean, p.phi_weight) + p.phi_bias
    sim = matmul(h, h.swapaxes(-1, -2)) * (1.0 / math.sqrt(p.phi_weight.shape[1]))
    return relu(sim) + a0


@dataclass
class MicroParams:
    conv1: Tensor  # (d_h, D, 1, 3)
    conv2: Tensor  # (N, d_h, 1, T)

    @classmethod
    def init(cls, n_nodes: int, in_features: int, in_steps: int, hidden: int,
             rng: np.random.Generator) -> "MicroParams":
        b1 = math.sqrt(6.0 / (3 * (in_features + hidden)))
        # nonnegative second kernel keeps the initial gate open (post-ReLU hidden is >= 0)
        b2 = math.sqrt(6.0 / (in_steps * (hidden + n_nodes)))
        return cls(
            Tensor(rng.uniform(-b1, b1, (hidden, in_features, 1, 3)), requires_grad=True),
            Tensor(rng.uniform(0.0, 2 * b2, (n_nodes, hidden, 1, in_steps)), requires_grad=True),
        )


def micro_adjacency(x, p: MicroParams) -> Tensor:
    """Conv2d(ReLU(Conv2d(x))) over (D channels, N rows, T columns); returns (..., N, N).

    Entry [i, j] is output channel j evaluated on node i's window. No bias terms.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, n, t, d = x.shape
    if t < 3:
        raise ShapeError(f"micro adjacency needs at least 3 time steps, got {t}")
    if p.conv2.shape[0] != n or p.conv2.shape[-1] != t or p.conv1.shape[1] != d:
        raise ShapeError(f"micro kernels {p.conv1.shape}, {p.conv2.shape} do not fit input {x.shape}")
    h = conv2d(x.transpose(0, 3, 1, 2), p.conv1, padding=(0, 1))  # (B, d_h, N, T)
    out = conv2d(relu(h), p.conv2)  # (B, N_out, N, 1)
    a = reshape(out, (b, n, n)).swapaxes(-1, -2)
    return reshape(a, (n, n)) if squeeze else a


def fuse(a_macro, a_micro) -> Tensor:
    """Row-normalised ReLU of the elementwise product; all-zero rows stay zero."""
    a_macro, a_micro = as_tensor(a_macro), as_tensor(a_micro)
    if a_macro.shape != a_micro.shape:
        raise ShapeError(f"fuse: {a_macro.shape} vs {a_micro.shape}")
    p = relu(a_macro * a_micro)
    rows = p.sum(axis=-1, keepdims=True)
    safe = where(rows.data > 0, rows, 1.0)
    return p / safe


@dataclass
class GraphState:
    a0: np.ndarray
    a_macro: Tensor
    a_micro: Tensor
    a_fused: Tensor

    @property
    def n(self) -> int:
        return self.a0.shape[0]
