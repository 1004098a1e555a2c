"""Graph Laplacians, power-iteration spectral radius and Chebyshev graph convolution."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, matmul, reshape

log = logging.getLogger(__name__)

POWER_MAX_ITER = 100
POWER_TOL = 1e-6
GAMMA_FLOOR = 1e-6
GAMMA_FALLBACK = 2.0
DEFAULT_CHEB_ORDER = 3


def symmetrize(a) -> Tensor:
    a = as_tensor(a)
    return (a + a.swapaxes(-1, -2)) * 0.5


def laplacian(a) -> Tensor:
    """``D - A`` with ``D`` the diagonal of row sums. Works on stacked (..., n, n) inputs."""
    a = as_tensor(a)
    n = a.shape[-1]
    deg = a.sum(axis=-1, keepdims=True)  # (..., n, 1)
    return deg * np.eye(n) - a


def _start_vector(n: int) -> np.ndarray:
    # fixed, non-degenerate start; a Laplacian's all-ones kernel vector must not dominate it
    v = np.cos(1.7 * np.arange(n) + 0.3) + 0.05 * np.arange(n)
    return v / np.linalg.norm(v)


def _power_iterate(m: np.ndarray):
    """Batched power iteration on (..., n, n).

    Each matrix stops updating once its Rayleigh quotient settles, so results do not depend
    on what else is in the batch. Returns (gamma, iterates, active, converged) where
    ``active[k]`` marks the matrices that took step k.
    """
    n = m.shape[-1]
    batch = m.shape[:-2]
    u = np.broadcast_to(_start_vector(n), batch + (n,)).copy()
    iterates, active = [u], []
    rq = np.einsum("...i,...ij,...j->...", u, m, u)
    done = np.zeros(batch, dtype=bool)
    zero = np.zeros(batch, dtype=bool)
    for _ in range(POWER_MAX_ITER):
        live = ~done
        w = np.einsum("...ij,...j->...i", m, u)
        norm = np.linalg.norm(w, axis=-1)
        hit_zero = live & (norm == 0)
        step = live & ~hit_zero
        u = np.where(step[..., None], w / np.where(norm == 0, 1.0, norm)[..., None], u)
        iterates.append(u)
        active.append(step)
        rq_new = np.einsum("...i,...ij,...j->...", u, m, u)
        settled = np.abs(rq_new - rq) <= POWER_TOL * np.maximum(np.abs(rq_new), 1.0)
        rq = np.where(step, rq_new, rq)
        zero |= hit_zero
        done = done | hit_zero | (step & settled)
        if np.all(done):
            break
    rq = np.where(zero, 0.0, rq)
    return rq, iterates, active, done


_fallback_warned = False


def _resolve_gamma(rq: np.ndarray, converged: np.ndarray) -> np.ndarray:
    global _fallback_warned
    if not np.all(converged):
        emit = log.debug if _fallback_warned else log.warning
        _fallback_warned = True
        emit("power iteration did not converge in %d iterations; using gamma_max=%.1f",
                    POWER_MAX_ITER, GAMMA_FALLBACK)
    gamma = np.where(converged, rq, GAMMA_FALLBACK)
    return np.maximum(gamma, GAMMA_FLOOR)


def spectral_radius(m) -> float:
    """Largest eigenvalue of the symmetrised matrix, by power iteration (floored at 1e-6)."""
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] != data.shape[1]:
        raise ShapeError(f"spectral_radius needs a square matrix, got {data.shape}")
    sym = 0.5 * (data + data.T)
    rq, _, _, converged = _power_iterate(sym)
    return float(_resolve_gamma(rq, converged))


def lambda_max(m: Tensor) -> Tensor:
    """Differentiable power-iteration eigenvalue estimate for symmetric (..., n, n) input.

    The backward pass differentiates the unrolled iteration exactly, so the gradient is
    that of the value actually computed rather than of the ideal eigenvalue.
    """
    rq, iterates, active, converged = _power_iterate(m.data)
    gamma = _resolve_gamma(rq, converged)
    live = converged & (rq > GAMMA_FLOOR)

    def backward(g):
        mat = m.data
        g = np.where(live, g, 0.0)
        u = iterates[-1]
        gm = g[..., None, None] * u[..., :, None] * u[..., None, :]
        du = g[..., None] * np.einsum("...ij,...j->...i", mat + np.swapaxes(mat, -1, -2), u)
        for k in range(len(iterates) - 1, 0, -1):
            prev = iterates[k - 1]
            u_k = iterates[k]
            w = np.einsum("...ij,...j->...i", mat, prev)
            norm = np.linalg.norm(w, axis=-1)
            norm = np.where(norm == 0, 1.0, norm)
            dw = (du - u_k * np.sum(u_k * du, axis=-1, keepdims=True)) / norm[..., None]
            step = active[k - 1]
            gm = gm + np.where(step[..., None, None], dw[..., :, None] * prev[..., None, :], 0.0)
            # frozen matrices carried u through unchanged
            du = np.where(step[..., None], np.einsum("...ji,...j->...i", mat, dw), du)
        return (gm,)

    return Tensor._from_op(np.asarray(gamma, dtype=np.float64), (m,), backward)


@dataclass
class ScaledLaplacian:
    matrix: Tensor
    gamma_max: float | np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[-1]


def scale_laplacian(lap, gamma_max) -> ScaledLaplacian:
    """``2 L / gamma_max - I``. ``gamma_max`` may be a float or a (batched) tensor."""
    lap = as_tensor(lap)
    n = lap.shape[-1]
    if isinstance(gamma_max, Tensor):
        if np.any(gamma_max.data <= 0):
            raise ValueError("gamma_max must be positive")
        scale = reshape(2.0 / gamma_max, gamma_max.shape + (1, 1))
        return ScaledLaplacian(lap * scale - np.eye(n), gamma_max.data)
    if gamma_max <= 0:
        raise ValueError(f"gamma_max must be positive, got {gamma_max}")
    return ScaledLaplacian(lap * (2.0 / gamma_max) - np.eye(n), float(gamma_max))


def scaled_laplacian_from_adjacency(a: Tensor) -> ScaledLaplacian:
    """Symmetrise, build the Laplacian and rescale it with its own power-iteration gamma_max."""
    lap = laplacian(symmetrize(a))
    return scale_laplacian(lap, lambda_max(lap))


@dataclass
class ChebCoeffs:
    theta: Tensor  # (K,)
    weights: Tensor  # (K, d_in, d_out)

    @property
    def order(self) -> int:
        return self.theta.shape[0]

    @classmethod
    def init(cls, order: int, d_in: int, d_out: int, rng: np.random.Generator) -> "ChebCoeffs":
        if order < 1:
            raise ValueError("Chebyshev order K must be >= 1")
        bound = np.sqrt(6.0 / (d_in + d_out)) / np.sqrt(order)
        return cls(
            Tensor(np.ones(order), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (order, d_in, d_out)), requires_grad=True),
        )


def cheb_conv(x: Tensor, lt, coeffs: ChebCoeffs) -> Tensor:
    """sum_k theta_k T_k(L~) X Theta_k, with T_k built by the three-term recurrence.

    ``x`` is (..., N, d_in); ``lt`` is (..., N, N) and broadcasts against x's leading axes.
    """
    lmat = lt.matrix if isinstance(lt, ScaledLaplacian) else as_tensor(lt)
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != lmat.shape[-1]:
        raise ShapeError(f"cheb_conv: features {x.shape} do not match Laplacian {lmat.shape}")
    if coeffs.weights.shape[1] != x.shape[-1]:
        raise ShapeError(f"cheb_conv: input width {x.shape[-1]} vs weights {coeffs.weights.shape}")
    terms = [x]
    if coeffs.order > 1:
        terms.append(matmul(lmat, x))
    for _ in range(2, coeffs.order):
        terms.append(matmul(lmat, terms[-1]) * 2.0 - terms[-2])
    out = None
    for k, z in enumerate(terms):
        term = matmul(z, coeffs.weights[k]) * coeffs.theta[k]
        out = term if out is None else out + term
    return out


def cheb_conv_steps(x: Tensor, lt, coeffs: ChebCoeffs) -> Tensor:
    """cheb_conv applied independently at every time step of ``x`` (B, N, T, d_in).

    Node mixing acts on the N axis only, so the T and feature axes are flattened together
    for the recurrence and split again for the per-term feature maps.
    """
    lmat = lt.matrix if isinstance(lt, ScaledLaplacian) else as_tensor(lt)
    b, n, t, d = x.shape
    if lmat.shape[-1] != n:
        raise ShapeError(f"cheb_conv: features {x.shape} do not match Laplacian {lmat.shape}")
    flat = reshape(x, (b, n, t * d))
    terms = [flat]
    if coeffs.order > 1:
        terms.append(matmul(lmat, flat))
    for _ in range(2, coeffs.order):
        terms.append(matmul(lmat, terms[-1]) * 2.0 - terms[-2])
    out = None
    for k, z in enumerate(terms):
        term = matmul(reshape(z, (b, n, t, d)), coeffs.weights[k]) * coeffs.theta[k]
        out = term if out is None else out + term
    return out
