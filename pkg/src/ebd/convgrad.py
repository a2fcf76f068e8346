"""Decorrelation gradients for convolutional and locally connected layers.

Each output channel p keeps a cross-correlation tensor R_hat[p,q,r,s] between
g(H^(k,p)[r,s]) and error component q, updated with the same forgetting
recursion as dense layers. Index arithmetic supports arbitrary stride and
zero-padding (the stride-1 formulas generalize via r*stride + i - pad).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .forward import BatchCache, ShapeError, im2col, im2col_matrix
from .regularizers import sparsity_ratio_activation_grad


@dataclass
class ConvErrorProjection:
    """R_hat [P x n_c x M x N]; slices behave like dense ErrorProjection."""

    R_hat: np.ndarray
    lambda_d: float = 0.99999
    absorb_zeta: bool = False
    momentum: float = 0.0
    vel_W: np.ndarray = None
    vel_b: np.ndarray = None

    def zeta(self, B: int) -> float:
        return 1.0 if self.absorb_zeta else (1.0 - self.lambda_d) / B


def init_conv_projection(p: int, n_c: int, m: int, n: int, rng: np.random.Generator,
                         scheme: str = "normal", gain: float = 1e-2,
                         lambda_d: float = 0.99999, absorb_zeta: bool = False,
                         momentum: float = 0.0, dtype=np.float32) -> ConvErrorProjection:
    shape = (p, n_c, m, n)
    if scheme == "normal":
        R = rng.normal(0.0, gain, size=shape)
    elif scheme == "xavier_uniform":
        bound = gain * np.sqrt(6.0 / (m * n + n_c))
        R = rng.uniform(-bound, bound, size=shape)
    elif scheme == "zeros":
        R = np.zeros(shape)
    else:
        raise ValueError(f"unknown projection init {scheme!r}")
    return ConvErrorProjection(R_hat=np.asarray(R, dtype=dtype), lambda_d=lambda_d,
                               absorb_zeta=absorb_zeta, momentum=momentum)


def update_conv_cross_correlation(proj: ConvErrorProjection, G: np.ndarray,
                                  E: np.ndarray) -> np.ndarray:
    """R_hat[p,q,:,:] <- lam R_hat + ((1-lam)/B) sum_n g(H[n,p]) eps_q[n]."""
    if G.shape[0] != E.shape[1]:
        raise ShapeError(f"batch mismatch {G.shape} vs {E.shape}")
    B = G.shape[0]
    lam = proj.lambda_d
    proj.R_hat *= lam
    proj.R_hat += ((1.0 - lam) / B) * np.einsum("nprs,qn->pqrs", G, E, optimize=True)
    return proj.R_hat


def conv_decorrelation_loss(R_hat: np.ndarray) -> float:
    return 0.5 * float(np.sum(R_hat.astype(np.float64) ** 2))


def conv_phi(cache: BatchCache, k: int, R_hat: np.ndarray, E: np.ndarray) -> np.ndarray:
    """phi[n,p,r,s] = sum_q eps_q[n] R_hat[p,q,r,s] g'(H[n,p,r,s]) f'(U[n,p,r,s])."""
    lc = cache.layers[k]
    if R_hat.shape[1] != E.shape[0]:
        raise ShapeError(f"R_hat {R_hat.shape} vs E {E.shape}")
    proj = np.einsum("pqrs,qn->nprs", R_hat, E, optimize=True)
    return proj * lc.G_d * lc.F_d


def conv_ebd_gradient(phi: np.ndarray, h_prev: np.ndarray, kernel: int, stride: int,
                      pad: int, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate phi against input patches, summing over batch and space:
    dW[p,h,i,j] = zeta sum_{n,r,s} phi[n,p,r,s] H_prev[n,h,r*stride+i-pad,...]."""
    cols, (B, M, N) = im2col_matrix(h_prev, kernel, stride, pad)
    P = phi.shape[1]
    phi_mat = np.ascontiguousarray(phi.transpose(1, 0, 2, 3)).reshape(P, B * M * N)
    c_in = h_prev.shape[1]
    dW = zeta * (phi_mat @ cols.T).reshape(P, c_in, kernel, kernel)
    db = zeta * phi.sum(axis=(0, 2, 3))
    return dW, db


def lc_ebd_gradient(phi: np.ndarray, h_prev: np.ndarray, kernel: int, stride: int,
                    pad: int, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-location accumulation (no spatial sum):
    dW[p,r,s,h,i,j] = zeta sum_n phi[n,p,r,s] H_prev[n,h,r*stride+i-pad,...]."""
    patches = im2col(h_prev, kernel, stride, pad)
    dW = zeta * np.einsum("nprs,nhijrs->prshij", phi, patches, optimize=True)
    db = zeta * phi.sum(axis=0)
    return dW, db


def sparsity_ratio_grad_maps(H: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """d/dH of ||H||_1/||H||_2 per (sample, channel) map, vectorized;
    maps with ||H||_2 <= tol get a zero gradient."""
    l2 = np.sqrt(np.sum(H * H, axis=(2, 3), keepdims=True))
    l1 = np.sum(np.abs(H), axis=(2, 3), keepdims=True)
    safe = np.maximum(l2, tol)
    g = np.sign(H) / safe - (l1 / safe ** 3) * H
    return np.where(l2 > tol, g, 0.0)


def conv_sparsity_gradient(cache: BatchCache, k: int, h_prev: np.ndarray, kernel: int,
                           stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    """L1/L2 ratio sparsity chained through the conv kernel: the activation
    gradient per (sample, channel) map, gated by f'(U) and accumulated like
    the decorrelation gradient with prefactor 1/B."""
    lc = cache.layers[k]
    B = lc.H.shape[0]
    act = sparsity_ratio_grad_maps(lc.H) * lc.F_d
    return conv_ebd_gradient(act, h_prev, kernel, stride, pad, 1.0 / B)


def lc_sparsity_gradient(cache: BatchCache, k: int, h_prev: np.ndarray, kernel: int,
                         stride: int, pad: int) -> tuple[np.ndarray, np.ndarray]:
    lc = cache.layers[k]
    B = lc.H.shape[0]
    act = sparsity_ratio_grad_maps(lc.H) * lc.F_d
    return lc_ebd_gradient(act, h_prev, kernel, stride, pad, 1.0 / B)
