"""Anti-collapse regularizers and their closed-form gradients.

Power normalization holds per-unit mean-square activation near a target;
layer entropy maximizes log det of the activation correlation matrix (dense
layers, direct solve or incremental Woodbury inverse); conv/LC layers use a
weight-entropy objective and an L1/L2 activation sparsity ratio instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NumericError
from .forward import BatchCache


@dataclass
class EntropyState:
    """Activation correlation estimate R_h (and optionally its inverse B_h,
    maintained incrementally) with forgetting factor lambda_E."""

    R_h: np.ndarray
    lambda_E: float = 0.99999
    eps: float = 1e-8
    B_h: Optional[np.ndarray] = None       # tracks (R_h + eps I)^-1 when set

    @classmethod
    def identity(cls, n: int, lambda_E: float = 0.99999, eps: float = 1e-8,
                 incremental: bool = False, dtype=np.float32) -> "EntropyState":
        R = np.eye(n, dtype=dtype)
        st = cls(R_h=R, lambda_E=lambda_E, eps=eps)
        if incremental:
            st.B_h = np.eye(n, dtype=dtype) / (1.0 + eps)
        return st


def update_layer_correlation(state: EntropyState, H: np.ndarray) -> np.ndarray:
    """R_h <- lambda_E R_h + ((1-lambda_E)/B) H H^T, then symmetrized."""
    B = H.shape[1]
    lam = state.lambda_E
    state.R_h *= lam
    state.R_h += ((1.0 - lam) / B) * (H @ H.T)
    state.R_h = 0.5 * (state.R_h + state.R_h.T)
    if state.B_h is not None:
        woodbury_update(state, H)
    return state.R_h


def woodbury_update(state: EntropyState, H: np.ndarray) -> np.ndarray:
    """Rank-B incremental inverse:
    B_h <- (B_h - V (lam B/(1-lam) I + H^T V)^-1 V^T) / lam,  V = B_h H.

    The inner solve is a BxB system; the eps shift is carried from the
    initial inverse and not re-injected (its per-step drift is (1-lam) eps).
    """
    if state.B_h is None:
        raise ValueError("incremental inverse not enabled on this state")
    lam = state.lambda_E
    B = H.shape[1]
    V = state.B_h @ H
    inner = (lam * B / (1.0 - lam)) * np.eye(B, dtype=H.dtype) + H.T @ V
    try:
        sol = np.linalg.solve(inner, V.T)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular inner matrix in Woodbury update: {e}") from e
    state.B_h = (state.B_h - V @ sol) / lam
    state.B_h = 0.5 * (state.B_h + state.B_h.T)
    return state.B_h


def _solve_correlation(state: EntropyState, H: np.ndarray) -> np.ndarray:
    """(R_h + eps I)^-1 H via Cholesky, or the tracked inverse if enabled."""
    if state.B_h is not None:
        return state.B_h @ H
    n = state.R_h.shape[0]
    A = state.R_h + state.eps * np.eye(n, dtype=state.R_h.dtype)
    try:
        c = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"correlation matrix not positive definite (eps too small?): {e}") from e
    y = np.linalg.solve(c, H)
    return np.linalg.solve(c.T, y)


def entropy_value(state: EntropyState) -> float:
    n = state.R_h.shape[0]
    A = state.R_h.astype(np.float64) + state.eps * np.eye(n)
    sign, logdet = np.linalg.slogdet(A)
    if sign <= 0:
        raise NumericError("log det of non-PD correlation matrix")
    return 0.5 * logdet


def entropy_gradient(state: EntropyState, cache: BatchCache, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of 0.5 log det(R_h + eps I) wrt layer k parameters:
    dW = (2(1-lam)/B) (((R_h+eps I)^-1 H) * F_d) H_prev^T.

    Entropy is maximized: apply as W <- W + mu dW (ascent).
    R_h must already include the current batch.
    """
    lc = cache.layers[k]
    B = lc.H.shape[1]
    S = _solve_correlation(state, lc.H)
    scaled = (2.0 * (1.0 - state.lambda_E) / B) * (S * lc.F_d)
    h_prev = cache.h_prev(k)
    return scaled @ h_prev.T, scaled.sum(axis=1)


def power_norm_value(H: np.ndarray, target: float) -> float:
    d = (H.astype(np.float64) ** 2).mean(axis=1) - target
    return float(np.sum(d * d))


def power_norm_gradient(cache: BatchCache, k: int, target: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum_i ((1/B) sum_n h_i[n]^2 - P)^2:
    dW = (4/B) D (H * F_d) H_prev^T with D = diag of per-unit power error.
    Applied as descent."""
    lc = cache.layers[k]
    B = lc.H.shape[1]
    d = (lc.H * lc.H).mean(axis=1) - target
    scaled = (4.0 / B) * d[:, None] * (lc.H * lc.F_d)
    h_prev = cache.h_prev(k)
    return scaled @ h_prev.T, scaled.sum(axis=1)


def l1_sparsity_gradient(cache: BatchCache, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain L1 activation penalty for dense layers: d/dW (1/B)||H||_1."""
    lc = cache.layers[k]
    B = lc.H.shape[1]
    scaled = np.sign(lc.H) * lc.F_d / B
    h_prev = cache.h_prev(k)
    return scaled @ h_prev.T, scaled.sum(axis=1)


def sparsity_ratio_activation_grad(H_pc: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """d/dH of ||H||_1 / ||H||_2 for one channel map; zero below tol."""
    l2 = np.sqrt(np.sum(H_pc.astype(np.float64) ** 2))
    if l2 <= tol:
        return np.zeros_like(H_pc)
    l1 = np.sum(np.abs(H_pc.astype(np.float64)))
    g = np.sign(H_pc) / l2 - (l1 / l2 ** 3) * H_pc
    return g.astype(H_pc.dtype)


def weight_entropy_gradient(W: np.ndarray, eps: float) -> np.ndarray:
    """Ascent direction of 0.5 log det(R_Wbar + eps I) for conv/LC kernels.

    Wbar is W unraveled to [P x fan_in]; the correlation matrix is taken in
    the smaller dimension (Wbar^T Wbar when P >= fan_in, else Wbar Wbar^T)
    and the gradient reshaped back to W's shape.
    """
    P = W.shape[0]
    Wb = W.reshape(P, -1)
    fan = Wb.shape[1]
    if P >= fan:
        R = Wb.T @ Wb + eps * np.eye(fan, dtype=W.dtype)
        grad = Wb @ np.linalg.inv(R)
    else:
        R = Wb @ Wb.T + eps * np.eye(P, dtype=W.dtype)
        grad = np.linalg.inv(R) @ Wb
    return grad.reshape(W.shape)


def weight_entropy_value(W: np.ndarray, eps: float) -> float:
    P = W.shape[0]
    Wb = W.reshape(P, -1).astype(np.float64)
    fan = Wb.shape[1]
    R = Wb.T @ Wb if P >= fan else Wb @ Wb.T
    sign, logdet = np.linalg.slogdet(R + eps * np.eye(R.shape[0]))
    if sign <= 0:
        raise NumericError("weight correlation not positive definite")
    return 0.5 * logdet
