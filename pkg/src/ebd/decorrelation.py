"""Error broadcast and decorrelation updates for dense layers.

The layer loss is half the squared Frobenius norm of a recursively estimated
cross-correlation between (a nonlinear function of) layer activations and the
output error. Its gradient splits into a local term (delta_w1, used for
training) and a propagated term (delta_w2, kept for diagnostics only).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import NumericError
from .forward import BatchCache, Network, ShapeError


@dataclass
class ErrorProjection:
    """Recursive cross-correlation estimate R_hat [n_g x n_out] with
    forgetting factor lambda_d, optional descent momentum on the local update."""

    R_hat: np.ndarray
    lambda_d: float = 0.999999
    absorb_zeta: bool = False
    momentum: float = 0.0
    vel_W: Optional[np.ndarray] = None
    vel_b: Optional[np.ndarray] = None

    def zeta(self, B: int) -> float:
        """Gradient prefactor: (1-lambda_d)/B, or 1 when absorbed into rates."""
        return 1.0 if self.absorb_zeta else (1.0 - self.lambda_d) / B


def init_projection(n_g: int, n_out: int, rng: np.random.Generator,
                    scheme: str = "xavier_uniform", gain: float = 1e-2,
                    lambda_d: float = 0.999999, absorb_zeta: bool = False,
                    momentum: float = 0.0, dtype=np.float32) -> ErrorProjection:
    if scheme == "xavier_uniform":
        bound = gain * np.sqrt(6.0 / (n_g + n_out))
        R = rng.uniform(-bound, bound, size=(n_g, n_out))
    elif scheme == "normal":
        R = rng.normal(0.0, gain, size=(n_g, n_out))
    elif scheme == "zeros":
        # collapses to no learning until the first recursion step
        R = np.zeros((n_g, n_out))
    else:
        raise ValueError(f"unknown projection init {scheme!r}")
    return ErrorProjection(R_hat=np.asarray(R, dtype=dtype), lambda_d=lambda_d,
                           absorb_zeta=absorb_zeta, momentum=momentum)


def update_cross_correlation(proj: ErrorProjection, G: np.ndarray, E: np.ndarray) -> np.ndarray:
    """R_hat <- lambda_d R_hat + ((1-lambda_d)/B) G E^T, in place."""
    if G.shape[1] != E.shape[1]:
        raise ShapeError(f"batch mismatch {G.shape} vs {E.shape}")
    if proj.R_hat.shape != (G.shape[0], E.shape[0]):
        raise ShapeError(f"R_hat {proj.R_hat.shape} vs GE^T {(G.shape[0], E.shape[0])}")
    B = G.shape[1]
    lam = proj.lambda_d
    proj.R_hat *= lam
    proj.R_hat += ((1.0 - lam) / B) * (G @ E.T)
    if not np.isfinite(proj.R_hat).all():
        raise NumericError("non-finite cross-correlation estimate")
    return proj.R_hat


def project_error(R_hat: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Broadcast the output error onto the layer: Q = R_hat E."""
    if R_hat.shape[1] != E.shape[0]:
        raise ShapeError(f"R_hat {R_hat.shape} vs E {E.shape}")
    return R_hat @ E


def decorrelation_loss(R_hat: np.ndarray) -> float:
    return 0.5 * float(np.sum(R_hat.astype(np.float64) ** 2))


def delta_w1(cache: BatchCache, k: int, Q: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Local decorrelation update: Z = G_d * F_d * Q; dW = zeta Z H_prev^T.

    zeta is the full prefactor ((1-lambda_d)/B, or 1 when absorbed into the
    learning rate). Applied by the caller as W <- W - mu * dW.
    """
    lc = cache.layers[k]
    if lc.G_d is None or lc.F_d is None:
        raise ValueError("cache lacks derivative fields for layer %d" % k)
    Z = lc.G_d * lc.F_d * Q
    h_prev = cache.h_prev(k)
    dW = zeta * (Z @ h_prev.T)
    db = zeta * Z.sum(axis=1)
    return dW, db


def delta_w2(cache: BatchCache, net: Network, k: int, R_hat: np.ndarray,
             zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Propagated component of the decorrelation gradient (diagnostics only).

    Chains jacobians from the output back to layer k:
    Phi^(L)[n] = diag(f'(u^L[n])), Phi^(j) = Phi^(j+1) W^(j+1) diag(f'(u^j)),
    psi[n] = Phi^(k)[n]^T (R_hat^T g(h^(k)[n])), dW2 = zeta Psi H_prev^T.
    Requires strictly dense layers from k to the output.
    """
    L = len(net.layers) - 1
    if k >= L:
        raise ValueError("delta_w2 is undefined for the output layer")
    B = cache.layers[k].H.shape[1]
    # Phi as [B, n_out, n_j], built from the output inward
    fL = cache.layers[L].F_d                      # [n_out x B]
    n_out = fL.shape[0]
    Phi = np.zeros((B, n_out, n_out), dtype=fL.dtype)
    idx = np.arange(n_out)
    Phi[:, idx, idx] = fL.T
    for j in range(L - 1, k - 1, -1):
        Wnext = net.layers[j + 1].params.W
        fj = cache.layers[j].F_d                  # [n_j x B]
        Phi = (Phi @ Wnext) * fj.T[:, None, :]
    g_tilde = R_hat.T @ cache.layers[k].G         # [n_out x B]
    Psi = np.einsum("bli,lb->ib", Phi, g_tilde)   # [n_k x B]
    h_prev = cache.h_prev(k)
    return zeta * (Psi @ h_prev.T), zeta * Psi.sum(axis=1)


def output_layer_update(cache: BatchCache, net: Network) -> tuple[np.ndarray, np.ndarray]:
    """Standard MMSE gradient for the final dense layer:
    dW = (1/B)(f'(U^L) * E) H^(L-1)^T; applied as W <- W - mu dW."""
    L = len(net.layers) - 1
    lc = cache.layers[L]
    B = lc.H.shape[1]
    delta = lc.F_d * cache.E
    h_prev = cache.h_prev(L)
    return (delta @ h_prev.T) / B, delta.sum(axis=1) / B


def forward_broadcast_update(cache: BatchCache, net: Network, k: int,
                             R_hat: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """Decorrelation gradient of layer k's loss with respect to the OUTPUT
    layer parameters: Psi = f'(U^L) * (R_hat^T g(h^k)); dW = zeta Psi H^(L-1)^T."""
    L = len(net.layers) - 1
    if k >= L:
        raise ValueError("forward broadcast needs a hidden source layer")
    g_tilde = R_hat.T @ cache.layers[k].G         # [n_out x B]
    Psi = cache.layers[L].F_d * g_tilde
    h_prev = cache.h_prev(L)
    return zeta * (Psi @ h_prev.T), zeta * Psi.sum(axis=1)
