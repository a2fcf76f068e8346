"""Reference rules sharing the forward pass: backpropagation (MSE or
cross-entropy) and Direct Feedback Alignment, optionally with entropy
regularization (DFA+E)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError
from .forward import (
    BatchCache,
    Network,
    avgpool_backward,
    col2im,
    im2col,
    im2col_matrix,
)
from .regularizers import EntropyState, entropy_gradient


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def mse_loss(E: np.ndarray) -> float:
    B = E.shape[1]
    return 0.5 * float(np.sum(E.astype(np.float64) ** 2)) / B


def cross_entropy_loss(H_L: np.ndarray, Y: np.ndarray) -> float:
    p = softmax(H_L.astype(np.float64))
    return -float(np.sum(Y * np.log(p + 1e-300))) / H_L.shape[1]


def dense_param_grad(gU: np.ndarray, h_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return gU @ h_prev.T, gU.sum(axis=1)


def conv_param_grad(gU: np.ndarray, h_prev: np.ndarray, kernel: int, stride: int,
                    pad: int) -> tuple[np.ndarray, np.ndarray]:
    cols, (B, M, N) = im2col_matrix(h_prev, kernel, stride, pad)
    P = gU.shape[1]
    gU_mat = np.ascontiguousarray(gU.transpose(1, 0, 2, 3)).reshape(P, B * M * N)
    c_in = h_prev.shape[1]
    dW = (gU_mat @ cols.T).reshape(P, c_in, kernel, kernel)
    return dW, gU.sum(axis=(0, 2, 3))


def local_param_grad(gU: np.ndarray, h_prev: np.ndarray, kernel: int, stride: int,
                     pad: int) -> tuple[np.ndarray, np.ndarray]:
    patches = im2col(h_prev, kernel, stride, pad)
    dW = np.einsum("nprs,nhijrs->prshij", gU, patches, optimize=True)
    return dW, gU.sum(axis=0)


def bp_backward(cache: BatchCache, net: Network, loss: str = "mse") -> dict:
    """Chain-rule gradients of the batch loss for every trainable layer.

    mse: (1/2B)||E||_F^2.  cross_entropy: softmax over the network output,
    targets must be probability columns.
    Returns {layer index: (dW, db)}.
    """
    L = len(net.layers) - 1
    H_L = cache.layers[L].H
    B = H_L.shape[1]
    if loss == "mse":
        gH = cache.E / B
    elif loss == "cross_entropy":
        Y = H_L - cache.E
        if (Y < -1e-9).any() or not np.allclose(Y.sum(axis=0), 1.0, atol=1e-6):
            raise ConfigError("cross-entropy needs probability-vector targets")
        gH = (softmax(H_L) - Y) / B
    else:
        raise ConfigError(f"unknown loss {loss!r}")

    grads: dict = {}
    for k in range(L, -1, -1):
        layer = net.layers[k]
        s = layer.spec
        lc = cache.layers[k]
        h_prev = cache.h_prev(k)
        if s.kind == "dense":
            gU = gH * lc.F_d
            grads[k] = dense_param_grad(gU, h_prev)
            gH = layer.params.W.T @ gU
        elif s.kind == "conv":
            gU = gH * lc.F_d
            grads[k] = conv_param_grad(gU, h_prev, s.kernel, s.stride, s.pad)
            cols = np.einsum("nprs,phij->nhijrs", gU, layer.params.W, optimize=True)
            gH = col2im(cols, h_prev.shape, s.kernel, s.stride, s.pad)
        elif s.kind == "local":
            gU = gH * lc.F_d
            grads[k] = local_param_grad(gU, h_prev, s.kernel, s.stride, s.pad)
            cols = np.einsum("nprs,prshij->nhijrs", gU, layer.params.W, optimize=True)
            gH = col2im(cols, h_prev.shape, s.kernel, s.stride, s.pad)
        elif s.kind == "avgpool":
            gH = avgpool_backward(gH, h_prev.shape, s.kernel, s.stride)
        elif s.kind == "flatten":
            gH = gH.T.reshape(h_prev.shape)
        else:
            raise ConfigError(f"unknown layer kind {s.kind!r}")
    return grads


@dataclass
class FeedbackMatrices:
    """Fixed random projections: per hidden trainable layer, [layer size x n_out].
    Never modified after initialization."""

    B: dict  # layer index -> np.ndarray


def init_feedback(net: Network, rng_seed: int, scheme: str = "xavier_uniform",
                  gain: float = 1e-2, dtype=np.float32) -> FeedbackMatrices:
    """Same init family as the decorrelation projections, so freezing the
    cross-correlation recursion reproduces DFA exactly."""
    from .core import layer_rng

    out = {}
    n_out = net.out_dim
    trainable = net.trainable_indices()
    for k in trainable[:-1]:
        size = int(np.prod(net.layers[k].out_shape))
        rng = layer_rng(rng_seed, k)
        if scheme == "xavier_uniform":
            bound = gain * np.sqrt(6.0 / (size + n_out))
            Bk = rng.uniform(-bound, bound, size=(size, n_out))
        elif scheme == "normal":
            Bk = rng.normal(0.0, gain, size=(size, n_out))
        else:
            raise ConfigError(f"unknown feedback init {scheme!r}")
        out[k] = np.asarray(Bk, dtype=dtype)
    return FeedbackMatrices(B=out)


def dfa_update(cache: BatchCache, net: Network, fb: FeedbackMatrices) -> dict:
    """Hidden layer k gets delta = (B_k E) * F_d (reshaped for conv/LC);
    dW = (1/B) delta h_prev^T. Output layer as in BP. No downstream weights
    are read for hidden updates."""
    L = len(net.layers) - 1
    B = cache.E.shape[1]
    grads: dict = {}
    for k in net.trainable_indices():
        layer = net.layers[k]
        s = layer.spec
        lc = cache.layers[k]
        h_prev = cache.h_prev(k)
        if k == L:
            gU = (lc.F_d * cache.E) / B
            grads[k] = dense_param_grad(gU, h_prev)
            continue
        proj = fb.B[k] @ cache.E        # [size_k x B]
        if s.kind == "dense":
            gU = (proj * lc.F_d) / B
            grads[k] = dense_param_grad(gU, h_prev)
        else:
            maps = proj.T.reshape(lc.H.shape)
            gU = (maps * lc.F_d) / B
            if s.kind == "conv":
                grads[k] = conv_param_grad(gU, h_prev, s.kernel, s.stride, s.pad)
            else:
                grads[k] = local_param_grad(gU, h_prev, s.kernel, s.stride, s.pad)
    return grads


def dfa_plus_entropy_update(cache: BatchCache, net: Network, fb: FeedbackMatrices,
                            entropy_states: dict, mu_E: dict) -> dict:
    """DFA gradients with the entropy ascent folded in per dense layer:
    upd = dfa - mu_E[k] * grad(J_E). mu_E is relative to the caller's rate."""
    grads = dfa_update(cache, net, fb)
    for k, state in entropy_states.items():
        rate = mu_E.get(k, 0.0)
        if rate == 0.0:
            continue
        eW, eb = entropy_gradient(state, cache, k)
        dW, db = grads[k]
        grads[k] = (dW - rate * eW, db - rate * eb)
    return grads
