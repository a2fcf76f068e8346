"""Batched forward passes and the per-batch cache.

Dense layers consume/produce ``[features x B]``; conv, locally connected and
pooling layers use ``[B x C x H x W]``. A flatten layer is the explicit
adapter between the two worlds. All functions are pure in their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import (
    ConfigError,
    ConvParams,
    DenseParams,
    LayerSpec,
    LocalParams,
    apply_activation,
    apply_g,
    conv_output_size,
    init_conv,
    init_dense,
    init_local,
    layer_rng,
)


class ShapeError(ValueError):
    """Inconsistent array shapes between layers."""


@dataclass
class LayerCache:
    """Forward quantities of one layer for one mini-batch.

    Dense: U, H, F_d, G, G_d are [n x B]. Conv/LC: [B x P x M x N].
    Pool/flatten layers only populate H.
    """

    H: np.ndarray
    U: Optional[np.ndarray] = None
    F_d: Optional[np.ndarray] = None
    G: Optional[np.ndarray] = None
    G_d: Optional[np.ndarray] = None


@dataclass
class BatchCache:
    X: np.ndarray                    # network input, layout of the first layer
    layers: list[LayerCache]
    E: Optional[np.ndarray] = None   # output error H^(L) - Y, [n_out x B]

    def h_prev(self, k: int) -> np.ndarray:
        """Input activations feeding layer k (k=0 -> network input)."""
        return self.X if k == 0 else self.layers[k - 1].H


def dense_forward(params: DenseParams, h_prev: np.ndarray, kind: str, g: str) -> LayerCache:
    if params.W.shape[1] != h_prev.shape[0]:
        raise ShapeError(f"dense expects {params.W.shape[1]} inputs, got {h_prev.shape[0]}")
    U = params.W @ h_prev + params.b[:, None]
    H, F_d = apply_activation(U, kind)
    G, G_d = apply_g(H, g)
    return LayerCache(H=H, U=U, F_d=F_d, G=G, G_d=G_d)


def im2col(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Extract sliding patches: [B,C,H,W] -> [B, C, k, k, M, N].

    ``patches[n,h,i,j,r,s] = x_padded[n, h, r*stride+i, s*stride+j]``.
    """
    B, C, H, W = x.shape
    M = conv_output_size(H, kernel, stride, pad)
    N = conv_output_size(W, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sB, sC, sH, sW = x.strides
    shape = (B, C, kernel, kernel, M, N)
    strides = (sB, sC, sH, sW, sH * stride, sW * stride)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)


def col2im(cols: np.ndarray, in_shape: tuple, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to [B,C,H,W]."""
    B, C, H, W = in_shape
    M, N = cols.shape[4], cols.shape[5]
    out = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            out[:, :, i:i + stride * M:stride, j:j + stride * N:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def im2col_matrix(x: np.ndarray, kernel: int, stride: int, pad: int) -> tuple[np.ndarray, tuple]:
    """Materialized patch matrix [C*k*k x B*M*N] (GEMM-friendly layout)."""
    patches = im2col(x, kernel, stride, pad)
    B, C, _, _, M, N = patches.shape
    cols = np.ascontiguousarray(patches.transpose(1, 2, 3, 0, 4, 5))
    return cols.reshape(C * kernel * kernel, B * M * N), (B, M, N)


def conv_forward(params: ConvParams, h_prev: np.ndarray, stride: int, pad: int,
                 kind: str, g: str = "identity") -> LayerCache:
    """Cross-correlation (unflipped kernel) over channels and space."""
    kernel = params.W.shape[2]
    if h_prev.shape[2] + 2 * pad < kernel or h_prev.shape[3] + 2 * pad < kernel:
        raise ShapeError("input smaller than kernel")
    P = params.W.shape[0]
    cols, (B, M, N) = im2col_matrix(h_prev, kernel, stride, pad)
    U = (params.W.reshape(P, -1) @ cols).reshape(P, B, M, N).transpose(1, 0, 2, 3)
    U += params.b[None, :, None, None]
    H, F_d = apply_activation(U, kind)
    G, G_d = apply_g(H, g)
    return LayerCache(H=H, U=U, F_d=F_d, G=G, G_d=G_d)


def local_forward(params: LocalParams, h_prev: np.ndarray, stride: int, pad: int,
                  kind: str, g: str = "identity") -> LayerCache:
    """Like conv_forward but each output site (r,s) owns its kernel."""
    kernel = params.W.shape[5]
    if h_prev.shape[2] + 2 * pad < kernel or h_prev.shape[3] + 2 * pad < kernel:
        raise ShapeError("input smaller than kernel")
    patches = im2col(h_prev, kernel, stride, pad)
    U = np.einsum("prshij,nhijrs->nprs", params.W, patches, optimize=True)
    U += params.b[None]
    H, F_d = apply_activation(U, kind)
    G, G_d = apply_g(H, g)
    return LayerCache(H=H, U=U, F_d=F_d, G=G, G_d=G_d)


def avgpool_forward(h_prev: np.ndarray, kernel: int, stride: int) -> LayerCache:
    B, C, H, W = h_prev.shape
    if stride == kernel and H % kernel == 0 and W % kernel == 0:
        M, N = H // kernel, W // kernel
        view = h_prev.reshape(B, C, M, kernel, N, kernel)
        return LayerCache(H=view.mean(axis=(3, 5)))
    patches = im2col(h_prev, kernel, stride, 0)
    return LayerCache(H=patches.mean(axis=(2, 3)))


def avgpool_backward(grad_out: np.ndarray, in_shape: tuple, kernel: int, stride: int) -> np.ndarray:
    """Route pooled gradients back with uniform 1/k^2 weights."""
    B, P, M, N = grad_out.shape
    cols = np.broadcast_to(
        grad_out[:, :, None, None] / (kernel * kernel), (B, P, kernel, kernel, M, N)
    )
    return col2im(np.ascontiguousarray(cols), in_shape, kernel, stride, 0)


def flatten_forward(h_prev: np.ndarray) -> LayerCache:
    B = h_prev.shape[0]
    return LayerCache(H=h_prev.reshape(B, -1).T)


@dataclass
class Layer:
    spec: LayerSpec
    params: object = None            # DenseParams | ConvParams | LocalParams | None
    in_shape: tuple = ()             # (n,) dense or (C,H,W) spatial
    out_shape: tuple = ()


@dataclass
class Network:
    layers: list[Layer]
    input_shape: tuple

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.layers[-1].out_shape))

    def trainable_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if l.params is not None]


def build_network(specs: list[LayerSpec], input_shape: tuple, seed: int,
                  scheme: str = "kaiming_uniform", gain: float = 0.75,
                  weight_sparsity: float = 0.0, dtype=np.float32) -> Network:
    """Resolve shapes and sample parameters layer by layer."""
    layers: list[Layer] = []
    shape = tuple(input_shape)
    for idx, spec in enumerate(specs):
        rng = layer_rng(seed, idx)
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigError("dense layer needs flattened input (insert flatten)")
            params = init_dense(spec.units, shape[0], scheme, gain, rng,
                                weight_sparsity=weight_sparsity, dtype=dtype)
            out = (spec.units,)
        elif spec.kind == "conv":
            C, H, W = shape
            M = conv_output_size(H, spec.kernel, spec.stride, spec.pad)
            N = conv_output_size(W, spec.kernel, spec.stride, spec.pad)
            params = init_conv(spec.channels, C, spec.kernel, scheme, gain, rng, dtype=dtype)
            out = (spec.channels, M, N)
        elif spec.kind == "local":
            C, H, W = shape
            M = conv_output_size(H, spec.kernel, spec.stride, spec.pad)
            N = conv_output_size(W, spec.kernel, spec.stride, spec.pad)
            params = init_local(spec.channels, M, N, C, spec.kernel, scheme, gain, rng, dtype=dtype)
            out = (spec.channels, M, N)
        elif spec.kind == "avgpool":
            C, H, W = shape
            M = conv_output_size(H, spec.kernel, spec.stride, 0)
            N = conv_output_size(W, spec.kernel, spec.stride, 0)
            params = None
            out = (C, M, N)
        elif spec.kind == "flatten":
            params = None
            out = (int(np.prod(shape)),)
        else:
            raise ConfigError(f"unknown layer kind {spec.kind!r}")
        layers.append(Layer(spec=spec, params=params, in_shape=shape, out_shape=out))
        shape = out
    return Network(layers=layers, input_shape=tuple(input_shape))


def layer_forward(layer: Layer, h_prev: np.ndarray) -> LayerCache:
    s = layer.spec
    if s.kind == "dense":
        return dense_forward(layer.params, h_prev, s.activation, s.g)
    if s.kind == "conv":
        return conv_forward(layer.params, h_prev, s.stride, s.pad, s.activation, s.g)
    if s.kind == "local":
        return local_forward(layer.params, h_prev, s.stride, s.pad, s.activation, s.g)
    if s.kind == "avgpool":
        return avgpool_forward(h_prev, s.kernel, s.stride)
    if s.kind == "flatten":
        return flatten_forward(h_prev)
    raise ConfigError(f"unknown layer kind {s.kind!r}")


def network_forward(net: Network, X: np.ndarray, Y: Optional[np.ndarray] = None) -> BatchCache:
    """Run the full chain; with targets, also store E = H^(L) - Y."""
    cache = BatchCache(X=X, layers=[])
    h = X
    for layer in net.layers:
        lc = layer_forward(layer, h)
        cache.layers.append(lc)
        h = lc.H
    if Y is not None:
        if h.shape != Y.shape:
            raise ShapeError(f"output {h.shape} vs target {Y.shape}")
        cache.E = h - Y
    return cache
