"""Layer descriptions, parameter containers, activations and initialization.

Dense activations are stored as ``[features x B]`` matrices; conv/LC
activations as ``[B x C x H x W]`` tensors. Parameter containers are plain
dataclasses owned exclusively by the trainer between forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

ACTIVATIONS = ("relu", "clipped_relu", "linear")
DECORR_FNS = ("identity", "square")


class ConfigError(ValueError):
    """Bad architecture / hyperparameter description."""


class NumericError(ArithmeticError):
    """Non-finite values or failed factorization."""


def apply_activation(u: np.ndarray, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise activation and its derivative.

    relu:          f(u)=max(0,u), f'(0)=0
    clipped_relu:  f(u)=min(1,max(0,u)), f'=1 on (0,1) only
    linear:        identity
    """
    if np.isnan(u).any():
        raise NumericError("NaN preactivation")
    if kind == "relu":
        h = np.maximum(u, 0.0)
        fp = (u > 0).astype(u.dtype)
    elif kind == "clipped_relu":
        h = np.clip(u, 0.0, 1.0)
        fp = ((u > 0) & (u < 1)).astype(u.dtype)
    elif kind == "linear":
        h = u
        fp = np.ones_like(u)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return h, fp


def apply_g(h: np.ndarray, g: str) -> tuple[np.ndarray, np.ndarray]:
    """Decorrelation nonlinearity g and derivative g' (identity or square)."""
    if g == "identity":
        return h, np.ones_like(h)
    if g == "square":
        return h * h, 2.0 * h
    raise ConfigError(f"unknown decorrelation nonlinearity {g!r}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ConfigError(
            f"non-positive output size for input {size}, kernel {kernel}, "
            f"stride {stride}, pad {pad}"
        )
    return out


@dataclass
class LayerSpec:
    """One layer of an architecture.

    kind: dense | conv | local | avgpool | flatten
    For dense, ``units`` is the output width. For conv/local, ``channels``,
    ``kernel``, ``stride``, ``pad`` follow the usual conventions; avgpool
    uses ``kernel``/``stride`` only.
    """

    kind: str
    units: int = 0
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    activation: str = "linear"
    g: str = "identity"
    bias: bool = True


@dataclass
class DenseParams:
    W: np.ndarray            # [n_out, n_in]
    b: np.ndarray            # [n_out]
    mask: Optional[np.ndarray] = None

    def apply_mask(self) -> None:
        if self.mask is not None:
            self.W *= self.mask


@dataclass
class ConvParams:
    W: np.ndarray            # [P, P_prev, k, k], shared across positions
    b: np.ndarray            # [P]


@dataclass
class LocalParams:
    W: np.ndarray            # [P, M, N, P_prev, k, k], one kernel per (r, s)
    b: np.ndarray            # [P, M, N]


def layer_rng(seed: int, layer_index: int) -> np.random.Generator:
    """Independent substream for one layer; bit-reproducible per (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(layer_index,)))


def _sample(shape: Sequence[int], fan_in: int, fan_out: int, scheme: str,
            gain: float, rng: np.random.Generator, dtype) -> np.ndarray:
    if scheme == "kaiming_uniform":
        bound = gain * np.sqrt(3.0 / fan_in)
        w = rng.uniform(-bound, bound, size=shape)
    elif scheme == "xavier_uniform":
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=shape)
    elif scheme == "kaiming_normal":
        w = rng.normal(0.0, gain / np.sqrt(fan_in), size=shape)
    elif scheme == "normal":
        # plain N(0, gain^2), no fan scaling
        w = rng.normal(0.0, gain, size=shape)
    elif scheme == "zeros":
        w = np.zeros(shape)
    else:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    return np.asarray(w, dtype=dtype)


def init_dense(n_out: int, n_in: int, scheme: str, gain: float,
               rng: np.random.Generator, weight_sparsity: float = 0.0,
               dtype=np.float32) -> DenseParams:
    """Sample a dense layer. ``weight_sparsity`` in [0,1) zeroes exactly
    floor(ws * n_in * n_out) uniformly chosen entries, permanently."""
    if n_out <= 0 or n_in <= 0:
        raise ConfigError("dense dims must be positive")
    W = _sample((n_out, n_in), n_in, n_out, scheme, gain, rng, dtype)
    b = np.zeros(n_out, dtype=dtype)
    mask = None
    if weight_sparsity > 0.0:
        n_zero = int(np.floor(weight_sparsity * W.size))
        flat = rng.permutation(W.size)[:n_zero]
        mask = np.ones(W.size, dtype=dtype)
        mask[flat] = 0.0
        mask = mask.reshape(W.shape)
        W *= mask
    return DenseParams(W=W, b=b, mask=mask)


def init_conv(p_out: int, p_in: int, kernel: int, scheme: str, gain: float,
              rng: np.random.Generator, dtype=np.float32) -> ConvParams:
    fan_in = p_in * kernel * kernel
    fan_out = p_out * kernel * kernel
    W = _sample((p_out, p_in, kernel, kernel), fan_in, fan_out, scheme, gain, rng, dtype)
    return ConvParams(W=W, b=np.zeros(p_out, dtype=dtype))


def init_local(p_out: int, m: int, n: int, p_in: int, kernel: int, scheme: str,
               gain: float, rng: np.random.Generator, dtype=np.float32) -> LocalParams:
    fan_in = p_in * kernel * kernel
    fan_out = p_out * kernel * kernel
    W = _sample((p_out, m, n, p_in, kernel, kernel), fan_in, fan_out, scheme, gain, rng, dtype)
    return LocalParams(W=W, b=np.zeros((p_out, m, n), dtype=dtype))
