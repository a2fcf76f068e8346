"""Finite-difference verification of every hand-derived gradient family.

All checks run in double precision on small random instances; each returns
the worst relative error ``|fd - analytic| / max(1, |fd|, |analytic|)`` over
the probed coordinates. The loss evaluators freeze the recursion history
(and, for conv/LC decorrelation, the output error) exactly as the analytic
formulas assume.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import baselines, convgrad, decorrelation, regularizers
from .core import LayerSpec
from .diagnostics import finite_difference_check
from .forward import Network, build_network, network_forward



def _active_set(net: Network, X: np.ndarray, Y: np.ndarray) -> bytes:
    """Fingerprint of every layer's activation-derivative pattern; changes
    exactly when a perturbation crosses a ReLU/clip kink."""
    c = network_forward(net, X, Y)
    return b"".join((lc.F_d > 0).tobytes() for lc in c.layers if lc.F_d is not None)

def random_dense_net(rng: np.random.Generator, depth: int, width_cap: int, n_out: int,
                     g: str, activation: str = "relu") -> Network:
    widths = [int(rng.integers(2, width_cap + 1)) for _ in range(depth)]
    specs = [LayerSpec(kind="dense", units=w, activation=activation, g=g) for w in widths]
    specs.append(LayerSpec(kind="dense", units=n_out, activation="linear", g=g))
    n_in = int(rng.integers(2, width_cap + 1))
    net = build_network(specs, (n_in,), seed=int(rng.integers(2 ** 31)),
                        scheme="kaiming_uniform", gain=1.0, dtype=np.float64)
    return net


def _batch(rng: np.random.Generator, net: Network, B: int) -> tuple[np.ndarray, np.ndarray]:
    X = rng.normal(size=(net.input_shape[0], B))
    Y = rng.normal(size=(net.out_dim, B))
    return X, Y


def check_decorrelation(net: Network, X: np.ndarray, Y: np.ndarray, k: int,
                        lambda_d: float, rng: np.random.Generator) -> float:
    """dJ/dW^(k) of the layer decorrelation loss vs delta_w1 + delta_w2."""
    B = X.shape[1]
    cache0 = network_forward(net, X, Y)
    n_g = cache0.layers[k].G.shape[0]
    R_prev = rng.normal(size=(n_g, net.out_dim))
    zeta = (1.0 - lambda_d) / B

    proj = decorrelation.ErrorProjection(R_hat=R_prev.copy(), lambda_d=lambda_d)
    decorrelation.update_cross_correlation(proj, cache0.layers[k].G, cache0.E)
    Q = decorrelation.project_error(proj.R_hat, cache0.E)
    dW1, db1 = decorrelation.delta_w1(cache0, k, Q, zeta)
    dW2, db2 = decorrelation.delta_w2(cache0, net, k, proj.R_hat, zeta)

    def loss() -> float:
        c = network_forward(net, X, Y)
        R = lambda_d * R_prev + ((1.0 - lambda_d) / B) * (c.layers[k].G @ c.E.T)
        return 0.5 * float(np.sum(R * R))

    p = net.layers[k].params
    fp = lambda: _active_set(net, X, Y)
    errW = finite_difference_check(loss, p.W, dW1 + dW2, fingerprint=fp)
    errb = finite_difference_check(loss, p.b, db1 + db2, fingerprint=fp)
    return max(errW, errb)


def check_entropy(net: Network, X: np.ndarray, Y: np.ndarray, k: int,
                  lambda_E: float, eps: float, rng: np.random.Generator) -> float:
    B = X.shape[1]
    n = net.layers[k].out_shape[0]
    A = rng.normal(size=(n, n))
    R_prev = A @ A.T / n + np.eye(n)

    cache0 = network_forward(net, X, Y)
    state = regularizers.EntropyState(R_h=R_prev.copy(), lambda_E=lambda_E, eps=eps)
    regularizers.update_layer_correlation(state, cache0.layers[k].H)
    gW, gb = regularizers.entropy_gradient(state, cache0, k)

    def loss() -> float:
        # the closed-form gradient's constant corresponds to the full logdet
        # (twice the half-logdet entropy value); direction is unaffected
        c = network_forward(net, X, Y)
        H = c.layers[k].H
        R = lambda_E * R_prev + ((1.0 - lambda_E) / B) * (H @ H.T)
        sign, logdet = np.linalg.slogdet(R + eps * np.eye(n))
        return logdet

    p = net.layers[k].params
    fp = lambda: _active_set(net, X, Y)
    errW = finite_difference_check(loss, p.W, gW, fingerprint=fp)
    errb = finite_difference_check(loss, p.b, gb, fingerprint=fp)
    return max(errW, errb)


def check_power_norm(net: Network, X: np.ndarray, Y: np.ndarray, k: int,
                     target: float) -> float:
    cache0 = network_forward(net, X, Y)
    gW, gb = regularizers.power_norm_gradient(cache0, k, target)

    def loss() -> float:
        c = network_forward(net, X, Y)
        return regularizers.power_norm_value(c.layers[k].H, target)

    p = net.layers[k].params
    fp = lambda: _active_set(net, X, Y)
    errW = finite_difference_check(loss, p.W, gW, fingerprint=fp)
    errb = finite_difference_check(loss, p.b, gb, fingerprint=fp)
    return max(errW, errb)


def check_forward_broadcast(net: Network, X: np.ndarray, Y: np.ndarray, k: int,
                            lambda_d: float, rng: np.random.Generator) -> float:
    """dJ^(k)/dW^(L): the error-side dependence of the decorrelation loss."""
    B = X.shape[1]
    L = len(net.layers) - 1
    cache0 = network_forward(net, X, Y)
    n_g = cache0.layers[k].G.shape[0]
    R_prev = rng.normal(size=(n_g, net.out_dim))
    zeta = (1.0 - lambda_d) / B

    proj = decorrelation.ErrorProjection(R_hat=R_prev.copy(), lambda_d=lambda_d)
    decorrelation.update_cross_correlation(proj, cache0.layers[k].G, cache0.E)
    fW, fb = decorrelation.forward_broadcast_update(cache0, net, k, proj.R_hat, zeta)

    def loss() -> float:
        c = network_forward(net, X, Y)
        R = lambda_d * R_prev + ((1.0 - lambda_d) / B) * (c.layers[k].G @ c.E.T)
        return 0.5 * float(np.sum(R * R))

    p = net.layers[L].params
    fp = lambda: _active_set(net, X, Y)
    errW = finite_difference_check(loss, p.W, fW, fingerprint=fp)
    errb = finite_difference_check(loss, p.b, fb, fingerprint=fp)
    return max(errW, errb)


def _conv_like_net(rng: np.random.Generator, kind: str, g: str,
                   stride: int = 1, pad: int = 1) -> tuple[Network, np.ndarray, np.ndarray]:
    c_in = int(rng.integers(1, 3))
    c_out = int(rng.integers(1, 4))
    size = int(rng.integers(4, 7))
    specs = [
        LayerSpec(kind=kind, channels=c_out, kernel=3, stride=stride, pad=pad,
                  activation="relu", g=g),
        LayerSpec(kind="flatten"),
        LayerSpec(kind="dense", units=3, activation="linear"),
    ]
    net = build_network(specs, (c_in, size, size), seed=int(rng.integers(2 ** 31)),
                        scheme="kaiming_uniform", gain=1.0, dtype=np.float64)
    B = int(rng.integers(1, 4))
    X = rng.normal(size=(B, c_in, size, size))
    Y = rng.normal(size=(3, B))
    return net, X, Y


def check_conv_ebd(rng: np.random.Generator, kind: str, g: str, lambda_d: float = 0.7,
                   stride: int = 1, pad: int = 1) -> float:
    """Conv/LC decorrelation gradient vs FD of the channelwise Frobenius loss
    with the output error held fixed (the formula's own assumption)."""
    net, X, Y = _conv_like_net(rng, kind, g, stride=stride, pad=pad)
    B = X.shape[0]
    s = net.layers[0].spec
    cache0 = network_forward(net, X, Y)
    E = cache0.E.copy()
    P, M, N = net.layers[0].out_shape
    R_prev = rng.normal(size=(P, net.out_dim, M, N))
    zeta = (1.0 - lambda_d) / B

    proj = convgrad.ConvErrorProjection(R_hat=R_prev.copy(), lambda_d=lambda_d)
    convgrad.update_conv_cross_correlation(proj, cache0.layers[0].G, E)
    phi = convgrad.conv_phi(cache0, 0, proj.R_hat, E)
    fn = convgrad.conv_ebd_gradient if kind == "conv" else convgrad.lc_ebd_gradient
    dW, db = fn(phi, X, s.kernel, s.stride, s.pad, zeta)

    def loss() -> float:
        c = network_forward(net, X, Y)
        G = c.layers[0].G
        R = lambda_d * R_prev + ((1.0 - lambda_d) / B) * np.einsum(
            "nprs,qn->pqrs", G, E, optimize=True)
        return 0.5 * float(np.sum(R * R))

    p = net.layers[0].params
    fp = lambda: _active_set(net, X, Y)
    errW = finite_difference_check(loss, p.W, dW, fingerprint=fp)
    errb = finite_difference_check(loss, p.b, db, fingerprint=fp)
    return max(errW, errb)


def check_bp(net: Network, X: np.ndarray, Y: np.ndarray, loss_kind: str) -> float:
    cache0 = network_forward(net, X, Y)
    grads = baselines.bp_backward(cache0, net, loss_kind)

    def loss() -> float:
        c = network_forward(net, X, Y)
        if loss_kind == "mse":
            return baselines.mse_loss(c.E)
        return baselines.cross_entropy_loss(c.layers[-1].H, Y)

    fp = lambda: _active_set(net, X, Y)
    worst = 0.0
    for k, (dW, db) in grads.items():
        p = net.layers[k].params
        worst = max(worst, finite_difference_check(loss, p.W, dW, fingerprint=fp))
        worst = max(worst, finite_difference_check(loss, p.b, db, fingerprint=fp))
    return worst


def run_suite(seed: int = 0, n_nets: int = 20) -> dict:
    """The gradient oracle: every family checked over random small instances.
    Returns {family: worst relative error}."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("decorrelation", "entropy", "power_norm",
                              "forward_broadcast", "conv_ebd", "lc_ebd",
                              "bp_mse", "bp_ce")}
    for t in range(n_nets):
        g = "identity" if t % 2 == 0 else "square"
        depth = int(rng.integers(1, 4))
        net = random_dense_net(rng, depth, 8, int(rng.integers(2, 5)), g)
        B = int(rng.choice([1, 2, 4]))
        X, Y = _batch(rng, net, B)
        k = int(rng.integers(0, depth))
        lam = float(rng.uniform(0.3, 0.95))
        worst["decorrelation"] = max(worst["decorrelation"],
                                     check_decorrelation(net, X, Y, k, lam, rng))
        worst["entropy"] = max(worst["entropy"],
                               check_entropy(net, X, Y, k, float(rng.uniform(0.3, 0.95)),
                                             1e-3, rng))
        worst["power_norm"] = max(worst["power_norm"],
                                  check_power_norm(net, X, Y, k, float(rng.uniform(0.05, 0.5))))
        worst["forward_broadcast"] = max(worst["forward_broadcast"],
                                         check_forward_broadcast(net, X, Y, k, lam, rng))
        worst["bp_mse"] = max(worst["bp_mse"], check_bp(net, X, Y, "mse"))
        Yp = np.abs(Y) + 0.1
        Yp /= Yp.sum(axis=0, keepdims=True)
        worst["bp_ce"] = max(worst["bp_ce"], check_bp(net, X, Yp, "cross_entropy"))
    for t in range(6):
        g = "identity" if t % 2 == 0 else "square"
        stride = 1 if t < 4 else 2
        worst["conv_ebd"] = max(worst["conv_ebd"],
                                check_conv_ebd(rng, "conv", g, stride=stride))
        worst["lc_ebd"] = max(worst["lc_ebd"],
                              check_conv_ebd(rng, "local", g, stride=stride))
    return worst
