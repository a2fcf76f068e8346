"""CorInfoMax-EBD: recurrent network with forward/backward predictors and
lateral weights, free-phase equilibrium dynamics, and single-phase error
broadcast learning.

Layer activations are clipped-ReLU states reached by Euler integration of the
correlative-information dynamics; learning combines predictive-coding terms,
anti-Hebbian lateral homeostasis, and the broadcast decorrelation update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import ConfigError, NumericError, apply_activation, apply_g
from .decorrelation import ErrorProjection, project_error, update_cross_correlation


@dataclass
class CorInfoMaxLayer:
    W_f: np.ndarray                      # [n_k x n_{k-1}]
    B_lat: np.ndarray                    # [n_k x n_k], symmetric PD at init
    W_b: Optional[np.ndarray] = None     # [n_k x n_{k+1}], None on the output layer
    proj: Optional[ErrorProjection] = None
    vel_f: Optional[np.ndarray] = None   # momentum buffer, decorrelation forward grad

    @property
    def n(self) -> int:
        return self.W_f.shape[0]


@dataclass
class DynamicsConfig:
    tau_u: float = 1.0
    ds: float = 0.05
    max_iters: int = 1500
    tol: float = 1e-5
    beta: float = 0.0                    # output nudge; 0 = free phase
    divergence_bound: float = 1e6

    def __post_init__(self):
        if self.ds / self.tau_u >= 1.0:
            raise ConfigError("ds/tau_u must be < 1 for stable Euler steps")


@dataclass
class CorInfoMaxNet:
    layers: list
    lambda_E: float = 0.999999
    g_leak: float = 1.0
    eps: list = field(default_factory=list)   # per-junction epsilon, len == n layers
    g: str = "identity"

    @property
    def gamma(self) -> float:
        return (1.0 - self.lambda_E) / self.lambda_E


def build_corinfomax(sizes: list, seed: int, lambda_E: float = 0.999999,
                     lambda_d=0.99999, g_leak: float = 1.0,
                     eps: float = 0.5, gain_fb: float = 1.0, gain_lat: float = 1.0,
                     gain_proj: float = 1.0, g: str = "identity",
                     momentum_d: float = 0.0, proj_out: str = "xavier",
                     dtype=np.float64) -> CorInfoMaxNet:
    """sizes = [n_in, n_1, ..., n_L]. Lateral matrices start as J J^T with
    Xavier-uniform J; predictors and projections are Xavier-uniform.

    proj_out='identity' starts the output layer's error projection at
    gain_proj * I, an aligned bootstrap that behaves like a preconditioned
    delta rule from the first sample. lambda_d may be a scalar or one value
    per layer (hidden projections can adapt faster than the output's).
    """
    layers = []
    n_out = sizes[-1]
    n_layers = len(sizes) - 1
    lam_d = list(lambda_d) if isinstance(lambda_d, (list, tuple)) else [lambda_d] * n_layers
    for k in range(1, len(sizes)):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k,)))
        n_k, n_prev = sizes[k], sizes[k - 1]

        def xavier(rows, cols, gain=1.0):
            bound = gain * np.sqrt(6.0 / (rows + cols))
            return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)

        W_f = xavier(n_k, n_prev, gain_fb)
        W_b = xavier(n_k, sizes[k + 1], gain_fb) if k + 1 < len(sizes) else None
        J = xavier(n_k, n_k, gain_lat)
        B_lat = J @ J.T
        if k == len(sizes) - 1 and proj_out == "identity":
            R0 = (gain_proj * np.eye(n_k)).astype(dtype)
        else:
            R0 = xavier(n_k, n_out, gain_proj)
        proj = ErrorProjection(R_hat=R0, lambda_d=lam_d[k - 1], absorb_zeta=True,
                               momentum=momentum_d)
        layers.append(CorInfoMaxLayer(W_f=W_f, B_lat=B_lat, W_b=W_b, proj=proj))
    return CorInfoMaxNet(layers=layers, lambda_E=lambda_E, g_leak=g_leak,
                         eps=[eps] * (len(sizes) - 1), g=g)


def _rhs(net: CorInfoMaxNet, u: list, h: list, x: np.ndarray,
         y: Optional[np.ndarray], cfg: DynamicsConfig) -> list:
    """Right-hand sides tau_u du/ds for every layer at the current state."""
    L = len(net.layers)
    gam = net.gamma
    gl = net.g_leak
    out = []
    for k in range(L):
        layer = net.layers[k]
        h_prev = x if k == 0 else h[k - 1]
        e_fwd = u[k] - layer.W_f @ h_prev
        if k == L - 1:
            drive = gam * (layer.B_lat @ h[k]) + gl * h[k]
            rhs = -gl * u[k] + drive - e_fwd / net.eps[k]
            if cfg.beta != 0.0 and y is not None:
                rhs -= cfg.beta * (h[k] - y)
        else:
            drive = 2.0 * gam * (layer.B_lat @ h[k]) + gl * h[k]
            e_bwd = u[k] - layer.W_b @ h[k + 1]
            rhs = -gl * u[k] + drive - e_fwd / net.eps[k] - e_bwd / net.eps[k + 1]
        out.append(rhs)
    return out


def dynamics_step(net: CorInfoMaxNet, u: list, h: list, x: np.ndarray,
                  y: Optional[np.ndarray], cfg: DynamicsConfig) -> tuple[list, list, float]:
    """One explicit Euler step; returns (u, h, residual = max |du/ds|)."""
    rhs = _rhs(net, u, h, x, y, cfg)
    residual = 0.0
    step = cfg.ds / cfg.tau_u
    for k in range(len(u)):
        u[k] = u[k] + step * rhs[k]
        h[k] = np.clip(u[k], 0.0, 1.0)
        residual = max(residual, float(np.abs(rhs[k]).max()) / cfg.tau_u)
    if residual > cfg.divergence_bound:
        raise NumericError(f"network dynamics diverged (residual {residual:.3g})")
    return u, h, residual


@dataclass
class Equilibrium:
    H: list                   # per-layer activations at the fixed point
    U: list
    F_d: list                 # clipped-ReLU derivatives from U
    E_fwd: list               # H^k - W_f H^{k-1}
    E_bwd: list               # H^k - W_b H^{k+1} (None on output layer)
    Z: list                   # B_lat H^k
    iters: int
    residual: float
    converged: bool


def run_to_equilibrium(net: CorInfoMaxNet, x: np.ndarray, y: Optional[np.ndarray],
                       cfg: DynamicsConfig) -> Equilibrium:
    """Iterate from u=0 until the dynamics residual drops below tol (or
    max_iters); returns the batch matrices consumed by the learning rule."""
    B = x.shape[1]
    u = [np.zeros((l.n, B), dtype=x.dtype) for l in net.layers]
    h = [np.zeros((l.n, B), dtype=x.dtype) for l in net.layers]
    residual = np.inf
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        u, h, residual = dynamics_step(net, u, h, x, y, cfg)
        if residual <= cfg.tol:
            break
    H, U, F_d, E_fwd, E_bwd, Z = [], [], [], [], [], []
    for k, layer in enumerate(net.layers):
        h_prev = x if k == 0 else h[k - 1]
        H.append(h[k])
        U.append(u[k])
        F_d.append(((u[k] > 0) & (u[k] < 1)).astype(x.dtype))
        E_fwd.append(h[k] - layer.W_f @ h_prev)
        E_bwd.append(h[k] - layer.W_b @ h[k + 1] if layer.W_b is not None else None)
        Z.append(layer.B_lat @ h[k])
    return Equilibrium(H=H, U=U, F_d=F_d, E_fwd=E_fwd, E_bwd=E_bwd, Z=Z,
                       iters=iters, residual=residual, converged=residual <= cfg.tol)


def derivative_matrices(U: np.ndarray, g: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """F_d, G, G_d for one layer from its equilibrium preactivations."""
    h, f_d = apply_activation(U, "clipped_relu")
    gval, gprime = apply_g(h, g)
    return f_d, gval, gprime


@dataclass
class CorInfoMaxRates:
    """Per-layer learning rates for one update; zeros disable a term."""

    mu_f: float = 0.0          # forward prediction
    mu_b: float = 0.0          # backward prediction
    mu_df: float = 0.0         # decorrelation, forward weights
    mu_db: float = 0.0         # decorrelation, backward weights
    mu_dl: float = 0.0         # decorrelation, lateral weights
    mu_p: float = 0.0          # power normalization (forward weights)
    p_target: float = 0.0
    mu_l1_f: float = 0.0       # activation sparsity, forward weights
    mu_l1_b: float = 0.0       # activation sparsity, backward weights
    mu_wl2_f: float = 0.0      # forward weight decay
    mu_wl2_b: float = 0.0      # backward weight decay


def corinfomax_ebd_update(net: CorInfoMaxNet, k: int, eq: Equilibrium,
                          x: np.ndarray, E: np.ndarray, rates: CorInfoMaxRates) -> None:
    """Single-phase update of layer k's forward, backward and lateral weights.

    Steps: R_hat recursion on (G, E); Q = R_hat E; Phi = F_d * Q * G_d;
      W_f += (mu_f/B) E_fwd H_prev^T - (mu_df/B) Phi H_prev^T
      W_b += (mu_b/B) E_bwd H_next^T - (mu_db/B) Phi H_next^T
      B_lat = B_lat/lambda_E - (gamma_E/B) Z Z^T - (mu_dl/B) Phi H^T, symmetrized.
    Optional power-normalization, sparsity and weight-decay terms ride on the
    same batch. Momentum (if configured on the projection) smooths the
    decorrelation forward gradient.
    """
    layer = net.layers[k]
    B = E.shape[1]
    H = eq.H[k]
    h_prev = x if k == 0 else eq.H[k - 1]

    _, G, G_d = derivative_matrices(eq.U[k], net.g)
    update_cross_correlation(layer.proj, G, E)
    Q = project_error(layer.proj.R_hat, E)
    Phi = eq.F_d[k] * Q * G_d

    dec_f = Phi @ h_prev.T
    if layer.proj.momentum > 0.0:
        if layer.vel_f is None:
            layer.vel_f = np.zeros_like(dec_f)
        layer.vel_f = layer.proj.momentum * layer.vel_f + dec_f
        dec_f = layer.vel_f

    dW_f = (rates.mu_f / B) * (eq.E_fwd[k] @ h_prev.T) - (rates.mu_df / B) * dec_f
    if rates.mu_p != 0.0:
        d = (H * H).mean(axis=1) - rates.p_target
        dW_f -= rates.mu_p * (4.0 / B) * (d[:, None] * (H * eq.F_d[k])) @ h_prev.T
    if rates.mu_l1_f != 0.0:
        dW_f -= rates.mu_l1_f * (np.sign(H) * eq.F_d[k]) @ h_prev.T / B
    if rates.mu_wl2_f != 0.0:
        dW_f -= rates.mu_wl2_f * layer.W_f
    layer.W_f += dW_f

    if layer.W_b is not None:
        h_next = eq.H[k + 1]
        dW_b = (rates.mu_b / B) * (eq.E_bwd[k] @ h_next.T) - (rates.mu_db / B) * (Phi @ h_next.T)
        if rates.mu_l1_b != 0.0:
            dW_b -= rates.mu_l1_b * (np.sign(H) * eq.F_d[k]) @ h_next.T / B
        if rates.mu_wl2_b != 0.0:
            dW_b -= rates.mu_wl2_b * layer.W_b
        layer.W_b += dW_b

    gamma_E = (1.0 - net.lambda_E) / net.lambda_E
    Z = eq.Z[k]
    layer.B_lat = layer.B_lat / net.lambda_E - (gamma_E / B) * (Z @ Z.T) \
        - (rates.mu_dl / B) * (Phi @ H.T)
    layer.B_lat = 0.5 * (layer.B_lat + layer.B_lat.T)


def threshold_weights(net: CorInfoMaxNet, scale: float = 3e-5) -> None:
    """Zero forward/backward entries below ``scale`` times the matrix peak."""
    for layer in net.layers:
        for W in (layer.W_f, layer.W_b):
            if W is None:
                continue
            peak = np.abs(W).max()
            W[np.abs(W) < scale * peak] = 0.0
