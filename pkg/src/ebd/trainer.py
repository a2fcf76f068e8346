"""Experiment orchestration: rule dispatch (EBD / BP / DFA / DFA+E /
CorInfoMax-EBD), schedules, metrics CSV emission, checkpointing and resume.

A run is fully determined by (config, seed): batch order is derived from the
seed and epoch index, checkpoints carry every piece of learning state, and
CSV floats are formatted to 6 significant digits, so identical runs produce
bitwise-identical outputs and a resumed run equals the uninterrupted one.
"""

from __future__ import annotations

import os
import sys
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines, convgrad, corinfomax, decorrelation, regularizers
from .core import ConfigError, NumericError, layer_rng, LayerSpec
from .data import (
    Dataset,
    FormatError,
    load_checkpoint,
    load_cifar10,
    load_mnist,
    one_hot,
    rng_state_bytes,
    save_checkpoint,
    synthetic_regression,
    to_dataset,
)
from .forward import Network, build_network, network_forward
from .optim import Rate, lambda_r_step, make_optimizer
from .diagnostics import cosine_alignment


def fmt(x: float) -> str:
    return f"{x:.6g}"


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

RULES = ("ebd", "bp_mse", "bp_ce", "dfa", "dfa_e", "corinfomax_ebd")


def _layer_specs(cfg: dict) -> list[LayerSpec]:
    specs = []
    for entry in cfg.get("layers", []):
        specs.append(LayerSpec(
            kind=entry["kind"],
            units=entry.get("units", 0),
            channels=entry.get("channels", 0),
            kernel=entry.get("kernel", 0),
            stride=entry.get("stride", 1),
            pad=entry.get("pad", 0),
            activation=entry.get("activation", "linear"),
            g=entry.get("g", "identity"),
            bias=entry.get("bias", True),
        ))
    return specs


def _per_layer(cfg_val, n: int, default=0.0) -> list[Rate]:
    """Broadcast a scalar/rate spec or align a list of them to n layers."""
    if cfg_val is None:
        cfg_val = default
    if isinstance(cfg_val, list):
        if len(cfg_val) != n:
            raise ConfigError(f"rate list has {len(cfg_val)} entries, need {n}")
        return [Rate.parse(v) for v in cfg_val]
    return [Rate.parse(cfg_val) for _ in range(n)]


def validate_config(cfg: dict) -> None:
    rule = cfg.get("rule")
    if rule not in RULES:
        raise ConfigError(f"rule must be one of {RULES}, got {rule!r}")
    if rule != "corinfomax_ebd" and not cfg.get("layers"):
        raise ConfigError("config needs a [[layers]] list")
    if cfg.get("epochs", 0) < 0 or cfg.get("batch_size", 1) < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    for key in ("lambda_d", "lambda_E"):
        v = cfg.get("projection", {}).get(key) or cfg.get("entropy", {}).get(key)
        if v is not None and not (0.0 <= v <= 1.0):
            raise ConfigError(f"{key} must lie in [0,1]")
    if cfg["rule"] == "corinfomax_ebd":
        mt = cfg.get("metrics", {})
        if mt.get("correlation_probe") or mt.get("alignment_probe"):
            raise ConfigError("correlation/alignment probes apply to feedforward rules only")


def load_dataset(cfg: dict, data_dir: Optional[str], dtype) -> tuple[Dataset, Dataset]:
    d = cfg.get("dataset", {})
    kind = d.get("kind", "synthetic")
    flatten = d.get("flatten", True)
    if kind == "mnist":
        root = os.path.join(data_dir or d.get("data_dir", "."), "mnist")
        xi, yi = load_mnist(root, "train")
        xt, yt = load_mnist(root, "test")
        train = to_dataset(xi, yi, 10, flatten, "train", dtype)
        test = to_dataset(xt, yt, 10, flatten, "test", dtype)
    elif kind == "cifar10":
        root = os.path.join(data_dir or d.get("data_dir", "."), "cifar10")
        xi, yi, xt, yt = load_cifar10(root)
        if flatten:
            xi = xi.reshape(xi.shape[0], -1)
            xt = xt.reshape(xt.shape[0], -1)
        train = to_dataset(xi, yi, 10, False, "train", dtype)
        test = to_dataset(xt, yt, 10, False, "test", dtype)
    elif kind == "synthetic":
        n = d.get("n", 2048)
        train = synthetic_regression(d.get("seed", 1), n, d["d_in"], d["d_out"],
                                     teacher=d.get("teacher", "mlp"),
                                     noise=d.get("noise", 0.0), dtype=dtype)
        test = synthetic_regression(d.get("seed", 1) + 1, max(n // 4, 64),
                                    d["d_in"], d["d_out"],
                                    teacher=d.get("teacher", "mlp"),
                                    noise=d.get("noise", 0.0), dtype=dtype)
        test.split = "test"
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    st = d.get("subset_train", 0)
    se = d.get("subset_test", 0)
    if st:
        train = Dataset(X=train.X[:st], Y=train.Y[:st], split="train")
    if se:
        test = Dataset(X=test.X[:se], Y=test.Y[:se], split="test")
    return train, test


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(net: Network, ds: Dataset, batch: int = 512) -> tuple[float, float]:
    """Argmax accuracy (ties go to the lowest index) and mean ||h - y||^2."""
    correct = 0
    sq = 0.0
    for lo in range(0, ds.n, batch):
        X = ds.X[lo:lo + batch]
        Y = ds.Y[lo:lo + batch]
        xin = X.T if X.ndim == 2 else X
        cache = network_forward(net, xin, Y.T)
        H = cache.layers[-1].H
        correct += int((np.argmax(H, axis=0) == np.argmax(Y.T, axis=0)).sum())
        sq += float(np.sum(cache.E.astype(np.float64) ** 2))
    return correct / ds.n, sq / ds.n


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    net: Network
    projections: dict = field(default_factory=dict)     # layer -> ErrorProjection/Conv
    entropy: dict = field(default_factory=dict)         # layer -> EntropyState
    feedback: Optional[baselines.FeedbackMatrices] = None
    optimizer: object = None
    m: int = 0                                          # global batch index
    epoch: int = 0                                      # completed epochs
    lambda_d: float = 1.0
    lambda_E: float = 1.0
    rng: Optional[np.random.Generator] = None


def _hidden_trainable(net: Network) -> list[int]:
    t = net.trainable_indices()
    return t[:-1]


def init_state(cfg: dict, net: Network, seed: int, dtype) -> TrainState:
    rule = cfg["rule"]
    st = TrainState(net=net)
    pr = cfg.get("projection", {})
    en = cfg.get("entropy", {})
    st.lambda_d = pr.get("lambda_d", 0.999999)
    st.lambda_E = en.get("lambda_E", 0.99999)
    st.optimizer = make_optimizer(cfg.get("optimizer", {"kind": "sgd"}))
    st.rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4096,)))

    hidden = _hidden_trainable(net)
    n_out = net.out_dim
    if rule == "ebd":
        for k in hidden:
            layer = net.layers[k]
            rng = layer_rng(seed, 8192 + k)
            if layer.spec.kind == "dense":
                n_g = layer.out_shape[0]
                st.projections[k] = decorrelation.init_projection(
                    n_g, n_out, rng,
                    scheme=pr.get("scheme", "xavier_uniform"),
                    gain=pr.get("gain", 1e-2),
                    lambda_d=st.lambda_d,
                    absorb_zeta=pr.get("absorb_zeta", False),
                    momentum=pr.get("momentum", 0.0), dtype=dtype)
            else:
                P, M, N = layer.out_shape
                st.projections[k] = convgrad.init_conv_projection(
                    P, n_out, M, N, rng,
                    scheme=pr.get("scheme_conv", "normal"),
                    gain=pr.get("gain_conv", pr.get("gain", 1e-2)),
                    lambda_d=st.lambda_d,
                    absorb_zeta=pr.get("absorb_zeta", False),
                    momentum=pr.get("momentum", 0.0), dtype=dtype)
    if rule in ("dfa", "dfa_e"):
        st.feedback = baselines.init_feedback(
            net, seed, scheme=pr.get("scheme", "xavier_uniform"),
            gain=pr.get("gain", 1e-2), dtype=dtype)
    if en.get("enabled", False):
        for k in hidden:
            layer = net.layers[k]
            if layer.spec.kind == "dense":
                st.entropy[k] = regularizers.EntropyState.identity(
                    layer.out_shape[0], lambda_E=st.lambda_E,
                    eps=en.get("eps", 1e-8),
                    incremental=en.get("incremental", False), dtype=dtype)
    return st


# ---------------------------------------------------------------------------
# Per-batch updates for each rule
# ---------------------------------------------------------------------------

@dataclass
class Rates:
    mu_d: list
    mu_out: Rate
    mu_fwd: list
    mu_E: list
    mu_p: list
    p_target: list
    mu_l1: list
    mu_wl2: Rate
    lr: Rate
    lr_scale: list

    @classmethod
    def from_config(cls, cfg: dict, n_hidden: int) -> "Rates":
        r = cfg.get("rates", {})
        return cls(
            mu_d=_per_layer(r.get("mu_d"), n_hidden),
            mu_out=Rate.parse(r.get("mu_out", 0.0)),
            mu_fwd=_per_layer(r.get("mu_fwd"), n_hidden),
            mu_E=_per_layer(r.get("mu_E"), n_hidden),
            mu_p=_per_layer(r.get("mu_p"), n_hidden),
            p_target=[float(x) for x in (r.get("p_target") if isinstance(r.get("p_target"), list)
                                         else [r.get("p_target", 0.0)] * n_hidden)],
            mu_l1=_per_layer(r.get("mu_l1"), n_hidden),
            mu_wl2=Rate.parse(r.get("mu_wl2", 0.0)),
            lr=Rate.parse(r.get("lr", 1.0)),
            lr_scale=[float(x) for x in (r.get("lr_scale") if isinstance(r.get("lr_scale"), list)
                                         else [r.get("lr_scale", 1.0)] * (n_hidden + 1))],
        )


def _ebd_batch_updates(cfg: dict, st: TrainState, rates: Rates, cache,
                       weight_entropy_eps: float) -> dict:
    """Per-layer parameter updates (to be subtracted) for the EBD rule."""
    net = st.net
    hidden = _hidden_trainable(net)
    B = cache.E.shape[1]
    updates: dict = {}
    m, i = st.m, st.epoch
    for j, k in enumerate(hidden):
        layer = net.layers[k]
        mu = rates.mu_d[j](m, i)
        if layer.spec.kind == "dense":
            proj = st.projections[k]
            decorrelation.update_cross_correlation(proj, cache.layers[k].G, cache.E)
            Q = decorrelation.project_error(proj.R_hat, cache.E)
            dW, db = decorrelation.delta_w1(cache, k, Q, proj.zeta(B))
            if proj.momentum > 0.0:
                if proj.vel_W is None:
                    proj.vel_W = np.zeros_like(dW)
                    proj.vel_b = np.zeros_like(db)
                proj.vel_W = proj.momentum * proj.vel_W + dW
                proj.vel_b = proj.momentum * proj.vel_b + db
                dW, db = proj.vel_W, proj.vel_b
            uW, ub = mu * dW, mu * db
            mu_E = rates.mu_E[j](m, i)
            if k in st.entropy and mu_E != 0.0:
                regularizers.update_layer_correlation(st.entropy[k], cache.layers[k].H)
                eW, eb = regularizers.entropy_gradient(st.entropy[k], cache, k)
                uW -= mu_E * eW
                ub -= mu_E * eb
            mu_p = rates.mu_p[j](m, i)
            if mu_p != 0.0:
                pW, pb = regularizers.power_norm_gradient(cache, k, rates.p_target[j])
                uW += mu_p * pW
                ub += mu_p * pb
            mu_l1 = rates.mu_l1[j](m, i)
            if mu_l1 != 0.0:
                lW, lb = regularizers.l1_sparsity_gradient(cache, k)
                uW += mu_l1 * lW
                ub += mu_l1 * lb
        else:
            proj = st.projections[k]
            s = layer.spec
            convgrad.update_conv_cross_correlation(proj, cache.layers[k].G, cache.E)
            phi = convgrad.conv_phi(cache, k, proj.R_hat, cache.E)
            h_prev = cache.h_prev(k)
            grad_fn = convgrad.conv_ebd_gradient if s.kind == "conv" else convgrad.lc_ebd_gradient
            dW, db = grad_fn(phi, h_prev, s.kernel, s.stride, s.pad, proj.zeta(B))
            if proj.momentum > 0.0:
                if proj.vel_W is None:
                    proj.vel_W = np.zeros_like(dW)
                    proj.vel_b = np.zeros_like(db)
                proj.vel_W = proj.momentum * proj.vel_W + dW
                proj.vel_b = proj.momentum * proj.vel_b + db
                dW, db = proj.vel_W, proj.vel_b
            uW, ub = mu * dW, mu * db
            mu_E = rates.mu_E[j](m, i)
            if mu_E != 0.0:
                uW -= mu_E * regularizers.weight_entropy_gradient(layer.params.W, weight_entropy_eps)
            mu_l1 = rates.mu_l1[j](m, i)
            if mu_l1 != 0.0:
                sp_fn = (convgrad.conv_sparsity_gradient if s.kind == "conv"
                         else convgrad.lc_sparsity_gradient)
                sW, sb = sp_fn(cache, k, h_prev, s.kernel, s.stride, s.pad)
                uW += mu_l1 * sW
                ub += mu_l1 * sb
        wl2 = rates.mu_wl2(m, i)
        if wl2 != 0.0:
            uW += wl2 * layer.params.W
        updates[k] = (uW, ub)

    # output layer: MMSE step plus optional forward-broadcast terms
    L = net.trainable_indices()[-1]
    dW, db = decorrelation.output_layer_update(cache, net)
    uW = rates.mu_out(m, i) * dW
    ub = rates.mu_out(m, i) * db
    for j, k in enumerate(hidden):
        mu_f = rates.mu_fwd[j](m, i)
        if mu_f != 0.0 and net.layers[k].spec.kind == "dense":
            proj = st.projections[k]
            fW, fb = decorrelation.forward_broadcast_update(cache, net, k, proj.R_hat,
                                                            proj.zeta(B))
            uW += mu_f * fW
            ub += mu_f * fb
    wl2 = rates.mu_wl2(m, i)
    if wl2 != 0.0:
        uW += wl2 * net.layers[L].params.W
    updates[L] = (uW, ub)
    return updates


def _baseline_batch_updates(cfg: dict, st: TrainState, rates: Rates, cache) -> dict:
    rule = cfg["rule"]
    net = st.net
    m, i = st.m, st.epoch
    if rule in ("bp_mse", "bp_ce"):
        grads = baselines.bp_backward(cache, net, "mse" if rule == "bp_mse" else "cross_entropy")
    else:
        grads = baselines.dfa_update(cache, net, st.feedback)
    hidden = _hidden_trainable(net)
    updates = {}
    for j, k in enumerate(hidden):
        mu = rates.mu_d[j](m, i)
        dW, db = grads[k]
        uW, ub = mu * dW, mu * db
        if rule == "dfa_e":
            mu_E = rates.mu_E[j](m, i)
            if k in st.entropy and mu_E != 0.0:
                regularizers.update_layer_correlation(st.entropy[k], cache.layers[k].H)
                eW, eb = regularizers.entropy_gradient(st.entropy[k], cache, k)
                uW -= mu_E * eW
                ub -= mu_E * eb
        wl2 = rates.mu_wl2(m, i)
        if wl2 != 0.0:
            uW += wl2 * net.layers[k].params.W
        updates[k] = (uW, ub)
    L = net.trainable_indices()[-1]
    dW, db = grads[L]
    uW = rates.mu_out(m, i) * dW
    ub = rates.mu_out(m, i) * db
    wl2 = rates.mu_wl2(m, i)
    if wl2 != 0.0:
        uW += wl2 * net.layers[L].params.W
    updates[L] = (uW, ub)
    return updates


def _apply_updates(st: TrainState, rates: Rates, updates: dict) -> None:
    net = st.net
    trainable = net.trainable_indices()
    lr = rates.lr(st.m, st.epoch)
    for pos, k in enumerate(trainable):
        if k not in updates:
            continue
        uW, ub = updates[k]
        layer = net.layers[k]
        scale = rates.lr_scale[pos] if pos < len(rates.lr_scale) else 1.0
        layer.params.W -= st.optimizer.update(f"l{k}.W", uW, lr * scale)
        if layer.spec.bias:
            layer.params.b -= st.optimizer.update(f"l{k}.b", ub, lr * scale)
        if getattr(layer.params, "mask", None) is not None:
            layer.params.apply_mask()


# ---------------------------------------------------------------------------
# Probes
# ---------------------------------------------------------------------------

def _correlation_columns(cfg: dict, net: Network) -> list[int]:
    return [k for k in _hidden_trainable(net)]


def _stream_correlations(cfg: dict, net: Network, ds: Dataset, batch: int = 512) -> list[float]:
    """Mean |rho| per hidden trainable layer over one pass of the dataset."""
    from .diagnostics import WelfordState

    rule = cfg["rule"]
    hidden = _hidden_trainable(net)
    states: dict = {}
    for lo in range(0, ds.n, batch):
        X, Y = ds.X[lo:lo + batch], ds.Y[lo:lo + batch]
        xin = X.T if X.ndim == 2 else X
        cache = network_forward(net, xin, Y.T)
        E = cache.E
        if rule == "bp_ce":
            E = baselines.softmax(cache.layers[-1].H) - Y.T
        for k in hidden:
            H = cache.layers[k].H
            if H.ndim == 4:
                H = H.reshape(H.shape[0], -1).T
            if k not in states:
                states[k] = WelfordState.empty(H.shape[0], E.shape[0])
            states[k].update(H, E)
    return [states[k].mean_abs_correlation() for k in hidden]


def _stream_powers(net: Network, ds: Dataset, batch: int = 512) -> list[float]:
    """Mean per-unit squared activation of each hidden trainable layer,
    averaged over units and dataset samples."""
    hidden = _hidden_trainable(net)
    acc = {k: 0.0 for k in hidden}
    units = {k: int(np.prod(net.layers[k].out_shape)) for k in hidden}
    for lo in range(0, ds.n, batch):
        X = ds.X[lo:lo + batch]
        xin = X.T if X.ndim == 2 else X
        cache = network_forward(net, xin)
        for k in hidden:
            H = cache.layers[k].H
            acc[k] += float(np.sum(H.astype(np.float64) ** 2))
    return [acc[k] / (units[k] * ds.n) for k in hidden]


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

def state_to_dict(cfg: dict, st: TrainState) -> dict:
    out: dict = {
        "meta.m": np.array([st.m], dtype=np.int64),
        "meta.epoch": np.array([st.epoch], dtype=np.int64),
        "meta.lambda_d": np.array([st.lambda_d], dtype=np.float64),
        "meta.lambda_E": np.array([st.lambda_E], dtype=np.float64),
        "meta.rng": rng_state_bytes(st.rng),
    }
    for k in st.net.trainable_indices():
        p = st.net.layers[k].params
        out[f"l{k}.W"] = p.W
        out[f"l{k}.b"] = p.b
        if getattr(p, "mask", None) is not None:
            out[f"l{k}.mask"] = p.mask
    for k, proj in st.projections.items():
        out[f"l{k}.R_hat"] = proj.R_hat
        if proj.vel_W is not None:
            out[f"l{k}.vel_W"] = proj.vel_W
            out[f"l{k}.vel_b"] = proj.vel_b
    for k, ent in st.entropy.items():
        out[f"l{k}.R_h"] = ent.R_h
        if ent.B_h is not None:
            out[f"l{k}.B_h"] = ent.B_h
    if st.feedback is not None:
        for k, Bk in st.feedback.B.items():
            out[f"l{k}.B_dfa"] = Bk
    out.update(st.optimizer.state_tensors())
    return out


def state_from_dict(st: TrainState, blob: dict) -> None:
    st.m = int(blob["meta.m"][0])
    st.epoch = int(blob["meta.epoch"][0])
    st.lambda_d = float(blob["meta.lambda_d"][0])
    st.lambda_E = float(blob["meta.lambda_E"][0])
    from .data import rng_from_state
    st.rng = rng_from_state(blob["meta.rng"])
    for k in st.net.trainable_indices():
        p = st.net.layers[k].params
        p.W[...] = blob[f"l{k}.W"]
        p.b[...] = blob[f"l{k}.b"]
        if f"l{k}.mask" in blob:
            p.mask = blob[f"l{k}.mask"].copy()
    for k, proj in st.projections.items():
        proj.R_hat[...] = blob[f"l{k}.R_hat"]
        proj.lambda_d = st.lambda_d
        if f"l{k}.vel_W" in blob:
            proj.vel_W = blob[f"l{k}.vel_W"].copy()
            proj.vel_b = blob[f"l{k}.vel_b"].copy()
    for k, ent in st.entropy.items():
        ent.R_h[...] = blob[f"l{k}.R_h"]
        ent.lambda_E = st.lambda_E
        if f"l{k}.B_h" in blob:
            ent.B_h = blob[f"l{k}.B_h"].copy()
    if st.feedback is not None:
        for k in st.feedback.B:
            st.feedback.B[k][...] = blob[f"l{k}.B_dfa"]
    st.optimizer.load_state(blob)


# ---------------------------------------------------------------------------
# The training loops
# ---------------------------------------------------------------------------

def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1000, epoch)))
    return rng.permutation(n)


@dataclass
class RunResult:
    metrics_path: str
    checkpoint_path: str
    aborted: bool = False


def _metrics_header(cfg: dict, net_hidden: list[int]) -> list[str]:
    cols = ["run", "epoch", "split", "accuracy", "mse"]
    mt = cfg.get("metrics", {})
    if mt.get("correlation_probe", False):
        cols += [f"corr_l{k}" for k in net_hidden]
    if mt.get("power_probe", False):
        cols += [f"power_l{k}" for k in net_hidden]
    if mt.get("alignment_probe", False):
        cols += [f"align_bp_l{k}" for k in net_hidden]
        cols += [f"align_trunc_l{k}" for k in net_hidden]
    if cfg["rule"] == "corinfomax_ebd":
        cols += ["eq_converged", "eq_iters_mean"]
    return cols


def train(cfg: dict, out_dir: str, data_dir: Optional[str] = None,
          seed: Optional[int] = None, resume: Optional[str] = None,
          log=None) -> RunResult:
    """Run one experiment; writes metrics.csv, per-epoch checkpoints and
    final.ckpt under out_dir. Returns paths; raises ConfigError/FormatError/
    NumericError for the CLI to map to exit codes."""
    validate_config(cfg)
    if cfg["rule"] == "corinfomax_ebd":
        return train_corinfomax(cfg, out_dir, data_dir, seed, resume, log)

    seed = cfg.get("seed", 0) if seed is None else seed
    dtype = np.float64 if cfg.get("precision", "f32") == "f64" else np.float32
    os.makedirs(out_dir, exist_ok=True)
    run_name = f"{cfg.get('name', 'run')}-s{seed}"
    log = log or (lambda s: print(s, file=sys.stderr))

    train_ds, test_ds = load_dataset(cfg, data_dir, dtype)
    input_shape = train_ds.X.shape[1:] if train_ds.X.ndim > 2 else (train_ds.X.shape[1],)
    ini = cfg.get("init", {})
    net = build_network(_layer_specs(cfg), input_shape, seed,
                        scheme=ini.get("scheme", "kaiming_uniform"),
                        gain=ini.get("gain", 0.75),
                        weight_sparsity=ini.get("weight_sparsity", 0.0), dtype=dtype)
    st = init_state(cfg, net, seed, dtype)
    hidden = _hidden_trainable(net)
    rates = Rates.from_config(cfg, len(hidden))
    mt = cfg.get("metrics", {})
    we_eps = cfg.get("entropy", {}).get("eps_conv", 1e-5)

    align_probe = mt.get("alignment_probe", False)
    align_every = mt.get("align_every", 50)
    align_path = os.path.join(out_dir, "alignment.csv")
    align_rows: list[str] = []
    epoch_align: dict = {}

    metrics_path = os.path.join(out_dir, "metrics.csv")
    header = _metrics_header(cfg, hidden)
    rows: list[str] = []

    start_epoch = 0
    if resume:
        blob = load_checkpoint(resume)
        state_from_dict(st, blob)
        start_epoch = st.epoch
        prev = os.path.join(out_dir, "metrics.csv")
        if os.path.exists(prev):
            with open(prev) as f:
                old = f.read().splitlines()
            rows = old[1:]
        if align_probe and os.path.exists(align_path):
            with open(align_path) as f:
                align_rows = f.read().splitlines()[1:]

    def emit_eval(epoch: int) -> None:
        for ds in (train_ds, test_ds):
            sub = mt.get("eval_train_subset", 0)
            dse = ds
            if ds.split == "train" and sub and sub < ds.n:
                dse = Dataset(X=ds.X[:sub], Y=ds.Y[:sub], split="train")
            acc, mse = evaluate(net, dse, batch=mt.get("eval_batch", 512))
            if not np.isfinite(mse):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            row = [run_name, str(epoch), ds.split, fmt(acc), fmt(mse)]
            if mt.get("correlation_probe", False):
                row += [fmt(v) for v in _stream_correlations(cfg, net, dse)]
            if mt.get("power_probe", False):
                row += [fmt(v) for v in _stream_powers(net, dse)]
            if align_probe:
                stats = epoch_align.get(epoch, {})
                for k in hidden:
                    vals = stats.get(k, [])
                    row.append(fmt(float(np.mean([v[0] for v in vals])) if vals else 0.0))
                for k in hidden:
                    vals = stats.get(k, [])
                    row.append(fmt(float(np.mean([v[1] for v in vals])) if vals else 0.0))
            rows.append(",".join(row))

    def flush() -> None:
        with open(metrics_path, "w") as f:
            f.write(",".join(header) + "\n")
            for r in rows:
                f.write(r + "\n")
        if align_probe:
            with open(align_path, "w") as f:
                f.write("step,layer,cos_bp,cos_trunc\n")
                for r in align_rows:
                    f.write(r + "\n")

    last_good = None
    if start_epoch == 0:
        emit_eval(0)
        flush()

    B = cfg.get("batch_size", 20)
    epochs = cfg.get("epochs", 0)
    lam_r = cfg.get("projection", {}).get("lambda_r", 0.0)

    try:
        for epoch in range(start_epoch, epochs):
            t0 = time.time()
            if epoch > 0 and lam_r > 0.0:
                st.lambda_d = lambda_r_step(st.lambda_d, lam_r)
                st.lambda_E = lambda_r_step(st.lambda_E, lam_r)
                for proj in st.projections.values():
                    proj.lambda_d = st.lambda_d
                for ent in st.entropy.values():
                    ent.lambda_E = st.lambda_E
            order = batch_order(seed, epoch, train_ds.n)
            for lo in range(0, train_ds.n - B + 1, B):
                idx = order[lo:lo + B]
                X, Y = train_ds.X[idx], train_ds.Y[idx]
                xin = X.T if X.ndim == 2 else X
                cache = network_forward(net, xin, Y.T)
                if not np.isfinite(cache.E).all():
                    raise NumericError(f"non-finite output error at step {st.m}")
                if cfg["rule"] == "ebd":
                    updates = _ebd_batch_updates(cfg, st, rates, cache, we_eps)
                    if align_probe and st.m % align_every == 0:
                        _log_alignment(cfg, st, rates, cache, align_rows,
                                       epoch_align.setdefault(epoch + 1, {}))
                else:
                    updates = _baseline_batch_updates(cfg, st, rates, cache)
                _apply_updates(st, rates, updates)
                st.m += 1
            st.epoch = epoch + 1
            emit_eval(epoch + 1)
            ckpt = os.path.join(out_dir, f"epoch_{epoch + 1:04d}.ckpt")
            save_checkpoint(state_to_dict(cfg, st), ckpt)
            last_good = ckpt
            flush()
            log(f"[{run_name}] epoch {epoch + 1}/{epochs} "
                f"({time.time() - t0:.1f}s) {rows[-1]}")
    except NumericError:
        flush()
        if last_good:
            save_checkpoint(load_checkpoint(last_good), os.path.join(out_dir, "final.ckpt"))
        raise

    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(state_to_dict(cfg, st), final)
    flush()
    return RunResult(metrics_path=metrics_path, checkpoint_path=final)


def _log_alignment(cfg: dict, st: TrainState, rates: Rates, cache,
                   rows: list[str], stats: dict) -> None:
    """Cosines between the local EBD update, the BP-MSE gradient, and the
    full (untruncated) decorrelation gradient, per hidden dense layer."""
    net = st.net
    bp = baselines.bp_backward(cache, net, "mse")
    B = cache.E.shape[1]
    for k in _hidden_trainable(net):
        if net.layers[k].spec.kind != "dense":
            continue
        proj = st.projections[k]
        Q = decorrelation.project_error(proj.R_hat, cache.E)
        dW1, _ = decorrelation.delta_w1(cache, k, Q, proj.zeta(B))
        dW2, _ = decorrelation.delta_w2(cache, net, k, proj.R_hat, proj.zeta(B))
        cos_bp = cosine_alignment(-dW1, -bp[k][0])
        cos_tr = cosine_alignment(dW1, dW1 + dW2)
        rows.append(f"{st.m},{k},{fmt(cos_bp)},{fmt(cos_tr)}")
        stats.setdefault(k, []).append((cos_bp, cos_tr))


# ---------------------------------------------------------------------------
# CorInfoMax-EBD loop
# ---------------------------------------------------------------------------

def evaluate_corinfomax(net, ds: Dataset, cfg_dyn, batch: int = 256) -> tuple[float, float]:
    correct = 0
    sq = 0.0
    for lo in range(0, ds.n, batch):
        X, Y = ds.X[lo:lo + batch], ds.Y[lo:lo + batch]
        eq = corinfomax.run_to_equilibrium(net, X.T, None, cfg_dyn)
        H = eq.H[-1]
        correct += int((np.argmax(H, axis=0) == np.argmax(Y.T, axis=0)).sum())
        sq += float(np.sum((H - Y.T).astype(np.float64) ** 2))
    return correct / ds.n, sq / ds.n


def train_corinfomax(cfg: dict, out_dir: str, data_dir: Optional[str] = None,
                     seed: Optional[int] = None, resume: Optional[str] = None,
                     log=None) -> RunResult:
    seed = cfg.get("seed", 0) if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    run_name = f"{cfg.get('name', 'cim')}-s{seed}"
    log = log or (lambda s: print(s, file=sys.stderr))
    dtype = np.float64 if cfg.get("precision", "f64") == "f64" else np.float32

    train_ds, test_ds = load_dataset(cfg, data_dir, dtype)
    cim = cfg.get("corinfomax", {})
    sizes = [train_ds.X.shape[1]] + list(cim.get("hidden", [500, 500])) + [train_ds.Y.shape[1]]
    net = corinfomax.build_corinfomax(
        sizes, seed,
        lambda_E=cim.get("lambda_E", 0.999999),
        lambda_d=cim.get("lambda_d", 0.99999),
        g_leak=cim.get("g_leak", 1.0),
        eps=cim.get("eps", 0.5),
        gain_fb=cim.get("gain_fb", 1.0),
        gain_lat=cim.get("gain_lat", 1.0),
        gain_proj=cim.get("gain_proj", 1.0),
        g=cim.get("g", "identity"),
        momentum_d=cim.get("momentum_d", 0.0),
        proj_out=cim.get("proj_out", "xavier"),
        dtype=dtype)
    dyn = corinfomax.DynamicsConfig(
        tau_u=cim.get("tau_u", 1.0), ds=cim.get("ds", 0.05),
        max_iters=cim.get("max_iters", 1500), tol=cim.get("tol", 1e-5), beta=0.0)

    n_layers = len(net.layers)

    def rate_list(key, default=0.0):
        val = cim.get(key)
        # backward-weight rates may omit the output layer (it has no W_b)
        if isinstance(val, list) and len(val) == n_layers - 1:
            val = list(val) + [0.0]
        return _per_layer(val, n_layers, default)

    mu_f = rate_list("mu_f")
    mu_b = rate_list("mu_b")
    mu_df = rate_list("mu_df")
    mu_db = rate_list("mu_db")
    mu_dl = rate_list("mu_dl")
    mu_p = rate_list("mu_p")
    p_tgt = cim.get("p_target", [0.0] * n_layers)
    if not isinstance(p_tgt, list):
        p_tgt = [p_tgt] * n_layers
    mu_l1f = rate_list("mu_l1_f")
    mu_l1b = rate_list("mu_l1_b")
    mu_wl2f = rate_list("mu_wl2_f")
    mu_wl2b = rate_list("mu_wl2_b")

    metrics_path = os.path.join(out_dir, "metrics.csv")
    header = _metrics_header(cfg, list(range(n_layers - 1)))
    rows: list[str] = []
    m = 0
    start_epoch = 0
    eq_stats = {"converged": 0, "total": 0, "iters": 0}

    if resume:
        blob = load_checkpoint(resume)
        m = int(blob["meta.m"][0])
        start_epoch = int(blob["meta.epoch"][0])
        for k, layer in enumerate(net.layers):
            layer.W_f[...] = blob[f"l{k}.W_f"]
            if layer.W_b is not None:
                layer.W_b[...] = blob[f"l{k}.W_b"]
            layer.B_lat[...] = blob[f"l{k}.B_lat"]
            layer.proj.R_hat[...] = blob[f"l{k}.R_hat"]
            if f"l{k}.vel_f" in blob:
                layer.vel_f = blob[f"l{k}.vel_f"].copy()
        if os.path.exists(metrics_path):
            with open(metrics_path) as f:
                rows = f.read().splitlines()[1:]

    def to_dict() -> dict:
        out = {"meta.m": np.array([m], dtype=np.int64),
               "meta.epoch": np.array([epoch_done], dtype=np.int64)}
        for k, layer in enumerate(net.layers):
            out[f"l{k}.W_f"] = layer.W_f
            if layer.W_b is not None:
                out[f"l{k}.W_b"] = layer.W_b
            out[f"l{k}.B_lat"] = layer.B_lat
            out[f"l{k}.R_hat"] = layer.proj.R_hat
            if layer.vel_f is not None:
                out[f"l{k}.vel_f"] = layer.vel_f
        return out

    def emit_eval(epoch: int) -> None:
        for ds in (train_ds, test_ds):
            sub = cfg.get("metrics", {}).get("eval_train_subset", 0)
            dse = ds
            if ds.split == "train" and sub and sub < ds.n:
                dse = Dataset(X=ds.X[:sub], Y=ds.Y[:sub], split="train")
            acc, mse = evaluate_corinfomax(net, dse, dyn,
                                           batch=cfg.get("metrics", {}).get("eval_batch", 256))
            if not np.isfinite(mse):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            frac = eq_stats["converged"] / eq_stats["total"] if eq_stats["total"] else 1.0
            iters = eq_stats["iters"] / eq_stats["total"] if eq_stats["total"] else 0.0
            rows.append(",".join([run_name, str(epoch), ds.split, fmt(acc), fmt(mse),
                                  fmt(frac), fmt(iters)]))

    def flush() -> None:
        with open(metrics_path, "w") as f:
            f.write(",".join(header) + "\n")
            for r in rows:
                f.write(r + "\n")

    epoch_done = start_epoch
    if start_epoch == 0:
        emit_eval(0)
        flush()

    B = cfg.get("batch_size", 1)
    epochs = cfg.get("epochs", 0)
    thresh_every = cim.get("threshold_every", 0)
    thresh_scale = cim.get("threshold_scale", 3e-5)

    for epoch in range(start_epoch, epochs):
        t0 = time.time()
        order = batch_order(seed, epoch, train_ds.n)
        for lo in range(0, train_ds.n - B + 1, B):
            idx = order[lo:lo + B]
            X, Y = train_ds.X[idx], train_ds.Y[idx]
            eq = corinfomax.run_to_equilibrium(net, X.T, Y.T, dyn)
            eq_stats["total"] += 1
            eq_stats["converged"] += int(eq.converged and eq.residual <= 1e-4)
            eq_stats["iters"] += eq.iters
            E = eq.H[-1] - Y.T
            if not np.isfinite(E).all():
                raise NumericError(f"non-finite output error at step {m}")
            for k in range(n_layers):
                r = corinfomax.CorInfoMaxRates(
                    mu_f=mu_f[k](m, epoch), mu_b=mu_b[k](m, epoch),
                    mu_df=mu_df[k](m, epoch), mu_db=mu_db[k](m, epoch),
                    mu_dl=mu_dl[k](m, epoch),
                    mu_p=mu_p[k](m, epoch), p_target=float(p_tgt[k]),
                    mu_l1_f=mu_l1f[k](m, epoch), mu_l1_b=mu_l1b[k](m, epoch),
                    mu_wl2_f=mu_wl2f[k](m, epoch), mu_wl2_b=mu_wl2b[k](m, epoch))
                corinfomax.corinfomax_ebd_update(net, k, eq, X.T, E, r)
            m += 1
            if thresh_every and m % thresh_every == 0:
                corinfomax.threshold_weights(net, thresh_scale)
        epoch_done = epoch + 1
        emit_eval(epoch_done)
        ckpt = os.path.join(out_dir, f"epoch_{epoch_done:04d}.ckpt")
        save_checkpoint(to_dict(), ckpt)
        flush()
        log(f"[{run_name}] epoch {epoch_done}/{epochs} ({time.time() - t0:.1f}s) {rows[-1]}")

    final = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(to_dict(), final)
    flush()
    return RunResult(metrics_path=metrics_path, checkpoint_path=final)
