import numpy as np
import pytest

from ebd.core import LayerSpec, NumericError
from ebd.diagnostics import finite_difference_check
from ebd.forward import build_network, network_forward
from ebd.regularizers import (
    EntropyState,
    entropy_gradient,
    entropy_value,
    l1_sparsity_gradient,
    power_norm_gradient,
    power_norm_value,
    sparsity_ratio_activation_grad,
    update_layer_correlation,
    weight_entropy_gradient,
    weight_entropy_value,
    woodbury_update,
)

RNG = np.random.default_rng(31)


def mlp(widths=(6, 4), n_in=5, seed=0):
    specs = [LayerSpec(kind="dense", units=widths[0], activation="relu")]
    specs.append(LayerSpec(kind="dense", units=widths[1], activation="linear"))
    return build_network(specs, (n_in,), seed=seed, dtype=np.float64)


# --- correlation recursion ----------------------------------------------------

def test_layer_correlation_lambda_one():
    st = EntropyState(R_h=RNG.normal(size=(4, 4)), lambda_E=1.0)
    st.R_h = 0.5 * (st.R_h + st.R_h.T)
    before = st.R_h.copy()
    update_layer_correlation(st, RNG.normal(size=(4, 3)))
    assert np.abs(st.R_h - before).max() < 1e-15


def test_layer_correlation_lambda_zero_single_sample():
    st = EntropyState(R_h=np.eye(3), lambda_E=0.0)
    h = RNG.normal(size=(3, 1))
    update_layer_correlation(st, h)
    assert np.abs(st.R_h - h @ h.T).max() < 1e-15


def test_layer_correlation_unrolled_oracle():
    lam = 0.8
    st = EntropyState(R_h=np.eye(5), lambda_E=lam)
    batches = [RNG.normal(size=(5, 3)) for _ in range(5)]
    for H in batches:
        update_layer_correlation(st, H)
    want = lam ** 5 * np.eye(5)
    for i, H in enumerate(batches):
        want += lam ** (4 - i) * (1 - lam) / 3 * (H @ H.T)
    assert np.abs(st.R_h - want).max() < 1e-12


def test_layer_correlation_stays_symmetric():
    st = EntropyState(R_h=np.eye(6), lambda_E=0.9)
    for _ in range(50):
        update_layer_correlation(st, RNG.normal(size=(6, 4)))
    assert np.abs(st.R_h - st.R_h.T).max() < 1e-10


# --- entropy gradient -----------------------------------------------------------

def test_entropy_gradient_identity_inverse_simplification():
    net = mlp(seed=2)
    X = RNG.normal(size=(5, 4))
    Y = RNG.normal(size=(4, 4))
    cache = network_forward(net, X, Y)
    lam, eps = 0.7, 0.1
    st = EntropyState(R_h=(1 - eps) * np.eye(6), lambda_E=lam, eps=eps)
    # R_h + eps I = I exactly, so the solve drops out
    gW, gb = entropy_gradient(st, cache, 0)
    lc = cache.layers[0]
    want = (2 * (1 - lam) / 4) * (lc.H * lc.F_d) @ X.T
    assert np.abs(gW - want).max() < 1e-12


def test_entropy_gradient_dead_units_zero():
    net = mlp(seed=3)
    net.layers[0].params.W[...] = 0.0
    net.layers[0].params.b[...] = -1.0
    cache = network_forward(net, RNG.normal(size=(5, 3)), RNG.normal(size=(4, 3)))
    st = EntropyState.identity(6, lambda_E=0.9, eps=1e-3)
    gW, gb = entropy_gradient(st, cache, 0)
    assert not gW.any() and not gb.any()


def test_entropy_gradient_matches_fd():
    net = mlp(seed=4)
    X = RNG.normal(size=(5, 3))
    Y = RNG.normal(size=(4, 3))
    lam, eps = 0.6, 1e-2
    A = RNG.normal(size=(6, 6))
    R_prev = A @ A.T / 6 + np.eye(6)

    cache = network_forward(net, X, Y)
    st = EntropyState(R_h=R_prev.copy(), lambda_E=lam, eps=eps)
    update_layer_correlation(st, cache.layers[0].H)
    gW, _ = entropy_gradient(st, cache, 0)

    def loss():
        c = network_forward(net, X, Y)
        H = c.layers[0].H
        R = lam * R_prev + (1 - lam) / 3 * (H @ H.T)
        return float(np.linalg.slogdet(R + eps * np.eye(6))[1])

    def fp():
        c = network_forward(net, X, Y)
        return b"".join((lc.F_d > 0).tobytes() for lc in c.layers if lc.F_d is not None)

    assert finite_difference_check(loss, net.layers[0].params.W, gW, fingerprint=fp) < 1e-6


def test_entropy_ascent_does_not_decrease_logdet():
    # 20 random instances, mu <= 1e-4, same-batch recomputation
    for trial in range(20):
        rng = np.random.default_rng(trial)
        net = mlp(seed=trial)
        X = rng.normal(size=(5, 6))
        Y = rng.normal(size=(4, 6))
        cache = network_forward(net, X, Y)
        st = EntropyState.identity(6, lambda_E=0.5, eps=1e-2)
        update_layer_correlation(st, cache.layers[0].H)
        gW, gb = entropy_gradient(st, cache, 0)
        before = entropy_value(st)
        mu = 1e-4
        net.layers[0].params.W += mu * gW
        net.layers[0].params.b += mu * gb
        c2 = network_forward(net, X, Y)
        # recompute the recursion from the same identity prior with the new batch
        st2 = EntropyState.identity(6, lambda_E=0.5, eps=1e-2)
        st2.R_h = np.eye(6) * st.lambda_E
        st2.R_h += (1 - st.lambda_E) / 6 * (c2.layers[0].H @ c2.layers[0].H.T)
        st2.R_h = 0.5 * (st2.R_h + st2.R_h.T)
        after = entropy_value(st2)
        assert after >= before - 1e-12


def test_entropy_cholesky_failure_raises():
    st = EntropyState(R_h=-np.eye(3), lambda_E=0.9, eps=1e-9)
    net = mlp(widths=(3, 2), n_in=4, seed=0)
    cache = network_forward(net, RNG.normal(size=(4, 2)), RNG.normal(size=(2, 2)))
    with pytest.raises(NumericError):
        entropy_gradient(st, cache, 0)


# --- Woodbury incremental inverse ------------------------------------------------

def test_woodbury_zero_batch_scales_inverse():
    st = EntropyState(R_h=np.eye(4), lambda_E=0.9, B_h=np.eye(4))
    woodbury_update(st, np.zeros((4, 2)))
    assert np.abs(st.B_h - np.eye(4) / 0.9).max() < 1e-12


def test_woodbury_rank_one_is_sherman_morrison():
    lam = 0.95
    A = RNG.normal(size=(5, 5))
    R = A @ A.T + np.eye(5)
    st = EntropyState(R_h=R.copy(), lambda_E=lam, B_h=np.linalg.inv(R))
    h = RNG.normal(size=(5, 1))
    woodbury_update(st, h)
    # Sherman-Morrison on lam R + (1-lam) h h^T
    Binv = np.linalg.inv(R) / lam
    u = (1 - lam) * h
    want = Binv - (Binv @ h @ u.T @ Binv) / (1.0 + float((u.T @ Binv @ h)[0, 0]))
    assert np.abs(st.B_h - want).max() < 1e-10


@pytest.mark.parametrize("B", [1, 8])
def test_woodbury_hundred_updates_vs_naive_inverse(B):
    # direct inverse of the correlation recursion (eps = 0) as the oracle
    lam = 0.99
    n = 32
    rng = np.random.default_rng(100 + B)
    A = rng.normal(size=(n, n))
    R = A @ A.T / n + np.eye(n)
    st = EntropyState(R_h=R.copy(), lambda_E=lam, B_h=np.linalg.inv(R))
    for _ in range(100):
        H = rng.normal(size=(n, B))
        R = lam * R + (1 - lam) / B * (H @ H.T)
        woodbury_update(st, H)
    direct = np.linalg.inv(R)
    rel = np.linalg.norm(st.B_h - direct) / np.linalg.norm(direct)
    assert rel <= 1e-8


def test_incremental_inverse_consistency_invariant():
    # || B_h (R_h + eps I) - I ||_F stays small at checked intervals
    lam, eps, n = 0.95, 1e-8, 16
    rng = np.random.default_rng(9)
    st = EntropyState.identity(n, lambda_E=lam, eps=eps, incremental=True, dtype=np.float64)
    for step in range(200):
        H = rng.normal(size=(n, 4))
        update_layer_correlation(st, H)
        if step % 50 == 49:
            err = np.linalg.norm(st.B_h @ (st.R_h + eps * np.eye(n)) - np.eye(n))
            assert err <= 1e-6


# --- power normalization ----------------------------------------------------------

def test_power_norm_zero_at_target():
    net = mlp(seed=6)
    X = RNG.normal(size=(5, 4))
    cache = network_forward(net, X, RNG.normal(size=(4, 4)))
    lc = cache.layers[0]
    powers = (lc.H * lc.H).mean(axis=1)
    # exact target per unit is not expressible with a scalar P unless constant;
    # force it by scaling activations through a crafted cache copy
    H = np.sqrt(0.25) * lc.H / np.sqrt(np.maximum(powers[:, None], 1e-12))
    lc.H = H
    gW, gb = power_norm_gradient(cache, 0, 0.25)
    assert np.abs(gW).max() < 1e-10
    assert np.abs(gb).max() < 1e-10


def test_power_norm_zero_activations_saddle():
    net = mlp(seed=7)
    net.layers[0].params.W[...] = 0.0
    net.layers[0].params.b[...] = -2.0
    cache = network_forward(net, RNG.normal(size=(5, 3)), RNG.normal(size=(4, 3)))
    gW, gb = power_norm_gradient(cache, 0, 0.5)
    assert not gW.any() and not gb.any()


def test_power_norm_matches_fd():
    net = mlp(seed=8)
    X = RNG.normal(size=(5, 3))
    Y = RNG.normal(size=(4, 3))
    cache = network_forward(net, X, Y)
    gW, _ = power_norm_gradient(cache, 0, 0.3)

    def loss():
        c = network_forward(net, X, Y)
        return power_norm_value(c.layers[0].H, 0.3)

    def fp():
        c = network_forward(net, X, Y)
        return b"".join((lc.F_d > 0).tobytes() for lc in c.layers if lc.F_d is not None)

    assert finite_difference_check(loss, net.layers[0].params.W, gW, fingerprint=fp) < 1e-6


# --- activation sparsity -----------------------------------------------------------

def test_sparsity_one_hot_is_stationary():
    H = np.zeros((4, 4))
    H[1, 2] = 3.0
    g = sparsity_ratio_activation_grad(H)
    assert np.abs(g).max() < 1e-12


def test_sparsity_all_equal_ratio_value():
    H = np.full((3, 3), 2.0)
    l1 = np.abs(H).sum()
    l2 = np.sqrt((H * H).sum())
    assert abs(l1 / l2 - 3.0) < 1e-12     # sqrt(K) for K = 9 elements


def test_sparsity_degenerate_norm_zero():
    assert not sparsity_ratio_activation_grad(np.zeros((3, 3))).any()


def test_l1_sparsity_dense_gradient():
    net = mlp(seed=9)
    X = RNG.normal(size=(5, 4))
    cache = network_forward(net, X, RNG.normal(size=(4, 4)))
    gW, gb = l1_sparsity_gradient(cache, 0)
    lc = cache.layers[0]
    want = (np.sign(lc.H) * lc.F_d / 4) @ X.T
    assert np.abs(gW - want).max() < 1e-12


# --- weight entropy -----------------------------------------------------------------

def test_weight_entropy_orthonormal_rows():
    # R = W W^T = I (wide case), eps = 0 -> gradient equals W itself
    W = np.linalg.qr(RNG.normal(size=(12, 3)))[0].T.reshape(3, 2, 2, 3)
    g = weight_entropy_gradient(W, eps=0.0)
    assert np.abs(g - W).max() < 1e-10


def test_weight_entropy_branch_selection():
    # P >= fan-in * k^2 picks the W^T W form (gram in the smaller dimension)
    W = RNG.normal(size=(8, 1, 2, 2))     # P=8, fan=4 -> W^T W is 4x4
    Wb = W.reshape(8, -1)
    eps = 1e-3
    want = Wb @ np.linalg.inv(Wb.T @ Wb + eps * np.eye(4))
    g = weight_entropy_gradient(W, eps=eps)
    assert np.abs(g.reshape(8, -1) - want).max() < 1e-12
    # and the value uses the same branch
    v = weight_entropy_value(W, eps)
    assert abs(v - 0.5 * np.linalg.slogdet(Wb.T @ Wb + eps * np.eye(4))[1]) < 1e-12


def test_weight_entropy_matches_fd():
    W = RNG.normal(size=(3, 2, 2, 2))
    eps = 1e-2
    g = weight_entropy_gradient(W, eps=eps)

    def loss():
        return weight_entropy_value(W, eps)

    assert finite_difference_check(loss, W, g) < 1e-6
