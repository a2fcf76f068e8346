import numpy as np
import pytest

from ebd.core import ConvParams, DenseParams, LayerSpec, LocalParams, init_conv, init_local, layer_rng
from ebd.forward import (
    ShapeError,
    avgpool_forward,
    build_network,
    conv_forward,
    dense_forward,
    flatten_forward,
    local_forward,
    network_forward,
)

RNG = np.random.default_rng(123)


def dense_params(n_out, n_in, rng=RNG):
    return DenseParams(W=rng.normal(size=(n_out, n_in)), b=rng.normal(size=n_out))


def test_dense_identity_layer():
    H_prev = RNG.normal(size=(4, 6))
    p = DenseParams(W=np.eye(4), b=np.zeros(4))
    lc = dense_forward(p, H_prev, "linear", "identity")
    assert np.allclose(lc.H, H_prev)


def test_dense_bias_only_relu():
    c = np.array([-1.0, 0.5, 2.0])
    p = DenseParams(W=np.zeros((3, 5)), b=c)
    lc = dense_forward(p, RNG.normal(size=(5, 7)), "relu", "identity")
    expect = np.maximum(0, c)
    assert np.allclose(lc.H, expect[:, None] * np.ones((1, 7)))


def test_dense_forward_matches_per_sample_loop():
    p = dense_params(3, 2)
    H_prev = RNG.normal(size=(2, 4))
    lc = dense_forward(p, H_prev, "relu", "square")
    for n in range(4):
        u = p.W @ H_prev[:, n] + p.b
        h = np.maximum(u, 0)
        assert np.abs(lc.U[:, n] - u).max() < 1e-12
        assert np.abs(lc.H[:, n] - h).max() < 1e-12
        assert np.abs(lc.G[:, n] - h * h).max() < 1e-12
        assert np.abs(lc.G_d[:, n] - 2 * h).max() < 1e-12


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        dense_forward(dense_params(3, 2), RNG.normal(size=(5, 4)), "relu", "identity")


def conv_loop_oracle(W, b, x, stride, pad):
    """Scalar cross-correlation: U[n,p,r,s] = sum_{h,i,j} W[p,h,i,j] x_pad[...] + b[p]."""
    B, C, H, Wd = x.shape
    P, _, k, _ = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    M = (H + 2 * pad - k) // stride + 1
    N = (Wd + 2 * pad - k) // stride + 1
    out = np.zeros((B, P, M, N))
    for n in range(B):
        for p in range(P):
            for r in range(M):
                for s in range(N):
                    acc = 0.0
                    for h in range(C):
                        for i in range(k):
                            for j in range(k):
                                acc += W[p, h, i, j] * xp[n, h, r * stride + i, s * stride + j]
                    out[n, p, r, s] = acc + b[p]
    return out


def test_conv_one_by_one_kernel_identity():
    x = RNG.normal(size=(2, 1, 5, 5))
    p = ConvParams(W=np.ones((1, 1, 1, 1)), b=np.zeros(1))
    lc = conv_forward(p, x, stride=1, pad=0, kind="linear")
    assert np.allclose(lc.U, x)


def test_conv_full_overlap_inner_product():
    x = RNG.normal(size=(1, 1, 3, 3))
    W = RNG.normal(size=(1, 1, 3, 3))
    lc = conv_forward(ConvParams(W=W, b=np.zeros(1)), x, 1, 0, "linear")
    assert lc.U.shape == (1, 1, 1, 1)
    assert abs(lc.U[0, 0, 0, 0] - np.sum(x * W)) < 1e-12


def test_conv_matches_loop_oracle():
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        x = RNG.normal(size=(3, 2, 6, 6))
        p = init_conv(4, 2, 3, "kaiming_uniform", 1.0, layer_rng(0, 0), dtype=np.float64)
        lc = conv_forward(p, x, stride, pad, "relu")
        assert np.abs(lc.U - conv_loop_oracle(p.W, p.b, x, stride, pad)).max() < 1e-10


def test_conv_too_small_raises():
    x = RNG.normal(size=(1, 1, 2, 2))
    p = init_conv(1, 1, 5, "kaiming_uniform", 1.0, layer_rng(0, 0))
    with pytest.raises(ShapeError):
        conv_forward(p, x, 1, 0, "linear")


def test_local_tied_kernels_equal_conv():
    x = RNG.normal(size=(2, 2, 5, 5))
    conv = init_conv(3, 2, 3, "kaiming_uniform", 1.0, layer_rng(1, 0), dtype=np.float64)
    out_conv = conv_forward(conv, x, 1, 1, "relu")
    W_tied = np.broadcast_to(conv.W[:, None, None], (3, 5, 5, 2, 3, 3)).copy()
    b_tied = np.broadcast_to(conv.b[:, None, None], (3, 5, 5)).copy()
    out_lc = local_forward(LocalParams(W=W_tied, b=b_tied), x, 1, 1, "relu")
    assert np.abs(out_conv.U - out_lc.U).max() < 1e-12


def test_local_zeroed_location_gives_bias():
    x = RNG.normal(size=(1, 1, 4, 4))
    p = init_local(1, 2, 2, 1, 3, "kaiming_uniform", 1.0, layer_rng(2, 0), dtype=np.float64)
    p.b = RNG.normal(size=(1, 2, 2))
    p.W[0, 1, 1] = 0.0
    lc = local_forward(p, x, stride=1, pad=0, kind="linear")
    assert abs(lc.U[0, 0, 1, 1] - p.b[0, 1, 1]) < 1e-12


def test_local_matches_per_position_loop():
    x = RNG.normal(size=(2, 2, 5, 5))
    p = init_local(2, 3, 3, 2, 3, "kaiming_uniform", 1.0, layer_rng(3, 0), dtype=np.float64)
    lc = local_forward(p, x, stride=1, pad=0, kind="linear")
    for n in range(2):
        for q in range(2):
            for r in range(3):
                for s in range(3):
                    patch = x[n, :, r:r + 3, s:s + 3]
                    want = np.sum(p.W[q, r, s] * patch) + p.b[q, r, s]
                    assert abs(lc.U[n, q, r, s] - want) < 1e-10


def test_avgpool_constant():
    x = np.full((2, 3, 4, 4), 2.5)
    lc = avgpool_forward(x, 2, 2)
    assert np.allclose(lc.H, 2.5)


def test_avgpool_2x2_mean():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[None, None]
    lc = avgpool_forward(x, 2, 2)
    assert lc.H.shape == (1, 1, 1, 1)
    assert lc.H[0, 0, 0, 0] == 2.5


def test_avgpool_matches_loop():
    x = RNG.normal(size=(2, 3, 6, 6))
    lc = avgpool_forward(x, 2, 2)
    for n in range(2):
        for c in range(3):
            for r in range(3):
                for s in range(3):
                    want = x[n, c, 2 * r:2 * r + 2, 2 * s:2 * s + 2].mean()
                    assert abs(lc.H[n, c, r, s] - want) < 1e-15


def small_mlp(seed=0, widths=(6, 5, 3), n_in=4):
    specs = [LayerSpec(kind="dense", units=w, activation="relu", g="identity")
             for w in widths[:-1]]
    specs.append(LayerSpec(kind="dense", units=widths[-1], activation="linear"))
    return build_network(specs, (n_in,), seed=seed, dtype=np.float64)


def test_network_forward_zero_error_when_target_matches():
    net = small_mlp()
    X = RNG.normal(size=(4, 5))
    out = network_forward(net, X).layers[-1].H
    cache = network_forward(net, X, out)
    assert np.allclose(cache.E, 0.0)


def test_single_linear_identity_layer_error():
    net = build_network([LayerSpec(kind="dense", units=4, activation="linear")], (4,),
                        seed=0, dtype=np.float64)
    net.layers[0].params.W = np.eye(4)
    net.layers[0].params.b = np.zeros(4)
    X = RNG.normal(size=(4, 3))
    Y = RNG.normal(size=(4, 3))
    cache = network_forward(net, X, Y)
    assert np.abs(cache.E - (X - Y)).max() < 1e-12


def test_three_layer_net_matches_per_sample_oracle():
    net = small_mlp(seed=9)
    X = RNG.normal(size=(4, 6))
    Y = RNG.normal(size=(3, 6))
    cache = network_forward(net, X, Y)
    for n in range(6):
        h = X[:, n]
        for layer in net.layers:
            u = layer.params.W @ h + layer.params.b
            h = np.maximum(u, 0) if layer.spec.activation == "relu" else u
        assert np.abs(cache.layers[-1].H[:, n] - h).max() < 1e-10


def test_batch_permutation_permutes_cache_columns():
    net = small_mlp(seed=4)
    X = RNG.normal(size=(4, 8))
    Y = RNG.normal(size=(3, 8))
    perm = np.random.default_rng(1).permutation(8)
    a = network_forward(net, X, Y)
    b = network_forward(net, X[:, perm], Y[:, perm])
    for lc_a, lc_b in zip(a.layers, b.layers):
        assert np.array_equal(lc_a.H[:, perm], lc_b.H)
        assert np.array_equal(lc_a.G[:, perm], lc_b.G)
    assert np.array_equal(a.E[:, perm], b.E)


def test_conv_equals_dense_on_unrolled_weights():
    # flatten the conv as an explicit matrix acting on the flattened input
    for trial in range(4):
        rng = np.random.default_rng(trial)
        x = rng.normal(size=(2, 2, 5, 5))
        p = init_conv(3, 2, 3, "kaiming_uniform", 1.0, layer_rng(trial, 0), dtype=np.float64)
        stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0)][trial]
        lc = conv_forward(p, x, stride, pad, "linear")
        B = x.shape[0]
        n_in = x[0].size
        n_out = lc.U[0].size
        Wmat = np.zeros((n_out, n_in))
        for col in range(n_in):
            basis = np.zeros((1, 2, 5, 5))
            basis.reshape(-1)[col] = 1.0
            Wmat[:, col] = conv_forward(ConvParams(W=p.W, b=np.zeros(3)), basis,
                                        stride, pad, "linear").U.reshape(-1)
        bias = np.repeat(p.b, n_out // 3)
        flat = x.reshape(B, -1).T
        assert np.abs((Wmat @ flat + bias[:, None]).T - lc.U.reshape(B, -1)).max() < 1e-10


def test_flatten_roundtrip_layout():
    x = RNG.normal(size=(3, 2, 4, 4))
    lc = flatten_forward(x)
    assert lc.H.shape == (32, 3)
    assert np.array_equal(lc.H[:, 1], x[1].reshape(-1))
