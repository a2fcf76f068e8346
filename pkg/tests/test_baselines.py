import numpy as np
import pytest

from ebd.baselines import (
    FeedbackMatrices,
    bp_backward,
    cross_entropy_loss,
    dfa_plus_entropy_update,
    dfa_update,
    init_feedback,
    mse_loss,
    softmax,
)
from ebd.core import ConfigError, LayerSpec
from ebd.decorrelation import output_layer_update
from ebd.diagnostics import finite_difference_check
from ebd.forward import build_network, network_forward
from ebd.regularizers import EntropyState, entropy_gradient, update_layer_correlation

RNG = np.random.default_rng(41)


def mlp(widths=(6, 5, 3), n_in=4, seed=0):
    specs = [LayerSpec(kind="dense", units=w, activation="relu") for w in widths[:-1]]
    specs.append(LayerSpec(kind="dense", units=widths[-1], activation="linear"))
    return build_network(specs, (n_in,), seed=seed, dtype=np.float64)


def toy_archs():
    """Scaled-down versions of the dense/conv/LC benchmark layouts."""
    mnist_mlp = ([LayerSpec(kind="dense", units=8, activation="relu"),
                  LayerSpec(kind="dense", units=6, activation="relu"),
                  LayerSpec(kind="dense", units=3, activation="linear")], (10,))
    mnist_cnn = ([LayerSpec(kind="conv", channels=3, kernel=3, stride=1, pad=1, activation="relu"),
                  LayerSpec(kind="avgpool", kernel=2, stride=2),
                  LayerSpec(kind="conv", channels=2, kernel=3, stride=1, pad=1, activation="relu"),
                  LayerSpec(kind="avgpool", kernel=2, stride=2),
                  LayerSpec(kind="flatten"),
                  LayerSpec(kind="dense", units=6, activation="relu"),
                  LayerSpec(kind="dense", units=3, activation="linear")], (1, 8, 8))
    mnist_lc = ([LayerSpec(kind="local", channels=2, kernel=3, stride=1, pad=1, activation="relu"),
                 LayerSpec(kind="avgpool", kernel=2, stride=2),
                 LayerSpec(kind="local", channels=2, kernel=3, stride=1, pad=1, activation="relu"),
                 LayerSpec(kind="avgpool", kernel=2, stride=2),
                 LayerSpec(kind="flatten"),
                 LayerSpec(kind="dense", units=5, activation="relu"),
                 LayerSpec(kind="dense", units=3, activation="linear")], (1, 8, 8))
    cifar_cnn = ([LayerSpec(kind="conv", channels=3, kernel=5, stride=1, pad=2, activation="relu"),
                  LayerSpec(kind="avgpool", kernel=2, stride=2),
                  LayerSpec(kind="conv", channels=3, kernel=5, stride=1, pad=2, activation="relu"),
                  LayerSpec(kind="avgpool", kernel=2, stride=2),
                  LayerSpec(kind="conv", channels=2, kernel=2, stride=2, pad=0, activation="relu"),
                  LayerSpec(kind="flatten"),
                  LayerSpec(kind="dense", units=6, activation="relu"),
                  LayerSpec(kind="dense", units=3, activation="linear")], (2, 12, 12))
    return [mnist_mlp, mnist_cnn, mnist_lc, cifar_cnn]


def test_bp_output_layer_matches_mmse_update():
    net = mlp()
    X = RNG.normal(size=(4, 5))
    Y = RNG.normal(size=(3, 5))
    cache = network_forward(net, X, Y)
    grads = bp_backward(cache, net, "mse")
    dW, db = output_layer_update(cache, net)
    assert np.abs(grads[2][0] - dW).max() < 1e-14
    assert np.abs(grads[2][1] - db).max() < 1e-14


def test_bp_single_linear_layer_closed_form():
    net = build_network([LayerSpec(kind="dense", units=3, activation="linear")], (4,),
                        seed=1, dtype=np.float64)
    X = RNG.normal(size=(4, 6))
    Y = RNG.normal(size=(3, 6))
    cache = network_forward(net, X, Y)
    grads = bp_backward(cache, net, "mse")
    assert np.abs(grads[0][0] - cache.E @ X.T / 6).max() < 1e-13


def test_bp_ce_rejects_non_probability_targets():
    net = mlp()
    X = RNG.normal(size=(4, 3))
    Y = RNG.normal(size=(3, 3))
    cache = network_forward(net, X, Y)
    with pytest.raises(ConfigError):
        bp_backward(cache, net, "cross_entropy")


def test_bp_fd_validates_on_every_toy_architecture():
    for spec_idx, (specs, shape) in enumerate(toy_archs()):
        net = build_network(specs, shape, seed=spec_idx, dtype=np.float64)
        rng = np.random.default_rng(spec_idx)
        B = 3
        X = rng.normal(size=(B, *shape)) if len(shape) == 3 else rng.normal(size=(shape[0], B))
        Y = rng.normal(size=(net.out_dim, B))
        cache = network_forward(net, X, Y)
        grads = bp_backward(cache, net, "mse")

        def loss():
            return mse_loss(network_forward(net, X, Y).E)

        def fp():
            c = network_forward(net, X, Y)
            return b"".join((lc.F_d > 0).tobytes() for lc in c.layers if lc.F_d is not None)

        for k, (dW, db) in grads.items():
            p = net.layers[k].params
            assert finite_difference_check(loss, p.W, dW, max_coords=40, fingerprint=fp) < 1e-6, \
                f"arch {spec_idx} layer {k}"


def test_dfa_zero_error_zero_updates():
    net = mlp()
    X = RNG.normal(size=(4, 3))
    Y = network_forward(net, X).layers[-1].H
    cache = network_forward(net, X, Y)
    fb = init_feedback(net, 3, dtype=np.float64)
    for dW, db in dfa_update(cache, net, fb).values():
        assert not dW.any() and not db.any()


def test_dfa_transpose_feedback_equals_bp_single_hidden():
    net = mlp(widths=(6, 3), n_in=4, seed=5)
    X = RNG.normal(size=(4, 4))
    Y = RNG.normal(size=(3, 4))
    cache = network_forward(net, X, Y)
    fb = FeedbackMatrices(B={0: net.layers[1].params.W.T.copy()})
    dfa = dfa_update(cache, net, fb)
    bp = bp_backward(cache, net, "mse")
    for k in (0, 1):
        assert np.abs(dfa[k][0] - bp[k][0]).max() < 1e-13


def test_dfa_never_reads_downstream_weights():
    net = mlp(seed=6)
    X = RNG.normal(size=(4, 4))
    Y = RNG.normal(size=(3, 4))
    cache = network_forward(net, X, Y)
    fb = init_feedback(net, 7, dtype=np.float64)
    ref = dfa_update(cache, net, fb)
    # corrupt every downstream weight; hidden updates must not change
    net.layers[1].params.W = RNG.normal(size=net.layers[1].params.W.shape)
    net.layers[2].params.W = RNG.normal(size=net.layers[2].params.W.shape)
    got = dfa_update(cache, net, fb)
    assert np.array_equal(ref[0][0], got[0][0])
    assert np.array_equal(ref[0][1], got[0][1])


def test_dfa_entropy_zero_rate_is_plain_dfa():
    net = mlp(seed=8)
    X = RNG.normal(size=(4, 5))
    Y = RNG.normal(size=(3, 5))
    cache = network_forward(net, X, Y)
    fb = init_feedback(net, 9, dtype=np.float64)
    states = {0: EntropyState.identity(6, dtype=np.float64),
              1: EntropyState.identity(5, dtype=np.float64)}
    plain = dfa_update(cache, net, fb)
    combo = dfa_plus_entropy_update(cache, net, fb, states, {0: 0.0, 1: 0.0})
    for k in plain:
        assert np.array_equal(plain[k][0], combo[k][0])


def test_dfa_entropy_sum_of_parts():
    net = mlp(seed=9)
    X = RNG.normal(size=(4, 5))
    Y = RNG.normal(size=(3, 5))
    cache = network_forward(net, X, Y)
    fb = init_feedback(net, 10, dtype=np.float64)
    st = EntropyState.identity(6, lambda_E=0.9, eps=1e-2, dtype=np.float64)
    update_layer_correlation(st, cache.layers[0].H)
    eW, eb = entropy_gradient(st, cache, 0)
    plain = dfa_update(cache, net, fb)
    combo = dfa_plus_entropy_update(cache, net, fb, {0: st}, {0: 0.5})
    assert np.abs(combo[0][0] - (plain[0][0] - 0.5 * eW)).max() < 1e-14
    assert np.abs(combo[0][1] - (plain[0][1] - 0.5 * eb)).max() < 1e-14


def test_softmax_and_ce_loss_sanity():
    z = RNG.normal(size=(3, 4))
    p = softmax(z)
    assert np.allclose(p.sum(axis=0), 1.0)
    Y = np.zeros((3, 4))
    Y[0] = 1.0
    assert cross_entropy_loss(z, Y) > 0
