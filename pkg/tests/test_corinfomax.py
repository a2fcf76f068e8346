import numpy as np
import pytest

from ebd.core import ConfigError
from ebd.corinfomax import (
    CorInfoMaxRates,
    DynamicsConfig,
    build_corinfomax,
    corinfomax_ebd_update,
    derivative_matrices,
    dynamics_step,
    run_to_equilibrium,
    threshold_weights,
    _rhs,
)
from ebd.diagnostics import finite_difference_check

RNG = np.random.default_rng(61)


def small_net(sizes=(6, 5, 4, 3), seed=0, **kw):
    defaults = dict(lambda_E=0.999, lambda_d=0.99, g_leak=1.0, eps=0.5,
                    gain_fb=1.0, gain_lat=1.0, gain_proj=1.0)
    defaults.update(kw)
    return build_corinfomax(list(sizes), seed=seed, **defaults)


def test_dynamics_config_stability_guard():
    with pytest.raises(ConfigError):
        DynamicsConfig(tau_u=1.0, ds=1.5)


def test_zero_input_zero_fixed_point():
    net = small_net()
    cfg = DynamicsConfig()
    x = np.zeros((6, 2))
    eq = run_to_equilibrium(net, x, None, cfg)
    for H in eq.H:
        assert not H.any()
    for E in eq.E_fwd:
        assert not E.any()
    assert eq.iters == 1 and eq.converged


def test_leak_only_geometric_decay():
    # negative state, no couplings: u <- u (1 - ds * g_leak / tau)
    net = build_corinfomax([3, 4], seed=1, eps=1e30, g_leak=0.7)
    net.layers[0].B_lat[...] = 0.0
    cfg = DynamicsConfig(tau_u=2.0, ds=0.1)
    x = np.zeros((3, 1))
    u = [np.full((4, 1), -1.0)]
    h = [np.clip(u[0], 0, 1)]
    u, h, _ = dynamics_step(net, u, h, x, None, cfg)
    assert np.abs(u[0] - (-1.0) * (1 - 0.1 * 0.7 / 2.0)).max() < 1e-12


def test_equilibrium_residual_verified_directly():
    net = small_net(seed=2)
    cfg = DynamicsConfig(max_iters=3000, tol=1e-6)
    x = RNG.uniform(0, 1, size=(6, 3))
    eq = run_to_equilibrium(net, x, None, cfg)
    assert eq.converged
    u = [U.copy() for U in eq.U]
    h = [H.copy() for H in eq.H]
    rhs = _rhs(net, u, h, x, None, cfg)
    assert max(np.abs(r).max() for r in rhs) / cfg.tau_u <= cfg.tol * 1.0001


def test_equilibrium_stable_under_more_iterations():
    net = small_net(seed=3)
    x = RNG.uniform(0, 1, size=(6, 2))
    a = run_to_equilibrium(net, x, None, DynamicsConfig(max_iters=1500, tol=1e-7))
    b = run_to_equilibrium(net, x, None, DynamicsConfig(max_iters=3000, tol=1e-7))
    assert a.converged
    for Ha, Hb in zip(a.H, b.H):
        assert np.abs(Ha - Hb).max() <= 1e-6


def test_activation_ranges_and_binary_derivatives():
    net = small_net(seed=4)
    x = RNG.uniform(0, 1, size=(6, 4))
    eq = run_to_equilibrium(net, x, None, DynamicsConfig())
    for H, F in zip(eq.H, eq.F_d):
        assert H.min() >= 0.0 and H.max() <= 1.0
        assert set(np.unique(F)).issubset({0.0, 1.0})


def test_homeostasis_only_when_errors_vanish():
    net = small_net(seed=5)
    k = 1
    layer = net.layers[k]
    n, n_prev, n_next = 4, 5, 3
    B = 2
    from ebd.corinfomax import Equilibrium

    H = [RNG.uniform(0, 1, size=(5, B)), RNG.uniform(0, 1, size=(4, B)),
         RNG.uniform(0, 1, size=(3, B))]
    eq = Equilibrium(
        H=H, U=[h.copy() for h in H], F_d=[np.ones_like(h) for h in H],
        E_fwd=[np.zeros_like(h) for h in H],
        E_bwd=[np.zeros_like(H[0]), np.zeros_like(H[1]), None],
        Z=[net.layers[i].B_lat @ H[i] for i in range(3)],
        iters=1, residual=0.0, converged=True)
    W_f0 = layer.W_f.copy()
    W_b0 = layer.W_b.copy()
    B_lat0 = layer.B_lat.copy()
    E = np.zeros((3, B))
    rates = CorInfoMaxRates(mu_f=0.1, mu_b=0.1, mu_df=0.1, mu_db=0.1, mu_dl=0.1)
    x = RNG.uniform(0, 1, size=(6, B))
    corinfomax_ebd_update(net, k, eq, x, E, rates)
    assert np.array_equal(layer.W_f, W_f0)
    assert np.array_equal(layer.W_b, W_b0)
    gamma_E = (1 - net.lambda_E) / net.lambda_E
    want = B_lat0 / net.lambda_E - gamma_E / B * (eq.Z[k] @ eq.Z[k].T)
    want = 0.5 * (want + want.T)
    assert np.abs(layer.B_lat - want).max() < 1e-12


def test_pure_predictive_rule_when_ebd_rates_zero():
    net = small_net(seed=6)
    x = RNG.uniform(0, 1, size=(6, 3))
    eq = run_to_equilibrium(net, x, None, DynamicsConfig())
    k = 0
    layer = net.layers[k]
    W0 = layer.W_f.copy()
    rates = CorInfoMaxRates(mu_f=0.25)
    corinfomax_ebd_update(net, k, eq, x, np.zeros((3, 3)), rates)
    dW = layer.W_f - W0
    # descent on the forward prediction energy 0.5||H - W_f H_prev||^2
    W_var = W0.copy()
    H_fixed = eq.H[k].copy()

    def energy():
        return 0.5 * float(np.sum((H_fixed - W_var @ x) ** 2))

    analytic = -(3.0 / 0.25) * dW / 1.0   # dW = (mu/B) E_fwd x^T = -(mu/B) grad
    assert finite_difference_check(energy, W_var, analytic) < 1e-6


def test_update_sum_of_parts():
    net = small_net(seed=7)
    x = RNG.uniform(0, 1, size=(6, 2))
    y = RNG.uniform(0, 1, size=(3, 2))
    eq = run_to_equilibrium(net, x, y, DynamicsConfig())
    E = eq.H[-1] - y
    k = 1
    layer = net.layers[k]

    import copy
    parts = {}
    for name, rates in [
        ("pred_f", CorInfoMaxRates(mu_f=0.2)),
        ("dec_f", CorInfoMaxRates(mu_df=0.3)),
        ("pn", CorInfoMaxRates(mu_p=0.1, p_target=0.5)),
        ("l1", CorInfoMaxRates(mu_l1_f=0.05)),
        ("wl2", CorInfoMaxRates(mu_wl2_f=0.01)),
    ]:
        netc = copy.deepcopy(net)
        W0 = netc.layers[k].W_f.copy()
        corinfomax_ebd_update(netc, k, eq, x, E, rates)
        parts[name] = netc.layers[k].W_f - W0

    netc = copy.deepcopy(net)
    W0 = netc.layers[k].W_f.copy()
    corinfomax_ebd_update(netc, k, eq, x, E,
                          CorInfoMaxRates(mu_f=0.2, mu_df=0.3, mu_p=0.1, p_target=0.5,
                                          mu_l1_f=0.05, mu_wl2_f=0.01))
    combined = netc.layers[k].W_f - W0
    assert np.abs(combined - sum(parts.values())).max() < 1e-12


def test_lateral_trace_bounded_over_many_updates():
    net = build_corinfomax([8, 16, 4], seed=8, lambda_E=0.9999, lambda_d=0.99,
                           eps=0.5, g_leak=1.0)
    rng = np.random.default_rng(3)
    k = 0
    layer = net.layers[k]
    from ebd.corinfomax import Equilibrium

    traces = []
    for step in range(10000):
        H = [rng.uniform(0, 1, size=(16, 1)), rng.uniform(0, 1, size=(4, 1))]
        Z = [net.layers[0].B_lat @ H[0], net.layers[1].B_lat @ H[1]]
        eq = Equilibrium(H=H, U=[h.copy() for h in H],
                         F_d=[np.ones_like(h) for h in H],
                         E_fwd=[np.zeros_like(h) for h in H],
                         E_bwd=[np.zeros_like(H[0]), None],
                         Z=Z, iters=1, residual=0.0, converged=True)
        corinfomax_ebd_update(net, k, eq, rng.uniform(0, 1, size=(8, 1)),
                              np.zeros((4, 1)), CorInfoMaxRates())
        if step % 1000 == 0:
            traces.append(np.trace(layer.B_lat))
    assert np.isfinite(traces).all()
    assert max(abs(t) for t in traces) < 1e4


def test_derivative_matrices_contract():
    U = np.array([[-0.5, 0.5, 1.5]])
    F_d, G, G_d = derivative_matrices(U, "square")
    assert np.array_equal(F_d, [[0.0, 1.0, 0.0]])
    assert np.array_equal(G, [[0.0, 0.25, 1.0]])
    assert np.array_equal(G_d, [[0.0, 1.0, 2.0]])
    F_d, G, G_d = derivative_matrices(U, "identity")
    assert np.array_equal(G, np.clip(U, 0, 1))
    assert np.array_equal(G_d, np.ones_like(U))


def test_symmetry_of_lateral_after_updates():
    net = small_net(seed=9)
    x = RNG.uniform(0, 1, size=(6, 2))
    y = RNG.uniform(0, 1, size=(3, 2))
    for _ in range(5):
        eq = run_to_equilibrium(net, x, y, DynamicsConfig())
        E = eq.H[-1] - y
        for k in range(3):
            corinfomax_ebd_update(net, k, eq, x, E,
                                  CorInfoMaxRates(mu_f=0.05, mu_df=0.05, mu_dl=0.05))
    for layer in net.layers:
        assert np.abs(layer.B_lat - layer.B_lat.T).max() < 1e-8


def test_threshold_weights_zeroes_small_entries():
    net = small_net(seed=10)
    net.layers[0].W_f[0, 0] = 1e-9
    net.layers[0].W_f[0, 1] = 5.0
    threshold_weights(net, scale=3e-5)
    assert net.layers[0].W_f[0, 0] == 0.0
    assert net.layers[0].W_f[0, 1] == 5.0
