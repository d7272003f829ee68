import numpy as np
import pytest
from scipy.linalg import expm

from _util import affine_mlp, constant_mlp, random_nets
from obscbf.lipschitz import LipschitzBundle
from obscbf.losses import LossConfig, Nets, eval_q, evaluate
from obscbf.sampling import build_epsilon_net
from obscbf.systems import benchmark, dc_motor_matrices
from obscbf.verify import audit, check_certificate, grid_oracle, simulate, simulate_batch

DC = benchmark("dc_motor")


def override_bundle(L_max):
    nan = float("nan")
    return LipschitzBundle(*([nan] * 12), L_max_override=L_max)


@pytest.mark.parametrize("L_max,eps,eta,printed", [
    (2.776, 0.0193, -0.0538, -0.0002232),  # pendulum
    (0.55, 0.0957, -0.0529, -0.000265),  # three-tank
])
def test_certificate_reproduces_reported_margins(L_max, eps, eta, printed):
    cert = check_certificate(eta, eps, override_bundle(L_max))
    assert cert.margin == L_max * eps + eta
    assert round(cert.margin, 10) == printed
    assert cert.certified and cert.L_max == L_max


def test_dc_motor_margin_discrepancy_is_recorded():
    cert = check_certificate(-0.0532, 0.023, override_bundle(2.312), reference_margin=-0.00024)
    assert round(cert.margin, 10) == -0.000024
    assert cert.certified
    assert any("differs" in n for n in cert.notes)


def test_not_certified_cases():
    assert not check_certificate(0.1, 0.0193, override_bundle(2.776)).certified
    # margin -2.4e-5 cannot absorb tau = 1e-4 in strict mode
    assert check_certificate(-0.0532, 0.023, override_bundle(2.312), strict=True, tau=1e-6).certified
    assert not check_certificate(-0.0532, 0.023, override_bundle(2.312), strict=True, tau=1e-4).certified
    cert = check_certificate(-1.0, 0.05, override_bundle(1.0), rho=0.025)
    assert not cert.certified and "rho" in cert.notes[0]


def test_full_bundle_margin():
    b = LipschitzBundle(L_b=1.0, L_dB=0.25, L_c=1.0, L_o=1.0, M_B=1.0, M_o=1.0, L_x=1.0, L_u=1.0, L_h=1.0,
                        M_f=1.0, M_h=1.0, alpha=0.1)
    cert = check_certificate(-0.5, 0.1, b)
    assert cert.L_max == pytest.approx(4.6, abs=1e-15)
    assert cert.margin == cert.L_max * 0.1 - 0.5 and cert.certified


def test_oracle_constant_barrier():
    sys, region, _ = DC
    nets = random_nets(sys, np.random.default_rng(0))
    nets = Nets(constant_mlp(4, 1.0), nets.controller, nets.observer)
    res = grid_oracle(nets, sys, region, LossConfig(delta=0.01, alpha=0.1), 0.05)
    assert res.maxima[0] == -1.0
    assert res.maxima[1] == 1.01
    assert res.maxima[2] == pytest.approx(-0.1, abs=1e-16)
    assert not res.satisfied(0.0) and res.satisfied(1.01)
    with pytest.raises(ValueError):
        grid_oracle(nets, sys, region, LossConfig(), 0.1, train_eps=0.05)
    with pytest.raises(ValueError, match="cap"):
        grid_oracle(nets, sys, region, LossConfig(), 0.01, max_samples=1000)


def test_oracle_matches_loss_zero_set():
    sys, region, _ = DC
    ds = build_epsilon_net(region, 0.05, require_below_rho=False)
    cfg = LossConfig()
    rng = np.random.default_rng(1)
    for _ in range(3):
        nets = random_nets(sys, rng, hidden=(4,))
        res = grid_oracle(nets, sys, region, cfg, 0.05)
        assert res.n_samples == len(ds)
        top = max(res.maxima)
        for eta in (top, top - 1e-9, top + 1e-3):
            L = evaluate(ds, nets, sys, cfg, eta).L_cbf
            assert (L == 0.0) == res.satisfied(eta)


def zero_input_nets(sys):
    n, m, p = sys.n, sys.m, sys.p
    return Nets(constant_mlp(2 * n, 1.0), constant_mlp(n, 0.0, m, lb=sys.u_lb, ub=sys.u_ub),
                constant_mlp(n + m + p, 0.0, n))


def test_rk4_matches_matrix_exponential():
    sys, region, _ = DC
    A, _, _ = dc_motor_matrices()
    x0 = np.array([0.02, -0.15])
    tr = simulate(zero_input_nets(sys), sys, region, x0, x0, 1.0, 1e-3)
    exact = expm(A * 1.0) @ x0
    assert tr.t[-1] == pytest.approx(1.0)
    assert np.linalg.norm(tr.x[-1] - exact) <= 1e-6 * np.linalg.norm(exact)


def test_rk4_richardson_order():
    sys, region, _ = DC
    A, _, _ = dc_motor_matrices()
    x0 = np.array([0.02, -0.15])
    exact = expm(A * 1.0) @ x0
    nets = zero_input_nets(sys)
    # coarse steps keep the error well above roundoff
    e1 = np.linalg.norm(simulate(nets, sys, region, x0, x0, 1.0, 0.05).x[-1] - exact)
    e2 = np.linalg.norm(simulate(nets, sys, region, x0, x0, 1.0, 0.025).x[-1] - exact)
    assert 12.0 <= e1 / e2 <= 20.0


def test_pendulum_equilibrium_is_stationary():
    sys, region, _ = benchmark("pendulum")
    nets = zero_input_nets(sys)
    tr = simulate(nets, sys, region, np.zeros(2), np.zeros(2), 2.0, 0.01, require_init=False)
    assert np.all(tr.x == 0.0) and np.all(tr.B == 1.0)
    rep = audit(tr)
    assert rep.passed
    with pytest.raises(ValueError, match="X0"):
        simulate(nets, sys, region, np.zeros(2), np.zeros(2), 2.0, 0.01)


def test_audit_flags_negative_initial_barrier():
    sys, region, _ = DC
    nets = zero_input_nets(sys)
    nets = Nets(constant_mlp(4, -0.5), nets.controller, nets.observer)
    tr = simulate(nets, sys, region, np.zeros(2), np.zeros(2), 0.1, 0.01)
    rep = audit(tr)
    assert not rep.passed
    assert rep.checks["initial_barrier_nonnegative"] == {"passed": False, "first_violation_t": 0.0}


def test_exit_from_domain_is_recorded():
    sys, region, _ = DC
    nets = zero_input_nets(sys)
    # observer drifts at a constant rate 1 in the first coordinate
    nets = Nets(nets.barrier, nets.controller, constant_mlp(4, [1.0, 0.0], 2))
    tr = simulate(nets, sys, region, np.zeros(2), np.zeros(2), 1.0, 0.01)
    assert tr.exited_domain and tr.t[-1] < 1.0
    rep = audit(tr)
    assert not rep.checks["stays_in_domain"]["passed"]
    assert not rep.checks["state_safe"]["passed"]
    # xhat leaves X at t = 0.1 before it leaves D at t = 0.125
    assert rep.checks["state_safe"]["first_violation_t"] == pytest.approx(0.11)


def test_simulation_determinism_and_input_bounds():
    sys, region, _ = DC
    rng = np.random.default_rng(2)
    nets = random_nets(sys, rng, hidden=(8,), scale=3.0)
    x0 = np.array([[0.01, 0.1], [-0.02, -0.1]])
    a = simulate_batch(nets, sys, region, x0, x0[::-1], 0.5, 0.01)
    b = simulate_batch(nets, sys, region, x0, x0[::-1], 0.5, 0.01)
    for s, t in zip(a, b):
        assert s.x.tobytes() == t.x.tobytes() and s.B.tobytes() == t.B.tobytes()
        assert np.all(s.u >= sys.u_lb) and np.all(s.u <= sys.u_ub)
        assert np.all(np.diff(s.t) > 0)


def test_zero_order_hold_changes_the_response():
    sys, region, _ = DC
    nets = Nets(constant_mlp(4, 1.0), affine_mlp([[-5.0, 0.0]], [0.0], lb=[-1.0], ub=[1.0]),
                affine_mlp([[-1.0, 0.0, 0.0, 1.0], [0.0, -1.0, 0.0, 0.0]], [0.0, 0.0]))
    x0 = np.array([0.02, 0.0])
    cont = simulate(nets, sys, region, x0, x0, 0.2, 0.01)
    zoh = simulate(nets, sys, region, x0, x0, 0.2, 0.01, zoh_period=0.05)
    assert not np.array_equal(cont.x, zoh.x)
    with pytest.raises(ValueError):
        simulate(nets, sys, region, x0, x0, 0.2, 0.0)


def test_residual_matches_negated_q3():
    sys, region, _ = DC
    rng = np.random.default_rng(3)
    nets = random_nets(sys, rng)
    cfg = LossConfig(alpha=0.1)
    x0 = np.array([0.01, 0.1])
    tr = simulate(nets, sys, region, x0, x0, 0.05, 0.01, cfg)
    for i in range(len(tr.t)):
        s = np.concatenate([tr.x[i], tr.xhat[i]])
        assert tr.residual[i] == pytest.approx(-eval_q(3, s, nets, sys, region, cfg), rel=1e-12, abs=1e-15)
