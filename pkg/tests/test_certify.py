import math

import numpy as np
import pytest

import tscopf as t
from tscopf import sdp
from tscopf.certify import (CertificateMismatch, QuadraticCertificate,
                            check_wdot_negative, grid_invariant_level,
                            invariant_set_contains, load_certificate,
                            save_certificate, w_min_bruteforce,
                            w_min_closed_form, w_value, wdot_value)
from tscopf.lure import LureSystem, SectorBounds


def scalar_system():
    return LureSystem(
        a=np.array([[-1.0]]), b=np.array([[-1.0]]), c=np.array([[1.0]]),
        u=np.eye(1), kappa=np.array([1.0]), alpha=np.array([0.0]),
        theta_eq=np.array([0.0]), y_lo=np.array([-math.pi]),
        y_hi=np.array([math.pi]), branches=((0, 1, 0),),
        dyn_positions=(0,), n_gen=1, v_eq=np.ones(2), theta_eq_bus=np.zeros(2))


def synth_system(p_dim, c_rows):
    c = np.asarray(c_rows, dtype=float)
    m = c.shape[0]
    return LureSystem(
        a=np.zeros((p_dim, p_dim)), b=np.zeros((p_dim, m)), c=c,
        u=np.eye(p_dim), kappa=np.ones(m), alpha=np.zeros(m),
        theta_eq=np.zeros(m), y_lo=-math.pi * np.ones(m),
        y_hi=math.pi * np.ones(m), branches=tuple((0, 1, k) for k in range(m)),
        dyn_positions=tuple(range(p_dim)), n_gen=0, v_eq=np.ones(p_dim),
        theta_eq_bus=np.zeros(p_dim))


def make_cert(sys, p, tau=None):
    return QuadraticCertificate(
        p=np.asarray(p, dtype=float),
        tau=np.asarray(tau if tau is not None else np.ones(sys.n_branch)),
        u=sys.u, gamma=1e-3 * np.ones(sys.n_branch),
        beta=np.ones(sys.n_branch), lmi_margin=-1.0, mu=1e-6, tol_lmi=1e-8,
        sys_hash=sys.content_hash())


def test_hand_example_block_matrix():
    f = sdp.lmi_matrix(np.array([[-1.0]]), np.array([[-1.0]]),
                       np.array([[1.0]]), np.array([0.0]), np.array([1.0]),
                       np.array([[0.5]]), np.array([1.0]))
    np.testing.assert_allclose(f, [[-1.0, 0.0], [0.0, -1.0]], atol=1e-15)


def test_scalar_lmi_feasible():
    sys = scalar_system()
    sec = SectorBounds(gamma=np.array([0.0]), beta=np.array([1.0]))
    cert = t.solve_lmi(sys, sec)
    assert cert.lmi_margin <= -1e-8
    assert cert.lambda_min >= cert.mu


def test_unstable_linear_part_infeasible():
    sys = LureSystem(
        a=np.array([[1.0]]), b=np.array([[-1.0]]), c=np.array([[1.0]]),
        u=np.eye(1), kappa=np.array([1.0]), alpha=np.array([0.0]),
        theta_eq=np.array([0.0]), y_lo=np.array([-math.pi]),
        y_hi=np.array([math.pi]), branches=((0, 1, 0),),
        dyn_positions=(0,), n_gen=1, v_eq=np.ones(2), theta_eq_bus=np.zeros(2))
    sec = SectorBounds(gamma=np.array([0.0]), beta=np.array([100.0]))
    with pytest.raises(t.LmiInfeasible) as err:
        t.solve_lmi(sys, sec)
    assert err.value.margin > -1e-8


def test_fixture_margins_eigensolver_recheck(all_pipes):
    for pipe in all_pipes:
        cert, sys = pipe.cert, pipe.sys
        f = sdp.lmi_matrix(sys.a_red, sys.b_red, sys.c_red, cert.gamma,
                           cert.beta, cert.p, cert.tau)
        margin = float(np.max(np.linalg.eigvalsh(f)))
        assert margin <= -1e-8
        assert margin == pytest.approx(cert.lmi_margin, rel=1e-9)
        assert np.all(cert.tau >= 0.0)
        assert cert.lambda_min >= cert.mu


def test_w_value_at_origin(pipe2):
    assert w_value(pipe2.cert, np.zeros(pipe2.sys.n_state)) == 0.0


def test_wdot_hand_example():
    # certified scalar loop, x = 0.5: dW = 2 P x (A x + B phi(x))
    sys = scalar_system()
    cert = make_cert(sys, [[0.5]])
    x = np.array([0.5])
    phi = math.sin(0.5)
    want = 2 * 0.5 * 0.5 * (-0.5 - phi)
    assert wdot_value(cert, sys, x) == pytest.approx(want, rel=1e-12)
    assert want < 0


def test_check_wdot_negative_fixtures(all_pipes):
    for pipe in all_pipes:
        rep = check_wdot_negative(pipe.cert, pipe.sys, n_samples=2000, seed=3)
        assert rep.n_sampled == 2000
        assert rep.n_nonnegative == 0
        assert rep.worst < 0.0


def test_wdot_mismatched_certificate(pipe2, pipe3):
    with pytest.raises(CertificateMismatch):
        check_wdot_negative(pipe2.cert, pipe3.sys, n_samples=10)


def test_wmin_trivial_symmetric():
    sys = synth_system(2, [[1.0, 0.0]])
    cert = make_cert(sys, np.eye(2))
    lev = w_min_closed_form(cert, sys, xstar=np.zeros(2), delta_l=math.pi)
    assert lev.w_min == pytest.approx(math.pi ** 2, rel=1e-12)
    assert lev.branch == 0


def test_wmin_closed_vs_bruteforce_random():
    rng = np.random.default_rng(17)
    for _ in range(12):
        n = rng.integers(2, 6)
        m = rng.integers(1, 5)
        a = rng.standard_normal((n, n))
        p = a @ a.T + 0.5 * np.eye(n)
        c = rng.standard_normal((m, n))
        sys = synth_system(n, c)
        cert = make_cert(sys, p, np.ones(m))
        xstar = rng.uniform(-1.0, 1.0, n)
        lev = w_min_closed_form(cert, sys, xstar=xstar, delta_l=math.pi)
        bf = w_min_bruteforce(cert, sys, xstar=xstar, delta_l=math.pi)
        assert abs(lev.w_min - bf) / bf <= 1e-6


def test_wmin_minimizers_on_hyperplanes(pipe3):
    sys, cert = pipe3.sys, pipe3.cert
    lev = grid_invariant_level(cert, sys)
    for i in range(sys.n_branch):
        xh = lev.minimizers[i]
        lo, hi = lev.bounds[i]
        y = float(sys.c[i] @ xh)
        assert y == pytest.approx(lo if lo ** 2 <= hi ** 2 else hi, rel=1e-9)
        assert w_value(cert, xh) == pytest.approx(lev.per_branch[i], rel=1e-9)
    assert lev.w_min == pytest.approx(np.min(lev.per_branch))


def test_certificate_scaling(pipe2):
    cert, sys = pipe2.cert, pipe2.sys
    c = 3.7
    scaled = cert.scaled(c)
    f = sdp.lmi_matrix(sys.a_red, sys.b_red, sys.c_red, scaled.gamma,
                       scaled.beta, scaled.p, scaled.tau)
    assert float(np.max(np.linalg.eigvalsh(f))) == pytest.approx(
        c * cert.lmi_margin, rel=1e-9)
    lev = grid_invariant_level(cert, sys)
    lev_c = grid_invariant_level(scaled, sys)
    assert lev_c.w_min == pytest.approx(c * lev.w_min, rel=1e-9)
    assert lev_c.branch == lev.branch
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.uniform(-0.5, 0.5, sys.n_state)
        assert (invariant_set_contains(cert, lev, sys, x)
                == invariant_set_contains(scaled, lev_c, sys, x))


def test_invariant_set_membership(pipe2):
    cert, sys, lev = pipe2.cert, pipe2.sys, pipe2.level
    assert invariant_set_contains(cert, lev, sys, np.zeros(sys.n_state))
    # far outside the polytope
    x = np.zeros(sys.n_state)
    x[0] = 50.0
    assert not invariant_set_contains(cert, lev, sys, x)


def test_certificate_cache_roundtrip(tmp_path, pipe2):
    path = tmp_path / "cert.json"
    save_certificate(str(path), pipe2.cert)
    cert2 = load_certificate(str(path), pipe2.sys)
    np.testing.assert_allclose(cert2.p, pipe2.cert.p)
    assert cert2.sys_hash == pipe2.cert.sys_hash


def test_certificate_cache_corruption(tmp_path, pipe2):
    import json
    path = tmp_path / "cert.json"
    save_certificate(str(path), pipe2.cert)
    d = json.loads(path.read_text())
    d["p"][0][0] += 1e-3
    path.write_text(json.dumps(d))
    with pytest.raises(CertificateMismatch, match="corrupt"):
        load_certificate(str(path))


def test_certificate_topology_mismatch(tmp_path, pipe2, pipe3):
    path = tmp_path / "cert.json"
    save_certificate(str(path), pipe2.cert)
    with pytest.raises(CertificateMismatch, match="hash mismatch"):
        load_certificate(str(path), pipe3.sys)
