import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incrt.exceptions import ConvergenceError, DegenerateSpectrumError, PreconditionError
from incrt.gate import (
    GateState,
    balance_gamma,
    gate_deviation,
    gate_operator,
    gate_step,
    init_gate,
    mca_exin_step,
    oja_step,
    orthogonalize,
    rayleigh,
    reseed,
    run_to_convergence,
)
from incrt.spectra import spectral_summary

E = np.eye(3)
S2 = np.array([0.7071, 0.7071])


def gate(up, um, **kw):
    return GateState(np.asarray(up, float), np.asarray(um, float), **kw)


def test_oja_fixed_point_and_hand_step():
    A = np.diag([2.0, 1.0])
    assert np.allclose(oja_step(gate([1, 0], [0, 1]), A).u_plus, [1, 0])
    g = oja_step(gate(S2, [0.7071, -0.7071], eta_plus=0.1), A)
    # one step by hand: R = 1.5, u + 0.1 (Au - R u), normalized
    assert np.allclose(g.u_plus, [0.74154, 0.67091], atol=1e-4)
    assert g.step_count == 1
    assert np.allclose(oja_step(gate(S2, [0.7071, -0.7071]), np.zeros((2, 2))).u_plus, S2 / np.linalg.norm(S2))


def test_mca_fixed_point_and_descent():
    A = np.diag([2.0, 1.0])
    assert np.allclose(mca_exin_step(gate([1, 0], [0, 1]), A).u_minus, [0, 1])
    g0 = gate([0.7071, -0.7071], S2, eta_minus=0.1)
    for shift in (True, False):
        assert abs(mca_exin_step(g0, A, shift=shift).u_minus[0]) < 0.7071
    u = mca_exin_step(g0, np.zeros((2, 2))).u_minus
    assert np.allclose(u, S2 / np.linalg.norm(S2))


def test_literal_minor_rule_stalls_on_indefinite_operator():
    # the unshifted prefactor vanishes where u^T A u = 0, so it can stop short
    rng = np.random.default_rng(0)
    U, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    A = (U * np.linspace(1, -1, 8)) @ U.T
    g = init_gate(8, seed=1)
    for _ in range(5000):
        g = orthogonalize(mca_exin_step(oja_step(g, A), A, shift=False))
    s = spectral_summary(A)
    assert abs(rayleigh(g.u_minus, A)) < 1e-6
    assert abs(g.u_minus @ s.vr) < 0.99
    g2, _ = run_to_convergence(init_gate(8, seed=1), A, tol=1e-8)
    assert abs(g2.u_minus @ s.vr) > 0.9999


def test_orthogonalize_cases():
    g = orthogonalize(gate([1, 0, 0], [0, 1, 0]))
    assert np.allclose(g.u_minus, [0, 1, 0])
    g = orthogonalize(gate([1, 0], [0.6, 0.8]))
    assert np.allclose(g.u_minus, [0, 1])
    a = orthogonalize(gate([1, 0, 0], [1, 0, 0]))
    b = orthogonalize(gate([1, 0, 0], [1, 0, 0]))
    assert abs(a.u_minus @ a.u_plus) < 1e-12 and np.array_equal(a.u_minus, b.u_minus)
    assert a.reseed_count == 1


def test_balance_gamma():
    assert balance_gamma(1, 1) == 0.5
    assert balance_gamma(3, 1) == 0.75
    assert balance_gamma(0, 2) == 0.0
    with pytest.raises(DegenerateSpectrumError):
        balance_gamma(0, 0)


def test_gate_operator_examples():
    G = gate_operator(gate(E[0], E[1], gamma_star=0.5))
    assert np.allclose(G, np.diag([1, -0.5, 0]))
    P = gate_operator(gate(E[0], E[1], gamma_star=0.0))
    assert np.allclose(P @ P, P)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.floats(0, 1), st.integers(0, 2**31 - 1))
def test_gate_operator_spectrum(d, gamma, seed):
    g = init_gate(d, seed=seed)
    g = GateState(g.u_plus, g.u_minus, gamma_star=gamma)
    w = np.sort(np.linalg.eigvalsh(gate_operator(g)))
    expect = np.sort(np.r_[1.0, -gamma, np.zeros(d - 2)])
    assert np.allclose(w, expect, atol=1e-10)
    assert math.isclose(np.trace(gate_operator(g)), 1 - gamma, abs_tol=1e-12)


def test_deviation_examples():
    s = spectral_summary(np.diag([3.0, 2.0, 1.0]))
    assert gate_deviation(gate(E[0], E[2], gamma_star=0.5), s) == 0
    assert gate_deviation(gate(-E[0], -E[2], gamma_star=0.5), s) == 0
    assert gate_deviation(gate(E[1], E[0], gamma_star=0.5), s) == 1.5


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**31 - 1))
def test_composite_step_keeps_norms_and_orthogonality(d, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    A = (A + A.T) / 2
    g = init_gate(d, seed=seed)
    for _ in range(20):
        g = gate_step(g, A)
        assert abs(np.linalg.norm(g.u_plus) - 1) < 1e-10
        assert abs(np.linalg.norm(g.u_minus) - 1) < 1e-10
        assert abs(g.u_plus @ g.u_minus) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_oja_monotone_ascent(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 6))
    A = (A + A.T) / 2
    eta = 1 / (4 * np.linalg.norm(A, 2))
    g = init_gate(6, seed=seed, eta_plus=eta)
    r = rayleigh(g.u_plus, A)
    for _ in range(200):
        g = oja_step(g, A)
        r_new = rayleigh(g.u_plus, A)
        assert r_new >= r - 1e-12
        r = r_new


def test_run_to_convergence_cases():
    A = np.diag([3.0, 2.0, 1.0])
    g, steps = run_to_convergence(init_gate(3, seed=0), A, tol=1e-6)
    assert abs(g.u_plus[0]) > 0.9999 and abs(g.u_minus[2]) > 0.9999 and steps > 0
    g2, steps2 = run_to_convergence(g, A, tol=1e-6)
    assert steps2 == 0
    with pytest.raises(PreconditionError):
        run_to_convergence(init_gate(3), np.diag([1.0, 1.0, 0.0]))
    with pytest.raises(ConvergenceError) as err:
        run_to_convergence(init_gate(3, seed=0), A, tol=1e-12, max_steps=3)
    assert err.value.steps == 3 and err.value.deviation > 0


def test_decaying_rate_schedule():
    g = GateState(E[0], E[1], eta_plus=0.1, eta_minus=0.2, step_count=10, tau=10.0)
    assert np.allclose(g.rates(), (0.05, 0.1))


def test_reseed_avoids_span():
    Q = np.eye(5)[:, :2]
    g = reseed(init_gate(5), avoid=Q)
    assert np.abs(Q.T @ g.u_plus).max() < 1e-12 and np.abs(Q.T @ g.u_minus).max() < 1e-12
    assert abs(g.u_plus @ g.u_minus) < 1e-12
