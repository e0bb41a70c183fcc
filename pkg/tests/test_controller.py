import math

import numpy as np
import pytest

from incrt.attention import LayerState
from incrt.controller import (
    ControllerConfig,
    ControllerState,
    OperatorContext,
    apply_growth,
    apply_prune,
    controller_step,
    growth_trigger,
    lyapunov,
    prune_trigger,
    read_events,
    stop_check,
)
from incrt.exceptions import PreconditionError, SaturationError
from incrt.gate import GateState, init_gate
from incrt.spectra import PCA, CapturedBasis, spectral_summary
from incrt.tasks import planted_operator


def layer(d, seed=0):
    return LayerState([], CapturedBasis.empty(d), init_gate(d, seed=seed))


def cfg(**kw):
    base = dict(theta_w=1.0, phi_g=0.1, t_conv=5, t_prune=3)
    base.update(kw)
    return ControllerConfig(**base)


def test_config_rejects_bad_thresholds():
    with pytest.raises(PreconditionError):
        ControllerConfig(theta_w=0.1, phi_g=0.2)
    with pytest.raises(PreconditionError):
        ControllerConfig(theta_w=0.1, phi_g=0.0)
    with pytest.raises(ValueError):
        ControllerConfig(theta_w=1.0, phi_g=0.1, mode="xyz")
    c = ControllerConfig.from_reference(10.0, 0.4, 0.05)
    assert math.isclose(c.theta_w, 4.0) and math.isclose(c.phi_g, 0.2)


def test_growth_trigger_conditions():
    state = ControllerState()
    s = spectral_summary(np.diag([2.0, 0.0, -2.0]))
    assert growth_trigger(s, state, cfg(), 0)
    quiet = spectral_summary(np.diag([0.5, 0.0, -0.5]))
    assert not growth_trigger(quiet, state, cfg(), 0)
    one_sided = spectral_summary(np.diag([2.0, 1.0, 0.5]))
    assert not growth_trigger(one_sided, state, cfg(), 0)
    assert growth_trigger(one_sided, state, cfg(mode=PCA), 0)
    state.last_growth_step = 10
    assert not growth_trigger(s, state, cfg(), 14)
    assert growth_trigger(s, state, cfg(), 15)


def test_prune_streak_counts_and_resets():
    state, c = ControllerState(), cfg()
    assert [prune_trigger(0, 0.05, state, c) for _ in range(3)] == [False, False, True]
    state = ControllerState()
    prune_trigger(0, 0.05, state, c)
    prune_trigger(0, 0.05, state, c)
    assert not prune_trigger(0, 0.5, state, c)
    assert state.low_energy_streak[0] == 0


def test_stop_check():
    s = spectral_summary(np.diag([0.5, -0.5]))
    assert stop_check(s, {}, cfg())
    assert stop_check(s, {0: 0.3}, cfg())
    assert not stop_check(s, {0: 0.05}, cfg())
    assert not stop_check(spectral_summary(np.diag([2.0, -2.0])), [], cfg())


def test_lyapunov_examples():
    s = spectral_summary(np.diag([3.0, 2.0, 1.0]))
    aligned = GateState(np.eye(3)[0], np.eye(3)[2], gamma_star=0.5)
    assert math.isclose(lyapunov(s, aligned), math.sqrt(14))
    off = GateState(np.eye(3)[1], np.eye(3)[0], gamma_star=0.5)
    assert math.isclose(lyapunov(s, off), math.sqrt(14) + 1.5 * 3.0)
    assert math.isclose(lyapunov([s, s], [aligned, None]), 2 * math.sqrt(14))


def test_apply_growth_and_prune_bookkeeping():
    L, state = layer(4), ControllerState(gamma_ref=1.0)
    L.gate = GateState(np.eye(4)[0], np.eye(4)[1])
    c = cfg()
    h = apply_growth(L, c, state, step=7)
    assert h.head_id == 0 and L.basis.K == 2 and L.basis.tags == [0, 0]
    assert state.last_growth_step == 7
    # probes re-seeded inside the new residual subspace
    assert np.abs(L.basis.Q.T @ L.gate.u_plus).max() < 1e-12
    h2 = apply_growth(L, c, state, step=20)
    assert h2.head_id == 1 and L.basis.K == 4
    with pytest.raises(SaturationError):
        apply_growth(L, c, state, step=40)
    apply_prune(L, 0, state, step=50)
    assert L.basis.tags == [1, 1] and [x.head_id for x in L.heads] == [1]
    with pytest.raises(KeyError):
        apply_prune(L, 0, state, step=51)


def test_pca_growth_captures_one_direction():
    L, state = layer(3), ControllerState(gamma_ref=1.0)
    apply_growth(L, cfg(mode=PCA), state, step=0)
    assert L.basis.K == 1


def test_stationary_operator_runs_to_stop_without_prunes():
    B = planted_operator(12, [3.0, 2.0], seed=0, bulk=0.02)
    L, state = layer(12, seed=1), ControllerState()
    ctx = OperatorContext(L, B)
    c = cfg(theta_w=0.5, phi_g=0.02, t_conv=20, t_prune=50, gate_steps=4)
    for step in range(6000):
        rep = controller_step(ctx, c, state, step)
        if rep.stopped:
            break
    assert state.stopped
    assert len(state.growth_events()) == 2 and not state.prune_events()
    assert spectral_summary(ctx.residual(), L.basis).lambda_max <= c.theta_w
    # growth events carry a Lyapunov value no larger than the one before
    W = [e.W_t for e in state.events]
    assert all(b <= a + 1e-9 for a, b in zip(W, W[1:]))
    assert state.events[-1].kind == "stop"


def test_frozen_after_stop():
    B = np.diag([0.2, 0.0, -0.2, 0.0])
    L, state = layer(4), ControllerState(gamma_ref=1.0)
    ctx = OperatorContext(L, B)
    c = cfg()
    controller_step(ctx, c, state, 0)
    assert state.stopped
    ctx.set_operator(np.diag([5.0, 0.0, -5.0, 0.0]))
    for step in range(1, 50):
        controller_step(ctx, c, state, step)
    assert not state.growth_events()


def test_events_round_trip(tmp_path):
    from incrt.controller import Event, write_events

    ev = [Event(3, "growth", 0, 1.0, -1.0, 2.0, 2.5, 1, [1.0, 0.0], [0.0, 1.0])]
    p = tmp_path / "events.jsonl"
    write_events(p, ev)
    assert read_events(p) == ev
