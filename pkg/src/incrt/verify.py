"""Self-checks for the library, grouped into suites.

Each check returns a ``Check`` with the measured value and the bound it
was held to. ``run_suites`` drives them for the CLI; the test-suite
calls the same functions at full size.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import oracles
from .attention import (
    HeadParams,
    init_head,
    init_model,
    backward,
    layer_forward,
    motor_jacobian,
    preservation_scale,
)
from .controller import (
    ControllerConfig,
    ControllerState,
    OperatorContext,
    apply_growth,
    controller_step,
)
from .attention import LayerState
from .gate import GateState, gate_step, init_gate, run_to_convergence
from .spectra import (
    BD,
    PCA,
    CapturedBasis,
    complexity_index,
    decay_envelope,
    decay_rate,
    deflation_oracle,
    project_operator,
    residual_operator,
    spectral_summary,
)
from .tasks import (
    OperatorTaskSpec,
    Phase,
    class_direction_check,
    planted_operator,
    random_rotation,
)

SUITES = ("gate", "deflation", "lyapunov", "ntk", "gradients", "envelope", "preservation")


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: str
    detail: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: {self.value:.6g} ({self.bound})"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return x


def check_to_dict(c: Check) -> dict:
    return _jsonable(asdict(c))


# ----------------------------------------------------------------------------
# operators


def gapped_operator(d: int, rng, min_gap: float = 0.1) -> np.ndarray:
    """Random symmetric matrix, eigenvalues in [-1, 1], both end gaps >= min_gap."""
    while True:
        w = np.sort(rng.uniform(-1, 1, d))[::-1]
        if w[0] - w[1] >= min_gap and w[-2] - w[-1] >= min_gap:
            break
    U = random_rotation(d, rng)
    A = (U * w) @ U.T
    return (A + A.T) / 2.0


def planted_family(d: int, seed: int, n_pairs: Optional[int] = None, bulk: float = 0.02) -> np.ndarray:
    """Planted +-pairs with distinct energies in [1, ~3] over a small bulk."""
    rng = np.random.default_rng([seed, d])
    k = n_pairs if n_pairs is not None else max(2, d // 8)
    energies = 1.0 + 0.25 * np.arange(k) + rng.uniform(0, 0.1, k)
    return planted_operator(d, energies, seed=[seed, d, 1], bulk=bulk)


# ----------------------------------------------------------------------------
# gate


def gate_convergence(n_seeds: int = 100, d: int = 16, eta: float = 0.05, tol: float = 1e-7, max_steps: int = 10_000) -> Check:
    """Gate runs timed on their own; alignment is judged by the Jacobi oracle afterwards."""
    elapsed, worst, steps = 0.0, 1.0, []
    for seed in range(n_seeds):
        rng = np.random.default_rng([seed, 17])
        A = gapped_operator(d, rng)
        t0 = time.perf_counter()
        g, n = run_to_convergence(init_gate(d, seed=seed, eta_plus=eta, eta_minus=eta), A, tol=tol, max_steps=max_steps)
        elapsed += time.perf_counter() - t0
        _, V = oracles.jacobi_eigh(A)
        worst = min(worst, abs(g.u_plus @ V[:, 0]), abs(g.u_minus @ V[:, -1]))
        steps.append(n)
    return Check(
        "gate convergence",
        bool(worst > 0.999 and elapsed < 10.0),
        worst,
        "min |<u,v>| > 0.999 and < 10 s",
        {"elapsed_s": elapsed, "max_steps": max(steps), "mean_steps": float(np.mean(steps))},
    )


def moving_target(d: int = 8, eta: float = 0.05, steps: int = 4000, burn_in: int = 1000, seed: int = 0) -> Check:
    """Gate tracking an operator under slow rotation, |A(t+1) - A(t)|_F <= 0.01 eta."""
    rng = np.random.default_rng([seed, 3])
    w = np.linspace(1.0, -1.0, d)
    U0 = random_rotation(d, rng)
    K = rng.standard_normal((d, d))
    K = (K - K.T) / 2.0
    # |[K, A]|_F <= 2 |K|_2 |A|_2 per unit angle; pick the angle so the drift bound holds
    A0 = (U0 * w) @ U0.T
    drift = np.linalg.norm(K @ A0 - A0 @ K)
    omega = 0.01 * eta / drift * 0.9
    # exact rotation step via the matrix exponential of a skew matrix
    ev, EV = np.linalg.eigh(1j * K * omega)
    R = (EV @ np.diag(np.exp(-1j * ev)) @ EV.conj().T).real
    g = init_gate(d, seed=seed, eta_plus=eta, eta_minus=eta)
    U = U0
    worst, max_drift = 1.0, 0.0
    A_prev = A0
    for t in range(steps):
        A = (U * w) @ U.T
        max_drift = max(max_drift, float(np.linalg.norm(A - A_prev)))
        A_prev = A
        g = gate_step(g, A)
        if t >= burn_in:
            worst = min(worst, abs(g.u_plus @ U[:, 0]), abs(g.u_minus @ U[:, -1]))
        U = R @ U
    ok = worst > 0.99 and max_drift <= 0.01 * eta * (1 + 1e-9)
    return Check("moving-target tracking", bool(ok), worst, "post-burn-in alignment > 0.99", {"max_drift": max_drift})


# ----------------------------------------------------------------------------
# deflation


def exact_probe_growth(A: np.ndarray, mode: str):
    """Grow once with probes set to the exact extreme eigenvectors.

    Returns (Gamma^2 before, Gamma^2 after, lambda_1, lambda_r).
    """
    d = A.shape[0]
    s = spectral_summary(A)
    gate = GateState(s.v1.copy(), s.vr.copy())
    layer = LayerState([], CapturedBasis.empty(d), gate)
    cfg = ControllerConfig(theta_w=1e-3, phi_g=1e-4, mode=mode, sigma_new=0.1)
    state = ControllerState(gamma_ref=float(np.linalg.norm(A)))
    apply_growth(layer, cfg, state, 0, OperatorContext(layer, A))
    after = project_operator(A, layer.basis)
    return float(np.linalg.norm(A)) ** 2, float(np.linalg.norm(after)) ** 2, s.lambda_max, s.lambda_min


def deflation_identities(n_ops: int = 50, d: int = 12, tol: float = 1e-6, fault: float = 0.0) -> Check:
    worst = 0.0
    oracle_gap = 0.0
    for seed in range(n_ops):
        rng = np.random.default_rng([seed, 31])
        A = gapped_operator(d, rng)
        for mode in (PCA, BD):
            g2, g2a, l1, lr = exact_probe_growth(A, mode)
            expect = g2 - l1**2 - (lr**2 if mode == BD else 0.0)
            worst = max(worst, abs(g2a + fault - expect))
        # independent route: hand-rolled Jacobi deflation
        res = deflation_oracle(A, 0.3, BD)
        k, _, trace = oracles.deflate_by_hand(A, 0.3, BD)
        oracle_gap = max(oracle_gap, abs(k - res.k_oracle), max(abs(a - b) for a, b in zip(trace, res.gamma_trace)))
    ok = worst <= tol and oracle_gap <= 1e-8
    return Check("deflation identities", bool(ok), worst, f"|dGamma^2 - lambda^2| <= {tol}", {"oracle_gap": oracle_gap})


# ----------------------------------------------------------------------------
# controller runs on operator tasks


@dataclass
class OperatorRun:
    B: np.ndarray
    cfg: ControllerConfig
    state: ControllerState
    layer: LayerState
    ctx: OperatorContext
    steps: int


def run_operator(B: np.ndarray, theta_w: float, max_steps: int = 40_000, mode: str = BD, seed: int = 0, **kw) -> OperatorRun:
    """Drive the controller on a fixed operator until it stops (or the budget runs out)."""
    d = B.shape[0]
    gamma0 = float(np.linalg.norm(B))
    opts = dict(theta_w=theta_w, phi_g=0.05 * theta_w, mode=mode, t_conv=20, t_prune=50, gate_steps=4)
    opts.update(kw)
    cfg = ControllerConfig(**opts)
    layer = LayerState([], CapturedBasis.empty(d), init_gate(d, seed=seed))
    ctx = OperatorContext(layer, B)
    state = ControllerState(gamma_ref=gamma0)
    step = 0
    while step < max_steps:
        controller_step(ctx, cfg, state, step)
        step += 1
        if state.stopped and cfg.freeze_on_stop:
            break
    return OperatorRun(B, cfg, state, layer, ctx, step)


def event_lyapunov_ok(events, tol: float = 1e-6) -> float:
    """Largest increase of W across consecutive events (<= tol means non-increasing)."""
    W = [e.W_t for e in events]
    return max([b - a for a, b in zip(W, W[1:])], default=0.0)


def regrown_pruned(events, cos: float = 0.99) -> bool:
    pruned = {}
    growth_dir = {}
    for e in events:
        if e.kind == "growth":
            u = np.asarray(e.u_plus)
            for hid in pruned:
                if abs(u @ growth_dir[hid]) > cos:
                    return True
            growth_dir[e.head_id] = u
        elif e.kind == "prune":
            pruned[e.head_id] = True
    return False


def lyapunov_stationary(n_tasks: int = 6, d: int = 16) -> Check:
    worst_rise, prunes, regrow, stopped = 0.0, 0, False, True
    for seed in range(n_tasks):
        B = planted_family(d, seed)
        run = run_operator(B, theta_w=0.5, seed=seed)
        ev = run.state.events
        worst_rise = max(worst_rise, event_lyapunov_ok(ev))
        prunes += len(run.state.prune_events())
        regrow = regrow or regrown_pruned(ev)
        stopped = stopped and run.state.stopped
    ok = worst_rise <= 1e-6 and prunes == 0 and not regrow and stopped
    return Check(
        "Lyapunov on stationary tasks",
        bool(ok),
        worst_rise,
        "max W rise across events <= 1e-6, no prunes, no regrowth",
        {"prunes": prunes, "regrown": regrow, "all_stopped": stopped},
    )


def stopping_configuration(n_tasks: int = 6, d: int = 16) -> Check:
    violations = []
    for seed in range(n_tasks):
        B = planted_family(d, seed)
        run = run_operator(B, theta_w=0.5, seed=seed)
        cfg = run.cfg
        if not run.state.stopped:
            violations.append((seed, "never stopped"))
            continue
        s = spectral_summary(run.ctx.residual(), run.layer.basis)
        if not s.lambda_max <= cfg.theta_w:
            violations.append((seed, "lambda_max", s.lambda_max))
        for h in run.layer.heads:
            g = run.ctx.head_energy(h)
            if not (cfg.phi_g <= g <= cfg.theta_w):
                violations.append((seed, h.head_id, g))
    return Check("stopping configuration", not violations, float(len(violations)), "no violations", {"violations": violations})


def online_gamma_trace(run: OperatorRun) -> list:
    """Residual energy right before each growth, then the final value."""
    g = [e.gamma_res for e in run.state.growth_events()]
    g.append(float(np.linalg.norm(run.ctx.residual())))
    return g


def decay_envelope_check(n_ops: int = 20, d: int = 16) -> Check:
    worst = -np.inf
    for seed in range(n_ops):
        B = planted_family(d, seed)
        theta = 0.5
        rep = complexity_index(B, theta, BD)
        oracle = deflation_oracle(B, theta, BD).gamma_trace
        run = run_operator(B, theta_w=theta, seed=seed)
        for trace in (oracle, online_gamma_trace(run)):
            for k, g in enumerate(trace):
                env = decay_envelope(rep.gamma0, rep.kappa, k)
                worst = max(worst, g / (env * (1 + 1e-6)) if env > 0 else (np.inf if g > 0 else 0.0))
    rho_ok = round(decay_rate(9.1), 3) == 0.988
    return Check(
        "decay envelope",
        bool(worst <= 1.0 and rho_ok),
        float(worst),
        "max Gamma_k / envelope <= 1 and rho(9.1) = 0.988",
        {"rho_9.1": decay_rate(9.1)},
    )


def online_vs_oracle(dims=(16, 32, 64), seeds=(0, 1)) -> Check:
    ratios = []
    for d in dims:
        for seed in seeds:
            B = planted_family(d, seed)
            k_or = deflation_oracle(B, 0.5, BD).k_oracle
            run = run_operator(B, theta_w=0.5, seed=seed)
            ratios.append(len(run.layer.heads) / k_or)
    lo, hi = min(ratios), max(ratios)
    return Check("online vs oracle head count", bool(0.9 <= lo and hi <= 1.1), hi if hi > 1.1 else lo, "K_obs / K_oracle in [0.9, 1.1]", {"ratios": ratios})


def threshold_sweep(ratios=(0.2, 0.4, 0.6), seeds=range(5), d: int = 32, mode: str = BD) -> dict:
    """K_obs / K_pred for thresholds set as fractions of the initial energy."""
    rows = []
    for r in ratios:
        k_pred, k_obs = [], []
        for seed in seeds:
            B = planted_family(d, seed)
            g0 = float(np.linalg.norm(B))
            rep = complexity_index(B, r * g0, mode)
            run = run_operator(B, theta_w=r * g0, seed=seed, mode=mode)
            k_pred.append(rep.k_star_pred)
            k_obs.append(len(run.layer.heads))
        k_pred, k_obs = np.array(k_pred, float), np.array(k_obs, float)
        rows.append(
            {
                "ratio": r,
                "K_pred": float(k_pred.mean()),
                "K_obs_mean": float(k_obs.mean()),
                "K_obs_std": float(k_obs.std()),
                "K_obs_over_K_pred": float(k_obs.mean() / k_pred.mean()) if k_pred.mean() else float("nan"),
            }
        )
    return {"mode": mode, "rows": rows}


# ----------------------------------------------------------------------------
# two-phase shift


def shift_task_spec(noise: float = 0.01, seed: int = 0) -> OperatorTaskSpec:
    return OperatorTaskSpec(
        d=8,
        phases=[Phase((0, 1, 2), (3.0, 2.0, 1.0), 1), Phase((4, 5, 6), (3.0, 2.0, 1.0), 6)],
        noise_scale=noise,
        seed=seed,
    )


def shift_config(gamma0: float) -> ControllerConfig:
    theta = 0.1 * gamma0
    return ControllerConfig(theta_w=theta, phi_g=0.05 * theta, t_conv=50, t_prune=50, freeze_on_stop=False)


def pruning_under_shift(epochs: int = 10, steps_per_epoch: int = 500, seed: int = 0) -> Check:
    from .trainer import TrainConfig, train_loop

    t0 = time.perf_counter()
    spec = shift_task_spec(seed=seed)
    layer = LayerState([], CapturedBasis.empty(spec.d), init_gate(spec.d, seed=seed))
    tc = TrainConfig(max_epochs=epochs, steps_per_epoch=steps_per_epoch, seed=seed)
    layer, trace, state, cfg = train_loop(layer, spec, tc, shift_config)
    shift_step = (spec.phases[1].start_epoch - spec.phases[0].start_epoch) * steps_per_epoch
    kinds = [(e.kind, e.step >= shift_step) for e in state.events if e.kind != "stop"]
    pre_g = sum(1 for k, late in kinds if k == "growth" and not late)
    pre_p = sum(1 for k, late in kinds if k == "prune" and not late)
    post_p = sum(1 for k, late in kinds if k == "prune" and late)
    post_g = sum(1 for k, late in kinds if k == "growth" and late)
    # regrown u+ directions against the new phase's axes
    late_growth = [np.asarray(e.u_plus) for e in state.events if e.kind == "growth" and e.step >= shift_step]
    align = [float(np.abs(u[list(spec.phases[1].active_axes)]).max()) for u in late_growth]
    prune_window = [e.step - shift_step for e in state.events if e.kind == "prune"]
    final_gamma = trace.rows[-1]["gamma_res"]
    elapsed = time.perf_counter() - t0
    ok = (
        (pre_g, pre_p, post_p, post_g) == (3, 0, 3, 3)
        and all(a > 0.95 for a in align)
        and all(w < 2 * steps_per_epoch for w in prune_window)
        and final_gamma <= cfg.theta_w
        and elapsed < 60.0
    )
    return Check(
        "pruning under shift",
        bool(ok),
        float(min(align, default=0.0)),
        "3 growths, then 3 prunes + 3 regrowths aligned > 0.95, final Gamma <= theta_w, < 60 s",
        {
            "counts": [pre_g, pre_p, post_p, post_g],
            "alignment": align,
            "final_gamma": final_gamma,
            "theta_w": cfg.theta_w,
            "elapsed_s": elapsed,
            "captured_alignment": class_direction_check(spec, layer.basis, phase=1).tolist(),
        },
    )


# ----------------------------------------------------------------------------
# tangent kernel


def ntk_alignment(eps: float, draws: int = 32, d: int = 8, n: int = 6, seed: int = 0):
    """Alignment between the head's feature-space tangent kernel and A_res.

    The head's motor is a random skew matrix of Frobenius norm ``eps``;
    the kernel is averaged over ``draws`` value matrices at the optimal
    value variance and pulled back to feature space as X^T K X. Returns
    ``(cosine, c_hat, c_target)``.
    """
    rng = np.random.default_rng([seed, 101])
    d_k = d_v = d
    X = rng.standard_normal((n, d))
    Kr = rng.standard_normal((d, d))
    Ma = (Kr - Kr.T) / 2.0
    Ma *= eps / np.linalg.norm(Ma)
    A = residual_operator(X, Ma)
    var = d_k * n / d_v
    theta = np.zeros((n, n))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(draws):
            h = HeadParams(Ma.copy(), np.eye(d), rng.normal(0.0, math.sqrt(var / d_v), (d, d_v)), np.eye(d_v))
            J = motor_jacobian(X, h).reshape(n, -1)
            theta += J @ J.T / draws
    proj = X.T @ theta @ X
    proj = (proj + proj.T) / 2.0
    inner = float((proj * A).sum())
    cos = inner / (np.linalg.norm(proj) * np.linalg.norm(A))
    c_hat = inner / float((A * A).sum())
    return cos, c_hat, var * d_v / (d_k * n)


def ntk_check(draws: int = 32) -> Check:
    cos, c_hat, c_t = ntk_alignment(1e-3, draws)
    series = [ntk_alignment(e, draws)[0] for e in (1e-3, 3e-2, 1e-1)]
    monotone = series[0] > series[1] > series[2]
    ok = cos > 0.95 and abs(c_hat - c_t) <= 0.1 * c_t and monotone
    return Check(
        "tangent-kernel alignment",
        bool(ok),
        cos,
        "cosine > 0.95, c_hat within 10%, monotone in eps",
        {"c_hat": c_hat, "c_target": c_t, "cosine_by_eps": series},
    )


# ----------------------------------------------------------------------------
# gradients and preservation


def gradient_check(d: int = 8, n: int = 5, heads: int = 3, h: float = 1e-5, seed: int = 0) -> Check:
    rng = np.random.default_rng([seed, 11])
    model = init_model(10, 3, d, 4, 4, n, seed=seed, seed_heads=heads)
    tokens = rng.integers(0, 10, size=(4, n))
    labels = rng.integers(0, 3, size=4)
    _, grads, _ = backward(model, tokens, labels)
    worst = 0.0
    for name, t in model.parameters().items():
        num = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            lp = backward(model, tokens, labels)[0]
            t[idx] = old - h
            lm = backward(model, tokens, labels)[0]
            t[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        err = np.abs(num - grads[name]) / np.maximum(np.abs(num) + np.abs(grads[name]), 1e-8)
        worst = max(worst, float(err.max()))
    return Check("gradient correctness", worst < 1e-4, worst, "max relative error < 1e-4")


def preservation_check(deltas=(1e-2, 1e-3), seed: int = 0) -> Check:
    rng = np.random.default_rng([seed, 5])
    d, n, d_k, d_v = 8, 6, 4, 4
    X = rng.standard_normal((n, d))
    base = init_model(4, 2, d, d_k, d_v, n, seed=seed).layer
    before = layer_forward(X, base)
    u = random_rotation(d, rng)
    zero = init_head(u[:, 0], u[:, 1], 0.1, d_k, d_v, n, rng=rng, head_id=9)
    exact = float(np.abs(layer_forward(X, base.heads + [zero]) - before).max())
    worst = 0.0
    for delta in deltas:
        sigma = preservation_scale(delta, X, d_v)
        h = init_head(u[:, 0], u[:, 1], sigma, d_k, d_v, n, rng=rng, head_id=9, w_o="delta")
        change = float(np.linalg.norm(layer_forward(X, base.heads + [h]) - before))
        worst = max(worst, change / delta)
    ok = exact == 0.0 and worst <= 1.0
    return Check("preservation", bool(ok), worst, "zero-W_O change == 0; delta variant change/delta <= 1", {"zero_init_change": exact})


# ----------------------------------------------------------------------------


def run_suites(selected=None, fault: Optional[str] = None, quick: bool = False) -> list:
    selected = list(selected or SUITES)
    unknown = [s for s in selected if s not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {SUITES}")
    checks = []
    for suite in selected:
        if suite == "gate":
            checks.append(gate_convergence(20 if quick else 100))
            checks.append(moving_target())
        elif suite == "deflation":
            checks.append(deflation_identities(10 if quick else 50, fault=1e-3 if fault == "deflation" else 0.0))
        elif suite == "lyapunov":
            checks.append(lyapunov_stationary(2 if quick else 6))
            checks.append(stopping_configuration(2 if quick else 6))
        elif suite == "ntk":
            checks.append(ntk_check())
        elif suite == "gradients":
            checks.append(gradient_check())
        elif suite == "envelope":
            checks.append(decay_envelope_check(4 if quick else 20))
        elif suite == "preservation":
            checks.append(preservation_check())
    return checks
