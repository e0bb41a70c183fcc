"""Growth, pruning and stopping around the residual operator.

One controller step runs, in order: residual operator, gate update,
balance, growth check, prune checks, training callback, stop check.
Two contexts feed it. ``OperatorContext`` reads an externally supplied
symmetric task operator B(t) and uses A_res = P B P; ``ModelContext``
builds A_res from an attention model and a token batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .attention import (
    LayerState,
    ModelState,
    batch_gram,
    head_energy,
    init_head,
    preservation_scale,
)
from .exceptions import PreconditionError, SaturationError
from .gate import balance_gamma, gate_deviation, gate_step, orthogonalize, reseed
from .spectra import (
    BD,
    MODES,
    SpectralSummary,
    project_operator,
    residual_from_gram,
    spectral_summary,
)


@dataclass
class ControllerConfig:
    theta_w: float
    phi_g: float
    phi_w: float = 0.0
    t_conv: int = 50
    t_prune: int = 50
    # forward-change budget for a birth; None leaves sigma_new untouched
    delta_preserve: Optional[float] = None
    mode: str = BD
    deflate_minor: bool = True
    # None picks theta_w / gamma_ref, which keeps every head's energy <= theta_w
    sigma_new: Optional[float] = None
    gate_tol: float = 1e-6
    eta_plus: float = 0.2
    eta_minus: float = 0.2
    gate_steps: int = 1
    freeze_on_stop: bool = True
    w_o_init: str = "zero"
    max_heads: Optional[int] = None

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not (0.0 < self.phi_g < self.theta_w):
            raise PreconditionError(
                f"need 0 < phi_g < theta_w (got phi_g={self.phi_g}, theta_w={self.theta_w})"
            )
        if self.t_conv < 1 or self.t_prune < 1:
            raise PreconditionError("t_conv and t_prune must be >= 1")
        if self.gate_steps < 1:
            raise PreconditionError("gate_steps must be >= 1")

    @classmethod
    def from_reference(cls, gamma_ref: float, theta_ratio: float = 0.4, phi_ratio: float = 0.05, **kw):
        """Thresholds as fractions of the initial residual energy."""
        theta = theta_ratio * gamma_ref
        return cls(theta_w=theta, phi_g=phi_ratio * theta, **kw)


@dataclass
class Event:
    step: int
    kind: str  # growth | prune | stop
    head_id: Optional[int]
    lambda_max: float
    lambda_min: float
    gamma_res: float
    W_t: float
    head_count: int
    u_plus: Optional[list] = None
    u_minus: Optional[list] = None
    gamma_h: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class LyapunovSample:
    step: int
    W_t: float
    gamma_res: float
    deviation: float
    head_count: int


@dataclass
class ControllerState:
    gamma_ref: Optional[float] = None
    last_growth_step: Optional[int] = None
    low_energy_streak: dict = field(default_factory=dict)
    stopped: bool = False
    events: list = field(default_factory=list)
    lyapunov: list = field(default_factory=list)
    next_head_id: int = 0

    def growth_events(self):
        return [e for e in self.events if e.kind == "growth"]

    def prune_events(self):
        return [e for e in self.events if e.kind == "prune"]


@dataclass
class VirtualHead:
    """Bookkeeping for a head grown against a task operator (no tensors)."""

    head_id: int
    birth_step: int
    u_plus: np.ndarray
    u_minus: np.ndarray
    sigma_new: float


@dataclass
class StepReport:
    summary: SpectralSummary
    W_t: float
    deviation: float
    grew: Optional[int] = None
    pruned: list = field(default_factory=list)
    stopped: bool = False
    train: Optional[dict] = None


# ----------------------------------------------------------------------------
# predicates


def growth_trigger(summary: SpectralSummary, state: ControllerState, cfg: ControllerConfig, step: int) -> bool:
    if summary.lambda_max <= cfg.theta_w:
        return False
    if cfg.mode == BD and not summary.lambda_min < cfg.phi_w:
        return False
    if state.last_growth_step is not None and step - state.last_growth_step < cfg.t_conv:
        return False
    return True


def prune_trigger(head_id: int, gamma_h: float, state: ControllerState, cfg: ControllerConfig) -> bool:
    """Advance the head's low-energy streak and report whether it is due for pruning."""
    if gamma_h < cfg.phi_g:
        state.low_energy_streak[head_id] = state.low_energy_streak.get(head_id, 0) + 1
    else:
        state.low_energy_streak[head_id] = 0
    return state.low_energy_streak[head_id] >= cfg.t_prune


def stop_check(summary: SpectralSummary, head_energies, cfg: ControllerConfig) -> bool:
    energies = list(head_energies.values()) if isinstance(head_energies, dict) else list(head_energies)
    return summary.lambda_max <= cfg.theta_w and all(g >= cfg.phi_g for g in energies)


def weighted_deviation(gate, summary: SpectralSummary) -> float:
    """Gate deviation in energy units: scaled by the residual's spectral radius."""
    radius = max(abs(summary.lambda_max), abs(summary.lambda_min))
    return gate_deviation(gate, summary) * radius


def lyapunov(summaries, gates, cfg: Optional[ControllerConfig] = None) -> float:
    """W_t = sum of residual energies plus energy-weighted gate deviations.

    Accepts one summary/gate or parallel sequences of them (one per layer).
    """
    if isinstance(summaries, SpectralSummary):
        summaries, gates = [summaries], [gates]
    total = 0.0
    for s, g in zip(summaries, gates):
        total += s.gamma_res
        if g is not None and s.dim:
            total += weighted_deviation(g, s)
    return total


# ----------------------------------------------------------------------------
# contexts


class OperatorContext:
    """Controller input backed by an explicit symmetric task operator."""

    def __init__(self, layer: LayerState, operator: Optional[np.ndarray] = None):
        self.layer = layer
        self.operator = operator

    def set_operator(self, B: np.ndarray) -> None:
        self.operator = np.asarray(B, dtype=float)

    def residual(self) -> np.ndarray:
        return project_operator(self.operator, self.layer.basis)

    def head_energy(self, h: VirtualHead) -> float:
        """Signed energy of the head's template under the current operator.

        Projection of sym(B M_h) onto the head's birth template: positive
        while the operator still drives the head's orientation, negative
        once it is reversed, near zero once the directions go quiet.
        """
        B = self.operator
        return h.sigma_new * float(h.u_plus @ B @ h.u_plus - h.u_minus @ B @ h.u_minus) / math.sqrt(2.0)

    def make_head(self, u_plus, u_minus, sigma, head_id, step) -> VirtualHead:
        return VirtualHead(head_id, step, u_plus.copy(), u_minus.copy(), sigma)

    def preserve_reference(self):
        return None

    def on_birth(self, h) -> None:
        pass

    def on_prune(self, h) -> None:
        pass


class ModelContext:
    """Controller input backed by an attention model and the current token batch."""

    def __init__(self, model: ModelState, optimizer=None, seed: int = 0):
        self.model = model
        self.optimizer = optimizer
        self.tokens = None
        self._gram = None
        self.rng = np.random.default_rng([seed, 0xB127])

    @property
    def layer(self) -> LayerState:
        return self.model.layer

    def set_batch(self, tokens) -> None:
        self.tokens = np.asarray(tokens)
        self._gram = None

    def gram(self) -> np.ndarray:
        if self._gram is None:
            self._gram = batch_gram(self.model, self.tokens)
        return self._gram

    def invalidate(self) -> None:
        self._gram = None

    def residual(self) -> np.ndarray:
        return residual_from_gram(self.gram(), self.layer.mean_motor(), self.layer.basis)

    def head_energy(self, h) -> float:
        return head_energy(None, h, gram=self.gram())

    def make_head(self, u_plus, u_minus, sigma, head_id, step):
        meta = self.model.meta
        return init_head(
            u_plus,
            u_minus,
            sigma,
            meta["d_k"],
            meta["d_v"],
            meta["n"],
            rng=self.rng,
            head_id=head_id,
            birth_step=step,
            w_o=meta.get("w_o_init", "zero"),
            value_variance=meta.get("value_variance"),
        )

    def preserve_reference(self):
        # a typical single-sequence layer input
        return self.model.embedding[self.tokens[0]]

    def on_birth(self, h) -> None:
        if self.optimizer is not None:
            for name, t in h.tensors().items():
                self.optimizer.register(f"head{h.head_id}.{name}", t)

    def on_prune(self, h) -> None:
        if self.optimizer is not None and hasattr(h, "tensors"):
            for name in h.tensors():
                self.optimizer.discard(f"head{h.head_id}.{name}")


# ----------------------------------------------------------------------------
# structural updates


def _reseed_in_residual(layer: LayerState) -> None:
    Q = layer.basis.Q if layer.basis.K else None
    if layer.basis.d - layer.basis.K >= 2:
        layer.gate = reseed(layer.gate, avoid=Q)


def _project_probes(layer: LayerState) -> None:
    """Keep the probes inside the residual subspace."""
    basis = layer.basis
    if basis.K == 0 or basis.d - basis.K < 2:
        return
    g = layer.gate
    P = basis.projector()
    up, um = P @ g.u_plus, P @ g.u_minus
    if np.linalg.norm(up) < 1e-8 or np.linalg.norm(um) < 1e-8:
        _reseed_in_residual(layer)
        return
    g = replace(g, u_plus=up / np.linalg.norm(up), u_minus=um / np.linalg.norm(um))
    layer.gate = orthogonalize(g)


def birth_sigma(cfg: ControllerConfig, state: ControllerState, X=None, d_v: Optional[int] = None) -> float:
    sigma = cfg.sigma_new
    if sigma is None:
        sigma = cfg.theta_w / state.gamma_ref if state.gamma_ref else 0.1
    if cfg.delta_preserve is not None and X is not None and d_v is not None:
        sigma = min(sigma, preservation_scale(cfg.delta_preserve, X, d_v))
    return sigma


def apply_growth(
    layer: LayerState,
    cfg: ControllerConfig,
    state: ControllerState,
    step: int,
    ctx=None,
    summary: Optional[SpectralSummary] = None,
    W_t: float = float("nan"),
):
    """Birth a head on the current probes and deflate its directions.

    Returns the new head. The captured basis gains u+ and, when
    ``deflate_minor``, u-; probes are re-seeded inside the new residual
    subspace. Refuses with SaturationError when no room is left.
    """
    ctx = ctx or OperatorContext(layer)
    add_minor = cfg.deflate_minor and cfg.mode == BD
    need = 2 if add_minor else 1
    if layer.basis.K + need > layer.basis.d:
        raise SaturationError(f"captured basis has {layer.basis.K} of {layer.basis.d} columns")
    g = layer.gate
    head_id = state.next_head_id
    X = ctx.preserve_reference()
    d_v = getattr(ctx, "model", None) and ctx.model.meta.get("d_v")
    sigma = birth_sigma(cfg, state, X, d_v)
    head = ctx.make_head(g.u_plus, g.u_minus, sigma, head_id, step)
    vectors = [g.u_plus, g.u_minus] if add_minor else [g.u_plus]
    layer.basis = layer.basis.add(vectors, tag=head_id)
    layer.heads.append(head)
    ctx.on_birth(head)
    state.next_head_id += 1
    state.last_growth_step = step
    state.low_energy_streak[head_id] = 0
    if summary is not None:
        state.events.append(
            Event(
                step,
                "growth",
                head_id,
                summary.lambda_max,
                summary.lambda_min,
                summary.gamma_res,
                W_t,
                len(layer.heads),
                u_plus=g.u_plus.tolist(),
                u_minus=g.u_minus.tolist(),
            )
        )
    _reseed_in_residual(layer)
    return head


def apply_prune(
    layer: LayerState,
    head_id: int,
    state: ControllerState,
    step: int,
    ctx=None,
    summary: Optional[SpectralSummary] = None,
    W_t: float = float("nan"),
    gamma_h: Optional[float] = None,
):
    """Remove a head and exactly the captured columns tagged with its id."""
    idx = [i for i, h in enumerate(layer.heads) if h.head_id == head_id]
    if not idx:
        raise KeyError(f"no active head with id {head_id}")
    head = layer.heads.pop(idx[0])
    layer.basis = layer.basis.remove_tag(head_id)
    state.low_energy_streak.pop(head_id, None)
    if ctx is not None:
        ctx.on_prune(head)
    if summary is not None:
        state.events.append(
            Event(
                step,
                "prune",
                head_id,
                summary.lambda_max,
                summary.lambda_min,
                summary.gamma_res,
                W_t,
                len(layer.heads),
                gamma_h=gamma_h,
            )
        )
    _reseed_in_residual(layer)
    return head


# ----------------------------------------------------------------------------
# one iteration


def controller_step(
    ctx,
    cfg: ControllerConfig,
    state: ControllerState,
    step: int,
    train: Optional[Callable[[], dict]] = None,
) -> StepReport:
    """One pass: residual, gate, balance, growth, prunes, training, stop check."""
    layer = ctx.layer
    A = ctx.residual()
    s = spectral_summary(A, layer.basis)
    if state.gamma_ref is None:
        state.gamma_ref = s.gamma_res if s.gamma_res > 0 else 1.0

    structural = not (state.stopped and cfg.freeze_on_stop)
    report_grew, report_pruned = None, []

    if structural and s.dim >= 2:
        # the gate sees a fixed-scale operator so its step sizes are unitless
        A_gate = A / state.gamma_ref
        g = layer.gate
        if g.eta_plus != cfg.eta_plus or g.eta_minus != cfg.eta_minus:
            g = replace(g, eta_plus=cfg.eta_plus, eta_minus=cfg.eta_minus)
        for _ in range(cfg.gate_steps):
            g = gate_step(g, A_gate)
        layer.gate = g
        _project_probes(layer)
        if s.delta_plus + s.delta_minus > 0:
            layer.gate = replace(layer.gate, gamma_star=balance_gamma(s.delta_plus, s.delta_minus))

    dev = weighted_deviation(layer.gate, s) if s.dim else 0.0
    W_t = s.gamma_res + dev
    state.lyapunov.append(LyapunovSample(step, W_t, s.gamma_res, dev, len(layer.heads)))

    if structural:
        room = layer.basis.d - layer.basis.K >= (2 if cfg.deflate_minor and cfg.mode == BD else 1)
        capped = cfg.max_heads is not None and len(layer.heads) >= cfg.max_heads
        converged = s.dim >= 2 and gate_deviation(layer.gate, s) < cfg.gate_tol
        if room and not capped and converged and growth_trigger(s, state, cfg, step):
            report_grew = apply_growth(layer, cfg, state, step, ctx, s, W_t).head_id
            if hasattr(ctx, "invalidate"):
                ctx.invalidate()

        for h in list(layer.heads):
            if h.head_id == report_grew:
                continue
            g_h = ctx.head_energy(h)
            if prune_trigger(h.head_id, g_h, state, cfg):
                apply_prune(layer, h.head_id, state, step, ctx, s, W_t, g_h)
                report_pruned.append(h.head_id)

    train_out = train() if train is not None else None
    if train_out is not None and hasattr(ctx, "invalidate"):
        ctx.invalidate()

    if structural:
        if report_grew is not None or report_pruned or train_out is not None:
            s_now = spectral_summary(ctx.residual(), layer.basis)
        else:
            s_now = s
        energies = {h.head_id: ctx.head_energy(h) for h in layer.heads}
        now_stopped = stop_check(s_now, energies, cfg)
        if now_stopped and not state.stopped:
            W_now = lyapunov(s_now, layer.gate)
            state.events.append(
                Event(step, "stop", None, s_now.lambda_max, s_now.lambda_min, s_now.gamma_res, W_now, len(layer.heads))
            )
        state.stopped = now_stopped

    return StepReport(s, W_t, dev, report_grew, report_pruned, state.stopped, train_out)


def write_events(path, events) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(e.to_json() + "\n")


def read_events(path) -> list:
    with open(path) as fh:
        return [Event(**json.loads(line)) for line in fh if line.strip()]
