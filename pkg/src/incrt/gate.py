"""Bidirectional PCA+MCA gate.

A pair of orthogonal unit probes tracks the dominant (Oja) and minor
(MCA EXIN) eigenvectors of a symmetric operator. The balance gamma_star
weighs suppression along the minor probe against amplification along
the dominant one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .exceptions import (
    ConvergenceError,
    DegenerateSpectrumError,
    PreconditionError,
    StepSizeError,
)
from .spectra import SpectralSummary, spectral_summary


@dataclass(frozen=True)
class GateState:
    u_plus: np.ndarray
    u_minus: np.ndarray
    eta_plus: float = 0.05
    eta_minus: float = 0.05
    step_count: int = 0
    gamma_star: float = 0.5
    # tau > 0 switches on the eta0 / (1 + t/tau) schedule
    tau: Optional[float] = None
    reseed_count: int = 0

    @property
    def d(self) -> int:
        return self.u_plus.shape[0]

    def rates(self):
        if self.tau:
            f = 1.0 / (1.0 + self.step_count / self.tau)
            return self.eta_plus * f, self.eta_minus * f
        return self.eta_plus, self.eta_minus


def _normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < 1e-300:
        raise StepSizeError("probe update produced a zero or non-finite vector")
    return v / n


def _seeded_unit(d: int, counter: int, against=()) -> np.ndarray:
    """Deterministic pseudo-random unit vector orthogonal to ``against``."""
    rng = np.random.default_rng([0x6A7E, counter])
    for _ in range(100):
        v = rng.standard_normal(d)
        for _ in range(2):
            for a in against:
                v = v - (a @ v) * a
        n = np.linalg.norm(v)
        if n > 1e-8:
            return v / n
    raise StepSizeError("could not draw a probe outside the excluded span")


def init_gate(d: int, seed: int = 0, eta_plus: float = 0.05, eta_minus: float = 0.05, **kw) -> GateState:
    """Random normalized, mutually orthogonal probe pair."""
    rng = np.random.default_rng(seed)
    u_plus = _normalize(rng.standard_normal(d))
    u_minus = rng.standard_normal(d)
    u_minus = _normalize(u_minus - (u_minus @ u_plus) * u_plus)
    return GateState(u_plus, u_minus, eta_plus, eta_minus, **kw)


def rayleigh(u: np.ndarray, A: np.ndarray) -> float:
    return float(u @ A @ u / (u @ u))


def oja_step(gate: GateState, A: np.ndarray) -> GateState:
    """One Oja ascent step on the Rayleigh quotient, followed by normalization."""
    eta, _ = gate.rates()
    u = gate.u_plus
    Au = A @ u
    u_new = _normalize(u + eta * (Au - rayleigh(u, A) * u))
    return replace(gate, u_plus=u_new, step_count=gate.step_count + 1)


def mca_exin_step(gate: GateState, A: np.ndarray, shift: bool = True) -> GateState:
    """One MCA EXIN descent step on the Rayleigh quotient.

    The update is ``u - eta * y / |u|^2 * (A u - y / |u|^2 u)`` with
    ``y = u^T A u``. That prefactor only descends while ``y > 0``; on an
    indefinite operator it would stall on the cone ``y = 0``. With
    ``shift`` the rule runs on ``A + s I`` for ``s = 2 |A|_F``, which has the
    same eigenvectors and a prefactor bounded below by ``eta |A|_F``. The
    bracketed direction is unchanged by the shift; only the prefactor
    gains ``s``.
    """
    _, eta = gate.rates()
    u = gate.u_minus
    nu2 = u @ u
    Au = A @ u
    y = float(u @ Au)
    s = 2.0 * float(np.linalg.norm(A)) if shift else 0.0
    u_new = _normalize(u - (eta * (y + s * nu2) / nu2) * (Au - (y / nu2) * u))
    return replace(gate, u_minus=u_new)


def orthogonalize(gate: GateState) -> GateState:
    """Project the dominant probe out of the minor one.

    If the two probes are parallel the minor probe is re-seeded from a
    counter-indexed generator, so runs stay reproducible.
    """
    up, um = gate.u_plus, gate.u_minus
    v = um - (um @ up) * up
    n = np.linalg.norm(v)
    if n < 1e-10:
        v = _seeded_unit(gate.d, gate.reseed_count, against=(up,))
        return replace(gate, u_minus=v, reseed_count=gate.reseed_count + 1)
    return replace(gate, u_minus=v / n)


def gate_step(gate: GateState, A: np.ndarray, shift: bool = True) -> GateState:
    """Oja step, MCA EXIN step, then re-orthogonalization."""
    return orthogonalize(mca_exin_step(oja_step(gate, A), A, shift=shift))


def balance_gamma(delta_plus: float, delta_minus: float) -> float:
    if delta_plus < 0 or delta_minus < 0:
        raise PreconditionError("spectral gaps must be non-negative")
    total = delta_plus + delta_minus
    if total <= 0:
        raise DegenerateSpectrumError("both spectral gaps are zero")
    return delta_plus / total


def gate_operator(gate: GateState) -> np.ndarray:
    up, um = gate.u_plus, gate.u_minus
    return np.outer(up, up) - gate.gamma_star * np.outer(um, um)


def gate_deviation(gate: GateState, summary: SpectralSummary) -> float:
    """Sign-invariant distance of the probes from the current eigenvectors.

    (1 - <u+, v1>^2) + gamma* (1 - <u-, vr>^2), bounded by 1 + gamma*.
    """
    a = float(gate.u_plus @ summary.v1) ** 2
    b = float(gate.u_minus @ summary.vr) ** 2
    dev = (1.0 - min(a, 1.0)) + gate.gamma_star * (1.0 - min(b, 1.0))
    return max(dev, 0.0)


def reseed(gate: GateState, avoid=None) -> GateState:
    """Fresh deterministic probes, optionally orthogonal to the columns of ``avoid``."""
    against = [] if avoid is None else [avoid[:, i] for i in range(avoid.shape[1])]
    c = gate.reseed_count
    up = _seeded_unit(gate.d, c, against)
    um = _seeded_unit(gate.d, c + 1, against + [up])
    return replace(gate, u_plus=up, u_minus=um, reseed_count=c + 2)


def run_to_convergence(
    gate: GateState,
    A: np.ndarray,
    tol: float = 1e-6,
    max_steps: int = 10_000,
    shift: bool = True,
):
    """Iterate the gate on a fixed operator until its deviation is below ``tol``.

    Returns ``(gate, steps_used)``. The step count is an empirical gate
    convergence time for that operator.
    """
    s = spectral_summary(A)
    if s.delta_plus <= 0 or s.delta_minus <= 0:
        raise PreconditionError(
            f"gate convergence needs both gaps positive (got {s.delta_plus}, {s.delta_minus})"
        )
    gate = replace(gate, gamma_star=balance_gamma(s.delta_plus, s.delta_minus))
    for steps in range(max_steps + 1):
        dev = gate_deviation(gate, s)
        if dev < tol:
            return gate, steps
        if steps == max_steps:
            break
        gate = gate_step(gate, A, shift=shift)
    raise ConvergenceError(
        f"gate deviation {dev:.3e} above {tol:.1e} after {max_steps} steps", dev, max_steps
    )
