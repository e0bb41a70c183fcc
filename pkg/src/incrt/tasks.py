"""Synthetic workloads: a phase-switching task operator and planted-motif sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import PreconditionError
from .spectra import CapturedBasis


@dataclass
class Phase:
    active_axes: tuple
    energies: tuple
    start_epoch: int


@dataclass
class OperatorTaskSpec:
    d: int
    phases: list
    noise_scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.phases = [p if isinstance(p, Phase) else Phase(tuple(p["active_axes"]), tuple(p["energies"]), int(p["start_epoch"])) for p in self.phases]
        if not self.phases:
            raise ValueError("at least one phase is required")
        starts = [p.start_epoch for p in self.phases]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError("phases must be chronologically ordered")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        for p in self.phases:
            if len(p.active_axes) != len(p.energies):
                raise ValueError("one energy per active axis")
            if any(not 0 <= a < self.d for a in p.active_axes):
                raise ValueError("axis outside [0, d)")
            if any(e < 0 for e in p.energies):
                raise ValueError("energies must be non-negative")
            if any(mirror_axis(a, self.d) in p.active_axes for a in p.active_axes):
                raise ValueError("an active axis collides with another axis's mirror")

    def phase_index(self, epoch: int) -> int:
        idx = None
        for i, p in enumerate(self.phases):
            if epoch >= p.start_epoch:
                idx = i
        if idx is None:
            raise PreconditionError(f"epoch {epoch} precedes the first phase")
        return idx

    def phase_at(self, epoch: int) -> Phase:
        return self.phases[self.phase_index(epoch)]


def mirror_axis(a: int, d: int) -> int:
    """Axis that carries the negative copy of axis ``a``'s energy."""
    return (a + d // 2) % d


def _phase_noise(spec: OperatorTaskSpec, idx: int) -> np.ndarray:
    # fixed within a phase so each phase is stationary; trace removed so
    # the operator stays trace-free
    rng = np.random.default_rng([spec.seed, idx])
    N = rng.standard_normal((spec.d, spec.d))
    N = (N + N.T) / 2.0
    N -= np.trace(N) / spec.d * np.eye(spec.d)
    return spec.noise_scale * N


def operator_task(spec: OperatorTaskSpec, epoch: int) -> np.ndarray:
    """Symmetric trace-free task operator for ``epoch``.

    Each active axis a carries +energy and its mirror axis carries -energy,
    plus a fixed small symmetric perturbation per phase.
    """
    idx = spec.phase_index(epoch)
    p = spec.phases[idx]
    B = np.zeros((spec.d, spec.d))
    for a, e in zip(p.active_axes, p.energies):
        B[a, a] += e
        m = mirror_axis(a, spec.d)
        B[m, m] -= e
    if spec.noise_scale:
        B += _phase_noise(spec, idx)
    return (B + B.T) / 2.0


def random_rotation(d: int, rng) -> np.ndarray:
    Z = rng.standard_normal((d, d))
    Qm, R = np.linalg.qr(Z)
    return Qm * np.sign(np.diag(R))


def planted_operator(d: int, energies, seed=0, bulk: float = 0.0) -> np.ndarray:
    """Randomly rotated trace-free operator with +-energy pairs and a small bulk.

    ``energies`` gives the magnitudes of the planted pairs; remaining
    eigenvalues are uniform in [-bulk, bulk] then shifted so the trace is 0.
    """
    energies = np.asarray(energies, dtype=float)
    k = len(energies)
    if 2 * k > d:
        raise PreconditionError("too many planted pairs for the dimension")
    rng = np.random.default_rng(seed)
    rest = rng.uniform(-bulk, bulk, size=d - 2 * k)
    if rest.size:
        rest -= rest.mean()
    w = np.concatenate([energies, -energies, rest])
    U = random_rotation(d, rng)
    B = (U * w) @ U.T
    return (B + B.T) / 2.0


@dataclass
class SequenceTaskSpec:
    vocab_size: int = 64
    n_tokens: int = 64
    n_classes: int = 4
    # per-class ordered token pairs (a_c, b_c); default: class c uses (2c+1, 2c+2)
    motifs: Optional[list] = None
    motif_count: int = 2
    max_gap: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("at least two classes are required")
        if self.motifs is None:
            self.motifs = [(2 * c + 1, 2 * c + 2) for c in range(self.n_classes)]
        self.motifs = [tuple(int(t) for t in m) for m in self.motifs]
        if len(self.motifs) != self.n_classes:
            raise ValueError("one motif per class")
        for a, b in self.motifs:
            if a == b:
                raise ValueError("motif tokens must differ")
            if not (0 <= a < self.vocab_size and 0 <= b < self.vocab_size):
                raise ValueError("motif token outside the vocabulary")
        if 2 * self.motif_count > self.n_tokens:
            raise PreconditionError("motifs do not fit in the sequence")
        if not self.background_tokens().size:
            raise ValueError("no background tokens left")

    def motif_tokens(self) -> set:
        return {t for m in self.motifs for t in m}

    def background_tokens(self) -> np.ndarray:
        used = self.motif_tokens()
        return np.array([t for t in range(self.vocab_size) if t not in used])


@dataclass
class LabelledBatch:
    tokens: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def _place_motifs(row, a, b, count, gap_max, rng):
    n = len(row)
    free = np.ones(n, dtype=bool)
    placed = 0
    for _ in range(1000):
        if placed == count:
            break
        gap = int(rng.integers(1, gap_max + 1))
        i = int(rng.integers(0, n - gap)) if n - gap > 0 else 0
        j = min(i + gap, n - 1)
        if i == j or not (free[i] and free[j]):
            continue
        row[i], row[j] = a, b
        free[i] = free[j] = False
        placed += 1
    if placed < count:
        # dense fallback: scan for any free ordered pair
        slots = np.flatnonzero(free)
        while placed < count and len(slots) >= 2:
            row[slots[0]], row[slots[1]] = a, b
            slots = slots[2:]
            placed += 1
    return row


def sequence_task(spec: SequenceTaskSpec, batch_size: int, rng_state=None) -> LabelledBatch:
    """Draw a batch: uniform background tokens with each class's ordered pair planted.

    ``rng_state`` is anything ``np.random.default_rng`` accepts; the same
    state always produces the same batch.
    """
    rng = np.random.default_rng(spec.seed if rng_state is None else rng_state)
    bg = spec.background_tokens()
    labels = rng.integers(0, spec.n_classes, size=batch_size)
    tokens = bg[rng.integers(0, len(bg), size=(batch_size, spec.n_tokens))]
    gap_max = max(1, min(spec.max_gap, spec.n_tokens - 1))
    for r in range(batch_size):
        a, b = spec.motifs[labels[r]]
        _place_motifs(tokens[r], a, b, spec.motif_count, gap_max, rng)
    return LabelledBatch(tokens.astype(np.int64), labels.astype(np.int64))


def bigram_classifier(spec: SequenceTaskSpec, tokens: np.ndarray) -> np.ndarray:
    """Brute-force reference: predict the class whose ordered pair occurs most often."""
    tokens = np.atleast_2d(tokens)
    preds = np.zeros(len(tokens), dtype=np.int64)
    for r, row in enumerate(tokens):
        scores = []
        for a, b in spec.motifs:
            pa = np.flatnonzero(row == a)
            pb = np.flatnonzero(row == b)
            scores.append(sum(int((pb > i).any()) for i in pa))
        preds[r] = int(np.argmax(scores))
    return preds


def class_direction_check(spec, basis, phase: Optional[int] = None, mirrors: bool = True) -> np.ndarray:
    """Alignment of each captured direction with the task's active axes.

    ``spec`` is an OperatorTaskSpec (axes of ``phase``, or of every phase
    when None; mirror axes included unless ``mirrors`` is False) or a
    plain sequence of axis indices. Returns max_i |<q, e_i>| per column q.
    """
    Q = basis.Q if isinstance(basis, CapturedBasis) else np.asarray(basis, dtype=float)
    if Q.ndim != 2 or Q.shape[1] == 0:
        raise PreconditionError("no captured directions to check")
    if isinstance(spec, OperatorTaskSpec):
        phases = spec.phases if phase is None else [spec.phases[phase]]
        axes = {a for p in phases for a in p.active_axes}
        if mirrors:
            axes |= {mirror_axis(a, spec.d) for a in axes}
        axes = sorted(axes)
    else:
        axes = list(spec)
    return np.abs(Q[axes, :]).max(axis=0)
