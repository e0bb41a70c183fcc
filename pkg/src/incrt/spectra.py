"""Residual directional-energy operator and the laws built on its spectrum.

The residual operator is the projected symmetric part of the Gram-motor
product,

    A_res = P (G M + M^T G) / 2 P,    P = I - Q Q^T,

where G = X^T X is the feature-space Gram matrix, M is a skew-symmetric
(mean) attention motor and Q holds the orthonormal directions already
captured by heads. Everything in this module is a pure function of its
inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import DimensionError, PreconditionError

PCA = "PCA"
BD = "BD"
MODES = (PCA, BD)

# Captured magnitudes at or below this (relative to the starting energy)
# are treated as exact zeros by the deflation oracle.
_ZERO_CAPTURE_RTOL = 1e-12


def _check_finite(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")


def _check_mode(mode: str) -> str:
    mode = mode.upper()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


def as_motor(A: np.ndarray) -> np.ndarray:
    """Antisymmetrize ``A`` so the result is exactly skew."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"motor must be square, got shape {A.shape}")
    return (A - A.T) / 2.0


def symmetrize(A: np.ndarray) -> np.ndarray:
    return (A + A.T) / 2.0


@dataclass
class CapturedBasis:
    """Orthonormal captured directions, one tag per column.

    Tags record which head owns a column so pruning can remove exactly
    that head's directions.
    """

    Q: np.ndarray
    tags: list = field(default_factory=list)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.ndim != 2:
            raise DimensionError("Q must be a d x K matrix")
        if len(self.tags) != self.Q.shape[1]:
            raise ValueError("one tag per column is required")
        if self.Q.shape[1] > self.Q.shape[0]:
            raise DimensionError("more captured directions than dimensions")

    @classmethod
    def empty(cls, d: int) -> "CapturedBasis":
        return cls(np.zeros((d, 0)), [])

    @property
    def d(self) -> int:
        return self.Q.shape[0]

    @property
    def K(self) -> int:
        return self.Q.shape[1]

    def projector(self) -> np.ndarray:
        return np.eye(self.d) - self.Q @ self.Q.T

    def add(self, vectors: Sequence[np.ndarray], tag) -> "CapturedBasis":
        """Return a new basis with ``vectors`` appended under ``tag``.

        Each vector is Gram-Schmidt orthogonalized (twice, for stability)
        against the existing columns before it is normalized.
        """
        cols = [self.Q[:, i] for i in range(self.K)]
        tags = list(self.tags)
        for v in vectors:
            v = np.asarray(v, dtype=float).copy()
            if v.shape != (self.d,):
                raise DimensionError("captured vector has the wrong length")
            for _ in range(2):
                for c in cols:
                    v -= (c @ v) * c
            norm = np.linalg.norm(v)
            if norm < 1e-10:
                raise ValueError("vector lies in the captured span")
            cols.append(v / norm)
            tags.append(tag)
        if len(cols) > self.d:
            raise DimensionError("captured basis would exceed d columns")
        Q = np.column_stack(cols) if cols else np.zeros((self.d, 0))
        return CapturedBasis(Q, tags)

    def remove_tag(self, tag) -> "CapturedBasis":
        keep = [i for i, t in enumerate(self.tags) if t != tag]
        Q = self.Q[:, keep]
        if Q.shape[1]:
            # re-orthonormalize; columns were orthonormal so R is ~diag(+-1)
            Qr, R = np.linalg.qr(Q)
            Q = Qr * np.sign(np.diag(R))
        return CapturedBasis(Q, [self.tags[i] for i in keep])

    def columns_for(self, tag) -> np.ndarray:
        return self.Q[:, [i for i, t in enumerate(self.tags) if t == tag]]

    def orthonormality_error(self) -> float:
        return float(np.abs(self.Q.T @ self.Q - np.eye(self.K)).max(initial=0.0))


def _basis_or_empty(Q, d: int) -> CapturedBasis:
    if Q is None:
        return CapturedBasis.empty(d)
    if isinstance(Q, CapturedBasis):
        return Q
    Q = np.asarray(Q, dtype=float)
    return CapturedBasis(Q, [None] * Q.shape[1])


def residual_from_gram(G: np.ndarray, mean_motor: np.ndarray, Q=None) -> np.ndarray:
    """Residual operator from a precomputed Gram matrix."""
    G = np.asarray(G, dtype=float)
    M = np.asarray(mean_motor, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise DimensionError(f"Gram matrix must be square, got {G.shape}")
    if M.shape != G.shape:
        raise DimensionError(f"motor shape {M.shape} does not match Gram {G.shape}")
    _check_finite("Gram", G)
    _check_finite("motor", M)
    basis = _basis_or_empty(Q, G.shape[0])
    if basis.d != G.shape[0]:
        raise DimensionError("captured basis has the wrong number of rows")
    M = as_motor(M)
    S = (G @ M + M.T @ G) / 2.0
    if basis.K:
        P = basis.projector()
        S = P @ S @ P
    return symmetrize(S)


def residual_operator(X: np.ndarray, mean_motor: np.ndarray, Q=None) -> np.ndarray:
    """Build A_res for a batch ``X`` (n tokens by d features).

    >>> X = np.array([[1.0, 1.0], [1.0, 0.0]])
    >>> residual_operator(X, np.array([[0.0, 1.0], [-1.0, 0.0]]))
    array([[-1. ,  0.5],
           [ 0.5,  1. ]])
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 2:
        raise DimensionError(f"X must be n x d with n >= 1, d >= 2; got {X.shape}")
    _check_finite("X", X)
    return residual_from_gram(X.T @ X, mean_motor, Q)


def project_operator(B: np.ndarray, Q=None) -> np.ndarray:
    """P B P for an externally supplied symmetric operator."""
    B = symmetrize(np.asarray(B, dtype=float))
    _check_finite("operator", B)
    basis = _basis_or_empty(Q, B.shape[0])
    if basis.K:
        P = basis.projector()
        B = P @ B @ P
    return symmetrize(B)


def fix_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so its largest-magnitude entry is positive."""
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def eigh_descending(A: np.ndarray):
    """Dense symmetric eigendecomposition, eigenvalues descending."""
    w, V = np.linalg.eigh(symmetrize(np.asarray(A, dtype=float)))
    return w[::-1], V[:, ::-1]


def residual_subspace(basis: CapturedBasis) -> np.ndarray:
    """Orthonormal basis (d x (d-K)) for the range of P."""
    d, K = basis.d, basis.K
    if K == 0:
        return np.eye(d)
    if K == d:
        return np.zeros((d, 0))
    # complete Q to a full orthonormal basis and keep the trailing columns
    full, _ = np.linalg.qr(np.column_stack([basis.Q, np.eye(d)]))
    return full[:, K:d]


@dataclass(frozen=True)
class SpectralSummary:
    lambda_max: float
    lambda_2: float
    lambda_rm1: float
    lambda_min: float
    v1: np.ndarray
    vr: np.ndarray
    delta_plus: float
    delta_minus: float
    gamma_res: float
    eigenvalues: np.ndarray  # descending, restricted to range(P)

    @property
    def dim(self) -> int:
        return len(self.eigenvalues)


def spectral_summary(A: np.ndarray, Q=None) -> SpectralSummary:
    """Eigen-summary of ``A`` restricted to the residual subspace.

    Eigenpairs living in the captured span are excluded. Degenerate
    spectra give zero gaps rather than an error.
    """
    A = symmetrize(np.asarray(A, dtype=float))
    d = A.shape[0]
    basis = _basis_or_empty(Q, d)
    B = residual_subspace(basis)
    gamma = float(np.linalg.norm(A))
    r = B.shape[1]
    if r == 0:
        z = np.zeros(d)
        return SpectralSummary(0.0, 0.0, 0.0, 0.0, z, z, 0.0, 0.0, gamma, np.zeros(0))
    w, V = eigh_descending(B.T @ A @ B)
    v1 = fix_sign(B @ V[:, 0])
    vr = fix_sign(B @ V[:, -1])
    v1 /= np.linalg.norm(v1)
    vr /= np.linalg.norm(vr)
    lam2 = w[1] if r > 1 else w[0]
    lamrm1 = w[-2] if r > 1 else w[-1]
    return SpectralSummary(
        lambda_max=float(w[0]),
        lambda_2=float(lam2),
        lambda_rm1=float(lamrm1),
        lambda_min=float(w[-1]),
        v1=v1,
        vr=vr,
        delta_plus=float(max(w[0] - lam2, 0.0)),
        delta_minus=float(max(lamrm1 - w[-1], 0.0)),
        gamma_res=gamma,
        eigenvalues=w,
    )


class DeflationResult(NamedTuple):
    k_oracle: int
    captured_energies: list
    gamma_trace: list
    directions: list


def deflation_oracle(A0: np.ndarray, theta_w: float, mode: str = BD) -> DeflationResult:
    """Greedy exact deflation until the residual energy drops to ``theta_w``.

    Each step removes the top eigenpair (PCA) or the top and bottom
    eigenpairs (BD) of the current residual by projection. In BD mode a
    bottom eigenvalue that is exactly zero is not captured: it carries no
    energy and would only consume a dimension.
    """
    if theta_w <= 0:
        raise PreconditionError("theta_w must be positive")
    mode = _check_mode(mode)
    A0 = symmetrize(np.asarray(A0, dtype=float))
    _check_finite("A0", A0)
    d = A0.shape[0]
    basis = CapturedBasis.empty(d)
    A = A0.copy()
    gamma = float(np.linalg.norm(A))
    atol = _ZERO_CAPTURE_RTOL * max(gamma, 1.0)
    trace, captured, directions = [gamma], [], []
    for _ in range(d):
        if gamma <= theta_w:
            break
        s = spectral_summary(A, basis)
        if s.dim == 0:
            break
        # the largest-magnitude eigenvalue may be negative; PCA follows lambda_max
        take = [(s.lambda_max, s.v1)]
        if mode == BD and s.dim > 1 and abs(s.lambda_min) > atol:
            take.append((s.lambda_min, s.vr))
        basis = basis.add([v for _, v in take], tag=len(captured))
        A = project_operator(A0, basis)
        gamma = float(np.linalg.norm(A))
        captured.append(tuple(lam for lam, _ in take))
        directions.append(tuple(v for _, v in take))
        trace.append(gamma)
    return DeflationResult(len(captured), captured, trace, directions)


@dataclass(frozen=True)
class ComplexityReport:
    gamma0: float
    delta0: float
    kappa: float
    k_star_pred: int
    rho: float
    k_oracle: int
    theta_w: float


def decay_rate(kappa: float) -> float:
    if kappa < 1:
        raise PreconditionError("kappa must be >= 1")
    return 1.0 - 1.0 / kappa**2


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def predict_head_count(kappa: float, gamma0: float, theta_w: float) -> int:
    """Head count predicted by the sizing law, round(kappa^2 ln(gamma0/theta_w)).

    >>> predict_head_count(11.91, 2.5, 1.0)
    130
    """
    if gamma0 <= 0 or theta_w <= 0:
        raise PreconditionError("gamma0 and theta_w must be positive")
    if kappa < 1:
        raise PreconditionError("kappa must be >= 1")
    if gamma0 <= theta_w:
        return 0
    return _round_half_up(kappa**2 * math.log(gamma0 / theta_w))


def complexity_index(A0: np.ndarray, theta_w: float, mode: str = BD) -> ComplexityReport:
    """Directional complexity index from exact oracle deflation.

    delta0 is the smallest nonzero eigenvalue magnitude the oracle
    captures, i.e. the least energy any single head takes.
    """
    A0 = np.asarray(A0, dtype=float)
    gamma0 = float(np.linalg.norm(symmetrize(A0)))
    if gamma0 == 0.0:
        raise PreconditionError("zero-energy operator has no complexity index")
    res = deflation_oracle(A0, theta_w, mode)
    if res.k_oracle == 0:
        # already sufficient: nothing is captured, so no head sets a floor
        return ComplexityReport(gamma0, gamma0, 1.0, 0, 0.0, 0, theta_w)
    atol = _ZERO_CAPTURE_RTOL * max(gamma0, 1.0)
    mags = [abs(lam) for step in res.captured_energies for lam in step if abs(lam) > atol]
    delta0 = min(mags)
    kappa = max(gamma0 / delta0, 1.0)
    return ComplexityReport(
        gamma0=gamma0,
        delta0=delta0,
        kappa=kappa,
        k_star_pred=predict_head_count(kappa, gamma0, theta_w),
        rho=decay_rate(kappa),
        k_oracle=res.k_oracle,
        theta_w=theta_w,
    )


def decay_envelope(gamma0: float, kappa: float, k: int) -> float:
    """Geometric upper envelope gamma0 * (1 - 1/kappa^2)^k."""
    if k < 0:
        raise PreconditionError("k must be non-negative")
    return gamma0 * decay_rate(kappa) ** k


def pac_sample_bound(
    epsilon: float,
    delta: float,
    C: float,
    motor_norm: float,
    d_k: int,
    k_star: int,
    t_conv: int,
) -> float:
    """Sample count for an (theta_w + epsilon)-sufficient architecture.

    Sum of a matrix-Bernstein estimation term and K* gate-convergence
    windows. Returns 0 when nothing needs to grow.
    """
    if k_star == 0:
        return 0.0
    if min(epsilon, C, motor_norm, d_k, k_star, t_conv) <= 0:
        raise PreconditionError("all arguments must be positive")
    if not 0.0 < delta < 1.0:
        raise PreconditionError("delta must lie in (0, 1)")
    estimation = C * motor_norm**2 * d_k * math.log(d_k * k_star / delta) / epsilon**2
    return estimation * k_star + k_star * t_conv
