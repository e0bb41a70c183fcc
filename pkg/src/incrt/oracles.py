"""Brute-force reference computations.

These deliberately avoid LAPACK so they can cross-check the fast paths:
explicit loops for matrix products, closed forms for 2x2 and 3x3
symmetric eigenvalues, and cyclic Jacobi rotations otherwise.
"""

from __future__ import annotations

import math

import numpy as np


def loop_matmul(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = A.shape
    m2, p = B.shape
    assert m == m2
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += A[i, k] * B[k, j]
            out[i, j] = s
    return out


def residual_operator_bruteforce(X, motor, Q=None):
    X = np.asarray(X, dtype=float)
    M = np.asarray(motor, dtype=float)
    M = (M - M.T) / 2.0
    G = loop_matmul(X.T, X)
    S = (loop_matmul(G, M) + loop_matmul(M.T, G)) / 2.0
    d = G.shape[0]
    if Q is not None and np.asarray(Q).shape[1]:
        Q = np.asarray(Q, dtype=float)
        P = np.eye(d) - loop_matmul(Q, Q.T)
        S = loop_matmul(loop_matmul(P, S), P)
    return (S + S.T) / 2.0


def eigvals_2x2(A):
    a, b, c = A[0, 0], A[0, 1], A[1, 1]
    mid = (a + c) / 2.0
    rad = math.hypot((a - c) / 2.0, b)
    return np.array([mid + rad, mid - rad])


def eigvals_3x3(A):
    """Trigonometric solution of the symmetric 3x3 characteristic cubic."""
    A = np.asarray(A, dtype=float)
    p1 = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
    q = np.trace(A) / 3.0
    if p1 == 0.0:
        return np.sort(np.diag(A))[::-1]
    p2 = (A[0, 0] - q) ** 2 + (A[1, 1] - q) ** 2 + (A[2, 2] - q) ** 2 + 2 * p1
    p = math.sqrt(p2 / 6.0)
    B = (A - q * np.eye(3)) / p
    r = _det3(B) / 2.0
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    e1 = q + 2 * p * math.cos(phi)
    e3 = q + 2 * p * math.cos(phi + 2 * math.pi / 3)
    e2 = 3 * q - e1 - e3
    return np.array(sorted([e1, e2, e3], reverse=True))


def _det3(B):
    return (
        B[0, 0] * (B[1, 1] * B[2, 2] - B[1, 2] * B[2, 1])
        - B[0, 1] * (B[1, 0] * B[2, 2] - B[1, 2] * B[2, 0])
        + B[0, 2] * (B[1, 0] * B[2, 1] - B[1, 1] * B[2, 0])
    )


def jacobi_eigh(A, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi eigen-solver; eigenvalues descending with vectors."""
    A = np.array(A, dtype=float)
    A = (A + A.T) / 2.0
    n = A.shape[0]
    V = np.eye(n)
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = A[k, p], A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = A[p, k], A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                for k in range(n):
                    vkp, vkq = V[k, p], V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    w = np.diag(A).copy()
    order = np.argsort(-w)
    return w[order], V[:, order]


def brute_eigvals(A):
    A = np.asarray(A, dtype=float)
    if A.shape == (1, 1):
        return A[0].copy()
    if A.shape == (2, 2):
        return eigvals_2x2(A)
    if A.shape == (3, 3):
        return eigvals_3x3(A)
    return jacobi_eigh(A)[0]


def _complement(used, d):
    """Gram-Schmidt orthonormal basis of the complement of ``used``."""
    basis = []
    for i in range(d):
        v = np.zeros(d)
        v[i] = 1.0
        for _ in range(2):
            for u in list(used) + basis:
                v = v - (u @ v) * u
        n = math.sqrt(v @ v)
        if n > 1e-8:
            basis.append(v / n)
        if len(basis) == d - len(used):
            break
    return np.array(basis).T.reshape(d, len(basis))


def deflate_by_hand(A0, theta_w, mode="BD"):
    """Deflation re-derived with Jacobi eigenpairs and explicit rank-one removal.

    Eigenpairs come from the operator restricted to the complement of the
    directions removed so far; removal subtracts lambda v v^T, which equals
    projecting out an exact eigenvector.
    """
    A = np.array(A0, dtype=float)
    d = A.shape[0]
    gamma = float(np.sqrt((A * A).sum()))
    trace, captured, used = [gamma], [], []
    for _ in range(d):
        if gamma <= theta_w or len(used) == d:
            break
        B = _complement(used, d)
        w, V = jacobi_eigh(B.T @ A @ B)
        V = B @ V
        picks = [0]
        if mode == "BD" and len(w) > 1 and abs(w[-1]) > 1e-12 * max(trace[0], 1.0):
            picks.append(len(w) - 1)
        for i in picks:
            A = A - w[i] * np.outer(V[:, i], V[:, i])
            used.append(V[:, i] / math.sqrt(V[:, i] @ V[:, i]))
        captured.append(tuple(w[i] for i in picks))
        gamma = float(np.sqrt((A * A).sum()))
        trace.append(gamma)
    return len(captured), captured, trace
