"""Single-layer multi-head attention with a residual stream.

Pure numpy with a hand-written reverse pass. A head computes

    S = softmax(X M X^T / sqrt(d_k)),   Z = S X W_V W_O,   M = W_Q W_K^T

and the layer output is X + sum_h Z_h. The classifier mean-pools the
layer output over tokens and applies a bias-free linear map.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DimensionError, PreconditionError
from .gate import GateState
from .spectra import CapturedBasis, as_motor, residual_from_gram, symmetrize

HEAD_TENSORS = ("W_Q", "W_K", "W_V", "W_O")


@dataclass
class HeadParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    head_id: int = 0
    birth_step: int = 0
    sigma_new: Optional[float] = None

    @property
    def d(self) -> int:
        return self.W_Q.shape[0]

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]

    @property
    def d_v(self) -> int:
        return self.W_V.shape[1]

    def motor_matrix(self) -> np.ndarray:
        return self.W_Q @ self.W_K.T

    def tensors(self):
        return {name: getattr(self, name) for name in HEAD_TENSORS}


@dataclass(frozen=True)
class HeadDiagnostics:
    M: np.ndarray
    M_s: np.ndarray
    M_a: np.ndarray
    gamma_h: Optional[float] = None


@dataclass
class LayerState:
    heads: list
    basis: CapturedBasis
    gate: GateState

    def head(self, head_id: int) -> HeadParams:
        for h in self.heads:
            if h.head_id == head_id:
                return h
        raise KeyError(f"no active head with id {head_id}")

    def mean_motor(self) -> np.ndarray:
        if not self.heads:
            return np.zeros((self.basis.d, self.basis.d))
        return sum(as_motor(h.motor_matrix()) for h in self.heads) / len(self.heads)


@dataclass
class ModelState:
    embedding: np.ndarray  # vocab x d
    layer: LayerState
    classifier: np.ndarray  # d x n_classes
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.embedding.shape[1]

    def parameters(self) -> dict:
        """Every trainable tensor by name; arrays are live views."""
        params = {"embedding": self.embedding, "classifier": self.classifier}
        for h in self.layer.heads:
            for name, t in h.tensors().items():
                params[f"head{h.head_id}.{name}"] = t
        return params

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters().values())


def softmax_rows(L: np.ndarray) -> np.ndarray:
    L = L - L.max(axis=-1, keepdims=True)
    E = np.exp(L)
    return E / E.sum(axis=-1, keepdims=True)


def _check_head_dims(X: np.ndarray, h: HeadParams) -> None:
    d = X.shape[-1]
    if h.W_Q.shape[0] != d or h.W_K.shape != h.W_Q.shape:
        raise DimensionError("W_Q/W_K shapes do not match the batch")
    if h.W_V.shape[0] != d or h.W_O.shape != (h.d_v, d):
        raise DimensionError("W_V/W_O shapes do not match the batch")


def head_forward(X: np.ndarray, h: HeadParams):
    """Return ``(Z, S)`` for one sequence (n x d) or a batch (B x n x d)."""
    X = np.asarray(X, dtype=float)
    _check_head_dims(X, h)
    logits = (X @ h.W_Q) @ np.swapaxes(X @ h.W_K, -1, -2) / math.sqrt(h.d_k)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite attention logits")
    S = softmax_rows(logits)
    Z = S @ (X @ h.W_V) @ h.W_O
    return Z, S


def layer_forward(X: np.ndarray, layer) -> np.ndarray:
    """Residual update X + sum over heads of Z_h.

    ``layer`` may be a LayerState or a plain sequence of heads.
    """
    heads = layer.heads if isinstance(layer, LayerState) else list(layer)
    out = np.array(X, dtype=float)
    for h in heads:
        out = out + head_forward(X, h)[0]
    return out


def motor_decompose(h: HeadParams) -> HeadDiagnostics:
    M = h.motor_matrix()
    return HeadDiagnostics(M=M, M_s=(M + M.T) / 2.0, M_a=(M - M.T) / 2.0)


def head_energy(X: Optional[np.ndarray], h: HeadParams, gram: Optional[np.ndarray] = None) -> float:
    """Directed energy of one head: |sym(X^T X M_a)|_F with the head's own motor."""
    if gram is None:
        X = np.asarray(X, dtype=float)
        gram = X.T @ X
    return float(np.linalg.norm(residual_from_gram(gram, as_motor(h.motor_matrix()))))


def optimal_value_variance(d_k: int, d_v: int, n: int) -> float:
    """Value-init variance that makes the geometric and NTK growth criteria coincide."""
    return d_k * n / d_v


def preservation_scale(delta: float, X: np.ndarray, d_v: int) -> float:
    """Largest motor scale whose birth moves the layer output by at most ``delta``."""
    norm = float(np.linalg.norm(X))
    if norm == 0.0:
        raise PreconditionError("batch has zero Frobenius norm")
    return delta / (math.sqrt(d_v) * norm)


def init_head(
    u_plus,
    u_minus,
    sigma_new: float,
    d_k: int,
    d_v: int,
    n: int,
    rng=None,
    head_id: int = 0,
    birth_step: int = 0,
    w_o: str = "zero",
    value_variance: Optional[float] = None,
) -> HeadParams:
    """Gate-aligned head whose motor is exactly sigma (u+ u-^T - u- u+^T).

    ``w_o="zero"`` makes the birth output-preserving by construction.
    ``w_o="delta"`` draws a random output projection and rescales the
    value path so |W_V W_O|_2 = sigma sqrt(d_v); with near-uniform
    attention the birth then moves the output by at most
    sigma sqrt(d_v) |X|_F.
    """
    u_plus = np.asarray(u_plus, dtype=float)
    u_minus = np.asarray(u_minus, dtype=float)
    if sigma_new <= 0:
        raise PreconditionError("sigma_new must be positive")
    if d_k < 2:
        raise PreconditionError("a rank-two motor needs d_k >= 2")
    if abs(u_plus @ u_minus) > 1e-8:
        raise PreconditionError("probes must be orthogonal")
    rng = np.random.default_rng(rng)
    d = u_plus.shape[0]
    r = math.sqrt(sigma_new)
    W_Q = np.zeros((d, d_k))
    W_K = np.zeros((d, d_k))
    W_Q[:, 0], W_Q[:, 1] = r * u_plus, r * u_minus
    W_K[:, 0], W_K[:, 1] = r * u_minus, -r * u_plus
    var = optimal_value_variance(d_k, d_v, n) if value_variance is None else value_variance
    W_V = rng.normal(0.0, math.sqrt(var / d_v), size=(d, d_v))
    if w_o == "zero":
        W_O = np.zeros((d_v, d))
    elif w_o == "delta":
        W_O = rng.normal(0.0, 1.0 / math.sqrt(d_v), size=(d_v, d))
        W_O *= sigma_new * math.sqrt(d_v) / np.linalg.norm(W_V @ W_O, 2)
    else:
        raise ValueError(f"unknown output-projection init {w_o!r}")
    return HeadParams(W_Q, W_K, W_V, W_O, head_id, birth_step, sigma_new)


def seed_head(d: int, d_k: int, d_v: int, n: int, rng, value_variance: Optional[float] = None) -> HeadParams:
    """Randomly initialized first head (the only one not born from the gate)."""
    rng = np.random.default_rng(rng)
    var = optimal_value_variance(d_k, d_v, n) if value_variance is None else value_variance
    return HeadParams(
        W_Q=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d_k)),
        W_K=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d_k)),
        W_V=rng.normal(0.0, math.sqrt(var / d_v), size=(d, d_v)),
        W_O=rng.normal(0.0, 1.0 / math.sqrt(d_v), size=(d_v, d)),
        head_id=0,
        birth_step=0,
    )


def init_model(vocab_size, n_classes, d, d_k, d_v, n, seed=0, gate=None, value_variance=None, seed_heads=1) -> ModelState:
    from .gate import init_gate

    rng = np.random.default_rng(seed)
    heads = []
    for i in range(seed_heads):
        h = seed_head(d, d_k, d_v, n, rng, value_variance)
        h.head_id = i
        heads.append(h)
    layer = LayerState(heads, CapturedBasis.empty(d), gate or init_gate(d, seed=seed))
    return ModelState(
        embedding=rng.normal(0.0, 1.0, size=(vocab_size, d)),
        layer=layer,
        classifier=rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, n_classes)),
        meta={"d_k": d_k, "d_v": d_v, "n": n, "next_head_id": seed_heads},
    )


def _check_tokens(tokens, model: ModelState) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise DimensionError("tokens must be an integer batch x n array")
    V = model.embedding.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise IndexError("token id outside the vocabulary")
    return tokens


def model_forward(tokens, model: ModelState, return_cache: bool = False):
    """Embed, one attention layer, mean-pool, linear classifier."""
    tokens = _check_tokens(tokens, model)
    X = model.embedding[tokens]
    Y = X.copy()
    head_cache = []
    for h in model.layer.heads:
        q = X @ h.W_Q
        k = X @ h.W_K
        L = q @ np.swapaxes(k, 1, 2) / math.sqrt(h.d_k)
        if not np.all(np.isfinite(L)):
            raise FloatingPointError("non-finite attention logits")
        S = softmax_rows(L)
        V = X @ h.W_V
        H = S @ V
        Y += H @ h.W_O
        head_cache.append((q, k, S, V, H))
    pooled = Y.mean(axis=1)
    logits = pooled @ model.classifier
    if return_cache:
        return logits, {"tokens": tokens, "X": X, "heads": head_cache, "pooled": pooled}
    return logits


def backward(model: ModelState, tokens, labels, loss_fn=None):
    """Loss and analytic gradients for every trainable tensor.

    Gradients are of the mean cross-entropy over the batch. Returns
    ``(loss, grads, logits)`` with ``grads`` keyed like ``model.parameters()``.
    """
    from .trainer import cross_entropy

    loss_fn = loss_fn or cross_entropy
    logits, cache = model_forward(tokens, model, return_cache=True)
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise DimensionError("one label per sequence is required")
    loss, dlogits = loss_fn(logits, labels)
    X = cache["X"]
    n = X.shape[1]
    grads = {"classifier": cache["pooled"].T @ dlogits}
    dpooled = dlogits @ model.classifier.T
    dY = np.repeat(dpooled[:, None, :] / n, n, axis=1)
    dX = dY.copy()
    for h, (q, k, S, V, H) in zip(model.layer.heads, cache["heads"]):
        p = f"head{h.head_id}."
        grads[p + "W_O"] = np.einsum("bnv,bnd->vd", H, dY)
        dH = dY @ h.W_O.T
        dS = dH @ np.swapaxes(V, 1, 2)
        dV = np.swapaxes(S, 1, 2) @ dH
        grads[p + "W_V"] = np.einsum("bnd,bnv->dv", X, dV)
        dL = S * (dS - (dS * S).sum(axis=-1, keepdims=True)) / math.sqrt(h.d_k)
        dq = dL @ k
        dk = np.swapaxes(dL, 1, 2) @ q
        grads[p + "W_Q"] = np.einsum("bnd,bnk->dk", X, dq)
        grads[p + "W_K"] = np.einsum("bnd,bnk->dk", X, dk)
        dX += dV @ h.W_V.T + dq @ h.W_Q.T + dk @ h.W_K.T
    dE = np.zeros_like(model.embedding)
    np.add.at(dE, cache["tokens"], dX)
    grads["embedding"] = dE
    return loss, grads, logits


def batch_gram(model: ModelState, tokens) -> np.ndarray:
    """Per-sequence Gram X^T X of the layer input, averaged over the batch."""
    X = model.embedding[_check_tokens(tokens, model)]
    return np.einsum("bnd,bne->de", X, X) / X.shape[0]


def model_residual(model: ModelState, tokens) -> np.ndarray:
    return residual_from_gram(batch_gram(model, tokens), model.layer.mean_motor(), model.layer.basis)


# ----------------------------------------------------------------------------
# tangent-kernel probe


def _skew(A):
    return (A - np.swapaxes(A, -1, -2)) / 2.0


def motor_jacobian(X: np.ndarray, h: HeadParams, readout: Optional[np.ndarray] = None) -> np.ndarray:
    """d f_i / d M_a for each token's pooled scalar output.

    ``f_i = Z_i . r`` with ``r`` the feature readout (mean over features by
    default). Returns an n x d x d array of skew matrices: the gradient
    with respect to the antisymmetric motor coordinates.
    """
    X = np.asarray(X, dtype=float)
    d = X.shape[1]
    r = np.full(d, 1.0 / d) if readout is None else np.asarray(readout, dtype=float)
    Z, S = head_forward(X, h)
    v = X @ h.W_V @ h.W_O @ r  # per-key scalar value
    f = S @ v
    # df_i/dL_il = S_il (v_l - f_i); dL_il/dM = x_i x_l^T / sqrt(d_k)
    W = (S * (v[None, :] - f[:, None])) @ X  # row i: sum_l S_il (v_l - f_i) x_l
    J = np.einsum("id,ie->ide", X, W) / math.sqrt(h.d_k)
    return _skew(J)


def ntk_head_contribution(X: np.ndarray, h: HeadParams, readout=None, a3_limit: float = 0.1) -> np.ndarray:
    """Token-by-token tangent kernel of one head over its motor coordinates."""
    Ma = motor_decompose(h).M_a
    if np.linalg.norm(Ma) > a3_limit:
        warnings.warn(
            f"motor norm {np.linalg.norm(Ma):.3g} exceeds the near-uniform regime ({a3_limit})",
            RuntimeWarning,
            stacklevel=2,
        )
    J = motor_jacobian(X, h, readout)
    flat = J.reshape(J.shape[0], -1)
    return flat @ flat.T


def feature_pullback(X: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Map a token-space kernel into feature space, X^T K X."""
    return symmetrize(X.T @ kernel @ X)


# ----------------------------------------------------------------------------
# checkpoint


def save_model(path, model: ModelState) -> None:
    """Write every tensor (name, shape, row-major data) plus JSON metadata to ``.npz``."""
    arrays = {"embedding": model.embedding, "classifier": model.classifier}
    heads = []
    for h in model.layer.heads:
        for name, t in h.tensors().items():
            arrays[f"head{h.head_id}.{name}"] = t
        heads.append({"head_id": h.head_id, "birth_step": h.birth_step, "sigma_new": h.sigma_new})
    basis = model.layer.basis
    arrays["basis.Q"] = basis.Q
    g = model.layer.gate
    arrays["gate.u_plus"] = g.u_plus
    arrays["gate.u_minus"] = g.u_minus
    meta = {
        "heads": heads,
        "basis_tags": basis.tags,
        "gate": {
            "eta_plus": g.eta_plus,
            "eta_minus": g.eta_minus,
            "step_count": g.step_count,
            "gamma_star": g.gamma_star,
            "tau": g.tau,
            "reseed_count": g.reseed_count,
        },
        "meta": model.meta,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_model(path) -> ModelState:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    heads = [
        HeadParams(
            *(arrays[f"head{m['head_id']}.{name}"] for name in HEAD_TENSORS),
            head_id=m["head_id"],
            birth_step=m["birth_step"],
            sigma_new=m["sigma_new"],
        )
        for m in meta["heads"]
    ]
    gate = GateState(arrays["gate.u_plus"], arrays["gate.u_minus"], **meta["gate"])
    basis = CapturedBasis(arrays["basis.Q"], list(meta["basis_tags"]))
    return ModelState(
        embedding=arrays["embedding"],
        layer=LayerState(heads, basis, gate),
        classifier=arrays["classifier"],
        meta=meta["meta"],
    )
