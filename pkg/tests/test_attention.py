import math

import numpy as np
import pytest

from incrt.attention import (
    HeadParams,
    backward,
    head_energy,
    head_forward,
    init_head,
    init_model,
    layer_forward,
    load_model,
    model_forward,
    motor_decompose,
    motor_jacobian,
    ntk_head_contribution,
    optimal_value_variance,
    preservation_scale,
    save_model,
    softmax_rows,
)
from incrt.exceptions import DimensionError, PreconditionError
from incrt.spectra import CapturedBasis
from incrt.verify import gradient_check


def head(W_Q, W_K, W_V, W_O):
    return HeadParams(*(np.asarray(w, float) for w in (W_Q, W_K, W_V, W_O)))


def rand_head(rng, d=4, d_k=3, d_v=3, scale=1.0):
    return head(
        scale * rng.standard_normal((d, d_k)),
        rng.standard_normal((d, d_k)),
        rng.standard_normal((d, d_v)),
        rng.standard_normal((d_v, d)),
    )


def test_zero_motor_gives_uniform_attention():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 4))
    h = head(np.zeros((4, 2)), rng.standard_normal((4, 2)), np.eye(4)[:, :2], np.eye(4)[:2])
    _, S = head_forward(X, h)
    assert np.array_equal(S, np.full((5, 5), 0.2))


def test_zero_output_projection():
    rng = np.random.default_rng(1)
    h = rand_head(rng)
    h.W_O[:] = 0
    Z, _ = head_forward(rng.standard_normal((6, 4)), h)
    assert np.all(Z == 0)


def test_two_token_hand_example():
    h = head(np.diag([1.0, 0.0]), np.eye(2), np.eye(2), np.eye(2))
    Z, S = head_forward(np.eye(2), h)
    # softmax(1/sqrt(2), 0) by hand
    assert np.allclose(S[0], [0.66976, 0.33024], atol=1e-5)
    assert np.allclose(Z[0], [0.66976, 0.33024], atol=1e-5)


def test_softmax_rows_properties():
    rng = np.random.default_rng(2)
    S = softmax_rows(rng.standard_normal((3, 7, 7)) * 5)
    assert np.allclose(S.sum(-1), 1, atol=1e-12)
    assert np.all((S > 0) & (S < 1))


def test_layer_forward_linearity_and_additivity():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 4))
    h = rand_head(rng)
    delta = layer_forward(X, [h]) - X
    h2 = HeadParams(h.W_Q, h.W_K, h.W_V, 2 * h.W_O)
    assert np.allclose(layer_forward(X, [h2]) - X, 2 * delta)
    assert np.allclose(layer_forward(X, [h, h]) - X, 2 * delta)
    zero = HeadParams(h.W_Q, h.W_K, h.W_V, np.zeros_like(h.W_O))
    assert np.array_equal(layer_forward(X, [zero]), X)


def test_motor_decompose():
    # M = W_Q W_K^T = [[0, 1], [0, 0]]
    D = motor_decompose(head([[1.0], [0.0]], [[0.0], [1.0]], np.eye(2), np.eye(2)))
    assert np.allclose(D.M, [[0, 1], [0, 0]])
    assert np.allclose(D.M_s, [[0, 0.5], [0.5, 0]]) and np.allclose(D.M_a, [[0, 0.5], [-0.5, 0]])
    rng = np.random.default_rng(4)
    D = motor_decompose(rand_head(rng))
    assert np.allclose(D.M, D.M_s + D.M_a)
    assert math.isclose(np.linalg.norm(D.M) ** 2, np.linalg.norm(D.M_s) ** 2 + np.linalg.norm(D.M_a) ** 2)
    sym = motor_decompose(head(np.eye(3), np.eye(3), np.eye(3), np.eye(3)))
    assert np.all(sym.M_a == 0)


def test_head_energy_examples():
    h = head([[1.0], [0.0]], [[0.0], [1.0]], np.eye(2), np.eye(2))
    # M_a = [[0, .5], [-.5, 0]]; scale the query to get M_a = [[0, 1], [-1, 0]]
    h.W_Q *= 2
    assert math.isclose(head_energy(None, h, gram=np.diag([2.0, 1.0])), math.sqrt(0.5), rel_tol=1e-12)
    assert head_energy(None, h, gram=np.eye(2)) == 0
    sym = head(np.eye(2), np.eye(2), np.eye(2), np.eye(2))
    assert head_energy(np.ones((3, 2)), sym) == 0


def test_init_head_construction():
    e = np.eye(2)
    h = init_head(e[0], e[1], 0.1, 2, 2, 4, rng=0)
    assert np.allclose(h.motor_matrix(), [[0, 0.1], [-0.1, 0]], atol=1e-15)
    assert np.all(motor_decompose(h).M_s == 0)
    assert np.all(h.W_O == 0)
    assert optimal_value_variance(64, 64, 512) == 512
    with pytest.raises(PreconditionError):
        init_head(e[0], (e[0] + e[1]) / math.sqrt(2), 0.1, 2, 2, 4)
    with pytest.raises(PreconditionError):
        init_head(e[0], e[1], 0.1, 1, 2, 4)


def test_init_head_norm_and_value_variance():
    rng = np.random.default_rng(5)
    Q, _ = np.linalg.qr(rng.standard_normal((6, 2)))
    h = init_head(Q[:, 0], Q[:, 1], 0.3, 4, 8, 10, rng=1)
    assert math.isclose(np.linalg.norm(motor_decompose(h).M_a), 0.3 * math.sqrt(2), rel_tol=1e-12)
    big = init_head(Q[:, 0], Q[:, 1], 0.3, 4, 64, 512, rng=2, value_variance=None)
    assert abs(big.W_V.var() - optimal_value_variance(4, 64, 512) / 64) < 0.05 * optimal_value_variance(4, 64, 512) / 64


def test_preservation_scale():
    X = np.full((4, 25), 0.4)  # Frobenius norm 4
    X = X * (10 / np.linalg.norm(X))
    assert math.isclose(preservation_scale(0.01, X, 64), 1.25e-4)
    assert preservation_scale(0.0, X, 64) == 0
    assert math.isclose(preservation_scale(0.01, 2 * X, 64), 1.25e-4 / 2)
    with pytest.raises(PreconditionError):
        preservation_scale(0.01, np.zeros((2, 2)), 4)


def test_model_forward_examples():
    m = init_model(6, 3, 4, 2, 2, 5, seed=0)
    tokens = np.array([[0, 1, 2, 3, 4]])
    m0 = init_model(6, 3, 4, 2, 2, 5, seed=0)
    m0.embedding[:] = 0
    assert np.all(model_forward(tokens, m0) == 0)
    m.layer.heads[0].W_O[:] = 0
    pooled = m.embedding[tokens].mean(axis=1) @ m.classifier
    assert np.allclose(model_forward(tokens, m), pooled)
    m2 = init_model(6, 3, 4, 2, 2, 5, seed=1)
    m2.layer.heads[0].W_Q[:] = 0
    perm = tokens[:, ::-1]
    assert np.allclose(model_forward(tokens, m2), model_forward(perm, m2))
    with pytest.raises(IndexError):
        model_forward(np.array([[0, 9]]), m)


def test_backward_examples():
    m = init_model(5, 3, 4, 2, 2, 3, seed=0)
    m.classifier[:] = 0
    loss, grads, _ = backward(m, np.array([[0, 1, 2]] * 3), np.array([0, 1, 2]))
    assert math.isclose(loss, math.log(3))
    assert np.allclose(grads["classifier"], 0)
    with pytest.raises(DimensionError):
        backward(m, np.array([[0, 1, 2]]), np.array([0, 1]))


def test_gradients_match_finite_differences():
    c = gradient_check(d=6, n=4, heads=2)
    assert c.passed, c.value


def test_ntk_probe_basic_properties():
    rng = np.random.default_rng(6)
    X = rng.standard_normal((6, 4))
    h = rand_head(rng, scale=1e-3)
    h.W_O[:] = 0
    assert np.all(ntk_head_contribution(X, h) == 0)
    h = rand_head(rng, scale=1e-3)
    T = ntk_head_contribution(X, h)
    assert np.allclose(T, T.T)
    assert np.linalg.eigvalsh(T).min() > -1e-12
    with pytest.warns(RuntimeWarning):
        ntk_head_contribution(X, rand_head(rng, scale=10.0))


def test_motor_jacobian_matches_finite_difference():
    rng = np.random.default_rng(7)
    d, n = 4, 5
    X = rng.standard_normal((n, d))
    h = head(0.1 * rng.standard_normal((d, d)), np.eye(d), rng.standard_normal((d, 3)), rng.standard_normal((3, d)))
    J = motor_jacobian(X, h)
    r = np.full(d, 1 / d)
    Ma = (h.W_Q - h.W_Q.T) / 2
    Ms = (h.W_Q + h.W_Q.T) / 2
    eps = 1e-6
    for a in range(d):
        for b in range(a + 1, d):
            E = np.zeros((d, d))
            E[a, b], E[b, a] = 1, -1
            f = []
            for s in (1, -1):
                hp = HeadParams(Ms + Ma + s * eps * E, np.eye(d), h.W_V, h.W_O)
                f.append(head_forward(X, hp)[0] @ r)
            num = (f[0] - f[1]) / (2 * eps)
            assert np.allclose(num, (J * E).sum(axis=(1, 2)), atol=1e-7)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(7, 3, 4, 2, 3, 5, seed=0, seed_heads=2)
    m.layer.basis = CapturedBasis.empty(4).add([np.eye(4)[0]], tag=1)
    p = tmp_path / "ckpt.npz"
    save_model(p, m)
    r = load_model(p)
    for k, v in m.parameters().items():
        assert np.array_equal(v, r.parameters()[k]) and v.dtype == r.parameters()[k].dtype
    assert r.layer.basis.tags == [1] and np.array_equal(r.layer.basis.Q, m.layer.basis.Q)
    assert np.array_equal(r.layer.gate.u_plus, m.layer.gate.u_plus)
    assert r.meta == m.meta
    tokens = np.array([[0, 1, 2, 3, 4]])
    assert np.array_equal(model_forward(tokens, r), model_forward(tokens, m))
