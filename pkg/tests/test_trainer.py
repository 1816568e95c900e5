import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_orthonormal
from fddh.data import zero_center
from fddh.kernel import fit_kernel
from fddh.trainer import (
    ConfigurationError, Hyperparams, TrainState, dragging_directions, objective,
    procrustes_max, train, train_ablation, update_C, update_H, update_R, update_Ybar,
)


def _state(C, Ybar, H=None, R1=None, R2=None, Y=None):
    q = C.shape[0]
    n = Ybar.shape[1]
    H = np.ones((q, n)) if H is None else H
    R1 = np.eye(q) if R1 is None else R1
    R2 = np.eye(q) if R2 is None else R2
    Y = (Ybar > 0.5).astype(float) if Y is None else Y
    return TrainState(C, R1, R2, Ybar, H, dragging_directions(Y))


def test_procrustes_identity():
    Z = procrustes_max(np.eye(2), 2)
    np.testing.assert_allclose(Z, np.eye(2), atol=1e-15)


def test_procrustes_scalar():
    np.testing.assert_allclose(procrustes_max(np.array([[5.0]]), 1), [[1.0]])


def test_procrustes_two_by_two_beats_random_search():
    M = np.array([[0.0, 2.0], [-3.0, 0.0]])
    Z = procrustes_max(M, 2)
    best = np.trace(M @ Z)
    assert best == pytest.approx(5.0, rel=1e-12)
    rng = np.random.default_rng(0)
    # Random 2x2 orthogonal matrices: rotations [[c,-s],[s,c]] and reflections [[c,s],[s,-c]].
    angles = rng.uniform(0, 2 * np.pi, 100_000)
    c, s = np.cos(angles), np.sin(angles)
    tr_rot = M[0, 0] * c + M[0, 1] * s + M[1, 0] * (-s) + M[1, 1] * c
    tr_ref = M[0, 0] * c + M[0, 1] * s + M[1, 0] * s - M[1, 1] * c
    assert max(tr_rot.max(), tr_ref.max()) <= best + 1e-12
    assert max(tr_rot.max(), tr_ref.max()) > best - 1e-6


def test_procrustes_zero_and_non_finite():
    np.testing.assert_array_equal(procrustes_max(np.zeros((2, 3)), 2), np.eye(3, 2))
    with pytest.raises(FloatingPointError):
        procrustes_max(np.array([[np.nan, 1.0]]), 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 7))
def test_procrustes_trace_is_nuclear_norm(seed, a, b):
    M = np.random.default_rng(seed).standard_normal((a, b))
    Z = procrustes_max(M)
    r = min(a, b)
    np.testing.assert_allclose(Z.T @ Z if a <= b else Z @ Z.T, np.eye(r), atol=1e-12)
    assert np.trace(M @ Z) == pytest.approx(np.linalg.svd(M, compute_uv=False).sum(), rel=1e-10)


def test_update_C_recovers_planted_rotation():
    rng = np.random.default_rng(1)
    q, c, n = 6, 3, 20
    C0 = random_orthonormal(rng, q, c)
    Ybar = rng.standard_normal((c, n))
    st_ = _state(np.zeros((q, c)), Ybar, H=C0 @ Ybar)
    C = update_C(st_, np.zeros((q, n)), np.zeros((q, n)), Hyperparams(q=q, mu=0, theta=0, delta=0))
    np.testing.assert_allclose(C, C0, atol=1e-10)
    Q = Ybar @ st_.H.T
    assert np.trace(Q @ C) == pytest.approx(np.trace(Ybar @ Ybar.T), rel=1e-10)


def test_update_C_scalar():
    st_ = _state(np.zeros((1, 1)), np.array([[1.0]]), H=np.array([[3.0]]))
    C = update_C(st_, np.zeros((1, 1)), np.zeros((1, 1)), Hyperparams(q=1, mu=0, theta=0, delta=0))
    np.testing.assert_allclose(C, [[1.0]])


def test_update_R_attains_planted_trace():
    rng = np.random.default_rng(2)
    q, k, n = 4, 9, 30
    # C = I and a full-rank Ybar make C Ybar full rank.
    S = rng.standard_normal((q, n))
    R0 = random_orthonormal(rng, k, q)
    phi = R0 @ S
    R = update_R(_state(np.eye(q), S), phi, 1)
    M = S @ phi.T
    assert np.trace(M @ R) == pytest.approx(np.trace(M @ R0), rel=1e-10)
    np.testing.assert_allclose(R, R0, atol=1e-9)


def test_update_R_vector_case():
    v = np.array([[3.0, 0.0, 4.0]])
    st_ = _state(np.ones((1, 1)), np.ones((1, 1)))
    R = update_R(st_, v.T, 1)
    np.testing.assert_allclose(R, v.T / 5.0)


def test_update_R_zero_and_too_few_features():
    st_ = _state(np.eye(2), np.zeros((2, 3)))
    np.testing.assert_array_equal(update_R(st_, np.ones((4, 3)), 1), np.eye(4, 2))
    with pytest.raises(ConfigurationError):
        update_R(st_, np.ones((1, 3)), 1)


@pytest.mark.parametrize("y, w, expected", [(0, -0.4, -0.4), (0, 0.3, 0.0), (1, 0.7, 1.0), (1, 1.6, 1.6)])
def test_update_Ybar_clamp(y, w, expected):
    # With C = I, H = W and mu = theta = delta = 0 the unconstrained target is W.
    st_ = _state(np.eye(1), np.array([[0.0]]), H=np.array([[w]]), Y=np.array([[float(y)]]))
    hp = Hyperparams(q=1, mu=0, theta=0, delta=0)
    out = update_Ybar(st_, np.zeros((1, 1)), np.zeros((1, 1)), hp, np.array([[float(y)]]))
    assert out[0, 0] == pytest.approx(expected)


def test_update_H_sign_rule_and_fixed_point():
    st_ = _state(np.eye(3), np.array([[0.2], [-0.5], [0.0]]))
    np.testing.assert_array_equal(update_H(st_), [[1], [-1], [1]])
    pm = np.array([[1.0, -1.0], [-1.0, 1.0]])
    assert np.array_equal(update_H(_state(np.eye(2), pm)), pm)


def _brute_force_H(S):
    q = S.shape[0]
    codes = np.array(list(itertools.product([-1.0, 1.0], repeat=q))).T
    out = np.empty_like(S)
    for i in range(S.shape[1]):
        cost = ((codes - S[:, [i]]) ** 2).sum(axis=0)
        # Ties: prefer the code with +1 wherever the target is exactly 0.
        best = np.flatnonzero(cost == cost.min())
        out[:, i] = codes[:, best[-1]]
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 8))
def test_update_H_brute_force(seed, q, n):
    rng = np.random.default_rng(seed)
    c = rng.integers(1, q + 1)
    C = random_orthonormal(rng, q, c)
    Ybar = rng.standard_normal((c, n))
    st_ = _state(C, Ybar)
    np.testing.assert_array_equal(update_H(st_), _brute_force_H(C @ Ybar))


def _scalar_objective(s, phi1, phi2, mu, theta, delta):
    q, c = s.C.shape
    n = s.Ybar.shape[1]
    S = [[sum(s.C[a, b] * s.Ybar[b, i] for b in range(c)) for i in range(n)] for a in range(q)]
    total = 0.0
    for a in range(q):
        for i in range(n):
            total += (s.H[a, i] - S[a][i]) ** 2
    for R, phi, w in ((s.R1, phi1, mu), (s.R2, phi2, theta)):
        for r in range(R.shape[0]):
            for i in range(n):
                pred = sum(R[r, a] * S[a][i] for a in range(q))
                total += w * (phi[r, i] - pred) ** 2
    total += delta * sum(s.Ybar[b, i] ** 2 for b in range(c) for i in range(n))
    return total


def test_objective_scalar_oracle():
    rng = np.random.default_rng(5)
    q, c, n = 2, 1, 2
    s = _state(random_orthonormal(rng, q, c), rng.standard_normal((c, n)),
               H=rng.choice([-1.0, 1.0], (q, n)), R1=random_orthonormal(rng, 3, q),
               R2=random_orthonormal(rng, 2, q))
    phi1, phi2 = rng.standard_normal((3, n)), rng.standard_normal((2, n))
    hp = Hyperparams(q=q, mu=0.3, theta=0.7, delta=1.9)
    assert objective(s, phi1, phi2, hp) == pytest.approx(_scalar_objective(s, phi1, phi2, 0.3, 0.7, 1.9), rel=1e-12)


def test_objective_zero_when_exact():
    rng = np.random.default_rng(6)
    C = random_orthonormal(rng, 3, 2)
    Yb = rng.standard_normal((2, 4))
    s = _state(C, Yb, H=C @ Yb)
    hp = Hyperparams(q=3, mu=0, theta=0, delta=0)
    assert objective(s, np.zeros((3, 4)), np.zeros((3, 4)), hp) == pytest.approx(0, abs=1e-24)


def _phis(data, k=64):
    x1, x2, labels = data
    c1, c2 = zero_center(x1), zero_center(x2)
    km1, km2 = fit_kernel(c1, k, 200, 0), fit_kernel(c2, k, 200, 1)
    return c1, c2, labels, km1, km2


def test_trace_monotone_and_orthonormal(small_data):
    c1, c2, labels, km1, km2 = _phis(small_data)
    gaps = []

    def check(it, s):
        for A in (s.C, s.R1, s.R2):
            gaps.append(np.abs(A.T @ A - np.eye(A.shape[1])).max())
        assert np.all((s.Ybar - labels.values) * s.B >= -1e-12)

    m = train(c1, c2, labels, km1, km2, Hyperparams(q=16, max_iters=30, tol=1e-12), seed=0, callback=check)
    tr = np.array(m.objective_trace)
    assert np.all(tr[1:] <= tr[:-1] * (1 + 1e-9))
    assert max(gaps) < 1e-10
    assert np.linalg.norm(m.C) == pytest.approx(np.sqrt(8), abs=1e-10)


def test_max_iters_zero_returns_initial_state(small_data):
    c1, c2, labels, km1, km2 = _phis(small_data)
    m = train(c1, c2, labels, km1, km2, Hyperparams(q=16, max_iters=0), seed=4)
    assert len(m.objective_trace) == 1 and m.iterations == 0
    np.testing.assert_array_equal(m.Ybar, labels.values)
    rng = np.random.default_rng(4)
    np.testing.assert_array_equal(m.C, np.linalg.qr(rng.standard_normal((16, 8)))[0])


def test_train_deterministic(small_data):
    c1, c2, labels, km1, km2 = _phis(small_data)
    hp = Hyperparams(q=16, max_iters=10)
    a = train(c1, c2, labels, km1, km2, hp, seed=9)
    b = train(c1, c2, labels, km1, km2, hp, seed=9)
    for name in ("C", "R1", "R2", "H", "Ybar"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.objective_trace == b.objective_trace


def test_ablation_variants(small_data):
    c1, c2, labels, km1, km2 = _phis(small_data)
    hp = Hyperparams(q=16, max_iters=10)
    full = train(c1, c2, labels, km1, km2, hp, seed=1)
    same = train_ablation("full", c1, c2, labels, km1, km2, hp, seed=1)
    assert full.H.tobytes() == same.H.tobytes()

    frozen = []
    nr = train_ablation("no_relax", c1, c2, labels, km1, km2, hp, seed=1,
                        callback=lambda it, s: frozen.append(np.array_equal(s.Ybar, labels.values)))
    assert frozen and all(frozen)
    np.testing.assert_array_equal(nr.Ybar, labels.values)

    raw = train_ablation("no_relax_no_kernel", c1, c2, labels, None, None, Hyperparams(q=16, max_iters=5), seed=1)
    assert raw.R1.shape == (24, 16)
    with pytest.raises(ConfigurationError):
        train_ablation("no_relax_no_kernel", c1, c2, labels, None, None, Hyperparams(q=20), seed=1)
    with pytest.raises(ConfigurationError):
        train_ablation("bogus", c1, c2, labels, km1, km2, hp)


def test_code_length_below_class_count_rejected(small_data):
    c1, c2, labels, km1, km2 = _phis(small_data)
    with pytest.raises(ConfigurationError, match="smaller than the number of classes"):
        train(c1, c2, labels, km1, km2, Hyperparams(q=4))


def test_hyperparams_presets():
    hp = Hyperparams.from_preset("pascal-voc")
    assert (hp.mu, hp.theta, hp.delta) == (1.0, 1e-3, 1e3)
    assert Hyperparams.from_preset("nus-wide", q=64).q == 64
    with pytest.raises(ConfigurationError):
        Hyperparams.from_preset("imagenet")
    with pytest.raises(ConfigurationError):
        Hyperparams(mu=-1)
