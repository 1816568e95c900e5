from dataclasses import replace

import numpy as np
import pytest

from conftest import random_orthonormal
from fddh.diagnostics import (
    StabilityConfig, bilipschitz_check, error_terms, sample_pairs, stability_experiment, synth_dataset,
)

SIZES = (128, 256, 512)
FAST = StabilityConfig(k=32, batch=16, max_iters=5)


def test_error_terms_exact_representation():
    C = np.eye(2)
    Y = np.array([[1.0, -1.0], [-1.0, 1.0]])
    rep = error_terms(C, Y, np.sign(C @ Y))
    np.testing.assert_array_equal(rep.e, 0)


def test_error_terms_one_hot():
    Y = np.eye(3)[:, [0, 2, 1, 1]]
    H = 2 * Y - 1
    rep = error_terms(np.eye(3), Y, H)
    np.testing.assert_array_equal(rep.e, H - Y)
    assert rep.kappa == pytest.approx(np.sqrt(3))


def test_error_terms_scalar_oracle():
    rng = np.random.default_rng(0)
    q, c, n = 3, 2, 4
    C = random_orthonormal(rng, q, c)
    Y = rng.integers(0, 2, (c, n)).astype(float)
    H = rng.choice([-1.0, 1.0], (q, n))
    rep = error_terms(C, Y, H)
    for i in range(n):
        for a in range(q):
            assert rep.e[a, i] == pytest.approx(H[a, i] - sum(C[a, b] * Y[b, i] for b in range(c)), abs=1e-15)
        for b in range(c):
            assert rep.e_prime[b, i] == pytest.approx(Y[b, i] - sum(C[a, b] * H[a, i] for a in range(q)), abs=1e-15)


def test_error_terms_shape_mismatch():
    with pytest.raises(ValueError):
        error_terms(np.eye(2), np.ones((3, 2)), np.ones((2, 2)))


def test_sample_pairs_distinct():
    p = sample_pairs(5, 1000, seed=1)
    assert np.all(p[:, 0] != p[:, 1]) and p.min() >= 0 and p.max() < 5


def test_perfect_model_errors_concentrate_at_zero():
    C = np.eye(3)
    Y = np.eye(3)[:, [0, 1, 2, 0, 1]]
    rep = error_terms(C, Y, Y)
    res = bilipschitz_check(rep, Y, Y, sample_pairs(5, 200, 0))
    assert res.passed
    assert np.all(res.rel_eps1 == 0) and np.all(res.rel_eps2 == 0)
    assert res.fraction_small() == (1.0, 1.0)


def test_trained_model_bilipschitz(small_data, small_pipeline):
    _, _, labels = small_data
    m = small_pipeline.model
    rep = error_terms(m.C, labels, m.H)
    assert rep.kappa == pytest.approx(np.sqrt(labels.values.shape[0]), abs=1e-10)
    res = bilipschitz_check(rep, labels, m.H, sample_pairs(600, 5000, 0))
    assert res.pass_rate == 1.0
    edges, c1, c2 = res.histograms(10)
    assert len(edges) == 11 and c1.sum() == c2.sum() == res.n_pairs - res.n_equal_labels


def test_synth_dataset_properties():
    a = synth_dataset(200, 5, 6, 4, 0.2, seed=3)
    b = synth_dataset(200, 5, 6, 4, 0.2, seed=3)
    for u, v in zip(a, b):
        assert u.values.tobytes() == v.values.tobytes()
    Y = a[2].values
    counts = Y.sum(axis=0)
    assert set(np.unique(counts)) <= {1.0, 2.0}
    assert 0.4 < np.mean(counts == 2) < 0.6
    # Each class is the primary label of exactly n / c samples.
    assert np.all(Y.sum(axis=1) >= 40)


def test_synth_noise_free_groups_identical():
    x1, x2, labels = synth_dataset(100, 3, 5, 4, 0.0, seed=1)
    Y = labels.values
    for i in range(100):
        same = np.flatnonzero(np.all(Y == Y[:, [i]], axis=0))
        assert np.all(x1.values[:, same] == x1.values[:, [i]])
        assert np.all(x2.values[:, same] == x2.values[:, [i]])


def test_synth_rejects_bad_sizes():
    with pytest.raises(ValueError):
        synth_dataset(2, 3, 4, 4)


def test_identical_swap_gives_zero():
    rep = stability_experiment(SIZES, FAST, seeds=(0,), identical_swap=True)
    assert np.all(rep.perturbations == 0)
    assert rep.excluded == SIZES and np.isnan(rep.slope)


def test_stability_deterministic():
    a = stability_experiment(SIZES, FAST, seeds=(0, 1))
    b = stability_experiment(SIZES, FAST, seeds=(0, 1))
    assert a.perturbations.tobytes() == b.perturbations.tobytes()
    assert a.slope == b.slope


def test_doubling_gamma_never_increases_perturbation():
    a = stability_experiment(SIZES, FAST, seeds=(0, 1, 2))
    b = stability_experiment(SIZES, replace(FAST, gamma=2 * FAST.gamma), seeds=(0, 1, 2))
    assert np.all(b.perturbations <= a.perturbations + 1e-9)


def test_perturbation_trend_non_increasing():
    sizes = (256, 512, 1024, 2048, 4096, 8192)
    rep = stability_experiment(sizes, StabilityConfig(), seeds=(0, 1, 2, 3, 4))
    mean = rep.mean_perturbation
    # Allow a 10% rise per step against seed noise.
    assert np.all(mean[1:] <= 1.1 * mean[:-1])
    assert np.all(rep.bounds >= rep.perturbations)
