"""Quantization/regression error analysis, online-stability measurements and
a seeded synthetic two-modality data generator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix, LabelMatrix, zero_center
from .kernel import apply_kernel, fit_kernel
from .projector import fit_offline, fit_online
from .trainer import Hyperparams, fit_codes

SMALL_ERROR = 0.1


@dataclass(frozen=True)
class ErrorReport:
    e: np.ndarray  # quantization errors h_i - C y_i, (q, n)
    e_prime: np.ndarray  # regression errors y_i - C^T h_i, (c, n)
    kappa: float  # ||C||_F


@dataclass(frozen=True)
class BiLipschitzResult:
    n_pairs: int
    n_equal_labels: int
    upper_holds: np.ndarray
    lower_holds: np.ndarray
    rel_eps1: np.ndarray
    rel_eps2: np.ndarray

    @property
    def pass_rate(self):
        ok = self.upper_holds & self.lower_holds
        return float(ok.mean()) if ok.size else 1.0

    @property
    def passed(self):
        return bool(np.all(self.upper_holds & self.lower_holds))

    def fraction_small(self, threshold=SMALL_ERROR):
        """Fractions of normalized eps1 / eps2 values inside [0, threshold]."""
        f1 = float(np.mean(self.rel_eps1 <= threshold)) if self.rel_eps1.size else float("nan")
        f2 = float(np.mean(self.rel_eps2 <= threshold)) if self.rel_eps2.size else float("nan")
        return f1, f2

    def histograms(self, bins=20, upper=None):
        """Shared-bin histograms of both normalized errors as (edges, count1, count2)."""
        top = upper
        if top is None:
            both = np.concatenate([self.rel_eps1, self.rel_eps2])
            top = max(float(both.max()) if both.size else 1.0, SMALL_ERROR)
        edges = np.linspace(0.0, top, bins + 1)
        c1, _ = np.histogram(np.clip(self.rel_eps1, 0, top), edges)
        c2, _ = np.histogram(np.clip(self.rel_eps2, 0, top), edges)
        return edges, c1, c2


def error_terms(C, Y, H) -> ErrorReport:
    """Residuals of ``h_i = C y_i + e_i`` and ``y_i = C^T h_i + e'_i``.

    Pass dragged targets instead of ``Y`` to analyse the relaxed regression.
    """
    C = np.asarray(C, dtype=np.float64)
    Y = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    q, c = C.shape
    if Y.shape[0] != c or H.shape[0] != q or Y.shape[1] != H.shape[1]:
        raise ValueError(f"shape mismatch: C {C.shape}, Y {Y.shape}, H {H.shape}")
    return ErrorReport(H - C @ Y, Y - C.T @ H, float(np.linalg.norm(C)))


def sample_pairs(n, count, seed=0):
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=count)
    j = rng.integers(0, n - 1, size=count)
    j = np.where(j >= i, j + 1, j)
    return np.stack([i, j], axis=1)


def bilipschitz_check(report: ErrorReport, Y, H, pairs, atol=1e-9) -> BiLipschitzResult:
    """Check the two-sided bound on code distance for each pair (i, j).

    ``(1/k)|y_i-y_j| - eps2 <= |h_i-h_j| <= k|y_i-y_j| + eps1`` with
    ``eps1 = |e_i-e_j|`` and ``eps2 = |e'_i-e'_j| / k``. Pairs with equal label
    vectors are checked but excluded from the normalized error arrays.
    """
    Y = np.asarray(getattr(Y, "values", Y), dtype=np.float64)
    H = np.asarray(getattr(H, "values", H), dtype=np.float64)
    pairs = np.asarray(pairs)
    i, j = pairs[:, 0], pairs[:, 1]
    k = report.kappa
    dy = np.linalg.norm(Y[:, i] - Y[:, j], axis=0)
    dh = np.linalg.norm(H[:, i] - H[:, j], axis=0)
    eps1 = np.linalg.norm(report.e[:, i] - report.e[:, j], axis=0)
    eps2 = np.linalg.norm(report.e_prime[:, i] - report.e_prime[:, j], axis=0) / k
    upper = dh <= k * dy + eps1 + atol
    lower = dy / k - eps2 <= dh + atol
    distinct = dy > 0
    return BiLipschitzResult(
        n_pairs=len(pairs),
        n_equal_labels=int(np.count_nonzero(~distinct)),
        upper_holds=upper,
        lower_holds=lower,
        rel_eps1=eps1[distinct] / (k * dy[distinct]),
        rel_eps2=k * eps2[distinct] / dy[distinct],
    )


def synth_dataset(n, c, d1, d2, noise=0.1, seed=0):
    """Two-modality data with 1-2 labels per sample.

    Each class has a Gaussian prototype per modality; a sample's features are
    the mean of its label prototypes plus ``noise`` times Gaussian noise.
    Primary labels cycle through the classes (so class sizes are balanced up
    to rounding); about half the samples get a second, different label.

    Returns ``(x1, x2, labels)`` with uncentered features.
    """
    if not n >= c >= 1:
        raise ValueError(f"need n >= c >= 1, got n={n}, c={c}")
    rng = np.random.default_rng(seed)
    protos1 = rng.standard_normal((d1, c))
    protos2 = rng.standard_normal((d2, c))
    primary = rng.permutation(np.arange(n) % c)
    Y = np.zeros((c, n))
    Y[primary, np.arange(n)] = 1.0
    if c > 1:
        second = rng.random(n) < 0.5
        offset = rng.integers(1, c, size=n)
        extra = (primary + offset) % c
        Y[extra[second], np.flatnonzero(second)] = 1.0
    weights = Y / Y.sum(axis=0)
    x1 = protos1 @ weights + noise * rng.standard_normal((d1, n))
    x2 = protos2 @ weights + noise * rng.standard_normal((d2, n))
    return FeatureMatrix(x1, 1), FeatureMatrix(x2, 2), LabelMatrix(Y)


@dataclass(frozen=True)
class StabilityConfig:
    c: int = 4
    d1: int = 32
    d2: int = 16
    noise: float = 0.3
    q: int = 16
    k: int = 64
    batch: int = 64
    gamma: float = 1e-2
    mu: float = 1e-2
    theta: float = 1e-3
    delta: float = 1e3
    max_iters: int = 20
    modality: int = 1


@dataclass(frozen=True)
class StabilityReport:
    sizes: tuple
    perturbations: np.ndarray  # (seeds, sizes) Frobenius norms
    bounds: np.ndarray  # (seeds, sizes) stability bound with empirical M
    slope: float
    intercept: float
    excluded: tuple  # sizes dropped from the fit (zero perturbation)

    @property
    def mean_perturbation(self):
        return self.perturbations.mean(axis=0)


def _perturbation(cfg, x_train, labels, phi_batch, phi_swap, swap_index, km, seed, n):
    t = cfg.modality
    phi1 = apply_kernel(km[0], x_train[0])
    phi2 = apply_kernel(km[1], x_train[1])
    hp = Hyperparams(q=cfg.q, mu=cfg.mu, theta=cfg.theta, delta=cfg.delta,
                     max_iters=cfg.max_iters, tol=1e-5)
    H = fit_codes(phi1, phi2, labels, hp, seed).H
    phi = (phi1, phi2)[t - 1]
    m = phi_batch.shape[1]
    d = phi.shape[0]
    # Normalized-loss regularizer gamma/(q d) against 1/(q (n+m)) data terms.
    gamma_u = cfg.gamma * (n + m) / d
    pm = fit_offline(H, phi, gamma_u, t)
    p_a, hs_a, _ = fit_online(pm, phi_batch)
    swapped = phi_batch.copy()
    swapped[:, swap_index] = phi_swap
    p_b, _, _ = fit_online(pm, swapped)
    diff = float(np.linalg.norm(p_a.P - p_b.P))
    big_m = float(np.max(np.linalg.norm(H - pm.P @ phi, axis=0)))
    bound = 2 * d ** 2 * big_m / (cfg.gamma * (n + m))
    return diff, bound


def stability_experiment(sizes, cfg: StabilityConfig = StabilityConfig(), seeds=(0, 1, 2, 3, 4),
                         identical_swap=False):
    """Measure how much a streaming refit moves when one batch sample is replaced.

    For every seed a single data pool is drawn; the training set for size
    ``n`` is its first ``n`` samples, the streaming batch and the replacement
    sample come from a held-out tail, and the kernel maps are fitted once on
    the smallest training set so features are comparable across sizes. The
    slope is fitted to log(mean perturbation) against log(n + m).
    """
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 3 or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("need at least three strictly increasing sizes")
    m = cfg.batch
    n_max = sizes[-1]
    perturb = np.zeros((len(seeds), len(sizes)))
    bounds = np.zeros_like(perturb)
    for si, seed in enumerate(seeds):
        x1, x2, labels = synth_dataset(n_max + m + 1, cfg.c, cfg.d1, cfg.d2, cfg.noise, seed)
        c1, c2 = zero_center(x1), zero_center(x2)
        base = sizes[0]
        km = (
            fit_kernel(FeatureMatrix(c1.values[:, :base], 1), min(cfg.k, base), min(500, base), seed),
            fit_kernel(FeatureMatrix(c2.values[:, :base], 2), min(cfg.k, base), min(500, base), seed + 1),
        )
        kt = km[cfg.modality - 1]
        raw = (c1.values, c2.values)[cfg.modality - 1]
        phi_batch = apply_kernel(kt, raw[:, n_max:n_max + m])
        swap_index = int(np.random.default_rng(seed).integers(m))
        if identical_swap:
            phi_swap = phi_batch[:, swap_index].copy()
        else:
            phi_swap = apply_kernel(kt, raw[:, n_max + m:n_max + m + 1])[:, 0]
        for ni, n in enumerate(sizes):
            perturb[si, ni], bounds[si, ni] = _perturbation(
                cfg, (c1.values[:, :n], c2.values[:, :n]), labels.values[:, :n],
                phi_batch, phi_swap, swap_index, km, seed, n,
            )
    mean = perturb.mean(axis=0)
    keep = mean > 0
    excluded = tuple(s for s, ok in zip(sizes, keep) if not ok)
    if keep.sum() >= 2:
        x = np.log(np.asarray(sizes, dtype=np.float64)[keep] + m)
        slope, intercept = np.polyfit(x, np.log(mean[keep]), 1)
    else:
        slope = intercept = float("nan")
    return StabilityReport(sizes, perturb, bounds, float(slope), float(intercept), excluded)
