"""Alternating discrete optimizer for the common binary codes.

Minimizes::

    ||H - C Ybar||^2 + mu ||Phi1 - R1 C Ybar||^2 + theta ||Phi2 - R2 C Ybar||^2
        + delta ||Ybar||^2

over orthonormal-column ``C`` (q, c) and ``R_t`` (k_t, q), binary ``H`` (q, n)
and dragged targets ``Ybar`` (c, n) that stay >= 1 on true classes and <= 0
elsewhere. Every block update is the exact minimizer of its subproblem, so the
objective never increases.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import FeatureMatrix, LabelMatrix
from .kernel import KernelMap, apply_kernel

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-10
VARIANTS = ("full", "no_relax", "no_relax_no_kernel")

# (mu, theta, delta) tuned per benchmark.
PRESETS = {
    "pascal-voc": {"mu": 1.0, "theta": 1e-3, "delta": 1e3},
    "mirflickr": {"mu": 1e-2, "theta": 1e-3, "delta": 1e3},
    "nus-wide": {"mu": 1e-3, "theta": 1e-3, "delta": 1e3},
}


class ConfigurationError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    def __init__(self, message, iteration):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class Hyperparams:
    q: int = 32
    mu: float = 1e-2
    theta: float = 1e-3
    delta: float = 1e3
    max_iters: int = 50
    tol: float = 1e-5

    def __post_init__(self):
        if self.q < 1:
            raise ConfigurationError(f"code length q must be >= 1, got {self.q}")
        for name in ("mu", "theta", "delta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be >= 0")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")

    @classmethod
    def from_preset(cls, name, **overrides):
        try:
            preset = PRESETS[name]
        except KeyError:
            raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**preset, **overrides})


@dataclass
class TrainState:
    C: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    Ybar: np.ndarray
    H: np.ndarray
    B: np.ndarray
    objective_trace: list = field(default_factory=list)


@dataclass(frozen=True)
class FddhModel:
    C: np.ndarray
    R1: np.ndarray
    R2: np.ndarray
    Ybar: np.ndarray
    H: np.ndarray
    hyperparams: Hyperparams
    objective_trace: tuple
    variant: str = "full"
    seed: int = 0

    @property
    def iterations(self):
        return len(self.objective_trace) - 1


def sign(a):
    """Entrywise sign with sign(0) = +1."""
    return np.where(a >= 0, 1.0, -1.0)


def procrustes_max(M, r=None):
    """Maximize ``Tr(M Z)`` over ``Z`` with orthonormal columns.

    For ``M`` of shape (a, b) returns ``Z = V U^T`` of shape (b, a) built from
    the rank-``r`` SVD ``M ~ U S V^T``; the attained trace is the sum of the
    top ``r`` singular values. An all-zero ``M`` makes every feasible ``Z``
    optimal, and the leading columns of the identity are returned.
    """
    M = np.asarray(M, dtype=np.float64)
    a, b = M.shape
    r = min(a, b) if r is None else r
    if r > min(a, b):
        raise ConfigurationError(f"rank {r} exceeds min{M.shape}")
    if not np.all(np.isfinite(M)):
        raise FloatingPointError("non-finite entries in Procrustes input")
    if not M.any():
        return np.eye(b, a)
    U, _, Vt = np.linalg.svd(M, full_matrices=False)
    return Vt[:r].T @ U[:, :r].T


def dragging_directions(Y):
    return np.where(Y == 1, 1.0, -1.0)


def objective(state, phi1, phi2, hp, delta=None):
    """Full objective value for ``state``; ``delta`` overrides ``hp.delta``."""
    delta = hp.delta if delta is None else delta
    S = state.C @ state.Ybar
    if phi1.shape[1] != S.shape[1] or phi2.shape[1] != S.shape[1]:
        raise ValueError("sample counts of features and targets differ")
    value = np.sum((state.H - S) ** 2)
    value += hp.mu * np.sum((phi1 - state.R1 @ S) ** 2)
    value += hp.theta * np.sum((phi2 - state.R2 @ S) ** 2)
    value += delta * np.sum(state.Ybar ** 2)
    return float(value)


def update_C(state, phi1, phi2, hp):
    Yb = state.Ybar
    Q = Yb @ state.H.T
    Q += hp.mu * ((Yb @ phi1.T) @ state.R1)
    Q += hp.theta * ((Yb @ phi2.T) @ state.R2)
    return procrustes_max(Q, r=Q.shape[0])


def update_R(state, phi, t=None):
    """New ``R_t`` from the SVD of ``C Ybar Phi_t^T``."""
    q = state.C.shape[0]
    if phi.shape[0] < q:
        raise ConfigurationError(
            f"modality {t or '?'} has {phi.shape[0]} kernel features, fewer than q={q}"
        )
    M = state.C @ (state.Ybar @ phi.T)
    return procrustes_max(M, r=q)


def update_Ybar(state, phi1, phi2, hp, Y):
    C = state.C
    W = C.T @ state.H
    W += hp.mu * ((C.T @ state.R1.T) @ phi1)
    W += hp.theta * ((C.T @ state.R2.T) @ phi2)
    W /= 1.0 + hp.mu + hp.theta + hp.delta
    return np.where(Y == 1, np.maximum(W, 1.0), np.minimum(W, 0.0))


def update_H(state):
    return sign(state.C @ state.Ybar)


def init_state(Y, k1, k2, q, seed):
    c = Y.shape[0]
    rng = np.random.default_rng(seed)
    C = np.linalg.qr(rng.standard_normal((q, c)))[0]
    R1 = np.linalg.qr(rng.standard_normal((k1, q)))[0]
    R2 = np.linalg.qr(rng.standard_normal((k2, q)))[0]
    H = rng.choice([-1.0, 1.0], size=(q, Y.shape[1]))
    return TrainState(C, R1, R2, Y.astype(np.float64).copy(), H, dragging_directions(Y))


def _ortho_gap(A):
    return np.max(np.abs(A.T @ A - np.eye(A.shape[1])))


def _check_state(state, Y, iteration, relax):
    for name in ("C", "R1", "R2"):
        gap = _ortho_gap(getattr(state, name))
        if not gap < ORTHO_TOL:
            raise ConsistencyError(f"{name} lost orthonormal columns (gap {gap:.3e})", iteration)
    if relax and np.any((state.Ybar - Y) * state.B < -1e-12):
        raise ConsistencyError("dragged targets left the feasible set", iteration)


def fit_codes(phi1, phi2, Y, hp, seed=0, relax=True, callback=None):
    """Run the alternating optimizer on precomputed features.

    ``phi1``/``phi2`` are (k_t, n) feature matrices and ``Y`` the (c, n) zero-one
    labels. With ``relax=False`` the targets stay frozen at ``Y`` and the
    dragging penalty is dropped. ``callback(iteration, state)`` is invoked
    after every completed iteration. Returns the final :class:`TrainState`.
    """
    Y = np.asarray(Y, dtype=np.float64)
    c, n = Y.shape
    if phi1.shape[1] != n or phi2.shape[1] != n:
        raise ConfigurationError(
            f"sample counts differ: phi1 {phi1.shape}, phi2 {phi2.shape}, labels {Y.shape}"
        )
    if hp.q < c:
        raise ConfigurationError(f"code length q={hp.q} is smaller than the number of classes c={c}")
    for t, phi in ((1, phi1), (2, phi2)):
        if phi.shape[0] < hp.q:
            raise ConfigurationError(f"modality {t} has {phi.shape[0]} features, fewer than q={hp.q}")

    delta = hp.delta if relax else 0.0
    state = init_state(Y, phi1.shape[0], phi2.shape[0], hp.q, seed)
    state.objective_trace.append(objective(state, phi1, phi2, hp, delta))

    for it in range(1, hp.max_iters + 1):
        state.C = update_C(state, phi1, phi2, hp)
        state.R1 = update_R(state, phi1, 1)
        state.R2 = update_R(state, phi2, 2)
        state.H = update_H(state)
        if relax:
            state.Ybar = update_Ybar(state, phi1, phi2, hp, Y)
        _check_state(state, Y, it, relax)
        prev = state.objective_trace[-1]
        obj = objective(state, phi1, phi2, hp, delta)
        state.objective_trace.append(obj)
        if callback is not None:
            callback(it, state)
        log.debug("iteration %d objective %.6g", it, obj)
        if abs(prev - obj) / max(prev, 1e-12) < hp.tol:
            break

    if hp.max_iters > 0:
        state.H = update_H(state)
    return state


def _to_model(state, hp, variant, seed):
    arrays = {}
    for name in ("C", "R1", "R2", "Ybar", "H"):
        a = getattr(state, name).copy()
        a.setflags(write=False)
        arrays[name] = a
    return FddhModel(
        hyperparams=hp, objective_trace=tuple(state.objective_trace),
        variant=variant, seed=seed, **arrays,
    )


def kernel_features(x, km):
    """Kernel features of training data, or the centered raw features when ``km`` is None."""
    values = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    return values.copy() if km is None else apply_kernel(km, values)


def train(x1: FeatureMatrix, x2: FeatureMatrix, labels: LabelMatrix,
          km1: KernelMap, km2: KernelMap, hp: Hyperparams, seed=0, callback=None) -> FddhModel:
    """Learn common codes from two zero-centered modalities and their labels."""
    return train_ablation("full", x1, x2, labels, km1, km2, hp, seed, callback)


def train_ablation(variant, x1, x2, labels, km1, km2, hp, seed=0, callback=None) -> FddhModel:
    """Train one of the variants ``full``, ``no_relax`` or ``no_relax_no_kernel``.

    ``no_relax`` keeps the targets at the raw labels; ``no_relax_no_kernel``
    also replaces the kernel features with the centered raw features (the
    kernel maps are ignored and may be None).
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if x1.shape[1] != x2.shape[1] or x1.shape[1] != labels.values.shape[1]:
        raise ConfigurationError(
            f"sample counts differ: x1 {x1.shape}, x2 {x2.shape}, labels {labels.values.shape}"
        )
    if variant == "no_relax_no_kernel":
        phi1, phi2 = kernel_features(x1, None), kernel_features(x2, None)
    else:
        phi1, phi2 = kernel_features(x1, km1), kernel_features(x2, km2)
    return train_on_features(variant, phi1, phi2, labels.values, hp, seed, callback)


def train_on_features(variant, phi1, phi2, Y, hp, seed=0, callback=None) -> FddhModel:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    state = fit_codes(phi1, phi2, Y, hp, seed, relax=variant == "full", callback=callback)
    return _to_model(state, hp, variant, seed)
