"""Out-of-sample hash functions: offline ridge fit, streaming refits, encoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .data import HashCodeMatrix, apply_center
from .kernel import apply_kernel
from .trainer import sign

DEFAULT_GAMMA = 1e-2
DEFAULT_MAX_ROUNDS = 20


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProjectionModel:
    """Hash function ``h = sgn(P phi(x))`` for one modality.

    ``cross`` (q, k) and ``gram`` (k, k) accumulate ``H Phi^T`` and
    ``Phi Phi^T`` over every sample seen so far, so streaming batches can be
    folded in without revisiting old data.
    """

    P: np.ndarray
    gamma: float
    cross: np.ndarray | None = None
    gram: np.ndarray | None = None
    modality_id: int = 1

    @classmethod
    def empty(cls, q, k, gamma=DEFAULT_GAMMA, modality_id=1):
        """A model with zero history; its first streaming batch is an offline fit."""
        return cls(np.zeros((q, k)), gamma, np.zeros((q, k)), np.zeros((k, k)), modality_id)

    @property
    def has_cache(self):
        return self.cross is not None and self.gram is not None


def _solve(cross, gram, gamma):
    """Return ``cross (gram + gamma I)^{-1}`` via a Cholesky factorization."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    G = gram + gamma * np.eye(gram.shape[0])
    try:
        factor = cho_factor(G, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise FloatingPointError(f"regularized Gram matrix is not positive definite: {exc}") from None
    return cho_solve(factor, cross.T).T


def fit_offline(H, phi, gamma=DEFAULT_GAMMA, modality_id=1) -> ProjectionModel:
    """Ridge regression of codes ``H`` (q, n) on features ``phi`` (k, n)."""
    H = H.values if isinstance(H, HashCodeMatrix) else np.asarray(H, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if H.shape[1] != phi.shape[1]:
        raise ValueError(f"codes have {H.shape[1]} columns, features have {phi.shape[1]}")
    cross = H @ phi.T
    gram = phi @ phi.T
    gram = 0.5 * (gram + gram.T)
    return ProjectionModel(_solve(cross, gram, gamma), gamma, cross, gram, modality_id)


def project_codes(P, phi):
    return sign(P @ phi)


def encode(pm, km, center_vector, x) -> HashCodeMatrix:
    """Hash raw queries ``x`` (d, p) with the training center and kernel.

    ``km`` may be None for models trained on raw features.
    """
    P = pm.P if isinstance(pm, ProjectionModel) else np.asarray(pm, dtype=np.float64)
    x = apply_center(x, np.asarray(center_vector, dtype=np.float64))
    phi = x if km is None else apply_kernel(km, x)
    if phi.shape[0] != P.shape[1]:
        raise ValueError(f"features have {phi.shape[0]} rows, projection expects {P.shape[1]}")
    return HashCodeMatrix(project_codes(P, phi))


def fit_online(pm: ProjectionModel, phi_s, max_rounds=DEFAULT_MAX_ROUNDS):
    """Refit a projection on a streaming batch of kernel features ``phi_s`` (k, m).

    Alternates the ridge solution over history plus batch with re-hashing the
    batch, starting from the codes the current projection assigns, until the
    batch codes stop changing or ``max_rounds`` is reached. The batch is then
    folded into the cached statistics.

    Returns
    -------
    (ProjectionModel, ndarray, int)
        Updated model, batch codes (q, m) and the number of rounds run.
    """
    if not pm.has_cache:
        raise StateError("projection has no cached statistics; fit it offline first")
    phi_s = np.asarray(phi_s, dtype=np.float64)
    if phi_s.ndim != 2 or phi_s.shape[1] == 0:
        raise ValueError("empty batch")
    if phi_s.shape[0] != pm.P.shape[1]:
        raise ValueError(f"batch has {phi_s.shape[0]} feature rows, projection expects {pm.P.shape[1]}")

    gram_s = phi_s @ phi_s.T
    gram = pm.gram + 0.5 * (gram_s + gram_s.T)
    factor = cho_factor(gram + pm.gamma * np.eye(gram.shape[0]), lower=True)

    Hs = project_codes(pm.P, phi_s)
    rounds = 0
    while rounds < max_rounds:
        rounds += 1
        P = cho_solve(factor, (pm.cross + Hs @ phi_s.T).T).T
        new_Hs = project_codes(P, phi_s)
        if np.array_equal(new_Hs, Hs):
            break
        Hs = new_Hs

    cross = pm.cross + Hs @ phi_s.T
    P = cho_solve(factor, cross.T).T
    return ProjectionModel(P, pm.gamma, cross, gram, pm.modality_id), Hs, rounds
