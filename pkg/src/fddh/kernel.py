"""Anchor-based RBF feature map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

DEFAULT_ANCHORS = 500
DEFAULT_WIDTH_SAMPLES = 500


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class KernelMap:
    anchors: np.ndarray  # (d, k)
    width: float
    modality_id: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        anchors = np.array(self.anchors, dtype=np.float64)
        if anchors.ndim != 2 or anchors.shape[1] < 1:
            raise ValueError(f"anchors must be (d, k) with k >= 1, got {anchors.shape}")
        if not self.width > 0:
            raise ValueError(f"kernel width must be positive, got {self.width}")
        anchors.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "width", float(self.width))

    @property
    def num_anchors(self):
        return self.anchors.shape[1]

    @property
    def input_dim(self):
        return self.anchors.shape[0]

    def __call__(self, x):
        return apply_kernel(self, x)


def fit_kernel(x, k=None, m=None, seed=0) -> KernelMap:
    """Sample ``k`` anchors and estimate the RBF width from ``m`` samples.

    The width is the mean pairwise Euclidean distance over ``m`` training
    columns drawn without replacement. ``k`` and ``m`` default to 500 and are
    capped at the training size when left unset.

    Parameters
    ----------
    x : FeatureMatrix
        Zero-centered training features of one modality.
    k, m : int, optional
        Number of anchors and of width-estimation samples.
    seed : int
        Seed for both draws (anchors first, then width samples).
    """
    values = x.values
    n = values.shape[1]
    k = min(DEFAULT_ANCHORS, n) if k is None else int(k)
    m = min(DEFAULT_WIDTH_SAMPLES, n) if m is None else int(m)
    if not 1 <= k <= n:
        raise ValueError(f"number of anchors k={k} must lie in [1, n={n}]")
    if not 2 <= m <= n:
        raise ValueError(f"width sample size m={m} must lie in [2, n={n}]")
    rng = np.random.default_rng(seed)
    anchor_idx = rng.choice(n, size=k, replace=False)
    width_idx = rng.choice(n, size=m, replace=False)
    width = float(np.mean(pdist(values[:, width_idx].T)))
    if width == 0.0:
        raise DegenerateDataError("all width-estimation samples are identical; kernel width is zero")
    return KernelMap(values[:, anchor_idx], width, x.modality_id, seed)


def apply_kernel(km: KernelMap, x) -> np.ndarray:
    """Map columns of ``x`` (d, p) to RBF similarities against the anchors, (k, p)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != km.input_dim:
        raise ValueError(f"input has shape {x.shape}, expected {km.input_dim} rows")
    if x.shape[1] == 0:
        return np.zeros((km.num_anchors, 0))
    sq = cdist(km.anchors.T, x.T, "sqeuclidean")
    return np.exp(-sq / (2.0 * km.width ** 2))
