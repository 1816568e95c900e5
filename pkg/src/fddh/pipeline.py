"""End-to-end fitted model: centering, kernel maps, codes and hash functions."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import ARCHIVE_VERSION, FeatureMatrix, ModelArchive, apply_center, zero_center
from .kernel import KernelMap, apply_kernel, fit_kernel
from .projector import DEFAULT_GAMMA, ProjectionModel, encode, fit_offline
from .trainer import ConfigurationError, FddhModel, Hyperparams, kernel_features, train_on_features


class UpgradeError(ValueError):
    pass


@dataclass(frozen=True)
class FittedPipeline:
    model: FddhModel
    kernels: tuple  # (KernelMap | None, KernelMap | None)
    centers: tuple  # (ndarray, ndarray)
    projections: tuple  # (ProjectionModel, ProjectionModel)

    def features(self, modality, x):
        """Kernel features of raw data ``x`` for modality 1 or 2."""
        t = _check_modality(modality)
        x = apply_center(x, self.centers[t - 1])
        km = self.kernels[t - 1]
        return x if km is None else apply_kernel(km, x)

    def encode(self, modality, x):
        t = _check_modality(modality)
        return encode(self.projections[t - 1], self.kernels[t - 1], self.centers[t - 1], x)

    def with_projection(self, modality, pm):
        t = _check_modality(modality)
        projections = list(self.projections)
        projections[t - 1] = pm
        return replace(self, projections=tuple(projections))


def _check_modality(modality):
    if modality not in (1, 2):
        raise ValueError(f"modality must be 1 or 2, got {modality!r}")
    return modality


def prepare_features(x1: FeatureMatrix, x2: FeatureMatrix, n_labels, k=None, m=None,
                     seed=0, variant="full"):
    """Center both modalities and fit their kernel maps.

    Returns ``(centered, kernels, phis)`` as pairs. Kernel maps use ``seed``
    and ``seed + 1``; the raw-feature variant gets no kernel maps.
    """
    if x1.shape[1] != x2.shape[1] or x1.shape[1] != n_labels:
        raise ConfigurationError(
            f"sample counts differ: x1 {x1.shape}, x2 {x2.shape}, labels have {n_labels} columns"
        )
    c1 = x1 if x1.centered else zero_center(x1)
    c2 = x2 if x2.centered else zero_center(x2)
    if variant == "no_relax_no_kernel":
        km1 = km2 = None
    else:
        km1 = fit_kernel(c1, k, m, seed)
        km2 = fit_kernel(c2, k, m, seed + 1)
    return (c1, c2), (km1, km2), (kernel_features(c1, km1), kernel_features(c2, km2))


def fit_pipeline(x1: FeatureMatrix, x2: FeatureMatrix, labels, hp: Hyperparams,
                 k=None, m=None, gamma=DEFAULT_GAMMA, seed=0, variant="full",
                 callback=None) -> FittedPipeline:
    """Center raw features, fit kernels, learn codes and offline hash functions.

    All randomness derives from ``seed``.
    """
    (c1, c2), kernels, (phi1, phi2) = prepare_features(
        x1, x2, labels.values.shape[1], k, m, seed, variant)
    model = train_on_features(variant, phi1, phi2, labels.values, hp, seed, callback)
    p1 = fit_offline(model.H, phi1, gamma, 1)
    p2 = fit_offline(model.H, phi2, gamma, 2)
    return FittedPipeline(model, kernels, (c1.center_vector, c2.center_vector), (p1, p2))


def to_archive(fp: FittedPipeline, extra_metadata=None) -> ModelArchive:
    m = fp.model
    hp = m.hyperparams
    sections = {
        "C": m.C, "R_1": m.R1, "R_2": m.R2, "H": m.H, "YBAR": m.Ybar,
        "TRACE": np.asarray(m.objective_trace, dtype=np.float64)[:, None],
    }
    meta = {
        "format_version": str(ARCHIVE_VERSION),
        "q": str(hp.q), "c": str(m.C.shape[1]),
        "mu": repr(hp.mu), "theta": repr(hp.theta), "delta": repr(hp.delta),
        "tol": repr(hp.tol), "max_iters": str(hp.max_iters),
        "variant": m.variant, "seed": str(m.seed),
        "gamma": repr(fp.projections[0].gamma),
    }
    for t in (1, 2):
        km = fp.kernels[t - 1]
        pm = fp.projections[t - 1]
        sections[f"CENTER_{t}"] = fp.centers[t - 1][:, None]
        sections[f"P_{t}"] = pm.P
        if pm.has_cache:
            sections[f"GRAM_{t}"] = pm.gram
            sections[f"CROSS_{t}"] = pm.cross
        if km is not None:
            sections[f"ANCHORS_{t}"] = km.anchors
            meta[f"sigma_{t}"] = repr(km.width)
            meta[f"k_{t}"] = str(km.num_anchors)
            meta[f"kernel_seed_{t}"] = str(km.rng_seed)
        else:
            meta[f"k_{t}"] = str(pm.P.shape[1])
    meta.update(extra_metadata or {})
    return ModelArchive(sections, meta)


def from_archive(archive: ModelArchive, require_cache=False) -> FittedPipeline:
    s, meta = archive.sections, archive.metadata
    hp = Hyperparams(
        q=int(meta.get("q", s["C"].shape[0])),
        mu=float(meta.get("mu", 1e-2)), theta=float(meta.get("theta", 1e-3)),
        delta=float(meta.get("delta", 1e3)), max_iters=int(meta.get("max_iters", 50)),
        tol=float(meta.get("tol", 1e-5)),
    )
    trace = tuple(s["TRACE"].ravel().tolist()) if "TRACE" in s else ()
    ybar = s.get("YBAR", np.zeros((s["C"].shape[1], s["H"].shape[1])))
    model = FddhModel(s["C"], s["R_1"], s["R_2"], ybar, s["H"], hp, trace,
                      meta.get("variant", "full"), int(meta.get("seed", 0)))
    gamma = float(meta.get("gamma", DEFAULT_GAMMA))
    kernels, centers, projections = [], [], []
    for t in (1, 2):
        if f"P_{t}" not in s:
            raise UpgradeError(f"archive has no projection section P_{t}")
        if f"ANCHORS_{t}" in s:
            kernels.append(KernelMap(s[f"ANCHORS_{t}"], float(meta[f"sigma_{t}"]), t,
                                     int(meta.get(f"kernel_seed_{t}", 0))))
        else:
            kernels.append(None)
        centers.append(s[f"CENTER_{t}"].ravel() if f"CENTER_{t}" in s else np.zeros(
            kernels[-1].input_dim if kernels[-1] is not None else s[f"P_{t}"].shape[1]))
        has_cache = f"GRAM_{t}" in s and f"CROSS_{t}" in s
        if require_cache and not has_cache:
            raise UpgradeError(
                f"archive lacks cached statistics GRAM_{t}/CROSS_{t}; retrain with this version to enable updates"
            )
        projections.append(ProjectionModel(
            s[f"P_{t}"], gamma,
            s.get(f"CROSS_{t}") if has_cache else None,
            s.get(f"GRAM_{t}") if has_cache else None, t,
        ))
    return FittedPipeline(model, tuple(kernels), tuple(centers), tuple(projections))
