"""Cross-modal discrete hashing with orthogonal semantic embeddings."""

from .data import (
    FeatureMatrix, HashCodeMatrix, LabelMatrix, ModelArchive,
    load_matrix, load_model, save_matrix, save_model, zero_center,
)
from .kernel import KernelMap, apply_kernel, fit_kernel
from .pipeline import FittedPipeline, fit_pipeline
from .projector import ProjectionModel, encode, fit_offline, fit_online
from .retrieval import average_precision, hamming_distance, mean_ap, pr_curve, rank, top_k_precision
from .trainer import FddhModel, Hyperparams, objective, procrustes_max, train, train_ablation

__version__ = "0.1.0"
