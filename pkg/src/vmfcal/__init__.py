"""vMF classifiers for long-tailed recognition: special functions, overlap-based
losses, compactness calibration and a desk-scale synthetic test bed."""

from .errors import DegenerateDirectionError, DomainError, NumericalError, VmfError
from .specfn import SpecFnConfig, bessel_ratio, bessel_ratio_deriv, log_bessel_i, log_norm_const
from .vmf_core import (
    FeatureBatch,
    VmfClassifier,
    VmfParams,
    load_checkpoint,
    log_pdf,
    log_posterior,
    logits,
    performance_loss,
    posterior,
    project_to_sphere,
    save_checkpoint,
)
from .overlap import kl_vmf, overlap_coeff, overlap_grads, overlap_matrix
from .losses import LossConfig, cfc_loss, icd_loss, total_loss
from .calibrate import CalibrationConfig, GenericClassifierWeights, SourceKind, calibrate, calibrate_generic
from .synth import SynthSpec, make_dataset, pareto_counts, sample_vmf
from .trainer import TrainConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "VmfError",
    "DomainError",
    "DegenerateDirectionError",
    "NumericalError",
    "SpecFnConfig",
    "bessel_ratio",
    "bessel_ratio_deriv",
    "log_bessel_i",
    "log_norm_const",
    "VmfParams",
    "VmfClassifier",
    "FeatureBatch",
    "project_to_sphere",
    "log_pdf",
    "logits",
    "log_posterior",
    "posterior",
    "performance_loss",
    "save_checkpoint",
    "load_checkpoint",
    "kl_vmf",
    "overlap_coeff",
    "overlap_grads",
    "overlap_matrix",
    "LossConfig",
    "icd_loss",
    "cfc_loss",
    "total_loss",
    "SourceKind",
    "CalibrationConfig",
    "GenericClassifierWeights",
    "calibrate",
    "calibrate_generic",
    "SynthSpec",
    "make_dataset",
    "pareto_counts",
    "sample_vmf",
    "TrainConfig",
    "train",
    "evaluate",
    "predict",
]
