"""The vMF mixture classifier: parameters, densities, posterior and cross-entropy."""

from dataclasses import dataclass, field
import json
import logging

import numpy as np
from scipy.special import logsumexp

from .errors import DomainError
from .specfn import log_norm_const

__all__ = [
    "VmfParams",
    "VmfClassifier",
    "FeatureBatch",
    "UNIT_TOL",
    "project_to_sphere",
    "as_unit",
    "log_pdf",
    "logits",
    "posterior",
    "log_posterior",
    "performance_loss",
    "uniform_prior",
    "save_checkpoint",
    "load_checkpoint",
    "dumps_checkpoint",
    "loads_checkpoint",
]

logger = logging.getLogger(__name__)

# Inputs within this distance of unit norm are silently re-projected.
UNIT_TOL = 1e-6
_PARAM_NORM_TOL = 1e-9
_PRIOR_TOL = 1e-9


@dataclass(frozen=True)
class VmfParams:
    """One vMF component: compactness ``kappa`` and unit orientation ``mu``."""

    kappa: float
    mu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        if mu.ndim != 1:
            raise DomainError("mu must be a vector")
        kappa = float(self.kappa)
        if not np.isfinite(kappa) or kappa <= 0.0:
            raise DomainError(f"kappa must be positive and finite, got {self.kappa}")
        if abs(np.linalg.norm(mu) - 1.0) > _PARAM_NORM_TOL:
            raise DomainError(f"mu must have unit norm, got norm {np.linalg.norm(mu)}")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "mu", mu)

    @property
    def dim(self):
        return self.mu.shape[0]


@dataclass
class VmfClassifier:
    """C-class vMF mixture with compactness ``kappa`` (C,), orientations ``mu`` (C, d)
    and class prior ``prior`` (C,). Class order is label order.
    """

    kappa: np.ndarray
    mu: np.ndarray
    prior: np.ndarray = field(default=None)

    def __post_init__(self):
        self.kappa = np.array(self.kappa, dtype=np.float64).reshape(-1)
        self.mu = np.array(self.mu, dtype=np.float64)
        if self.mu.ndim != 2 or self.mu.shape[0] != self.kappa.shape[0]:
            raise DomainError(
                f"mu must be (C, d) with C={self.kappa.shape[0]}, got shape {self.mu.shape}"
            )
        if self.prior is None:
            self.prior = uniform_prior(self.n_classes)
        self.prior = np.array(self.prior, dtype=np.float64).reshape(-1)
        self.validate()

    def validate(self):
        if self.n_classes < 1:
            raise DomainError("classifier needs at least one class")
        if not np.all(np.isfinite(self.kappa)) or np.any(self.kappa <= 0.0):
            raise DomainError(f"all kappa must be positive and finite, got {self.kappa}")
        norms = np.linalg.norm(self.mu, axis=1)
        if np.any(np.abs(norms - 1.0) > _PARAM_NORM_TOL):
            raise DomainError(f"orientations must be unit vectors, norms {norms}")
        if self.prior.shape != self.kappa.shape:
            raise DomainError("prior length must equal the number of classes")
        if np.any(self.prior < 0.0) or abs(self.prior.sum() - 1.0) > _PRIOR_TOL:
            raise DomainError(f"prior must be a probability vector, got {self.prior}")

    @classmethod
    def from_params(cls, params, prior=None):
        params = list(params)
        dims = {p.dim for p in params}
        if len(dims) != 1:
            raise DomainError(f"all classes must share one dimension, got {sorted(dims)}")
        return cls(
            kappa=np.array([p.kappa for p in params]),
            mu=np.stack([p.mu for p in params]),
            prior=prior,
        )

    @property
    def dim(self):
        return self.mu.shape[1]

    @property
    def n_classes(self):
        return self.kappa.shape[0]

    @property
    def classes(self):
        return [VmfParams(k, m) for k, m in zip(self.kappa, self.mu)]

    def with_prior(self, prior):
        return VmfClassifier(self.kappa.copy(), self.mu.copy(), prior)

    def with_kappa(self, kappa):
        return VmfClassifier(kappa, self.mu.copy(), self.prior.copy())

    def copy(self):
        return VmfClassifier(self.kappa.copy(), self.mu.copy(), self.prior.copy())


@dataclass
class FeatureBatch:
    """Raw features (N, d) with integer labels (N,)."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise DomainError(f"features must be a 2-D array, got shape {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DomainError("features and labels differ in length")
        if not np.all(np.isfinite(self.features)):
            raise DomainError("features must be finite")
        if np.any(np.linalg.norm(self.features, axis=1) == 0.0):
            raise DomainError("zero feature vectors cannot be projected onto the sphere")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def projected(self):
        return project_to_sphere(self.features)

    def subset(self, index):
        return FeatureBatch(self.features[index], self.labels[index])


def uniform_prior(n_classes):
    return np.full(n_classes, 1.0 / n_classes)


def project_to_sphere(x):
    """x / ||x||_2, row-wise for a matrix."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DomainError("cannot project non-finite vectors")
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise DomainError("cannot project a zero vector onto the sphere")
    return x / norm


def as_unit(x_tilde):
    """Accept vectors within UNIT_TOL of the sphere and re-project them exactly."""
    x = np.asarray(x_tilde, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise DomainError(f"expected unit vectors, max norm deviation {np.abs(norm - 1.0).max():.3e}")
    return x / norm


def log_pdf(params, x_tilde):
    """log p(x | kappa, mu) = log C_d(kappa) + kappa * x.mu"""
    x = as_unit(x_tilde)
    if x.shape[-1] != params.dim:
        raise DomainError("dimension mismatch between x and mu")
    out = log_norm_const(params.dim, params.kappa) + params.kappa * (x @ params.mu)
    return float(out) if np.ndim(out) == 0 else out


def logits(clf, x_tilde):
    """log prior_i + log C_d(kappa_i) + kappa_i * x.mu_i, shape (..., C)."""
    x = as_unit(x_tilde)
    if x.shape[-1] != clf.dim:
        raise DomainError(f"expected {clf.dim}-dimensional inputs, got {x.shape[-1]}")
    with np.errstate(divide="ignore"):
        log_prior = np.log(clf.prior)
    if not np.any(np.isfinite(log_prior)):
        raise DomainError("prior has no mass on any class")
    bias = log_prior + np.atleast_1d(log_norm_const(clf.dim, clf.kappa))
    return bias + (x @ clf.mu.T) * clf.kappa


def log_posterior(clf, x_tilde):
    z = logits(clf, x_tilde)
    return z - logsumexp(z, axis=-1, keepdims=True)


def posterior(clf, x_tilde):
    """Posterior class probabilities, shape (C,) or (N, C)."""
    return np.exp(log_posterior(clf, x_tilde))


def performance_loss(clf, batch):
    """Mean cross-entropy -log p_{y} over the batch."""
    if len(batch) == 0:
        raise DomainError("performance loss of an empty batch is undefined")
    if batch.labels.min() < 0 or batch.labels.max() >= clf.n_classes:
        raise DomainError("labels out of range")
    lp = log_posterior(clf, batch.projected)
    return float(-lp[np.arange(len(batch)), batch.labels].mean())


def dumps_checkpoint(clf):
    """Serialise a classifier to JSON text; reals are stored as hex floats."""
    doc = {
        "format": "vmfcal-checkpoint/1",
        "dim": int(clf.dim),
        "C": int(clf.n_classes),
        "prior": [float(p).hex() for p in clf.prior],
        "classes": [
            {"kappa": float(k).hex(), "mu": [float(v).hex() for v in m]}
            for k, m in zip(clf.kappa, clf.mu)
        ],
    }
    return json.dumps(doc, indent=1) + "\n"


def loads_checkpoint(text):
    try:
        doc = json.loads(text)
        dim, n = int(doc["dim"]), int(doc["C"])
        prior = np.array([float.fromhex(p) for p in doc["prior"]])
        kappa = np.array([float.fromhex(c["kappa"]) for c in doc["classes"]])
        mu = np.array([[float.fromhex(v) for v in c["mu"]] for c in doc["classes"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed checkpoint: {exc}") from exc
    if mu.shape != (n, dim):
        raise DomainError(f"checkpoint declares C={n}, dim={dim} but holds {mu.shape}")
    return VmfClassifier(kappa, mu, prior)


def save_checkpoint(clf, path):
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint(clf))


def load_checkpoint(path):
    with open(path) as fh:
        return loads_checkpoint(fh.read())
