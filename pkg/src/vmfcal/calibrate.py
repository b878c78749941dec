"""Post-training compactness calibration.

Average overlaps o_i are min-max rescaled to the compactness range,

    o_hat_i = (o_i - o_min) / (o_max - o_min) * (k_max - k_min) + k_min,

and the compactness is reset to the geometric interpolation
k_hat_i = k_i**alpha * o_hat_i**(1 - alpha). Inference then uses ``test_prior``
(uniform by default) instead of the training prior.

Linear, tau-norm and causal classifier weights are mapped to (kappa, mu)
pairs so the same procedure applies to them.
"""

from dataclasses import dataclass, replace
import csv
import enum
import logging

import numpy as np

from .errors import DomainError
from .overlap import overlap_matrix
from .vmf_core import VmfClassifier, logits, project_to_sphere, uniform_prior

__all__ = [
    "SourceKind",
    "CalibrationConfig",
    "GenericClassifierWeights",
    "ALPHA_GRID",
    "to_vmf",
    "from_vmf",
    "kappa_from_norm",
    "norm_from_kappa",
    "normalize_overlaps",
    "calibrate",
    "calibrate_generic",
    "read_weights",
    "write_weights",
]

logger = logging.getLogger(__name__)

ALPHA_GRID = tuple(round(0.1 * i, 1) for i in range(11))


class SourceKind(str, enum.Enum):
    VMF = "vmf"
    LINEAR = "linear"
    TAU_NORM = "tau_norm"
    CAUSAL = "causal"


@dataclass(frozen=True)
class CalibrationConfig:
    alpha: float = 1.0
    source_kind: SourceKind = SourceKind.VMF
    tau: float = 0.7
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "source_kind", SourceKind(self.source_kind))
        if not (0.0 <= self.alpha <= 1.0):
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.source_kind is SourceKind.TAU_NORM and self.tau >= 1.0:
            raise DomainError(f"tau must be < 1 for the tau-norm map, got {self.tau}")
        if self.source_kind is SourceKind.CAUSAL and not self.gamma > 0.0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")


@dataclass
class GenericClassifierWeights:
    """Weight rows (C, d) of a matrix classifier, or a VmfClassifier when kind is vmf."""

    kind: SourceKind
    weights: object
    prior: np.ndarray = None

    def __post_init__(self):
        self.kind = SourceKind(self.kind)
        if self.kind is SourceKind.VMF:
            if not isinstance(self.weights, VmfClassifier):
                raise DomainError("kind 'vmf' expects a VmfClassifier")
            return
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DomainError("weights must be a (C, d) matrix")
        norms = np.linalg.norm(self.weights, axis=1)
        if np.any(norms == 0.0):
            raise DomainError(f"zero-norm weight row for class {int(np.argmin(norms))}")

    def scores(self, x):
        """Decision scores used for argmax prediction."""
        if self.kind is SourceKind.VMF:
            return logits(self.weights, project_to_sphere(x))
        s = np.asarray(x, dtype=np.float64) @ self.weights.T
        if self.prior is not None:
            s = s + np.log(self.prior)
        return s


def kappa_from_norm(norms, cfg):
    n = np.asarray(norms, dtype=np.float64)
    kind = cfg.source_kind
    if kind is SourceKind.LINEAR:
        return n.copy()
    if kind is SourceKind.TAU_NORM:
        return n ** (1.0 - cfg.tau)
    if kind is SourceKind.CAUSAL:
        return n / (n + cfg.gamma)
    raise DomainError(f"no norm map for kind {kind.value!r}")


def norm_from_kappa(kappa, cfg):
    k = np.asarray(kappa, dtype=np.float64)
    kind = cfg.source_kind
    if kind is SourceKind.LINEAR:
        return k.copy()
    if kind is SourceKind.TAU_NORM:
        return k ** (1.0 / (1.0 - cfg.tau))
    if kind is SourceKind.CAUSAL:
        if np.any((k <= 0.0) | (k >= 1.0)):
            raise DomainError("causal compactness must lie in (0, 1) to be inverted")
        return cfg.gamma * k / (1.0 - k)
    raise DomainError(f"no norm map for kind {kind.value!r}")


def to_vmf(gw, cfg, prior=None):
    """Express classifier weights as a VmfClassifier (prior defaults to uniform)."""
    if gw.kind is SourceKind.VMF:
        return gw.weights
    if gw.kind is not cfg.source_kind:
        raise DomainError(f"weights are {gw.kind.value!r} but config says {cfg.source_kind.value!r}")
    w = gw.weights
    norms = np.linalg.norm(w, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DomainError(f"zero-norm weight row for class {int(zero[0])}")
    mu = w / norms[:, None]
    if prior is None:
        prior = uniform_prior(w.shape[0])
    return VmfClassifier(kappa_from_norm(norms, cfg), mu, prior)


def from_vmf(clf, cfg, prior=None):
    """Rebuild weight rows norm(kappa_i) * mu_i in the representation of ``cfg.source_kind``."""
    if cfg.source_kind is SourceKind.VMF:
        return GenericClassifierWeights(SourceKind.VMF, clf, prior)
    norms = norm_from_kappa(clf.kappa, cfg)
    return GenericClassifierWeights(cfg.source_kind, norms[:, None] * clf.mu, prior)


def normalize_overlaps(o, kappas):
    """Min-max map the average overlaps onto [k_min, k_max].

    If all overlaps are equal the map is undefined and ``kappas`` is returned,
    which makes the calibration an identity.
    """
    o = np.asarray(o, dtype=np.float64)
    k = np.asarray(kappas, dtype=np.float64)
    if o.shape != k.shape or o.size < 2:
        raise DomainError("need matching overlap and compactness vectors of length >= 2")
    o_min, o_max = o.min(), o.max()
    if o_max == o_min:
        logger.warning("all average overlaps are equal; calibration falls back to identity")
        return k.copy()
    k_min, k_max = k.min(), k.max()
    return (o - o_min) / (o_max - o_min) * (k_max - k_min) + k_min


def calibrate(clf, cfg, test_prior=None):
    """Return a new classifier with calibrated compactness and the inference prior."""
    if test_prior is None:
        test_prior = uniform_prior(clf.n_classes)
    alpha = cfg.alpha
    k = clf.kappa
    if k.max() == k.min():
        logger.warning("all compactness values are equal; calibration falls back to identity")
        return VmfClassifier(k.copy(), clf.mu.copy(), test_prior)
    o_hat = normalize_overlaps(overlap_matrix(clf).row_avg, k)
    if np.any(o_hat <= 0.0):
        raise DomainError("normalised overlaps must be positive for geometric interpolation")
    if alpha == 1.0:
        k_hat = k.copy()
    elif alpha == 0.0:
        k_hat = o_hat.copy()
    else:
        k_hat = k**alpha * o_hat ** (1.0 - alpha)
    return VmfClassifier(k_hat, clf.mu.copy(), test_prior)


def calibrate_generic(gw, cfg, test_prior=None):
    """Calibrate any supported classifier kind and rebuild it in its own representation."""
    if gw.kind is not cfg.source_kind:
        cfg = replace(cfg, source_kind=gw.kind)
    clf = to_vmf(gw, cfg)
    n = clf.n_classes
    if test_prior is None:
        test_prior = uniform_prior(n)
    out = calibrate(clf, cfg, test_prior)
    return from_vmf(out, cfg, prior=np.asarray(test_prior, dtype=np.float64))


def write_weights(gw, path, cfg, extra=None):
    """CSV weight matrix with a one-line header naming kind and hyper-parameters.

    ``extra`` adds further key=value pairs (no spaces) to the header.
    """
    w = gw.weights
    tags = "".join(f" {k}={v}" for k, v in (extra or {}).items())
    with open(path, "w", newline="") as fh:
        fh.write(f"# kind={gw.kind.value} tau={cfg.tau!r} gamma={cfg.gamma!r}{tags}\n")
        writer = csv.writer(fh)
        for row in w:
            writer.writerow([repr(float(v)) for v in row])


def read_weights(path):
    """Inverse of write_weights; returns (weights, CalibrationConfig without alpha)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise DomainError(f"{path}: first line must be a '# kind=... ' header")
        fields = dict(tok.split("=", 1) for tok in header.lstrip("#").split())
        rows = [[float(v) for v in r] for r in csv.reader(fh) if r]
    try:
        kind = SourceKind(fields["kind"])
        cfg = CalibrationConfig(
            source_kind=kind,
            tau=float(fields.get("tau", 0.7)),
            gamma=float(fields.get("gamma", 1.0)),
        )
    except (KeyError, ValueError) as exc:
        raise DomainError(f"{path}: bad header {header!r}: {exc}") from exc
    return GenericClassifierWeights(kind, np.array(rows)), cfg
