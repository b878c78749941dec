"""KL divergence between vMF distributions and the overlap coefficient built on it.

    KL(i || j) = log C_d(k_i) - log C_d(k_j) + A_d(k_i) * (k_i - k_j * mu_i.mu_j)
    o(i -> j)  = 1 / (1 + KL(i || j))

The overlap is directed: the first argument is the distribution the
expectation is taken under.
"""

from dataclasses import dataclass
import csv
import logging

import numpy as np

from .errors import DomainError
from .specfn import bessel_ratio, bessel_ratio_deriv, log_norm_const

__all__ = [
    "OverlapGrads",
    "OverlapMatrix",
    "kl_vmf",
    "kl_from_cos",
    "overlap_coeff",
    "overlap_from_cos",
    "overlap_grads",
    "overlap_matrix",
    "KAPPA_SPREAD_WARN",
]

logger = logging.getLogger(__name__)

# Compactness spread above which overlap-based objectives are known to misbehave.
KAPPA_SPREAD_WARN = 100.0


def _check_pair(pi, pj):
    if pi.dim != pj.dim:
        raise DomainError(f"dimension mismatch: {pi.dim} vs {pj.dim}")
    return pi.dim


def kl_from_cos(d, kappa_i, kappa_j, cos_ij):
    """KL(i || j) as a function of the two compactnesses and mu_i.mu_j (broadcasts)."""
    ki = np.asarray(kappa_i, dtype=np.float64)
    kj = np.asarray(kappa_j, dtype=np.float64)
    out = (
        np.asarray(log_norm_const(d, ki))
        - np.asarray(log_norm_const(d, kj))
        + np.asarray(bessel_ratio(d, ki)) * (ki - kj * cos_ij)
    )
    return float(out) if np.ndim(out) == 0 else out


def overlap_from_cos(d, kappa_i, kappa_j, cos_ij):
    return 1.0 / (1.0 + kl_from_cos(d, kappa_i, kappa_j, cos_ij))


def kl_vmf(pi, pj):
    """Closed-form KL divergence between two vMF distributions."""
    d = _check_pair(pi, pj)
    return kl_from_cos(d, pi.kappa, pj.kappa, float(pi.mu @ pj.mu))


def overlap_coeff(pi, pj):
    """Directed overlap coefficient in (0, 1]; 1 means the two are identical."""
    return 1.0 / (1.0 + kl_vmf(pi, pj))


@dataclass(frozen=True)
class OverlapGrads:
    """Partial derivatives of o(i -> j); mu gradients are ambient (not tangent-projected)."""

    overlap: float
    d_kappa_i: float
    d_kappa_j: float
    d_mu_i: np.ndarray
    d_mu_j: np.ndarray
    d_cos: float


def overlap_grads(pi, pj):
    d = _check_pair(pi, pj)
    cos = float(pi.mu @ pj.mu)
    o = overlap_from_cos(d, pi.kappa, pj.kappa, cos)
    a_i = bessel_ratio(d, pi.kappa)
    a_j = bessel_ratio(d, pj.kappa)
    da_i = bessel_ratio_deriv(d, pi.kappa)
    o2 = o * o
    return OverlapGrads(
        overlap=o,
        d_kappa_i=o2 * da_i * (pj.kappa * cos - pi.kappa),
        d_kappa_j=o2 * (a_i * cos - a_j),
        d_mu_i=o2 * pj.kappa * a_i * pj.mu,
        d_mu_j=o2 * pj.kappa * a_i * pi.mu,
        d_cos=o2 * pj.kappa * a_i,
    )


@dataclass
class OverlapMatrix:
    """values[i, j] = o(i -> j) off the diagonal, 1 on it; row_avg[i] = o_i."""

    values: np.ndarray
    row_avg: np.ndarray

    def to_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["row", "col", "value"])
            n = self.values.shape[0]
            for i in range(n):
                for j in range(n):
                    w.writerow([i, j, repr(float(self.values[i, j]))])


def _pairwise_terms(clf):
    d = clf.dim
    k = clf.kappa
    logc = np.atleast_1d(log_norm_const(d, k))
    a = np.atleast_1d(bessel_ratio(d, k))
    cos = clf.mu @ clf.mu.T
    kl = logc[:, None] - logc[None, :] + a[:, None] * (k[:, None] - k[None, :] * cos)
    return cos, a, kl


def overlap_matrix(clf):
    n = clf.n_classes
    if n < 2:
        raise DomainError("overlap matrix needs at least two classes")
    spread = clf.kappa.max() / clf.kappa.min()
    if spread > KAPPA_SPREAD_WARN:
        logger.warning("compactness spread max/min = %.1f exceeds %.0f", spread, KAPPA_SPREAD_WARN)
    _, _, kl = _pairwise_terms(clf)
    values = 1.0 / (1.0 + kl)
    np.fill_diagonal(values, 1.0)
    off = ~np.eye(n, dtype=bool)
    row_avg = np.where(off, values, 0.0).sum(axis=1) / (n - 1)
    return OverlapMatrix(values=values, row_avg=row_avg)
