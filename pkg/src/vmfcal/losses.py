"""Training objectives and their closed-form gradients.

total = perf + lambda * (icd + cfc)

* perf: cross-entropy of the vMF posterior.
* icd:  mean directed overlap between every ordered pair of classes.
* cfc:  mean over classes present in the batch of 1 - o(class -> batch direction),
        with the batch direction sharing the class compactness.

Orientation gradients are returned in ambient coordinates. Feature gradients are
with respect to the raw (unprojected) features.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DegenerateDirectionError, DomainError
from .overlap import _pairwise_terms
from .specfn import bessel_ratio, bessel_ratio_deriv
from .vmf_core import as_unit, log_posterior

__all__ = [
    "LossConfig",
    "LossReport",
    "icd_loss",
    "icd_grads",
    "feature_direction",
    "cfc_loss",
    "cfc_grads",
    "perf_grads",
    "logpost_grads",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.2
    enable_icd: bool = True
    enable_cfc: bool = True
    # sum unit-projected features instead of raw ones when estimating batch directions
    cfc_projected: bool = False

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0.0:
            raise DomainError(f"lambda must be non-negative, got {self.lam}")


@dataclass
class LossReport:
    perf: float
    icd: float
    cfc: float
    total: float
    grad_kappa: np.ndarray = field(repr=False)
    grad_mu: np.ndarray = field(repr=False)
    grad_features: np.ndarray = field(repr=False)

    def scalars(self):
        return {k: v for k, v in asdict(self).items() if not k.startswith("grad_")}


def _tangent(g, u):
    """Remove the component of g along unit u (row-wise)."""
    return g - np.sum(g * u, axis=-1, keepdims=True) * u


def icd_grads(clf):
    """Inter-class discrepancy loss and its gradients (value, d_kappa, d_mu)."""
    n = clf.n_classes
    if n < 2:
        raise DomainError("inter-class discrepancy needs at least two classes")
    cos, a, kl = _pairwise_terms(clf)
    o = 1.0 / (1.0 + kl)
    off = ~np.eye(n, dtype=bool)
    scale = 1.0 / (n * (n - 1))
    value = float(np.where(off, o, 0.0).sum() * scale)

    k = clf.kappa
    da = np.atleast_1d(bessel_ratio_deriv(clf.dim, k))
    o2 = np.where(off, o * o, 0.0)
    g_ki = o2 * da[:, None] * (k[None, :] * cos - k[:, None])
    g_kj = o2 * (a[:, None] * cos - a[None, :])
    w = o2 * k[None, :] * a[:, None]
    d_kappa = (g_ki.sum(axis=1) + g_kj.sum(axis=0)) * scale
    d_mu = (w @ clf.mu + w.T @ clf.mu) * scale
    return value, d_kappa, d_mu


def icd_loss(clf):
    return icd_grads(clf)[0]


def _resultants(batch, projected):
    x = batch.features
    if projected:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    present = np.unique(batch.labels)
    sums = np.stack([x[batch.labels == c].sum(axis=0) for c in present])
    norms = np.linalg.norm(sums, axis=1)
    return present, sums, norms


def feature_direction(batch, class_id, projected=False):
    """Normalised sum of the class's features in the batch, or None if the class is absent."""
    mask = batch.labels == class_id
    if not mask.any():
        return None
    x = batch.features[mask]
    if projected:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    s = x.sum(axis=0)
    norm = np.linalg.norm(s)
    if norm == 0.0:
        raise DegenerateDirectionError(f"features of class {class_id} sum to zero")
    return s / norm


def cfc_grads(clf, batch, projected=False):
    """Class-feature consistency loss and gradients (value, d_kappa, d_mu, d_features)."""
    if len(batch) == 0:
        raise DomainError("class-feature consistency of an empty batch is undefined")
    present, sums, norms = _resultants(batch, projected)
    if np.any(norms == 0.0):
        bad = present[norms == 0.0].tolist()
        raise DegenerateDirectionError(f"features of classes {bad} sum to zero")
    mu_x = sums / norms[:, None]
    k = clf.kappa[present]
    mu = clf.mu[present]
    a = np.atleast_1d(bessel_ratio(clf.dim, k))
    da = np.atleast_1d(bessel_ratio_deriv(clf.dim, k))
    cos = np.sum(mu * mu_x, axis=1)
    kl = a * k * (1.0 - cos)
    o = 1.0 / (1.0 + kl)
    m = present.shape[0]
    value = float(np.mean(1.0 - o))

    # d(1 - o)/dKL = o^2, averaged over present classes
    w = o * o / m
    d_kappa = np.zeros(clf.n_classes)
    d_mu = np.zeros_like(clf.mu)
    d_kappa[present] = w * (da * k + a) * (1.0 - cos)
    d_mu[present] = -(w * a * k)[:, None] * mu_x
    d_mux = -(w * a * k)[:, None] * mu
    d_sum = _tangent(d_mux, mu_x) / norms[:, None]

    row = np.searchsorted(present, batch.labels)
    d_x = d_sum[row]
    if projected:
        x = batch.features
        r = np.linalg.norm(x, axis=1, keepdims=True)
        d_x = _tangent(d_x, x / r) / r
    return value, d_kappa, d_mu, d_x


def cfc_loss(clf, batch, projected=False):
    return cfc_grads(clf, batch, projected)[0]


def logpost_grads(clf, x_tilde, label):
    """Gradients of log p(label | x) with respect to all kappa (C,) and mu (C, d)."""
    x = as_unit(x_tilde)
    p = np.exp(log_posterior(clf, x))
    r = -p
    r[label] += 1.0
    cos = clf.mu @ x
    a = np.atleast_1d(bessel_ratio(clf.dim, clf.kappa))
    d_kappa = r * (cos - a)
    d_mu = (r * clf.kappa)[:, None] * x[None, :]
    return d_kappa, d_mu


def perf_grads(clf, batch):
    """Cross-entropy and gradients (value, d_kappa, d_mu, d_features)."""
    n = len(batch)
    if n == 0:
        raise DomainError("performance loss of an empty batch is undefined")
    if batch.labels.min() < 0 or batch.labels.max() >= clf.n_classes:
        raise DomainError("labels out of range")
    x = batch.features
    r_norm = np.linalg.norm(x, axis=1, keepdims=True)
    xt = x / r_norm
    lp = log_posterior(clf, xt)
    rows = np.arange(n)
    value = float(-lp[rows, batch.labels].mean())

    resid = -np.exp(lp)
    resid[rows, batch.labels] += 1.0
    a = np.atleast_1d(bessel_ratio(clf.dim, clf.kappa))
    cos = xt @ clf.mu.T
    d_kappa = -np.mean(resid * (cos - a[None, :]), axis=0)
    d_mu = -(resid.T @ xt) * clf.kappa[:, None] / n
    d_xt = -((resid * clf.kappa[None, :]) @ clf.mu) / n
    d_x = _tangent(d_xt, xt) / r_norm
    return value, d_kappa, d_mu, d_x


def total_loss(clf, batch, cfg=LossConfig()):
    perf, gk, gm, gx = perf_grads(clf, batch)
    icd, ik, im = icd_grads(clf) if clf.n_classes >= 2 else (0.0, 0.0, 0.0)
    cfc, ck, cm, cx = cfc_grads(clf, batch, cfg.cfc_projected)
    total = perf
    if cfg.enable_icd:
        total += cfg.lam * icd
        gk = gk + cfg.lam * ik
        gm = gm + cfg.lam * im
    if cfg.enable_cfc:
        total += cfg.lam * cfc
        gk = gk + cfg.lam * ck
        gm = gm + cfg.lam * cm
        gx = gx + cfg.lam * cx
    return LossReport(
        perf=perf, icd=icd, cfc=cfc, total=total, grad_kappa=gk, grad_mu=gm, grad_features=gx
    )
