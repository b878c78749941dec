"""Self-contained oracle checks runnable from the command line.

Each check compares the library against something computed another way:
closed forms at d = 3, scipy's exponentially scaled Bessel function, central
finite differences, or Monte-Carlo estimates from the rejection sampler.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import ive

from .losses import LossConfig, logpost_grads, total_loss
from .overlap import kl_vmf, overlap_from_cos, overlap_grads
from .specfn import bessel_ratio, log_bessel_i, log_norm_const
from .synth import rng_for, sample_vmf
from .vmf_core import FeatureBatch, VmfClassifier, VmfParams, log_pdf, log_posterior

__all__ = ["CheckResult", "run_all", "CHECKS", "rel_err"]

FD_TOL = 1e-4
# log p saturates near 0, so differences below this are roundoff, not signal
_LOGPOST_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    detail: str


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _d3_log_norm(k):
    # log(k / (4 pi sinh k)) without overflow
    log_sinh = k + np.log1p(-np.exp(-2.0 * k)) - math.log(2.0)
    return np.log(k) - math.log(4.0 * math.pi) - log_sinh


def check_d3_closed_forms():
    k = np.logspace(-1, 4, 200)
    a_err = rel_err(bessel_ratio(3, k), 1.0 / np.tanh(k) - 1.0 / k)
    c_err = float(np.max(np.abs(log_norm_const(3, k) - _d3_log_norm(k)) / np.maximum(1.0, np.abs(_d3_log_norm(k)))))
    worst = max(a_err, c_err)
    return CheckResult("d3_closed_forms", worst <= 1e-12, worst, f"A rel {a_err:.2e}, logC rel {c_err:.2e}")


def check_scipy_bessel():
    worst = 0.0
    for d in (2, 8, 64, 128):
        nu = 0.5 * d - 1.0
        k = np.logspace(-2, 3, 60)
        ref = ive(nu, k)
        ok = ref > 1e-280
        log_i = np.log(ref[ok]) + k[ok]
        err = np.abs(np.asarray(log_bessel_i(nu, k[ok])) - log_i) / np.maximum(1.0, np.abs(log_i))
        worst = max(worst, float(err.max()))
        ratio = ive(nu + 1.0, k[ok]) / ref[ok]
        worst = max(worst, rel_err(bessel_ratio(d, k[ok]), ratio, floor=1e-300))
    return CheckResult("scipy_bessel", worst <= 1e-10, worst, "log I_nu and A_d against scipy ive")


def check_branch_seam():
    k = np.logspace(-2, 4, 80)
    worst = 0.0
    for nu in (32.0, 40.0, 63.0):
        s = np.asarray(log_bessel_i(nu, k, method="series"))
        g = np.asarray(log_bessel_i(nu, k, method="debye"))
        worst = max(worst, float(np.max(np.abs(s - g) / np.maximum(1.0, np.abs(s)))))
    return CheckResult("series_debye_seam", worst <= 1e-10, worst, "series vs large-order expansion")


def _random_unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def check_overlap_grads(n_configs=120, seed=7):
    """Every partial of o(i -> j) against central differences, plus the sign of d o / d cos."""
    rng = rng_for(seed, 0)
    worst = 0.0
    negative = 0
    dims = (3, 16, 64)
    for t in range(n_configs):
        d = dims[t % len(dims)]
        ki, kj = rng.uniform(0.5, 40.0, size=2)
        mi, mj = _random_unit(rng, d), _random_unit(rng, d)
        pi, pj = VmfParams(ki, mi), VmfParams(kj, mj)
        g = overlap_grads(pi, pj)
        cos = float(mi @ mj)

        def f(a, b, c):
            return overlap_from_cos(d, a, b, c)

        h = 1e-5
        fd_ki = (f(ki * (1 + h), kj, cos) - f(ki * (1 - h), kj, cos)) / (2 * h * ki)
        fd_kj = (f(ki, kj * (1 + h), cos) - f(ki, kj * (1 - h), cos)) / (2 * h * kj)
        fd_c = (f(ki, kj, cos + h) - f(ki, kj, cos - h)) / (2 * h)
        e = rng.standard_normal(d)
        fd_mi = (f(ki, kj, (mi + h * e) @ mj) - f(ki, kj, (mi - h * e) @ mj)) / (2 * h)
        fd_mj = (f(ki, kj, mi @ (mj + h * e)) - f(ki, kj, mi @ (mj - h * e))) / (2 * h)
        errs = [
            rel_err(g.d_kappa_i, fd_ki),
            rel_err(g.d_kappa_j, fd_kj),
            rel_err(g.d_cos, fd_c),
            rel_err(g.d_mu_i @ e, fd_mi),
            rel_err(g.d_mu_j @ e, fd_mj),
        ]
        worst = max(worst, *errs)
        negative += g.d_cos < 0.0
    ok = worst <= FD_TOL and negative == 0
    return CheckResult("overlap_grads_fd", ok, worst, f"{n_configs} configs, {negative} negative d/dcos")


def check_logpost_grads(n_configs=60, seed=8):
    rng = rng_for(seed, 0)
    worst = 0.0
    for t in range(n_configs):
        d = (3, 16, 64)[t % 3]
        c = 4
        clf = VmfClassifier(
            rng.uniform(0.5, 30.0, size=c),
            np.array([_random_unit(rng, d) for _ in range(c)]),
            rng.dirichlet(np.ones(c)),
        )
        x = _random_unit(rng, d)
        label = int(rng.integers(c))
        gk, gm = logpost_grads(clf, x, label)
        h = 1e-4
        for i in range(c):
            kp, km = clf.kappa.copy(), clf.kappa.copy()
            kp[i] += h
            km[i] -= h
            fp = log_posterior(clf.with_kappa(kp), x)[label]
            fm = log_posterior(clf.with_kappa(km), x)[label]
            worst = max(worst, rel_err(gk[i], (fp - fm) / (2 * h), _LOGPOST_FLOOR))
            e = rng.standard_normal(d)
            e -= (e @ clf.mu[i]) * clf.mu[i]
            mp, mm = clf.mu.copy(), clf.mu.copy()
            mp[i] = clf.mu[i] + h * e
            mm[i] = clf.mu[i] - h * e
            mp[i] /= np.linalg.norm(mp[i])
            mm[i] /= np.linalg.norm(mm[i])
            fp = log_posterior(VmfClassifier(clf.kappa, mp, clf.prior), x)[label]
            fm = log_posterior(VmfClassifier(clf.kappa, mm, clf.prior), x)[label]
            worst = max(worst, rel_err(gm[i] @ e, (fp - fm) / (2 * h), _LOGPOST_FLOOR))
    return CheckResult("logpost_grads_fd", worst <= FD_TOL, worst, f"{n_configs} configs")


def check_total_loss_grads(seed=9):
    rng = rng_for(seed, 0)
    d, c, n = 8, 5, 40
    clf = VmfClassifier(
        rng.uniform(2.0, 20.0, size=c),
        np.array([_random_unit(rng, d) for _ in range(c)]),
        rng.dirichlet(np.ones(c)),
    )
    x = rng.standard_normal((n, d)) * rng.lognormal(0.0, 0.5, size=(n, 1))
    y = np.arange(n) % c
    worst = 0.0
    for projected in (False, True):
        cfg = LossConfig(lam=0.3, cfc_projected=projected)
        rep = total_loss(clf, FeatureBatch(x, y), cfg)

        def f(kappa=clf.kappa, mu=clf.mu, feats=x):
            return total_loss(VmfClassifier(kappa, mu, clf.prior), FeatureBatch(feats, y), cfg).total

        h = 1e-6
        for i in range(c):
            kp, km = clf.kappa.copy(), clf.kappa.copy()
            kp[i] += h
            km[i] -= h
            worst = max(worst, rel_err(rep.grad_kappa[i], (f(kappa=kp) - f(kappa=km)) / (2 * h)))
        # mu gradients are checked along tangent directions, where renormalisation is second order
        for i in range(c):
            e = rng.standard_normal(d)
            e -= (e @ clf.mu[i]) * clf.mu[i]
            mp, mm = clf.mu.copy(), clf.mu.copy()
            mp[i] = clf.mu[i] + h * e
            mm[i] = clf.mu[i] - h * e
            mp[i] /= np.linalg.norm(mp[i])
            mm[i] /= np.linalg.norm(mm[i])
            worst = max(worst, rel_err(rep.grad_mu[i] @ e, (f(mu=mp) - f(mu=mm)) / (2 * h)))
        e = rng.standard_normal(x.shape)
        fd = (f(feats=x + h * e) - f(feats=x - h * e)) / (2 * h)
        worst = max(worst, rel_err(np.sum(rep.grad_features * e), fd))
    return CheckResult("total_loss_grads_fd", worst <= FD_TOL, worst, "kappa, tangent mu, raw features")


def check_mc_kl(n_pairs=20, n_samples=20_000, seed=10):
    """KL(i || j) against the sample mean of log p_i(x) - log p_j(x), x ~ p_i."""
    rng = rng_for(seed, 0)
    worst = 0.0
    for t in range(n_pairs):
        d = (3, 8)[t % 2]
        pi = VmfParams(rng.uniform(0.5, 20.0), _random_unit(rng, d))
        pj = VmfParams(rng.uniform(0.5, 20.0), _random_unit(rng, d))
        x = sample_vmf(pi, n_samples, rng_for(seed, 1, t))
        diff = log_pdf(pi, x) - log_pdf(pj, x)
        se = diff.std(ddof=1) / math.sqrt(n_samples)
        z = abs(diff.mean() - kl_vmf(pi, pj)) / se
        worst = max(worst, float(z))
    return CheckResult("mc_kl", worst <= 3.0, worst, f"max |z| over {n_pairs} pairs")


def check_moments(n_samples=100_000, seed=11):
    """Sample mean of vMF draws against A_d(kappa) mu."""
    rng = rng_for(seed, 0)
    worst = 0.0
    for t, (d, k) in enumerate([(3, 4.0), (8, 1.0), (32, 16.0), (64, 100.0)]):
        p = VmfParams(k, _random_unit(rng, d))
        x = sample_vmf(p, n_samples, rng_for(seed, 1, t))
        dev = np.max(np.abs(x.mean(axis=0) - bessel_ratio(d, k) * p.mu)) * math.sqrt(n_samples)
        worst = max(worst, float(dev))
    return CheckResult("sample_moments", worst <= 4.0, worst, "max |mean - A mu| * sqrt(n)")


CHECKS = (
    check_d3_closed_forms,
    check_scipy_bessel,
    check_branch_seam,
    check_overlap_grads,
    check_logpost_grads,
    check_total_loss_grads,
    check_mc_kl,
    check_moments,
)


def run_all(checks=CHECKS):
    return [c() for c in checks]
