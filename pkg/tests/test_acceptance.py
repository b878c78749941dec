"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line (collected again in the pytest terminal summary) before asserting.
"""

import math
import time

import mpmath as mp
import numpy as np
import pytest
from scipy.special import logsumexp

from vmfcal import cli
from vmfcal.calibrate import (
    ALPHA_GRID,
    CalibrationConfig,
    GenericClassifierWeights,
    SourceKind,
    calibrate,
    calibrate_generic,
    from_vmf,
    normalize_overlaps,
    to_vmf,
)
from vmfcal.experiments import mechanism_summary, surface_grid
from vmfcal.losses import logpost_grads
from vmfcal.overlap import kl_vmf, overlap_coeff, overlap_grads, overlap_matrix
from vmfcal.specfn import bessel_ratio, log_norm_const
from vmfcal.synth import rng_for, sample_vmf
from vmfcal.vmf_core import VmfClassifier, VmfParams, log_pdf, log_posterior, posterior

RESULTS = []


def report(n, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {n}: {detail}"
    RESULTS.append(line)
    print(line)
    return passed


def unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def rel(a, b, floor=1e-300):
    return abs(a - b) / max(abs(a), abs(b), floor)


# 1 -------------------------------------------------------------------------

def _mp_reference(d, k):
    with mp.workdps(50):
        nu = mp.mpf(d) / 2 - 1
        kk = mp.mpf(k)
        i_nu = mp.besseli(nu, kk)
        a = mp.besseli(nu + 1, kk) / i_nu
        logc = nu * mp.log(kk) - mp.mpf(d) / 2 * mp.log(2 * mp.pi) - mp.log(i_nu)
        return float(a), float(logc)


def test_criterion_1_special_functions():
    dims = (2, 3, 8, 64, 512, 1024)
    kappas = np.logspace(-3, 4, 29)
    refs = {d: [_mp_reference(d, k) for k in kappas] for d in dims}
    start = time.perf_counter()
    ours = {d: (np.asarray(bessel_ratio(d, kappas)), np.asarray(log_norm_const(d, kappas))) for d in dims}
    elapsed = time.perf_counter() - start
    a_err = max(rel(ours[d][0][i], refs[d][i][0]) for d in dims for i in range(len(kappas)))
    c_err = max(rel(ours[d][1][i], refs[d][i][1], 1.0) for d in dims for i in range(len(kappas)))
    k3 = np.logspace(-3, 4, 57)
    closed_a = 1.0 / np.tanh(k3) - 1.0 / k3
    # small kappa: coth(k) - 1/k cancels, use its series instead
    small = k3 < 1e-2
    closed_a[small] = k3[small] / 3 - k3[small] ** 3 / 45 + 2 * k3[small] ** 5 / 945
    log_sinh = k3 + np.log1p(-np.exp(-2 * k3)) - math.log(2)
    closed_c = np.log(k3) - math.log(4 * math.pi) - log_sinh
    d3_a = max(rel(x, y) for x, y in zip(bessel_ratio(3, k3), closed_a))
    d3_c = max(rel(x, y, 1.0) for x, y in zip(log_norm_const(3, k3), closed_c))
    ok = a_err <= 1e-10 and c_err <= 1e-8 and d3_a <= 1e-10 and d3_c <= 1e-8 and elapsed < 10
    report(1, ok, f"A rel {a_err:.1e}, logC rel {c_err:.1e}, d=3 closed forms {d3_a:.1e}/{d3_c:.1e}, {elapsed:.3f}s")
    assert ok


# 2 -------------------------------------------------------------------------

def test_criterion_2_kl_monte_carlo():
    start = time.perf_counter()
    n, pairs = 200_000, 24
    rng = rng_for(2024, 0)
    worst_z = 0.0
    self_err = 0.0
    for t in range(pairs):
        d = (3, 8)[t % 2]
        pi = VmfParams(rng.uniform(0.5, 30.0), unit(rng, d))
        pj = VmfParams(rng.uniform(0.5, 30.0), unit(rng, d))
        x = sample_vmf(pi, n, rng_for(2024, 1, t))
        diff = log_pdf(pi, x) - log_pdf(pj, x)
        z = abs(diff.mean() - kl_vmf(pi, pj)) / (diff.std(ddof=1) / math.sqrt(n))
        worst_z = max(worst_z, z)
        self_err = max(self_err, abs(kl_vmf(pi, pi)), abs(overlap_coeff(pi, pi) - 1.0))
    elapsed = time.perf_counter() - start
    ok = worst_z <= 3.0 and self_err <= 1e-10 and elapsed < 120
    report(2, ok, f"max |z| {worst_z:.2f} over {pairs} pairs, self KL/overlap err {self_err:.1e}, {elapsed:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------

def _tangent_step(mu, e, h):
    v = mu + h * e
    return v / np.linalg.norm(v)


def test_criterion_3_gradient_suite():
    start = time.perf_counter()
    rng = rng_for(3, 0)
    h = 1e-5
    worst = {}
    negative = 0
    n_configs = 120

    def bump(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for t in range(n_configs):
        d = (3, 16, 64)[t % 3]
        ki, kj = rng.uniform(0.5, 40.0, size=2)
        mi, mj = unit(rng, d), unit(rng, d)
        g = overlap_grads(VmfParams(ki, mi), VmfParams(kj, mj))

        def o(a=ki, b=kj, u=mi, v=mj):
            return overlap_coeff(VmfParams(a, u), VmfParams(b, v))

        bump("do/dk_i", rel(g.d_kappa_i, (o(a=ki + h) - o(a=ki - h)) / (2 * h), 1e-8))
        bump("do/dk_j", rel(g.d_kappa_j, (o(b=kj + h) - o(b=kj - h)) / (2 * h), 1e-8))
        e = rng.standard_normal(d)
        e -= (e @ mi) * mi
        fd = (o(u=_tangent_step(mi, e, h)) - o(u=_tangent_step(mi, e, -h))) / (2 * h)
        bump("do/dmu_i", rel(g.d_mu_i @ e, fd, 1e-8))
        e = rng.standard_normal(d)
        e -= (e @ mj) * mj
        fd = (o(v=_tangent_step(mj, e, h)) - o(v=_tangent_step(mj, e, -h))) / (2 * h)
        bump("do/dmu_j", rel(g.d_mu_j @ e, fd, 1e-8))
        negative += g.d_cos < 0.0

        c = 4
        clf = VmfClassifier(
            rng.uniform(0.5, 30.0, size=c),
            np.array([unit(rng, d) for _ in range(c)]),
            rng.dirichlet(np.ones(c)),
        )
        x = unit(rng, d)
        label = int(rng.integers(c))
        other = (label + 1 + int(rng.integers(c - 1))) % c
        gk, gm = logpost_grads(clf, x, label)
        hk = 1e-4

        def lp(kappa=clf.kappa, mu=clf.mu):
            return log_posterior(VmfClassifier(kappa, mu, clf.prior), x)[label]

        for name, j in (("i", label), ("j", other)):
            kp, km = clf.kappa.copy(), clf.kappa.copy()
            kp[j] += hk
            km[j] -= hk
            # saturated log p differences below 1e-6 are roundoff
            bump(f"dlogp/dk_{name}", rel(gk[j], (lp(kappa=kp) - lp(kappa=km)) / (2 * hk), 1e-6))
            e = rng.standard_normal(d)
            e -= (e @ clf.mu[j]) * clf.mu[j]
            mp_, mm = clf.mu.copy(), clf.mu.copy()
            mp_[j] = _tangent_step(clf.mu[j], e, hk)
            mm[j] = _tangent_step(clf.mu[j], e, -hk)
            bump(f"dlogp/dmu_{name}", rel(gm[j] @ e, (lp(mu=mp_) - lp(mu=mm)) / (2 * hk), 1e-6))
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = len(worst) == 8 and top <= 1e-4 and negative == 0 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(3, ok, f"{n_configs} configs, {negative} negative do/dcos; {detail}")
    assert ok


# 4 -------------------------------------------------------------------------

def test_criterion_4_surface():
    s = surface_grid(100, 16.0, 512)
    o, ki, cos = s["overlap"], s["kappa_i"], s["cos"]
    at = (int(np.flatnonzero(ki == 16.0)[0]), int(np.flatnonzero(cos == 1.0)[0]))
    peak = o[at] == 1.0 and o.max() == 1.0 and np.unravel_index(np.argmax(o), o.shape) == at
    violations = int(np.sum(np.diff(o, axis=1) < 0.0))
    ridge = 16.0 * cos[None, :] - ki[:, None]
    dk = s["d_kappa_i"]
    # columns whose ridge kappa_j * cos falls inside the kappa_i range carry the sign change
    sign_ok = True
    columns = 0
    for c in range(len(cos)):
        r = ridge[:, c]
        if r.max() > 0 > r.min():
            columns += 1
            sign_ok &= bool(np.all(dk[r > 0, c] > 0) and np.all(dk[r < 0, c] < 0))
    ok = bool(peak) and violations == 0 and sign_ok and columns > 0
    report(4, ok, f"max {float(o.max())!r} at kappa_i=16 cos=1: {bool(peak)}, {violations} monotonicity violations, "
                  f"sign change across kappa_i = 16 cos in {columns} columns: {sign_ok}")
    assert ok


# 5 -------------------------------------------------------------------------

def test_criterion_5_calibration_algebra():
    rng = rng_for(5, 0)
    errs = {"alpha1": 0.0, "alpha0": 0.0, "loglinear": 0.0, "extremes": 0.0}
    for t in range(20):
        clf = VmfClassifier(rng.uniform(1.0, 50.0, size=8), np.array([unit(rng, 16) for _ in range(8)]))
        k = clf.kappa
        o_hat = normalize_overlaps(overlap_matrix(clf).row_avg, k)
        errs["extremes"] = max(errs["extremes"], abs(o_hat.min() - k.min()), abs(o_hat.max() - k.max()))
        k1 = calibrate(clf, CalibrationConfig(alpha=1.0)).kappa
        k0 = calibrate(clf, CalibrationConfig(alpha=0.0)).kappa
        errs["alpha1"] = max(errs["alpha1"], np.max(np.abs(k1 - k) / k))
        errs["alpha0"] = max(errs["alpha0"], np.max(np.abs(k0 - o_hat) / o_hat))
        for alpha in ALPHA_GRID[1:-1]:
            kh = calibrate(clf, CalibrationConfig(alpha=alpha)).kappa
            expect = alpha * np.log(k) + (1 - alpha) * np.log(o_hat)
            errs["loglinear"] = max(errs["loglinear"], np.max(np.abs(np.log(kh) - expect)))
    ok = errs["alpha1"] <= 1e-12 and errs["alpha0"] <= 1e-12 and errs["loglinear"] <= 1e-12 and errs["extremes"] == 0.0
    report(5, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))
    assert ok


# 6 -------------------------------------------------------------------------

def test_criterion_6_degeneration():
    rng = rng_for(6, 0)
    worst = 0.0
    for t in range(1000):
        c, d = 5, (3, 16, 64)[t % 3]
        sigma = float(rng.uniform(0.5, 50.0))
        clf = VmfClassifier(np.full(c, sigma), np.array([unit(rng, d) for _ in range(c)]), rng.dirichlet(np.ones(c)))
        x = unit(rng, d)
        z = np.log(clf.prior) + sigma * (clf.mu @ x)
        ref = np.exp(z - logsumexp(z))
        worst = max(worst, float(np.max(np.abs(posterior(clf, x) - ref))))
    ok = worst <= 1e-12
    report(6, ok, f"max |p - softmax(log prior + sigma cos)| {worst:.1e} over 1000 probes")
    assert ok


# 7 -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mechanism():
    return mechanism_summary(range(5), lambdas=(0.0, 0.2))


def test_criterion_7_mechanism(mechanism):
    base = {r["alpha"]: r for r in mechanism[0.0]["sweep"]}
    reg = {r["alpha"]: r for r in mechanism[0.2]["sweep"]}
    a_ok = reg[1.0]["few"] >= base[1.0]["few"]

    best = max(ALPHA_GRID, key=lambda a: (reg[a]["few"], a))
    b_ok = best != 1.0 and reg[best]["few"] > reg[1.0]["few"] and reg[best]["all"] >= reg[1.0]["all"] - 0.02

    rho_k = float(np.mean(mechanism[0.2]["rho_kappa"]))
    rho_o = float(np.mean(mechanism[0.2]["rho_overlap"]))
    c_ok = rho_k > 0.0 and rho_o < 0.0

    sweep = " ".join(f"{a:.1f}:{reg[a]['few']:.4f}" for a in ALPHA_GRID)
    base_best = max(ALPHA_GRID, key=lambda a: (base[a]["few"], a))
    detail = (
        f"(a) few {reg[1.0]['few']:.4f} (lambda=0.2) vs {base[1.0]['few']:.4f} (lambda=0) {'ok' if a_ok else 'no'}; "
        f"(b) best alpha {best:.1f} few {reg[best]['few']:.4f} all {reg[best]['all']:.4f} vs alpha=1 "
        f"few {reg[1.0]['few']:.4f} all {reg[1.0]['all']:.4f} {'ok' if b_ok else 'no'} [few by alpha {sweep}; "
        f"lambda=0 best alpha {base_best:.1f}]; "
        f"(c) rho(count, kappa) {rho_k:+.3f}, rho(count, overlap) {rho_o:+.3f} {'ok' if c_ok else 'no'}"
    )
    report(7, a_ok and b_ok and c_ok, detail)
    assert a_ok, "(a) regularised training lowered Few accuracy"
    assert c_ok, "(c) rank correlations have the wrong sign"
    assert b_ok, "(b) no alpha < 1 improves Few accuracy over alpha = 1"


# 8 -------------------------------------------------------------------------

def test_criterion_8_generic_plumbing():
    rng = rng_for(8, 0)
    cases = [
        (SourceKind.LINEAR, CalibrationConfig(source_kind="linear")),
        (SourceKind.TAU_NORM, CalibrationConfig(source_kind="tau_norm", tau=0.6)),
        (SourceKind.CAUSAL, CalibrationConfig(source_kind="causal", gamma=1.5)),
    ]
    round_trip = 0.0
    flips = 0
    for kind, cfg in cases:
        w = rng.standard_normal((10, 12)) * rng.uniform(0.2, 5.0, size=(10, 1))
        gw = GenericClassifierWeights(kind, w)
        back = from_vmf(to_vmf(gw, cfg), cfg).weights
        round_trip = max(round_trip, float(np.max(np.abs(back - w) / np.abs(w).max())))
        cal = calibrate_generic(gw, CalibrationConfig(source_kind=kind.value, alpha=1.0, tau=cfg.tau, gamma=cfg.gamma))
        x = rng.standard_normal((1000, 12))
        flips += int(np.sum(np.argmax(gw.scores(x), axis=1) != np.argmax(cal.scores(x), axis=1)))
    ok = round_trip <= 1e-12 and flips == 0
    report(8, ok, f"weight round-trip rel err {round_trip:.1e}, {flips} argmax changes over 3x1000 probes")
    assert ok


# 9 -------------------------------------------------------------------------

def _outputs(directory):
    return {
        p.relative_to(directory).as_posix(): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file() and p.name != "timing.json"
    }


def test_criterion_9_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(
        '{"synth": {"num_classes": 8, "dim": 6, "max_per_class": 80, "test_per_class": 10},'
        ' "train": {"epochs": 2}, "seeds": [0, 1]}'
    )
    data = tmp_path / "fixed" / "data"
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "fixed")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path / "fixed")]) == 0
    ckpt = str(tmp_path / "fixed" / "classifier.ckpt.json")
    commands = {
        "gen-data": [],
        "train": ["--dataset", str(data)],
        "calibrate": ["--dataset", str(data), "--checkpoint", ckpt, "--alpha", "0.3"],
        "sweep-alpha": [],
        "ablate-loss": ["--epochs", "1"],
        "diagnose": ["--checkpoint", ckpt],
        "verify": [],
    }
    mismatched = []
    for name, extra in commands.items():
        runs = []
        for rep in ("a", "b"):
            out = tmp_path / name / rep
            assert cli.main([name, "--config", str(cfg), *extra, "--out", str(out)]) == 0
            runs.append(_outputs(out))
        if not runs[0] or runs[0] != runs[1]:
            mismatched.append(name)
    ok = not mismatched
    report(9, ok, f"{len(commands)} commands run twice, byte-identical outputs; mismatched: {mismatched or 'none'}")
    assert ok
