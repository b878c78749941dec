"""Reusable experiment drivers: surface grid, alpha sweeps, loss ablations, mechanism runs."""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace

import numpy as np
from scipy.stats import spearmanr

from .calibrate import ALPHA_GRID, CalibrationConfig, calibrate
from .overlap import kl_from_cos, overlap_matrix
from .specfn import bessel_ratio, bessel_ratio_deriv
from .synth import SynthSpec, make_dataset
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "SURFACE_SIZE",
    "ABLATION_VARIANTS",
    "ABLATION_LAMBDAS",
    "surface_axes",
    "surface_grid",
    "alpha_sweep",
    "ablation_configs",
    "run_many",
    "train_and_sweep",
    "mechanism_summary",
]

SURFACE_SIZE = 100
ABLATION_VARIANTS = ("none", "icd", "cfc", "both")
ABLATION_LAMBDAS = (0.1, 0.2, 0.3, 0.4)
METRIC_KEYS = ("all", "many", "medium", "few")


def surface_axes(n=SURFACE_SIZE, kappa_j=16.0):
    """kappa_i on [kappa_j - 4, kappa_j + 4) in steps of 8/n, cosines on linspace(-1, 1, n).

    For the default (n=100, kappa_j=16) the kappa axis is (1200 + 8k) / 100 so
    kappa_i = 16 is hit exactly at k = 50.
    """
    k = np.arange(n, dtype=np.float64)
    lo = 100.0 * (kappa_j - 4.0)
    kappa_i = (lo + 8.0 * k * 100.0 / n) / 100.0
    cos = np.linspace(-1.0, 1.0, n)
    return kappa_i, cos


def surface_grid(n=SURFACE_SIZE, kappa_j=16.0, d=512):
    """Overlap o(i -> j) and its partials over the (kappa_i, cos) grid.

    Arrays are indexed [kappa index, cos index].
    """
    kappa_i, cos = surface_axes(n, kappa_j)
    ki = kappa_i[:, None]
    c = cos[None, :]
    o = 1.0 / (1.0 + kl_from_cos(d, ki, kappa_j, c))
    a_i = np.asarray(bessel_ratio(d, kappa_i))[:, None]
    da_i = np.asarray(bessel_ratio_deriv(d, kappa_i))[:, None]
    d_kappa_i = o * o * da_i * (kappa_j * c - ki)
    d_cos = o * o * kappa_j * a_i * np.ones_like(c)
    return {"kappa_i": kappa_i, "cos": cos, "overlap": o, "d_kappa_i": d_kappa_i, "d_cos": d_cos}


def alpha_sweep(clf, test, groups, grid=ALPHA_GRID):
    """Test metrics of the calibrated classifier for every alpha in ``grid``."""
    rows = []
    for alpha in grid:
        m = evaluate(calibrate(clf, CalibrationConfig(alpha=alpha)), test, groups)
        rows.append({"alpha": float(alpha), **{k: m[k] for k in METRIC_KEYS}})
    return rows


def ablation_configs(base, variants=ABLATION_VARIANTS, lambdas=ABLATION_LAMBDAS):
    """(variant, lambda, TrainConfig) for every cell of the loss ablation grid."""
    out = []
    for v in variants:
        for lam in lambdas:
            cfg = replace(
                base,
                lam=lam,
                enable_icd=v in ("icd", "both"),
                enable_cfc=v in ("cfc", "both"),
            )
            out.append((v, lam, cfg))
    return out


def train_and_sweep(spec_dict, cfg_dict, grid=ALPHA_GRID):
    """Generate, train and sweep alpha for one (SynthSpec, TrainConfig) pair given as dicts.

    Returns plain data so it can cross process boundaries.
    """
    spec = SynthSpec(**spec_dict)
    cfg = TrainConfig(**cfg_dict)
    ds = make_dataset(spec)
    clf = train(ds, cfg).clf
    ov = overlap_matrix(clf).row_avg
    return {
        "kappa": clf.kappa.tolist(),
        "row_overlap": ov.tolist(),
        "counts": ds.counts.tolist(),
        "sweep": alpha_sweep(clf, ds.test, ds.groups, grid),
    }


def run_many(jobs, parallel=1):
    """Evaluate ``train_and_sweep`` over (spec_dict, cfg_dict) jobs, results in job order."""
    if parallel <= 1:
        return [train_and_sweep(s, c) for s, c in jobs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(train_and_sweep, *zip(*jobs)))


def _spearman(x, y):
    return float(spearmanr(x, y)[0])


def mechanism_summary(seeds, spec=None, cfg=None, lambdas=(0.0, 0.2), parallel=1):
    """Seed-averaged alpha sweeps and rank correlations for each lambda.

    Returns {lambda: {"sweep": rows averaged over seeds, "rho_kappa": [...], "rho_overlap": [...]}}.
    """
    spec = spec or SynthSpec()
    cfg = cfg or TrainConfig()
    jobs, keys = [], []
    for lam in lambdas:
        for s in seeds:
            jobs.append((asdict(replace(spec, seed=s)), replace(cfg, lam=lam, seed=s).to_dict()))
            keys.append(lam)
    results = run_many(jobs, parallel)
    out = {}
    for lam in lambdas:
        runs = [r for k, r in zip(keys, results) if k == lam]
        rows = []
        for i, alpha in enumerate(runs[0]["sweep"]):
            row = {"alpha": alpha["alpha"]}
            for key in METRIC_KEYS:
                vals = [r["sweep"][i][key] for r in runs]
                row[key] = None if any(v is None for v in vals) else float(np.mean(vals))
            rows.append(row)
        out[lam] = {
            "sweep": rows,
            "rho_kappa": [_spearman(r["counts"], r["kappa"]) for r in runs],
            "rho_overlap": [_spearman(r["counts"], r["row_overlap"]) for r in runs],
        }
    return out
