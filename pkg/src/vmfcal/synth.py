"""vMF sampling and a synthetic long-tailed dataset generator.

Random streams are numpy PCG64 generators seeded from
``SeedSequence(seed, spawn_key=(stream, class_index))`` so every class has its
own substream: adding classes never changes the draws of existing ones.
"""

from dataclasses import dataclass, field, asdict
import csv
import json
import os

import numpy as np

from .errors import DomainError, NumericalError
from .vmf_core import FeatureBatch, VmfParams

__all__ = [
    "SynthSpec",
    "SynthDataset",
    "rng_for",
    "sample_vmf",
    "uniform_directions",
    "pareto_counts",
    "assign_groups",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "GROUPS",
]

MAX_REJECTIONS = 1000
GROUPS = ("many", "medium", "few")

# substream identifiers
_DIRECTIONS, _TRAIN, _TEST, _MAGNITUDE, _SHARED = 0, 1, 2, 3, 4


def rng_for(seed, *key):
    """Generator for substream ``key`` of ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return rng_for(int(seed))


def _sample_cosines(kappa, d, n, rng):
    # Wood (1994): envelope rejection for w = x.mu
    m = d - 1.0
    b = m / (2.0 * kappa + np.sqrt(4.0 * kappa * kappa + m * m))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m * np.log1p(-x0 * x0)
    out = np.empty(n)
    pending = np.arange(n)
    for _ in range(MAX_REJECTIONS):
        k = pending.size
        z = rng.beta(0.5 * m, 0.5 * m, size=k)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=k)
        ok = kappa * w + m * np.log1p(-x0 * w) - c >= np.log(u)
        out[pending[ok]] = w[ok]
        pending = pending[~ok]
        if pending.size == 0:
            return out
    raise NumericalError(
        f"vMF rejection sampler exceeded {MAX_REJECTIONS} rounds for {pending.size} draws",
        residual=pending.size,
    )


def sample_vmf(params, n, seed):
    """Draw ``n`` unit vectors from vMF(params); ``seed`` may be an int or a Generator."""
    if n < 1:
        raise DomainError(f"need n >= 1 samples, got {n}")
    rng = _as_rng(seed)
    d = params.dim
    mu = params.mu
    w = _sample_cosines(params.kappa, d, n, rng)
    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = w[:, None] * mu[None, :] + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def uniform_directions(n, d, seed, stream=_DIRECTIONS):
    """One uniformly random unit vector per class, class ``i`` from its own substream."""
    rows = []
    for i in range(n):
        g = rng_for(seed, stream, i).standard_normal(d)
        rows.append(g / np.linalg.norm(g))
    return np.array(rows)


def pareto_counts(num_classes, n_max, power=6.0):
    """Rank-size profile n_i = max(1, round(n_max * i ** -(1 + 1/power))), i = 1..C.

    With the defaults (C=50, n_max=500, power=6) the head-to-tail ratio is 100.
    """
    if num_classes < 2:
        raise DomainError("need at least two classes")
    if n_max < num_classes:
        raise DomainError(f"n_max={n_max} is too small for {num_classes} classes")
    if not power > 0:
        raise DomainError(f"power must be positive, got {power}")
    rank = np.arange(1, num_classes + 1, dtype=np.float64)
    counts = np.rint(n_max * rank ** -(1.0 + 1.0 / power)).astype(np.int64)
    return np.maximum(counts, 1)


def assign_groups(counts, many_min=100, few_max=20):
    counts = np.asarray(counts)
    return np.where(counts >= many_min, "many", np.where(counts <= few_max, "few", "medium"))


@dataclass
class SynthSpec:
    num_classes: int = 50
    dim: int = 32
    max_per_class: int = 500
    pareto_power: float = 6.0
    class_kappa: object = 64.0
    seed: int = 0
    many_min: int = 100
    few_max: int = 20
    test_per_class: int = 50
    # sigma of the log-normal magnitude applied to each feature
    magnitude_sigma: float = 0.5
    # class i gets class_kappa * (n_i / n_max) ** kappa_count_exponent
    kappa_count_exponent: float = 0.3
    # weight of a direction shared by all classes; expected pairwise mu.mu is about this value
    shared_direction: float = 0.0

    def kappas(self, counts=None):
        k = np.broadcast_to(np.asarray(self.class_kappa, dtype=np.float64), (self.num_classes,))
        if np.any(k <= 0.0):
            raise DomainError("class_kappa must be positive")
        k = k.copy()
        if self.kappa_count_exponent and counts is not None:
            k = k * (np.asarray(counts) / self.max_per_class) ** self.kappa_count_exponent
        return k

    def to_dict(self):
        d = asdict(self)
        if isinstance(self.class_kappa, np.ndarray):
            d["class_kappa"] = self.class_kappa.tolist()
        return d


@dataclass
class SynthDataset:
    spec: SynthSpec
    train: FeatureBatch
    test: FeatureBatch
    true_params: list
    counts: np.ndarray
    groups: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.groups is None:
            self.groups = assign_groups(self.counts, self.spec.many_min, self.spec.few_max)


def _class_features(params, n, seed, stream, cls, sigma):
    x = sample_vmf(params, n, rng_for(seed, stream, cls))
    mag = rng_for(seed, _MAGNITUDE, stream, cls).lognormal(0.0, sigma, size=n)
    return x * mag[:, None]


def make_dataset(spec):
    counts = pareto_counts(spec.num_classes, spec.max_per_class, spec.pareto_power)
    kappas = spec.kappas(counts)
    mus = uniform_directions(spec.num_classes, spec.dim, spec.seed)
    if spec.shared_direction:
        rho = spec.shared_direction
        common = uniform_directions(1, spec.dim, spec.seed, stream=_SHARED)[0]
        mus = np.sqrt(rho) * common + np.sqrt(1.0 - rho) * mus
        mus /= np.linalg.norm(mus, axis=1, keepdims=True)
    params = [VmfParams(k, m) for k, m in zip(kappas, mus)]
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c, p in enumerate(params):
        tr_x.append(_class_features(p, int(counts[c]), spec.seed, _TRAIN, c, spec.magnitude_sigma))
        tr_y.append(np.full(counts[c], c))
        te_x.append(_class_features(p, spec.test_per_class, spec.seed, _TEST, c, spec.magnitude_sigma))
        te_y.append(np.full(spec.test_per_class, c))
    return SynthDataset(
        spec=spec,
        train=FeatureBatch(np.concatenate(tr_x), np.concatenate(tr_y)),
        test=FeatureBatch(np.concatenate(te_x), np.concatenate(te_y)),
        true_params=params,
        counts=counts,
    )


def _write_batch(batch, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{j}" for j in range(batch.dim)])
        for y, row in zip(batch.labels, batch.features):
            w.writerow([int(y)] + [repr(float(v)) for v in row])


def _read_batch(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [row for row in r if row]
    labels = np.array([int(row[0]) for row in rows])
    feats = np.array([[float(v) for v in row[1:]] for row in rows])
    return FeatureBatch(feats, labels)


def save_dataset(ds, directory):
    """Write train.csv, test.csv and a metadata.json sidecar into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    _write_batch(ds.train, os.path.join(directory, "train.csv"))
    _write_batch(ds.test, os.path.join(directory, "test.csv"))
    meta = {
        "spec": ds.spec.to_dict(),
        "counts": ds.counts.tolist(),
        "groups": ds.groups.tolist(),
        "true_params": [
            {"kappa": float(p.kappa).hex(), "mu": [float(v).hex() for v in p.mu]}
            for p in ds.true_params
        ],
    }
    with open(os.path.join(directory, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(directory):
    with open(os.path.join(directory, "metadata.json")) as fh:
        meta = json.load(fh)
    params = [
        VmfParams(float.fromhex(p["kappa"]), np.array([float.fromhex(v) for v in p["mu"]]))
        for p in meta["true_params"]
    ]
    return SynthDataset(
        spec=SynthSpec(**meta["spec"]),
        train=_read_batch(os.path.join(directory, "train.csv")),
        test=_read_batch(os.path.join(directory, "test.csv")),
        true_params=params,
        counts=np.array(meta["counts"]),
        groups=np.array(meta["groups"]),
    )
