"""Deterministic mini-batch SGD over the vMF classifier (and an optional linear feature map)."""

from dataclasses import dataclass, field, asdict
import json
import logging
import math
import os

import numpy as np

from .errors import DomainError, NumericalError
from .losses import LossConfig, total_loss
from .overlap import overlap_matrix
from .synth import GROUPS, rng_for, uniform_directions
from .vmf_core import FeatureBatch, VmfClassifier, logits, project_to_sphere, save_checkpoint, uniform_prior

__all__ = [
    "TrainConfig",
    "TrainState",
    "init_classifier",
    "sgd_step",
    "train",
    "evaluate",
    "predict",
]

logger = logging.getLogger(__name__)

# substream identifiers, disjoint from the ones used by synth
_INIT_STREAM, _SHUFFLE_STREAM, _MAP_STREAM = 10, 11, 12


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    lr_schedule: str = "cosine"
    momentum: float = 0.9
    kappa_init: float = 16.0
    lam: float = 0.2
    enable_icd: bool = True
    enable_cfc: bool = True
    cfc_projected: bool = False
    seed: int = 0
    kappa_floor: float = 1e-3
    # compactness step is lr * kappa_lr_scale
    kappa_lr_scale: float = 20.0
    kappa_grad_clip: float = 10.0
    freeze_kappa: bool = False
    train_feature_map: bool = False
    feature_map_dims: tuple = None
    # check constraints after every step instead of once per epoch
    debug: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if not self.lr > 0:
            raise DomainError("lr must be positive")
        if not (math.isfinite(self.lam) and self.lam >= 0.0):
            raise DomainError(f"lambda must be non-negative, got {self.lam}")
        if not (self.kappa_init > 0.0 and self.kappa_floor > 0.0):
            raise DomainError("kappa_init and kappa_floor must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise DomainError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.feature_map_dims is not None:
            self.feature_map_dims = tuple(int(v) for v in self.feature_map_dims)

    @property
    def loss_config(self):
        return LossConfig(
            lam=self.lam,
            enable_icd=self.enable_icd,
            enable_cfc=self.enable_cfc,
            cfc_projected=self.cfc_projected,
        )

    def to_dict(self):
        d = asdict(self)
        d["feature_map_dims"] = list(self.feature_map_dims) if self.feature_map_dims else None
        return d


@dataclass
class TrainState:
    clf: VmfClassifier
    feature_map: np.ndarray = None
    step: int = 0
    vel_kappa: np.ndarray = None
    vel_mu: np.ndarray = None
    vel_map: np.ndarray = None
    metrics: list = field(default_factory=list)

    def __post_init__(self):
        if self.vel_kappa is None:
            self.vel_kappa = np.zeros_like(self.clf.kappa)
        if self.vel_mu is None:
            self.vel_mu = np.zeros_like(self.clf.mu)
        if self.feature_map is not None and self.vel_map is None:
            self.vel_map = np.zeros_like(self.feature_map)

    def features(self, raw):
        return raw if self.feature_map is None else raw @ self.feature_map

    def check_constraints(self, kappa_floor):
        norms = np.linalg.norm(self.clf.mu, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise NumericalError(f"orientation left the sphere, norms {norms}")
        if np.any(self.clf.kappa < kappa_floor):
            raise NumericalError(f"compactness below floor: {self.clf.kappa.min()}")


def init_classifier(num_classes, dim, kappa_init=16.0, prior=None, seed=0):
    """Equal compactness, uniformly random orientations, empirical (or uniform) prior."""
    if num_classes < 1 or dim < 2:
        raise DomainError(f"invalid classifier size C={num_classes}, d={dim}")
    if prior is None:
        prior = uniform_prior(num_classes)
    prior = np.asarray(prior, dtype=np.float64)
    prior = prior / prior.sum()
    mu = uniform_directions(num_classes, dim, seed, stream=_INIT_STREAM)
    return VmfClassifier(np.full(num_classes, float(kappa_init)), mu, prior)


def _lr_at(cfg, step, total_steps):
    if cfg.lr_schedule == "constant" or total_steps <= 0:
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


def _dump(state, report):
    return (
        f"kappa={state.clf.kappa.tolist()}\n"
        f"grad_kappa={np.asarray(report.grad_kappa).tolist()}\n"
        f"non-finite grad_mu rows={np.flatnonzero(~np.isfinite(report.grad_mu).all(axis=1)).tolist()}"
    )


def sgd_step(state, batch, cfg, lr=None):
    """One momentum-SGD update on ``batch`` (raw inputs); returns (new state, LossReport).

    Orientation gradients are projected onto the tangent space before the step
    and the result is renormalised; compactness is clamped at ``kappa_floor``.
    """
    lr = cfg.lr if lr is None else lr
    clf = state.clf
    x = state.features(batch.features)
    report = total_loss(clf, FeatureBatch(x, batch.labels), cfg.loss_config)
    grads = [report.grad_kappa, report.grad_mu, report.grad_features]
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("non-finite gradient at step %d\n%s" % (state.step, _dump(state, report)))

    m = cfg.momentum
    g_k = np.clip(report.grad_kappa, -cfg.kappa_grad_clip, cfg.kappa_grad_clip)
    if cfg.freeze_kappa:
        g_k = np.zeros_like(g_k)
    vel_k = m * state.vel_kappa + g_k
    kappa = np.maximum(clf.kappa - lr * cfg.kappa_lr_scale * vel_k, cfg.kappa_floor)

    g_mu = report.grad_mu
    g_mu = g_mu - np.sum(g_mu * clf.mu, axis=1, keepdims=True) * clf.mu
    vel_mu = m * state.vel_mu + g_mu
    mu = project_to_sphere(clf.mu - lr * vel_mu)

    fmap, vel_map = state.feature_map, state.vel_map
    if fmap is not None and cfg.train_feature_map:
        g_map = batch.features.T @ report.grad_features
        vel_map = m * vel_map + g_map
        fmap = fmap - lr * vel_map

    new = TrainState(
        clf=VmfClassifier(kappa, mu, clf.prior),
        feature_map=fmap,
        step=state.step + 1,
        vel_kappa=vel_k,
        vel_mu=vel_mu,
        vel_map=vel_map,
        metrics=state.metrics,
    )
    if cfg.debug:
        new.check_constraints(cfg.kappa_floor)
    return new, report


def predict(clf, features):
    return np.argmax(logits(clf, project_to_sphere(features)), axis=1)


def evaluate(clf, batch, groups=None):
    """Overall, per-group and mean per-class accuracy of argmax-posterior predictions.

    ``groups`` maps class index to a group name; a group with no test samples
    is reported as None.
    """
    if batch.labels.min() < 0 or batch.labels.max() >= clf.n_classes:
        raise DomainError("labels out of range")
    pred = predict(clf, batch.features)
    correct = pred == batch.labels
    out = {"all": float(correct.mean())}
    per_class = [correct[batch.labels == c].mean() for c in range(clf.n_classes) if np.any(batch.labels == c)]
    out["mean_class"] = float(np.mean(per_class))
    if groups is not None:
        groups = np.asarray(groups)
        sample_group = groups[batch.labels]
        for g in GROUPS:
            mask = sample_group == g
            out[g] = float(correct[mask].mean()) if mask.any() else None
    return out


def _initial_state(dataset, cfg):
    n_classes = dataset.counts.shape[0]
    prior = dataset.counts / dataset.counts.sum()
    fmap = None
    d_in = dataset.train.dim
    dim = d_in
    if cfg.feature_map_dims is not None or cfg.train_feature_map:
        d_in, dim = cfg.feature_map_dims or (d_in, d_in)
        if d_in != dataset.train.dim:
            raise DomainError(f"feature map expects {d_in} inputs, data has {dataset.train.dim}")
        g = rng_for(cfg.seed, _MAP_STREAM).standard_normal((d_in, dim)) * 0.1
        fmap = np.eye(d_in, dim) + g
    clf = init_classifier(n_classes, dim, cfg.kappa_init, prior, cfg.seed)
    return TrainState(clf=clf, feature_map=fmap)


def _epoch_record(epoch, state, sums, n_batches, dataset):
    test_x = state.features(dataset.test.features)
    inference = state.clf.with_prior(uniform_prior(state.clf.n_classes))
    test = evaluate(inference, FeatureBatch(test_x, dataset.test.labels), dataset.groups)
    train = evaluate(inference, FeatureBatch(state.features(dataset.train.features), dataset.train.labels))
    ov = overlap_matrix(state.clf)
    rec = {"epoch": epoch}
    rec.update({k: v / n_batches for k, v in sums.items()})
    rec["train_acc"] = train["all"]
    rec.update({f"test_{k}": v for k, v in test.items()})
    rec["kappa_min"] = float(state.clf.kappa.min())
    rec["kappa_max"] = float(state.clf.kappa.max())
    rec["mean_overlap"] = float(ov.row_avg.mean())
    return rec


def train(dataset, cfg, checkpoint_dir=None, checkpoint_every=0, metrics_path=None):
    """Run ``cfg.epochs`` epochs of shuffled mini-batch SGD; returns the final TrainState.

    Test metrics are computed with the uniform inference prior.
    """
    state = _initial_state(dataset, cfg)
    n = len(dataset.train)
    n_batches = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            order = rng_for(cfg.seed, _SHUFFLE_STREAM, epoch).permutation(n)
            sums = {"perf": 0.0, "icd": 0.0, "cfc": 0.0, "total": 0.0}
            for b in range(n_batches):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                lr = _lr_at(cfg, state.step, total_steps)
                state, report = sgd_step(state, dataset.train.subset(idx), cfg, lr)
                for k in sums:
                    sums[k] += getattr(report, k)
            state.check_constraints(cfg.kappa_floor)
            rec = _epoch_record(epoch, state, sums, n_batches, dataset)
            state.metrics.append(rec)
            logger.info("epoch %d %s", epoch, rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if checkpoint_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(state.clf, os.path.join(checkpoint_dir, f"epoch{epoch + 1:04d}.ckpt.json"))
    finally:
        if metrics_fh:
            metrics_fh.close()
    return state
