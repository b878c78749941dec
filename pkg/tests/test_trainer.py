import json

import numpy as np
import pytest

from conftest import random_classifier
from vmfcal import trainer
from vmfcal.errors import DomainError, NumericalError
from vmfcal.losses import LossConfig, LossReport, total_loss
from vmfcal.synth import SynthSpec, make_dataset
from vmfcal.trainer import TrainConfig, TrainState, evaluate, init_classifier, predict, sgd_step, train
from vmfcal.vmf_core import FeatureBatch, VmfClassifier, dumps_checkpoint, posterior, project_to_sphere, uniform_prior

TINY = SynthSpec(num_classes=6, dim=5, max_per_class=60, test_per_class=10)


def test_init_classifier():
    clf = init_classifier(50, 512, prior=np.arange(1, 51), seed=3)
    assert np.all(clf.kappa == 16.0)
    np.testing.assert_allclose(np.linalg.norm(clf.mu, axis=1), 1.0, atol=1e-12)
    assert clf.prior.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(DomainError):
        init_classifier(0, 3)


@pytest.mark.parametrize("seed", range(5))
def test_init_orientations_nearly_orthogonal(seed):
    clf = init_classifier(50, 512, seed=seed)
    cos = clf.mu @ clf.mu.T
    off = np.abs(cos[np.triu_indices(50, 1)])
    assert np.median(off) <= 3 / np.sqrt(512)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(lr=0.0), dict(momentum=1.0), dict(lr_schedule="step"), dict(lam=-1.0), dict(epochs=0)):
        with pytest.raises(DomainError):
            TrainConfig(**bad)


def test_zero_gradient_leaves_state_unchanged():
    mu = np.array([[1.0, 0.0], [-1.0, 0.0]])
    clf = VmfClassifier([1e4, 1e4], mu)
    batch = FeatureBatch([[1.0, 0.0], [-2.0, 0.0]], [0, 1])
    cfg = TrainConfig(lam=0.0, lr=0.1)
    new, rep = sgd_step(TrainState(clf), batch, cfg)
    assert np.all(rep.grad_kappa == 0.0) and np.all(rep.grad_mu == 0.0)
    np.testing.assert_array_equal(new.clf.kappa, clf.kappa)
    np.testing.assert_allclose(new.clf.mu, clf.mu, rtol=0, atol=1e-15)


def test_single_step_matches_hand_update(rng):
    clf = random_classifier(rng, 4, 6, kappa_range=(2.0, 10.0))
    batch = FeatureBatch(rng.standard_normal((1, 6)) * 2.0, [2])
    cfg = TrainConfig(momentum=0.0, lam=0.2, lr=0.05, kappa_lr_scale=1.0)
    rep = total_loss(clf, batch, cfg.loss_config)
    gk = np.clip(rep.grad_kappa, -10, 10)
    g = rep.grad_mu - np.sum(rep.grad_mu * clf.mu, axis=1, keepdims=True) * clf.mu
    new, _ = sgd_step(TrainState(clf), batch, cfg)
    np.testing.assert_allclose(new.clf.kappa, clf.kappa - 0.05 * gk, rtol=0, atol=1e-10)
    np.testing.assert_allclose(new.clf.mu, project_to_sphere(clf.mu - 0.05 * g), rtol=0, atol=1e-10)


def test_kappa_step_scale_clip_and_floor(rng):
    clf = random_classifier(rng, 3, 4, kappa_range=(0.01, 0.02))
    batch = FeatureBatch(rng.standard_normal((9, 4)), np.arange(9) % 3)
    cfg = TrainConfig(momentum=0.0, lam=0.0, lr=1.0, kappa_lr_scale=5.0, kappa_floor=1e-3)
    rep = total_loss(clf, batch, cfg.loss_config)
    new, _ = sgd_step(TrainState(clf), batch, cfg)
    expected = np.maximum(clf.kappa - 5.0 * np.clip(rep.grad_kappa, -10, 10), 1e-3)
    np.testing.assert_allclose(new.clf.kappa, expected, rtol=1e-14)
    assert np.all(new.clf.kappa >= 1e-3)


def test_freeze_kappa(rng):
    clf = random_classifier(rng, 3, 4)
    batch = FeatureBatch(rng.standard_normal((9, 4)), np.arange(9) % 3)
    new, _ = sgd_step(TrainState(clf), batch, TrainConfig(freeze_kappa=True))
    np.testing.assert_array_equal(new.clf.kappa, clf.kappa)


def test_perf_step_descends(rng):
    failures = 0
    for _ in range(100):
        clf = random_classifier(rng, 4, 8)
        batch = FeatureBatch(rng.standard_normal((16, 8)), rng.integers(0, 4, size=16))
        cfg = TrainConfig(momentum=0.0, lam=0.0, lr=1e-3, kappa_lr_scale=1.0)
        before = total_loss(clf, batch, cfg.loss_config).total
        new, _ = sgd_step(TrainState(clf), batch, cfg)
        after = total_loss(new.clf, batch, cfg.loss_config).total
        failures += after >= before
    assert failures == 0


def test_orientations_renormalised_each_step(rng):
    clf = random_classifier(rng, 5, 7)
    batch = FeatureBatch(rng.standard_normal((20, 7)), np.arange(20) % 5)
    state = TrainState(clf)
    cfg = TrainConfig(lr=2.0, debug=True)
    for _ in range(10):
        state, _ = sgd_step(state, batch, cfg)
        np.testing.assert_allclose(np.linalg.norm(state.clf.mu, axis=1), 1.0, rtol=0, atol=1e-15)


def test_nonfinite_gradient_aborts_with_dump(monkeypatch, rng):
    clf = random_classifier(rng, 2, 3)
    batch = FeatureBatch(rng.standard_normal((4, 3)), [0, 1, 0, 1])

    def broken(c, b, cfg):
        g = np.full(2, np.nan)
        return LossReport(1.0, 0.0, 0.0, 1.0, g, np.zeros((2, 3)), np.zeros((4, 3)))

    monkeypatch.setattr(trainer, "total_loss", broken)
    with pytest.raises(NumericalError, match="kappa="):
        sgd_step(TrainState(clf), batch, TrainConfig())


def test_feature_map_gradient_matches_fd(rng):
    d_in, d = 6, 4
    clf = random_classifier(rng, 3, d)
    w = np.eye(d_in, d) + 0.1 * rng.standard_normal((d_in, d))
    x = rng.standard_normal((12, d_in))
    y = np.arange(12) % 3
    cfg = LossConfig(lam=0.3)
    rep = total_loss(clf, FeatureBatch(x @ w, y), cfg)
    g_map = x.T @ rep.grad_features
    e = rng.standard_normal(w.shape)
    h = 1e-6
    f = lambda m: total_loss(clf, FeatureBatch(x @ m, y), cfg).total
    assert np.sum(g_map * e) == pytest.approx((f(w + h * e) - f(w - h * e)) / (2 * h), rel=1e-4)


def test_train_with_feature_map():
    ds = make_dataset(TINY)
    cfg = TrainConfig(epochs=2, train_feature_map=True, feature_map_dims=(5, 3))
    state = train(ds, cfg)
    assert state.feature_map.shape == (5, 3)
    assert state.clf.dim == 3
    with pytest.raises(DomainError):
        train(ds, TrainConfig(epochs=1, feature_map_dims=(4, 3)))


def test_training_is_deterministic(tmp_path):
    ds = make_dataset(TINY)
    cfg = TrainConfig(epochs=3)
    a = train(ds, cfg, metrics_path=tmp_path / "a.jsonl", checkpoint_dir=tmp_path, checkpoint_every=3)
    b = train(ds, cfg, metrics_path=tmp_path / "b.jsonl")
    assert dumps_checkpoint(a.clf) == dumps_checkpoint(b.clf)
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "epoch0003.ckpt.json").exists()
    rec = json.loads((tmp_path / "a.jsonl").read_text().splitlines()[-1])
    for key in ("perf", "icd", "cfc", "train_acc", "test_all", "test_many", "test_few", "kappa_min", "kappa_max", "mean_overlap"):
        assert key in rec


def test_frozen_kappa_baseline_is_cosine_classifier():
    ds = make_dataset(TINY)
    state = train(ds, TrainConfig(epochs=2, lam=0.0, freeze_kappa=True))
    assert np.all(state.clf.kappa == 16.0)
    clf = state.clf.with_prior(uniform_prior(6))
    x = project_to_sphere(ds.test.features)
    z = 16.0 * x @ clf.mu.T
    ref = np.exp(z - z.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(posterior(clf, x), ref, atol=1e-12)


def test_default_toy_perf_loss_monotone_within_noise():
    state = train(make_dataset(SynthSpec()), TrainConfig())
    perf = [m["perf"] for m in state.metrics]
    assert all(b <= 1.05 * a for a, b in zip(perf, perf[1:]))
    assert perf[-1] < perf[0]


def test_evaluate_perfect_and_groups():
    mu = np.eye(3)
    clf = VmfClassifier([50.0, 50.0, 50.0], mu)
    batch = FeatureBatch(np.eye(3).repeat(2, axis=0), [0, 0, 1, 1, 2, 2])
    m = evaluate(clf, batch, np.array(["many", "medium", "many"]))
    assert m["all"] == m["many"] == m["medium"] == m["mean_class"] == 1.0
    assert m["few"] is None
    with pytest.raises(DomainError):
        evaluate(clf, FeatureBatch([[1.0, 0, 0]], [3]))


def test_evaluate_chance_level(rng):
    c, per = 10, 300
    clf = random_classifier(rng, c, 64, kappa_range=(1.0, 1.0001), prior=False)
    x = rng.standard_normal((c * per, 64))
    m = evaluate(clf, FeatureBatch(x, np.repeat(np.arange(c), per)))
    sd = np.sqrt(0.1 * 0.9 / (c * per))
    assert abs(m["all"] - 0.1) <= 3 * sd


def test_evaluate_matches_confusion_matrix(rng):
    c = 5
    clf = random_classifier(rng, c, 4)
    y = np.repeat(np.arange(c), 40)
    x = rng.standard_normal((y.size, 4))
    groups = np.array(["many", "many", "medium", "few", "few"])
    m = evaluate(clf, FeatureBatch(x, y), groups)
    conf = np.zeros((c, c), dtype=int)
    for t, p in zip(y, predict(clf, x)):
        conf[t, p] += 1
    per_class = np.diag(conf) / conf.sum(axis=1)
    assert m["all"] == np.trace(conf) / conf.sum()
    assert m["mean_class"] == pytest.approx(per_class.mean(), abs=1e-15)
    assert m["few"] == (conf[3, 3] + conf[4, 4]) / conf[3:].sum()
