import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def random_classifier(rng, n_classes, dim, kappa_range=(1.0, 30.0), prior=True):
    from vmfcal.vmf_core import VmfClassifier

    kappa = rng.uniform(*kappa_range, size=n_classes)
    mu = np.array([random_unit(rng, dim) for _ in range(n_classes)])
    p = rng.dirichlet(np.ones(n_classes)) if prior else None
    return VmfClassifier(kappa, mu, p)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
