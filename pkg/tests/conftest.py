import numpy as np
import pytest

from metabias.effectsize import Estimate, Metric
from metabias.inference import IntegrationSettings


def make_estimates(ys, ses, metric=Metric.FISHER_Z):
    return [
        Estimate(float(y), float(se), metric, study_id=f"s{i}")
        for i, (y, se) in enumerate(zip(ys, ses))
    ]


def random_estimates(seed, n, mu=0.15, tau=0.05, se_range=(0.08, 0.35)):
    rng = np.random.default_rng(seed)
    ses = rng.uniform(*se_range, n)
    ys = mu + rng.standard_normal(n) * np.sqrt(ses**2 + tau**2)
    return make_estimates(ys, ses)


@pytest.fixture
def fast_settings():
    """Cheap but deterministic integration settings for unit tests."""
    return IntegrationSettings(seed=7, quadrature_nodes=24, is_samples=1500)
