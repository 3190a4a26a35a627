import numpy as np
import pytest

from nestcon.synthdata import GenConfig, generate


@pytest.fixture(scope="session")
def small_dataset():
    cfg = GenConfig(num_patients=12, lesions_per_patient_range=(2, 5), image_dim=10,
                    patient_meta_dim=4, lesion_meta_dim=5, latent_dim=4, missing_rate=0.1, seed=5)
    return generate(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)
