import numpy as np
import pytest

from mmfuse import tensor as T
from mmfuse.data import SyntheticSpec, generate_synthetic, load_encoded


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_spec(**overrides):
    base = dict(
        num_classes=3, num_subjects=4, num_sessions=2, trials=1, duration=2.0,
        modalities=[
            dict(name="imu", channels=3, rate=20.0, noise=0.5),
            dict(name="pose", channels=4, rate=10.0, noise=0.5),
        ],
    )
    base.update(overrides)
    return SyntheticSpec(**base)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_ds")
    generate_synthetic(small_spec(), root)
    return root


@pytest.fixture(scope="session")
def small_dataset(small_dataset_dir):
    return load_encoded(small_dataset_dir, windows={"imu": 4, "pose": 2})


def grad_check(loss_fn, tensors, step=1e-5, max_entries=None, rng=None):
    """Relative error between backprop and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic, numeric = [], []
    for t in tensors:
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = sorted(rng.choice(n, size=max_entries, replace=False).tolist())
        else:
            idx = list(range(n))
        g = np.zeros(t.shape) if t.grad is None else t.grad
        analytic.append(g.reshape(-1)[idx])
        numeric.append(T.numerical_grad(loss_fn, t, step=step, indices=idx))
        t.grad = None
    return T.relative_error(np.concatenate(analytic), np.concatenate(numeric))
