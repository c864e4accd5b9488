import numpy as np
import pytest

from mvft.model import ModelConfig, build_model
from mvft.rng import SeededRng
from mvft.views import SensorWindow, ViewBatch, build_batch


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-or-vector f() w.r.t. every entry of arr (perturbed in place)."""
    base = np.asarray(f(), dtype=np.float64)
    out = np.zeros(arr.shape + base.shape)
    flat = arr.reshape(-1)
    view = out.reshape((flat.size,) + base.shape)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        plus = np.asarray(f(), dtype=np.float64)
        flat[i] = keep - h
        minus = np.asarray(f(), dtype=np.float64)
        flat[i] = keep
        view[i] = (plus - minus) / (2 * h)
    return out


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


def random_batch(seed: int, n: int, T: int = 4, C: int = 2, n_class: int = 3, jitter: bool = True) -> ViewBatch:
    rng = SeededRng(seed)
    windows = []
    for i in range(n):
        steps = 1 + (rng.integers(T - 1, 3) if jitter else np.zeros(T - 1, dtype=np.int64))
        ts = np.concatenate([[0], np.cumsum(steps)])
        windows.append(SensorWindow(rng.normal(T * C).reshape(T, C), ts, i % n_class))
    return build_batch(windows)


TINY = dict(n_channels=2, seq_len=4, n_class=3, d_model=8, n_heads=2, n_enc=1, n_dec=1, d_ff=16)


def tiny_model(seed: int = 0, **overrides):
    return build_model(ModelConfig(**{**TINY, **overrides}), SeededRng(seed))


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture(autouse=True)
def clean_tape():
    from mvft import autograd as ag
    ag.TAPE.clear()
    yield
    ag.TAPE.clear()
