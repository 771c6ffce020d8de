import numpy as np
import pytest

from cafbifpn import tensor as T
from cafbifpn import tensorio as IO


def arr(x) -> np.ndarray:
    if isinstance(x, (T.Tensor, T.Node)):
        return np.asarray(T._val(x), dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def max_abs_diff(a, b) -> float:
    da, db = arr(a), arr(b)
    assert da.shape == db.shape, f"shape mismatch {da.shape} vs {db.shape}"
    return float(np.max(np.abs(da - db))) if da.size else 0.0


def rel_err(analytic, fd, floor: float = 1e-3) -> np.ndarray:
    a, f = arr(analytic), arr(fd)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("fixture")
    IO.gen_fixture(0, d)
    return d
