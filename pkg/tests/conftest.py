import numpy as np
import pytest

from deskgan import autodiff as ad


def numeric_grad(f, arrays, h=1e-3):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(*arrays)
            flat[i] = old - h
            fm = f(*arrays)
            flat[i] = old
            gf[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def autodiff_grad(build, arrays):
    """Reverse-mode gradients of ``build(*tensors)`` at float64 ``arrays``."""
    ts = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    return [g.data for g in ad.grad(build(*ts), ts)]


def scalar_of(build):
    def f(*arrays):
        with ad.no_grad():
            return float(build(*[ad.Tensor(a) for a in arrays]).data)

    return f


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
