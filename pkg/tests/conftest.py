import numpy as np
import pytest

from gatedcrnn import autodiff as ad
from gatedcrnn.autodiff import Tensor


def numerical_grad(f, arrays, index, h=1e-5):
    """Central finite-difference gradient of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    base = arrays[index]
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = base[i]
        base[i] = old + h
        fp = f(*arrays)
        base[i] = old - h
        fm = f(*arrays)
        base[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def check_gradients(op, arrays, rtol=1e-4, seed=0, h=1e-5):
    """Compare autodiff gradients of ``sum(op(...) * R)`` with finite differences.

    ``R`` is a fixed random projection so every output element contributes.
    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    _project(out, proj).backward()

    def scalar(*arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * proj))

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numerical_grad(scalar, arrays, k, h=h)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8)
        err = np.max(np.abs(num - ana)) / scale
        worst = max(worst, err)
        assert err < rtol, f"input {k}: relative gradient error {err:.3g}"
    return worst


def _project(out, proj):
    return ad.sum(ad.mul(out, proj))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
