import numpy as np
import pytest

from crowdscale import tensor as T
from crowdscale.tensor import Tensor4


def finite_diff(loss_fn, param, positions, eps=1e-4):
    """Central finite differences of a scalar-valued function w.r.t. the
    given flat positions of `param` (a Tensor4 mutated in place)."""
    grads = []
    flat = param.data.reshape(-1)
    for pos in positions:
        orig = flat[pos]
        flat[pos] = orig + eps
        hi = loss_fn()
        flat[pos] = orig - eps
        lo = loss_fn()
        flat[pos] = orig
        grads.append((hi - lo) / (2 * eps))
    return np.array(grads)


def rel_err(analytic, numeric):
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_grads(build_loss, params, n_samples=8, eps=1e-4, tol=1e-4, seed=0):
    """Compare backward() gradients of `build_loss()` against central
    differences at sampled positions of every tensor in `params`."""
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for p in params:
        assert p.grad is not None
        size = p.data.size
        positions = rng.choice(size, size=min(n_samples, size), replace=False)
        numeric = finite_diff(lambda: build_loss().item(), p, positions, eps=eps)
        analytic = p.grad.reshape(-1)[positions]
        worst = max(worst, rel_err(analytic, numeric).max())
    assert worst < tol, f"worst relative gradient error {worst}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def t4(values, grad=True, dtype=np.float64):
    arr = np.asarray(values, dtype=dtype)
    while arr.ndim < 4:
        arr = arr[None]
    return Tensor4(np.ascontiguousarray(arr), requires_grad=grad)
