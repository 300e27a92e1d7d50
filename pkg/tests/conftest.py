import numpy as np
import pytest

from sftnet.tensor import Tensor, backward


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            hi = f(*arrays)
            flat[i] = old - h
            lo = f(*arrays)
            flat[i] = old
            g.reshape(-1)[i] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, arrays, dtype=np.float64):
    ts = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    out = fn(*ts)
    backward(out)
    return [t.grad for t in ts]


def max_rel_err(a, n, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_op(fn, arrays, tol=1e-5, h=1e-5, dtype=np.float64, floor=1e-6):
    """Analytic grads of ``fn`` (in ``dtype``) vs a float64 central-difference oracle."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def scalar(*arrs):
        return fn(*[Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(scalar, arrays, h)
    analytic = analytic_grad(fn, arrays, dtype)
    errs = [max_rel_err(a, n, floor) for a, n in zip(analytic, numeric)]
    assert max(errs) <= tol, f"max rel err {max(errs):.3e} > {tol}"
    return errs


def conv2d_loop(x, w, b, padding):
    """Direct-loop cross-correlation oracle (stride 1)."""
    kh, kw, _, cout = w.shape
    if padding == "same":
        x = np.pad(x, ((0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    bsz, hh, ww, _ = x.shape
    oh, ow = hh - kh + 1, ww - kw + 1
    out = np.zeros((bsz, oh, ow, cout))
    for n in range(bsz):
        for i in range(oh):
            for j in range(ow):
                patch = x[n, i:i + kh, j:j + kw, :]
                for o in range(cout):
                    out[n, i, j, o] = np.sum(patch * w[..., o]) + b[o]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
