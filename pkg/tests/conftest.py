import numpy as np
import pytest

from starsr.tensor import Tape, Tensor

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"

FD_H = 1e-5
FD_RTOL = 1e-6


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return np.max(np.abs(a - b) / denom)


def fd_gradcheck(fn, inputs, h=FD_H, rtol=FD_RTOL):
    """Check d(fn)/d(input) against central finite differences.

    `fn` maps a list of float64 Tensors to a scalar Tensor; every input is
    perturbed coordinate-wise. Returns the worst relative error seen.
    """
    inputs = [Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
              for x in inputs]
    with Tape() as tape:
        out = fn(inputs)
    assert out.size == 1, "gradcheck target must be scalar"
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        assert t.grad is not None, "input received no gradient"
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(inputs).item()
            flat[i] = orig - h
            fm = fn(inputs).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        err = rel_err(t.grad.reshape(-1), num)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch: rel err {err:.3e} >= {rtol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240901)
