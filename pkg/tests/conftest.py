import numpy as np
import pytest
import torch

torch.use_deterministic_algorithms(True)


def central_diff(f, x: torch.Tensor, h=1e-6, idx=None):
    """Central finite-difference gradient of scalar ``f`` at ``x`` (optionally a subset)."""
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if idx is None else idx
    grads = {}
    for i in idx:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f(x).detach())
        flat[i] = orig - h
        fm = float(f(x).detach())
        flat[i] = orig
        grads[i] = (fp - fm) / (2 * h)
    return grads


def assert_grad_close(analytic, numeric: dict, rtol, atol=1e-9):
    flat = analytic.detach().reshape(-1)
    for i, g in numeric.items():
        a = flat[i].item()
        assert abs(a - g) <= rtol * max(abs(a), abs(g)) + atol, f"index {i}: autodiff {a} vs fd {g}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
