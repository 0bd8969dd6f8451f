import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    base = x.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn(base))
            flat[i] = orig - eps
            f_minus = float(fn(base))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    leaf = x.detach().clone().requires_grad_(True)
    value = fn(leaf)
    value.backward()
    assert leaf.grad is not None
    return leaf.grad.detach().clone()


def max_rel_error(analytic: torch.Tensor, fd: torch.Tensor) -> float:
    """Worst absolute deviation measured against the gradient's own scale."""
    scale = max(float(analytic.abs().max()), float(fd.abs().max()), 1e-12)
    return float((analytic - fd).abs().max()) / scale


def check_gradients(fn, x: torch.Tensor, eps: float = 1e-5, tol: float = 1e-3) -> float:
    assert x.dtype == torch.float64, "gradient checks run at 64-bit precision"
    err = max_rel_error(analytic_grad(fn, x), finite_difference_grad(fn, x, eps=eps))
    assert err <= tol, f"max relative gradient error {err:.3e} > {tol}"
    return err


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240811)
