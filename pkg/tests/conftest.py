import numpy as np
import pytest
import torch

from stereoadapt.kernels import available_backends, get_backend


@pytest.fixture(params=available_backends())
def kernel_backend(request):
    return get_backend(request.param)


def finite_difference_gradient(fn, inputs, index, eps=1e-4):
    """Central finite differences of scalar fn w.r.t. inputs[index] (float64)."""
    grad = torch.zeros_like(inputs[index])
    flat = inputs[index].reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = fn(*inputs).item()
        flat[i] = orig - eps
        lo = fn(*inputs).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def check_gradients(fn, inputs, rel_tol=1e-4, eps=1e-4):
    """Assert autograd gradients of scalar fn match central differences.

    inputs: list of float64 tensors; all receive requires_grad.
    """
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    out = fn(*leaves)
    out.backward()
    for idx, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else torch.zeros_like(leaf)
        numeric = finite_difference_gradient(fn, [t.detach().clone() for t in leaves], idx, eps)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-10)
        rel = (analytic - numeric).norm().item() / denom
        assert rel < rel_tol, f"input {idx}: rel grad error {rel:.3e} >= {rel_tol}"
