"""Central-difference gradient checks against autograd.

The numerical side perturbs one scalar at a time and never touches autograd,
so it serves as an independent oracle for the analytic gradients.
"""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn as nn


def numerical_gradient(f: Callable[[], torch.Tensor], x: torch.Tensor, eps: float = 1e-5,
                       indices=None) -> torch.Tensor:
    """d f() / d x by central differences; ``x`` is perturbed in place and restored.

    With ``indices`` only those flat entries are estimated; the rest stay zero.
    """
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()) if indices is None else indices.tolist():
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f())
            flat[i] = orig - eps
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-4) -> float:
    """Norm-wise relative error.

    Gradients that vanish analytically (e.g. a key bias under softmax) leave only
    rounding noise in the numeric estimate, so the denominator is floored.
    """
    scale = max(analytic.norm().item(), numeric.norm().item(), floor)
    return (analytic - numeric).norm().item() / scale


def check_gradients(f: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per named leaf tensor of scalar ``f`` (tensors must be float64 and require grad).

    Tensors with more than ``max_entries`` elements are checked on a seeded
    random subset of entries.
    """
    for name, t in tensors.items():
        if t.dtype != torch.float64:
            raise TypeError(f"{name}: gradient checks need float64, got {t.dtype}")
        t.grad = None
    out = f()
    if out.dim() != 0:
        raise ValueError("f must return a scalar")
    out.backward()
    gen = torch.Generator().manual_seed(seed)
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
        idx = None
        if max_entries is not None and t.numel() > max_entries:
            idx = torch.randperm(t.numel(), generator=gen)[:max_entries]
        numeric = numerical_gradient(f, t, eps, idx)
        if idx is not None:
            analytic = analytic.view(-1)[idx]
            numeric = numeric.view(-1)[idx]
        errors[name] = relative_error(analytic, numeric)
    return errors


def module_gradient_errors(module: nn.Module, f: Callable[[], torch.Tensor], eps: float = 1e-5,
                           extra: dict[str, torch.Tensor] | None = None, max_entries: int | None = 64) -> dict[str, float]:
    tensors = {name: p for name, p in module.named_parameters() if p.requires_grad}
    tensors.update(extra or {})
    return check_gradients(f, tensors, eps, max_entries)


def projected(output: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Collapse a tensor output to a scalar with fixed random weights."""
    w = torch.randn(output.shape, generator=torch.Generator().manual_seed(seed), dtype=output.dtype)
    return (output * w).sum()
