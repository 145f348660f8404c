"""Finite-difference validation of the objective's gradients.

Checks one random direction per parameter tensor: the analytic
directional derivative (from backward) against a central difference of
the loss in float64. Forward passes stay in train mode so the loss
depends only on parameters and the fixed inputs, not on batch-norm
running statistics.
"""

from __future__ import annotations

import numpy as np
import torch

from .model import DlmModel
from .objective import negative_elbo


def directional_gradient_errors(model: DlmModel, x: torch.Tensor, y: torch.Tensor,
                                eps: torch.Tensor, step: float = 1e-4,
                                seed: int = 0) -> dict:
    """Relative error of d(loss)/d(direction) per parameter block.

    The model and inputs must be float64. Returns {parameter name:
    relative error}; errors compare a fourth-order five-point stencil at
    ``step`` against the inner product of the analytic gradient with a
    unit direction drawn per block. The high-order stencil tolerates a
    step large enough to stay clear of round-off on blocks whose
    directional gradient is small.
    """
    if next(model.parameters()).dtype != torch.float64:
        raise ValueError("gradient check requires a float64 model")
    model.train()
    gen = torch.Generator().manual_seed(seed)

    loss, _ = negative_elbo(model, x, y, eps)
    grads = torch.autograd.grad(loss, [p for _, p in model.named_parameters()])

    def loss_at_offset(param, v, offset):
        param.add_(v, alpha=offset)
        value, _ = negative_elbo(model, x, y, eps)
        param.add_(v, alpha=-offset)
        return float(value)

    out = {}
    with torch.no_grad():
        for (name, param), grad in zip(model.named_parameters(), grads):
            v = torch.randn(param.shape, generator=gen, dtype=torch.float64)
            v /= v.norm()
            analytic = float((grad * v).sum())
            f1 = loss_at_offset(param, v, step)
            f_1 = loss_at_offset(param, v, -step)
            f2 = loss_at_offset(param, v, 2.0 * step)
            f_2 = loss_at_offset(param, v, -2.0 * step)
            fd = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * step)
            denom = max(abs(analytic), abs(fd), 1e-8)
            out[name] = abs(analytic - fd) / denom
    return out
