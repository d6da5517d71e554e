# app/diffmath/__init__.py
"""Differentiable numeric substrate: float64 torch tensors, checked forward ops,
named-binding graphs with reverse-mode gradients, finite-difference checks,
the adaptive-moment optimizer and the checkpoint file format."""

import torch

DTYPE = torch.float64


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    """Builds a float64 tensor from nested lists, arrays or tensors."""
    if isinstance(data, torch.Tensor):
        out = data.detach().to(DTYPE).clone()
    else:
        out = torch.as_tensor(data, dtype=DTYPE).clone()
    return out.requires_grad_(requires_grad)
