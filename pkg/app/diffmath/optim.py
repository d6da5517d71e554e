# app/diffmath/optim.py
"""Adaptive-moment optimizer over named trainable parameters."""

import logging
from typing import Dict, Mapping, Optional, Tuple

import torch

from app.utils.errors import MissingGradientError, ShapeMismatchError

logger = logging.getLogger(__name__)


class OptimizerState:
    """Moment accumulators, step count and hyperparameters for one parameter set.

    Only the parameters given at construction are ever updated; anything else
    (frozen encoder weights in particular) is untouched by ``step``. With
    ``clip_norm`` the gradients are rescaled to at most that global L2 norm.
    """

    def __init__(
        self,
        params: Mapping[str, torch.nn.Parameter],
        lr: float = 1e-3,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: Optional[float] = None,
    ):
        self.params: Dict[str, torch.nn.Parameter] = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._adam = torch.optim.Adam(list(self.params.values()), lr=lr, betas=betas, eps=eps)

    def set_lr(self, lr: float) -> None:
        self.lr = lr
        for group in self._adam.param_groups:
            group["lr"] = lr

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        state = self._adam.state.get(self.params[name], {})
        p = self.params[name]
        return (
            state.get("exp_avg", torch.zeros_like(p)).detach(),
            state.get("exp_avg_sq", torch.zeros_like(p)).detach(),
        )

    def step(self, grads: Mapping[str, torch.Tensor]) -> float:
        """Applies one update; returns the global gradient norm before clipping."""
        missing = [name for name in self.params if name not in grads]
        if missing:
            raise MissingGradientError(missing)
        for name, p in self.params.items():
            g = grads[name]
            if tuple(g.shape) != tuple(p.shape):
                raise ShapeMismatchError(f"optimizer:{name}", [p.shape, g.shape])
            p.grad = g.detach().to(p.dtype).clone()
        values = list(self.params.values())
        if self.clip_norm is not None:
            norm = float(torch.nn.utils.clip_grad_norm_(values, self.clip_norm))
        else:
            norm = float(torch.linalg.vector_norm(torch.stack([torch.linalg.vector_norm(p.grad) for p in values])))
        self._adam.step()
        self._adam.zero_grad(set_to_none=True)
        self.step_count += 1
        logger.debug(f"optimizer step {self.step_count} over {len(self.params)} tensors (grad norm {norm:.3e})")
        return norm


def optimizer_step(
    params: Mapping[str, torch.nn.Parameter],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
) -> Dict[str, torch.nn.Parameter]:
    """Applies one update to the trainable parameters tracked by ``state``."""
    unknown = [name for name in params if name not in state.params]
    if unknown:
        logger.debug(f"optimizer_step: leaving untracked parameters untouched: {unknown}")
    state.step(grads)
    return dict(params)
