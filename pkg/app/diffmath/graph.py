# app/diffmath/graph.py
"""Named-binding compute graphs.

A Graph wraps a function of named float64 tensors. ``forward`` binds the
inputs as fresh leaves and records the autograd graph; ``backward`` returns a
gradient for every bound name (zeros where the output does not depend on it).
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import torch

from app.diffmath import DTYPE
from app.utils.errors import (
    BackwardBeforeForwardError,
    NonFiniteValueError,
    ShapeMismatchError,
    UnboundInputError,
)

logger = logging.getLogger(__name__)

Bindings = Mapping[str, torch.Tensor]


@dataclass
class Graph:
    """A compute node: an op-kind name, its named inputs and cached results."""

    name: str
    fn: Callable[[Dict[str, torch.Tensor]], torch.Tensor]
    inputs: Tuple[str, ...]
    _leaves: Optional[Dict[str, torch.Tensor]] = field(default=None, repr=False)
    _value: Optional[torch.Tensor] = field(default=None, repr=False)

    @property
    def value(self) -> Optional[torch.Tensor]:
        return None if self._value is None else self._value.detach()

    def evaluate(self, bindings: Bindings) -> torch.Tensor:
        """Pure evaluation without recording anything."""
        with torch.no_grad():
            return self.fn({k: v.to(DTYPE) for k, v in bindings.items()})


def _check_bound(graph: Graph, bindings: Bindings) -> None:
    missing = [name for name in graph.inputs if name not in bindings]
    if missing:
        raise UnboundInputError(graph.name, missing)


def forward(graph: Graph, bindings: Bindings) -> torch.Tensor:
    """Evaluates the graph, caching leaves so that backward can run."""
    _check_bound(graph, bindings)
    leaves = {
        name: bindings[name].detach().to(DTYPE).clone().requires_grad_(True)
        for name in graph.inputs
    }
    try:
        value = graph.fn(leaves)
    except ShapeMismatchError:
        raise
    except RuntimeError as e:
        raise ShapeMismatchError(graph.name, [t.shape for t in leaves.values()], str(e)) from e
    if not torch.isfinite(value).all():
        raise NonFiniteValueError(f"Graph '{graph.name}' produced non-finite values")
    graph._leaves = leaves
    graph._value = value
    logger.debug(f"forward '{graph.name}' -> shape {tuple(value.shape)}")
    return value.detach()


def backward(graph: Graph, seed: Optional[torch.Tensor] = None) -> Dict[str, torch.Tensor]:
    """Reverse-mode gradients of the cached output for every bound input."""
    if graph._value is None or graph._leaves is None:
        raise BackwardBeforeForwardError(f"backward called on '{graph.name}' before forward")
    value = graph._value
    if seed is None:
        seed = torch.ones_like(value)
    if tuple(seed.shape) != tuple(value.shape):
        raise ShapeMismatchError(graph.name, [seed.shape, value.shape], "seed must match output")
    names = list(graph._leaves)
    leaves = [graph._leaves[n] for n in names]
    if not value.requires_grad:
        return {n: torch.zeros_like(l) for n, l in zip(names, leaves)}
    grads = torch.autograd.grad(value, leaves, grad_outputs=seed.to(DTYPE), retain_graph=True, allow_unused=True)
    return {
        n: (torch.zeros_like(l) if g is None else g.detach())
        for n, l, g in zip(names, leaves, grads)
    }


def named_gradients(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor], retain_graph: bool = False
) -> Dict[str, torch.Tensor]:
    """Gradients of a scalar loss w.r.t. named live parameters (zeros if unused)."""
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, retain_graph=retain_graph, allow_unused=True)
    return {
        n: (torch.zeros_like(t) if g is None else g.detach())
        for n, t, g in zip(names, tensors, grads)
    }


def trainable(named: Iterable[Tuple[str, torch.nn.Parameter]]) -> Dict[str, torch.nn.Parameter]:
    return {name: p for name, p in named if p.requires_grad}
