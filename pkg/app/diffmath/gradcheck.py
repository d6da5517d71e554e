# app/diffmath/gradcheck.py
"""Central-difference verification of analytic gradients."""

import logging
from typing import Optional, Tuple

import torch

from app.diffmath import DTYPE
from app.diffmath.graph import Bindings, Graph, backward, forward
from app.utils.errors import NonFiniteValueError

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
REL_FLOOR = 1e-8
# rounding allowance of each evaluation, in units of eps * |f|
ROUNDING_ULPS = 256


def central_difference(
    graph: Graph,
    point: Bindings,
    name: str,
    h: float = DEFAULT_STEP,
    entries: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for the chosen flat entries of one input.

    Also returns each difference's error bound: the rounding bound plus the
    truncation error estimated from the same difference at step 2h.
    """
    base = {k: v.detach().to(DTYPE).clone() for k, v in point.items()}
    flat = base[name].reshape(-1)
    idx = torch.arange(flat.numel()) if entries is None else entries
    out = torch.empty(len(idx), dtype=DTYPE)
    bound = torch.empty(len(idx), dtype=DTYPE)
    eps = torch.finfo(DTYPE).eps

    def at(i: int, offset: float) -> float:
        original = flat[i].item()
        flat[i] = original + offset
        value = graph.evaluate(base).sum()
        flat[i] = original
        if not torch.isfinite(value):
            raise NonFiniteValueError(f"Non-finite value at '{name}'[{i}] {offset:+g}")
        return value.item()

    for j, i in enumerate(idx.tolist()):
        f_plus, f_minus = at(i, h), at(i, -h)
        wide = (at(i, 2.0 * h) - at(i, -2.0 * h)) / (4.0 * h)
        out[j] = (f_plus - f_minus) / (2.0 * h)
        rounding = ROUNDING_ULPS * eps * max(abs(f_plus), abs(f_minus)) / h
        bound[j] = rounding + abs(wide - out[j].item()) / 3.0
    return out, bound


def entry_errors(analytic: torch.Tensor, numeric: torch.Tensor, bound: torch.Tensor, floor: float = REL_FLOOR) -> torch.Tensor:
    """(|a_i - n_i| - bound_i)+ / max(|a_i|, |n_i|, floor) per entry."""
    excess = ((analytic - numeric).abs() - bound).clamp_min(0.0)
    return excess / torch.clamp_min(torch.maximum(analytic.abs(), numeric.abs()), floor)


def grad_check(
    graph: Graph,
    point: Bindings,
    h: float = DEFAULT_STEP,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = REL_FLOOR,
) -> float:
    """Maximum over every checked entry of every input of
    |analytic - cd| / max(|analytic|, |cd|, floor), after the difference's
    own error bound is allowed for.

    ``max_entries`` limits inputs larger than that to a seeded random subset
    of their entries; smaller inputs are checked in full.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for name, value in point.items():
        if not torch.isfinite(value).all():
            raise NonFiniteValueError(f"Input '{name}' is not finite")
    forward(graph, point)
    analytic = backward(graph)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for name in graph.inputs:
        n = point[name].numel()
        entries = None
        if max_entries is not None and n > max_entries:
            entries = torch.randperm(n, generator=gen)[:max_entries]
        a = analytic[name].reshape(-1)
        if entries is not None:
            a = a[entries]
        cd, bound = central_difference(graph, point, name, h, entries)
        errors = entry_errors(a, cd, bound, floor)
        if errors.numel() == 0:
            continue
        err = float(errors.max())
        logger.debug(f"grad_check '{graph.name}' input '{name}': max rel err {err:.3e} at entry {int(errors.argmax())}")
        worst = max(worst, err)
    return worst
