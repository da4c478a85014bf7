"""Finite-difference verification of the taped gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Graph, Tensor, backward


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor],
               step: float = 1e-5, coordinate_limit: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` must map the given tensors to a scalar and be re-runnable; inputs
    are perturbed in place one coordinate at a time and restored.  The error
    per coordinate is |analytic - numeric| / max(1, |numeric|).
    ``coordinate_limit`` caps how many coordinates per input are probed
    (random subset drawn from ``rng``); by default every coordinate is
    checked.
    """
    if not (1e-7 <= step <= 1e-3):
        raise ContractError(f"grad_check: step {step} outside [1e-7, 1e-3]")
    for t in inputs:
        t.grad = None
    with Graph() as graph:
        out = f(*inputs)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got {out.dims}")
    backward(graph, out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        indices = np.arange(flat.size)
        if coordinate_limit is not None and flat.size > coordinate_limit:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(flat.size, size=coordinate_limit, replace=False)
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(*inputs).item()
            flat[i] = orig - step
            f_minus = f(*inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(numeric))
            if err > max_err:
                max_err = err
    return max_err


def nudge_away_from(x: np.ndarray, pivot: float = 0.0, margin: float = 1e-3) -> np.ndarray:
    """Push values within ``margin`` of ``pivot`` out to the margin.

    Used to keep finite-difference probes clear of relu kinks.
    """
    out = x.copy()
    close = np.abs(out - pivot) < margin
    out[close] = pivot + np.where(out[close] >= pivot, margin, -margin)
    return out
