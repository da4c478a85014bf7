"""Supervised semantic modulator.

A second-order pooling (SP) block reduces channels with a 1x1 convolution,
pools the map into a channel covariance matrix, and maps the vectorized
matrix through a fully-connected layer.  Stacking the per-image SP outputs
and pooling them with a second SP yields the group-wise channel selector,
which a small classifier turns into per-category sigmoid responses.

Covariance reductions use math.fsum, which returns the correctly rounded
sum regardless of operand order, so reordering the images of a group leaves
the selector bit-identical.  The pooled maps are tiny (the lowest backbone
level and the N-image stack), so the exact reduction costs nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (Tensor, add, concat, conv2d, log, matmul, mul, neg,
                     reshape, sigmoid, sub, sum_all, _make)


@dataclass
class SPParams:
    """Channel-reducing 1x1 kernel plus the FC transform of the covariance."""

    reduce_kernel: Tensor  # (1, 1, d_in, c)
    fc_weight: Tensor      # (c*c, d_out)
    fc_bias: Tensor        # (d_out,)

    def __post_init__(self):
        c = self.reduce_kernel.dims[3]
        if c < 2:
            raise ContractError(f"SPParams: need >= 2 reduced channels, got {c}")
        if self.fc_weight.dims[0] != c * c:
            raise ShapeError(
                f"SPParams: fc expects {c * c} covariance entries, "
                f"got weight {self.fc_weight.dims}"
            )
        if self.fc_bias.dims != (self.fc_weight.dims[1],):
            raise ShapeError(
                f"SPParams: bias {self.fc_bias.dims} vs fc output {self.fc_weight.dims}"
            )


@dataclass
class ChannelSelector:
    gamma: Tensor  # (d,)


@dataclass
class ClassifierParams:
    weight: Tensor  # (L, d)
    bias: Tensor    # (L,)

    @property
    def n_categories(self) -> int:
        return self.weight.dims[0]

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.weight.dims[0] < 1:
            raise ShapeError(f"ClassifierParams: bad weight shape {self.weight.dims}")
        if self.bias.dims != (self.weight.dims[0],):
            raise ShapeError(
                f"ClassifierParams: bias {self.bias.dims} vs weight {self.weight.dims}"
            )


def _covariance_kernel(arr: np.ndarray, center: bool) -> np.ndarray:
    h, w, c = arr.shape
    hw = h * w
    rows = np.ascontiguousarray(arr.reshape(hw, c).T)  # (c, hw)
    if center:
        means = np.array([math.fsum(rows[a]) / hw for a in range(c)])
        rows = rows - means[:, None]
    cov = np.empty((c, c), dtype=np.float64)
    for a in range(c):
        for b in range(a, c):
            v = math.fsum(rows[a] * rows[b]) / hw
            cov[a, b] = v
            cov[b, a] = v
    return cov


def covariance(features: Tensor, center: bool = True) -> Tensor:
    """Channel covariance of an (h, w, c) map, pooled over positions.

    Entries are exactly rounded sums, so the result does not depend on the
    raster order of the positions.  ``center=False`` gives the raw second
    moment instead.
    """
    if features.data.ndim != 3:
        raise ShapeError(f"covariance: need (h,w,c), got {features.dims}")
    h, w, c = features.dims
    hw = h * w
    data = _covariance_kernel(features.data, center)

    def grad_fn(og):
        rows = features.data.reshape(hw, c).T
        if center:
            rows = rows - rows.mean(axis=1, keepdims=True)
        g_rows = ((og + og.T) @ rows) / hw  # (c, hw)
        if center:
            g_rows = g_rows - g_rows.mean(axis=1, keepdims=True)
        return (np.ascontiguousarray(g_rows.T).reshape(h, w, c),)

    return _make("covariance", (features,), data, grad_fn,
                 lambda: _covariance_kernel(features.data, center))


def sp_forward(x: Tensor, params: SPParams, center: bool = True) -> Tensor:
    """1x1 reduce -> covariance -> FC on the vectorized matrix -> (1, 1, d_out)."""
    reduced = conv2d(x, params.reduce_kernel)
    cov = covariance(reduced, center=center)
    c = cov.dims[0]
    vec = reshape(cov, (1, c * c))
    out = add(matmul(vec, params.fc_weight), reshape(params.fc_bias, (1, -1)))
    return reshape(out, (1, 1, params.fc_weight.dims[1]))


def hsp_forward(group_lowest: list[Tensor], sp1: SPParams, sp2: SPParams,
                center: bool = True) -> ChannelSelector:
    """Per-image SP, stack the N outputs as an (N, 1, d) grid, pool again."""
    if not group_lowest:
        raise ShapeError("hsp_forward: empty group")
    shape = group_lowest[0].dims
    for t in group_lowest[1:]:
        if t.dims != shape:
            raise ShapeError(
                f"hsp_forward: group shape mismatch: {shape} vs {t.dims}"
            )
    per_image = [sp_forward(t, sp1, center=center) for t in group_lowest]
    stacked = per_image[0] if len(per_image) == 1 else concat(per_image, axis=0)
    pooled = sp_forward(stacked, sp2, center=center)
    d_out = pooled.dims[2]
    return ChannelSelector(gamma=reshape(pooled, (d_out,)))


def classify(selector: ChannelSelector, params: ClassifierParams) -> Tensor:
    """Per-category sigmoid responses: sigmoid(W gamma + b), shape (L,)."""
    gamma = selector.gamma
    if gamma.dims != (params.weight.dims[1],):
        raise ShapeError(
            f"classify: selector {gamma.dims} vs weight {params.weight.dims}"
        )
    logits = add(matmul(params.weight, reshape(gamma, (-1, 1))),
                 reshape(params.bias, (-1, 1)))
    return reshape(sigmoid(logits), (params.n_categories,))


def semantic_loss(y_hat: Tensor, y: np.ndarray) -> Tensor:
    """Mean per-category binary cross-entropy, log arguments clamped at 1e-12."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != y_hat.dims:
        raise ShapeError(f"semantic_loss: labels {y.shape} vs responses {y_hat.dims}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ContractError("semantic_loss: labels must be binary")
    n = y.size
    y_t = Tensor(y)
    pos = mul(y_t, log(y_hat))
    neg_term = mul(Tensor(1.0 - y), log(sub(Tensor(np.ones_like(y)), y_hat)))
    return mul(neg(sum_all(add(pos, neg_term))), Tensor(1.0 / n))


def one_hot(category: int, n_categories: int) -> np.ndarray:
    if not (0 <= category < n_categories):
        raise ContractError(
            f"one_hot: category {category} outside [0, {n_categories})"
        )
    out = np.zeros(n_categories)
    out[category] = 1.0
    return out
