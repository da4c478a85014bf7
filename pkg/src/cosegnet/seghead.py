"""Segmentation head: modulation, coarse-to-fine fusion, mask prediction.

Every backbone level is first projected to the shared channel count, then
shifted and scaled by the two modulators (the spatial heatmap is resampled
to each level's resolution).  The modulated levels merge top-down in FPN
style; a 3x3 conv, a 1x1 conv to one channel, bilinear upsampling and a
sigmoid produce the per-image probability mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import (Tensor, add, conv2d, log, mul, neg, relu, reshape,
                     resample, scale_shift, sigmoid, sub, sum_all)


@dataclass
class ModulatedPyramid:
    levels: list[Tensor]  # four (h_i, w_i, d) maps


@dataclass
class SegHeadParams:
    proj_kernels: list[Tensor]     # four 1x1 kernels, backbone channels -> d
    lateral_kernels: list[Tensor]  # three 1x1 kernels d -> d for the top-down path
    final3_kernel: Tensor          # (3, 3, d, d)
    final3_bias: Tensor            # (d,)
    final1_kernel: Tensor          # (1, 1, d, 1)
    final1_bias: Tensor            # (1,)

    def named(self, prefix: str = "head"):
        for i, k in enumerate(self.proj_kernels):
            yield f"{prefix}.proj{i}.kernel", k
        for i, k in enumerate(self.lateral_kernels):
            yield f"{prefix}.lateral{i}.kernel", k
        yield f"{prefix}.final3.kernel", self.final3_kernel
        yield f"{prefix}.final3.bias", self.final3_bias
        yield f"{prefix}.final1.kernel", self.final1_kernel
        yield f"{prefix}.final1.bias", self.final1_bias


def init_seghead(stage_channels, d: int, rng: np.random.Generator) -> SegHeadParams:
    def kernel(k, cin, cout):
        std = np.sqrt(2.0 / (k * k * cin))
        return Tensor(rng.standard_normal((k, k, cin, cout)) * std, requires_grad=True)

    return SegHeadParams(
        proj_kernels=[kernel(1, c, d) for c in stage_channels],
        lateral_kernels=[kernel(1, d, d) for _ in range(3)],
        final3_kernel=kernel(3, d, d),
        final3_bias=Tensor(np.zeros(d), requires_grad=True),
        final1_kernel=kernel(1, d, 1),
        final1_bias=Tensor(np.zeros(1), requires_grad=True),
    )


def project_levels(levels: list[Tensor], params: SegHeadParams) -> list[Tensor]:
    return [conv2d(level, k) for level, k in zip(levels, params.proj_kernels)]


def modulate(levels: list[Tensor], gamma: Tensor, spatial_mask: Tensor) -> ModulatedPyramid:
    """Y[..., c] = gamma[c] * X[..., c] + S at every level.

    ``levels`` must already share the selector's channel count; the (h, w)
    heatmap is bilinearly resampled to each level's resolution.
    """
    d = gamma.data.size
    for level in levels:
        if level.dims[2] != d:
            raise ShapeError(
                f"modulate: selector length {d} vs level channels {level.dims}"
            )
    if spatial_mask.data.ndim != 2:
        raise ShapeError(f"modulate: spatial mask must be 2-D, got {spatial_mask.dims}")
    mask3 = reshape(spatial_mask, (*spatial_mask.dims, 1))
    out = []
    for level in levels:
        hi, wi, _ = level.dims
        shift = reshape(resample(mask3, hi, wi, mode="bilinear"), (hi, wi))
        out.append(scale_shift(level, gamma, shift))
    return ModulatedPyramid(levels=out)


def fpn_fuse(pyramid: ModulatedPyramid, params: SegHeadParams,
             upsample_mode: str = "bilinear") -> Tensor:
    """Coarse-to-fine: 1x1 conv, upsample x2, add the next finer level."""
    levels = pyramid.levels
    if len(levels) != 4:
        raise ShapeError(f"fpn_fuse: need 4 levels, got {len(levels)}")
    top = levels[-1]
    for lateral, finer in zip(params.lateral_kernels, reversed(levels[:-1])):
        hi, wi, _ = finer.dims
        top = add(resample(conv2d(top, lateral), hi, wi, mode=upsample_mode), finer)
    return top


def predict_mask(fused: Tensor, params: SegHeadParams, out_h: int, out_w: int) -> Tensor:
    """Probability mask in (0, 1) at the requested output extent."""
    t = relu(conv2d(fused, params.final3_kernel, params.final3_bias, padding=1))
    t = conv2d(t, params.final1_kernel, params.final1_bias)
    t = resample(t, out_h, out_w, mode="bilinear")
    return reshape(sigmoid(t), (out_h, out_w))


def segmentation_loss(preds: list[Tensor], gts: list[np.ndarray],
                      balance_swap: bool = False) -> Tensor:
    """Weighted pixel-wise cross-entropy averaged over all pixels of the group.

    The positive term of image n is weighted by its foreground fraction and
    the negative term by the complement; ``balance_swap`` exchanges the two
    weights (the conventional class-balancing form).
    """
    if len(preds) != len(gts):
        raise ShapeError(f"segmentation_loss: {len(preds)} preds vs {len(gts)} masks")
    if not preds:
        raise ShapeError("segmentation_loss: empty group")
    total = None
    pixels = None
    for pred, gt in zip(preds, gts):
        gt = np.asarray(gt, dtype=np.float64)
        if gt.shape != pred.dims:
            raise ShapeError(
                f"segmentation_loss: mask {gt.shape} vs prediction {pred.dims}"
            )
        if not np.isin(gt, (0.0, 1.0)).all():
            raise ContractError("segmentation_loss: ground truth must be binary")
        if pixels is None:
            pixels = gt.size
        delta = float(gt.mean())
        w_pos, w_neg = ((1.0 - delta), delta) if balance_swap else (delta, 1.0 - delta)
        pos = mul(Tensor(w_pos * gt), log(pred))
        neg_term = mul(Tensor(w_neg * (1.0 - gt)),
                       log(sub(Tensor(np.ones_like(gt)), pred)))
        term = sum_all(add(pos, neg_term))
        total = term if total is None else add(total, term)
    scale = 1.0 / (len(preds) * pixels)
    return mul(neg(total), Tensor(scale))
