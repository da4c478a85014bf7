"""Network assembly: backbone, both modulators, segmentation head.

A model is a config plus a flat name -> Tensor parameter dict; the forward
pass is a pure function of (images, parameters), so groups can be evaluated
independently and all randomness is confined to explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seghead, semantic, spatial
from .backbone import BackboneConfig, BackboneParams, init_backbone, run_backbone
from .errors import ConfigError
from .seghead import SegHeadParams, init_seghead
from .semantic import ChannelSelector, ClassifierParams, SPParams
from .spatial import SpatialMaskSet, SpectralSolution
from .tensor import Tensor


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    sp_channels: int = 16
    n_categories: int = 8
    upsample_mode: str = "bilinear"
    orientation: str = "minority"
    center_covariance: bool = True
    solver_tol: float = 1e-8
    solver_max_iter: int = 10000

    def __post_init__(self):
        if self.sp_channels < 2:
            raise ConfigError("sp_channels must be >= 2")
        if self.n_categories < 1:
            raise ConfigError("n_categories must be >= 1")
        if self.upsample_mode not in ("bilinear", "nearest"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")
        if self.orientation not in ("minority", "raw"):
            raise ConfigError(f"unknown orientation {self.orientation!r}")


@dataclass
class GroupOutput:
    prob_masks: list[Tensor]                 # (H, W) in (0, 1), one per image
    spatial_masks: SpatialMaskSet | None     # None when the modulator is disabled
    spectral: SpectralSolution | None
    gamma: np.ndarray
    responses: np.ndarray | None             # classifier outputs, (L,)
    loss_spa: Tensor | None
    loss_sem: Tensor | None
    loss_seg: Tensor | None


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    std = np.sqrt(1.0 / fan_in)
    return Tensor(rng.standard_normal((fan_in, fan_out)) * std, requires_grad=True)


def _sp_params(rng: np.random.Generator, d_in: int, c: int, d_out: int,
               bias_value: float) -> SPParams:
    std = np.sqrt(1.0 / d_in)
    reduce_kernel = Tensor(rng.standard_normal((1, 1, d_in, c)) * std,
                           requires_grad=True)
    return SPParams(
        reduce_kernel=reduce_kernel,
        fc_weight=_linear_init(rng, c * c, d_out),
        fc_bias=Tensor(np.full(d_out, bias_value), requires_grad=True),
    )


class CosegModel:
    """Config + parameters + the group-level forward pass."""

    def __init__(self, config: ModelConfig, backbone: BackboneParams,
                 sp1: SPParams, sp2: SPParams, classifier: ClassifierParams,
                 head: SegHeadParams):
        self.config = config
        self.backbone = backbone
        self.sp1 = sp1
        self.sp2 = sp2
        self.classifier = classifier
        self.head = head

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "CosegModel":
        rng = np.random.default_rng((seed, 0))
        bb = init_backbone(config.backbone, rng)
        d = config.backbone.fused_channels
        c4 = config.backbone.stage_channels[-1]
        # sp2's bias initializes the selector near all-ones so modulation
        # starts as an identity scaling.
        sp1 = _sp_params(rng, c4, config.sp_channels, d, bias_value=0.0)
        sp2 = _sp_params(rng, d, config.sp_channels, d, bias_value=1.0)
        classifier = ClassifierParams(
            weight=Tensor(rng.standard_normal((config.n_categories, d)) * np.sqrt(1.0 / d),
                          requires_grad=True),
            bias=Tensor(np.zeros(config.n_categories), requires_grad=True),
        )
        head = init_seghead(config.backbone.stage_channels, d, rng)
        return cls(config, bb, sp1, sp2, classifier, head)

    def named_parameters(self):
        yield from self.backbone.named()
        for tag, sp in (("sem.sp1", self.sp1), ("sem.sp2", self.sp2)):
            yield f"{tag}.reduce", sp.reduce_kernel
            yield f"{tag}.fc_weight", sp.fc_weight
            yield f"{tag}.fc_bias", sp.fc_bias
        yield "sem.clf.weight", self.classifier.weight
        yield "sem.clf.bias", self.classifier.bias
        yield from self.head.named()

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def forward_group(self, images: list[np.ndarray],
                      category: int | None = None,
                      gt_masks: list[np.ndarray] | None = None,
                      disable_spatial: bool = False,
                      disable_semantic: bool = False,
                      detach_spatial_loss: bool = False,
                      balance_swap: bool = False,
                      solver_seed=0,
                      frozen_spectral: SpectralSolution | None = None,
                      inject_spatial: bool = True,
                      with_losses: bool = True) -> GroupOutput:
        """Run the whole network on one image group.

        ``frozen_spectral`` substitutes a previously solved eigenpair for the
        spectral solve; gradients never flow through the solve, so probing
        the loss with a frozen solution is how finite differences of the
        implemented gradient are taken.  ``inject_spatial=False`` keeps the
        spatial branch and its loss but feeds zero heatmaps to the head
        (warmup mode: the split trains before it starts steering).
        """
        cfg = self.config
        w, h = cfg.backbone.working_resolution
        n = len(images)
        pyramids = [run_backbone(Tensor(img), self.backbone, cfg.backbone)
                    for img in images]

        spectral = None
        mask_set = None
        loss_spa = None
        if disable_spatial:
            shifts = [Tensor(np.zeros((h, w))) for _ in range(n)]
        else:
            descriptors = spatial.collect_descriptors([p.fused for p in pyramids])
            if frozen_spectral is not None:
                spectral = frozen_spectral
            else:
                spectral = spatial.dominant_eigenvector(
                    descriptors, tol=cfg.solver_tol, max_iter=cfg.solver_max_iter,
                    seed=solver_seed)
            oriented = spatial.orient_and_rescale(
                spectral, descriptors.n_columns, orientation=cfg.orientation)
            mask_set = spatial.reshape_masks(oriented, n, w, h)
            if inject_spatial:
                shifts = mask_set.masks
            else:
                shifts = [Tensor(np.zeros((h, w))) for _ in range(n)]
            if with_losses:
                source = descriptors
                if detach_spatial_loss:
                    source = spatial.DescriptorMatrix(
                        x=descriptors.x.detached(), n_images=n, width=w,
                        height=h, channels=descriptors.channels)
                loss_spa = spatial.spatial_loss(source, spectral.s_hat)

        responses = None
        loss_sem = None
        if disable_semantic:
            gamma = ChannelSelector(Tensor(np.ones(cfg.backbone.fused_channels)))
        else:
            gamma = semantic.hsp_forward([p.lowest for p in pyramids],
                                         self.sp1, self.sp2,
                                         center=cfg.center_covariance)
            y_hat = semantic.classify(gamma, self.classifier)
            responses = y_hat.data.copy()
            if with_losses and category is not None:
                target = semantic.one_hot(category, cfg.n_categories)
                loss_sem = semantic.semantic_loss(y_hat, target)

        out_h, out_w = images[0].shape[:2]
        prob_masks = []
        for pyr, shift in zip(pyramids, shifts):
            projected = seghead.project_levels(pyr.levels, self.head)
            modulated = seghead.modulate(projected, gamma.gamma, shift)
            fused = seghead.fpn_fuse(modulated, self.head,
                                     upsample_mode=cfg.upsample_mode)
            prob_masks.append(seghead.predict_mask(fused, self.head, out_h, out_w))

        loss_seg = None
        if with_losses and gt_masks is not None:
            loss_seg = seghead.segmentation_loss(prob_masks, gt_masks,
                                                 balance_swap=balance_swap)

        return GroupOutput(prob_masks=prob_masks, spatial_masks=mask_set,
                           spectral=spectral, gamma=gamma.gamma.data.copy(),
                           responses=responses, loss_spa=loss_spa,
                           loss_sem=loss_sem, loss_seg=loss_seg)
