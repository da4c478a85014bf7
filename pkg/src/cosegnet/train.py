"""Joint multi-task training: batching, Adam, logging, checkpoints.

All per-step randomness is a pure function of (seed, step), so a run resumed
from a checkpoint continues bit-identically to an uninterrupted one and two
same-seed runs produce identical loss CSVs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import (CONFIG_PREFIX, OPT_PREFIX, load_tensors, save_tensors,
                         split_records)
from .data import ImageGroup
from .errors import CheckpointError, ConfigError, ConvergenceError
from .backbone import BackboneConfig
from .metrics import GroupMetrics, MetricReport, mask_scores
from .model import CosegModel, GroupOutput, ModelConfig
from .tensor import Graph, Tensor, add, backward, mul

LOSS_CSV_HEADER = "step,loss_spa,loss_sem,loss_seg,loss"
METRICS_CSV_HEADER = "step,precision,jaccard"


@dataclass
class TrainConfig:
    group_size: int = 5
    groups_per_batch: int = 4
    image_size: tuple[int, int] = (64, 64)   # (height, width)
    learning_rate: float = 1e-4
    lr_halving_interval_steps: int = 25000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_steps: int = 2000
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    disable_spatial: bool = False
    disable_semantic: bool = False
    detach_spatial_loss: bool = False
    balance_swap: bool = False
    spatial_warmup_steps: int = 0
    # plumbing
    holdout_fraction: float = 0.2
    eval_interval: int = 200
    checkpoint_interval: int = 0             # 0: only the final checkpoint
    abort_on_nonconverged: bool = False

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.groups_per_batch < 1:
            raise ConfigError("groups_per_batch must be >= 1")
        if self.learning_rate <= 0 or self.lr_halving_interval_steps < 1:
            raise ConfigError("learning rate and halving interval must be positive")
        if min(self.loss_weights) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not (0.0 <= self.holdout_fraction < 1.0):
            raise ConfigError("holdout_fraction must be in [0, 1)")
        h, w = self.image_size
        if h % 32 or w % 32:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 32")


def lr_for_step(config: TrainConfig, step: int) -> float:
    return config.learning_rate * 0.5 ** (step // config.lr_halving_interval_steps)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> None:
    """Bias-corrected Adam update in place; missing grads count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)


def multi_task_loss(output: GroupOutput,
                    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
                    ) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three task losses, with per-component values.

    A component may be absent only if its weight is zero; a positive semantic
    weight without category supervision is a configuration error.
    """
    w_spa, w_sem, w_seg = weights
    parts = {}
    total = None
    for name, w, component in (("loss_spa", w_spa, output.loss_spa),
                               ("loss_sem", w_sem, output.loss_sem),
                               ("loss_seg", w_seg, output.loss_seg)):
        if component is None:
            if w > 0:
                raise ConfigError(
                    f"{name} has weight {w} but was not computed "
                    "(missing labels/masks or modulator disabled)"
                )
            parts[name] = 0.0
            continue
        parts[name] = component.item()
        term = mul(component, Tensor(float(w)))
        total = term if total is None else add(total, term)
    if total is None:
        total = Tensor(0.0)
    parts["loss"] = w_spa * parts["loss_spa"] + w_sem * parts["loss_sem"] \
        + w_seg * parts["loss_seg"]
    return total, parts


# ---------------------------------------------------------------------------
# dataset plumbing


def split_train_holdout(groups: list[ImageGroup], fraction: float
                        ) -> tuple[list[ImageGroup], list[ImageGroup]]:
    """Deterministic per-category split: the last groups (by name) held out."""
    by_cat: dict[int | None, list[ImageGroup]] = {}
    for g in sorted(groups, key=lambda g: g.name):
        by_cat.setdefault(g.category_id, []).append(g)
    train, holdout = [], []
    for cat_groups in by_cat.values():
        k = math.ceil(len(cat_groups) * fraction) if fraction > 0 else 0
        k = min(k, len(cat_groups) - 1)
        cut = len(cat_groups) - k
        train.extend(cat_groups[:cut])
        holdout.extend(cat_groups[cut:])
    train.sort(key=lambda g: g.name)
    holdout.sort(key=lambda g: g.name)
    return train, holdout


def build_pools(groups: list[ImageGroup], group_size: int
                ) -> dict[int, list[tuple[int, int]]]:
    """(group index, image index) pools per category, for batch sampling."""
    pools: dict[int, list[tuple[int, int]]] = {}
    for gi, group in enumerate(groups):
        if group.category_id is None:
            raise ConfigError(f"group {group.name} has no category label")
        if group.gt_masks is None:
            raise ConfigError(f"group {group.name} has no ground-truth masks")
        pools.setdefault(group.category_id, []).extend(
            (gi, ii) for ii in range(group.n_images))
    for cat, pool in pools.items():
        if len(pool) < group_size:
            raise ConfigError(
                f"category {cat} has only {len(pool)} training images, "
                f"need at least {group_size}"
            )
    return pools


def sample_batch(pools: dict[int, list[tuple[int, int]]], config: TrainConfig,
                 step: int) -> list[tuple[int, list[tuple[int, int]]]]:
    """One batch: (category, N picks) per slot, a pure function of (seed, step)."""
    rng = np.random.default_rng((config.seed, 1, step))
    cats = sorted(pools)
    batch = []
    for _ in range(config.groups_per_batch):
        cat = cats[int(rng.integers(len(cats)))]
        pool = pools[cat]
        picks = rng.choice(len(pool), size=config.group_size, replace=False)
        batch.append((cat, [pool[int(i)] for i in picks]))
    return batch


def evaluate_model(model: CosegModel, groups: list[ImageGroup],
                   config: TrainConfig, threshold: float = 0.5) -> MetricReport:
    """Inference over whole groups; masks thresholded and scored per image."""
    report = MetricReport()
    for gi, group in enumerate(groups):
        out = model.forward_group(
            group.images, disable_spatial=config.disable_spatial,
            disable_semantic=config.disable_semantic,
            solver_seed=(config.seed, 3, gi), with_losses=False)
        precision, jaccard = [], []
        for pred, gt in zip(out.prob_masks, group.gt_masks):
            p, j = mask_scores(pred.data >= threshold, gt > 0.5)
            precision.append(p)
            jaccard.append(j)
        report.groups.append(GroupMetrics(name=group.name, precision=precision,
                                          jaccard=jaccard))
    return report


# ---------------------------------------------------------------------------
# config snapshots inside the checkpoint container

_UPSAMPLE_CODES = {"bilinear": 0, "nearest": 1}
_ORIENT_CODES = {"minority": 0, "raw": 1}


def encode_configs(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict[str, np.ndarray]:
    bb = model_cfg.backbone
    enc = {
        "model.stage_channels": np.array(bb.stage_channels, dtype=np.float64),
        "model.fused_channels": np.array(float(bb.fused_channels)),
        "model.working_resolution": np.array(bb.working_resolution, dtype=np.float64),
        "model.convs_per_stage": np.array(float(bb.convs_per_stage)),
        "model.sp_channels": np.array(float(model_cfg.sp_channels)),
        "model.n_categories": np.array(float(model_cfg.n_categories)),
        "model.upsample_mode": np.array(float(_UPSAMPLE_CODES[model_cfg.upsample_mode])),
        "model.orientation": np.array(float(_ORIENT_CODES[model_cfg.orientation])),
        "model.center_covariance": np.array(float(model_cfg.center_covariance)),
        "model.solver_tol": np.array(model_cfg.solver_tol),
        "model.solver_max_iter": np.array(float(model_cfg.solver_max_iter)),
        "train.group_size": np.array(float(train_cfg.group_size)),
        "train.groups_per_batch": np.array(float(train_cfg.groups_per_batch)),
        "train.image_size": np.array(train_cfg.image_size, dtype=np.float64),
        "train.learning_rate": np.array(train_cfg.learning_rate),
        "train.lr_halving_interval_steps": np.array(float(train_cfg.lr_halving_interval_steps)),
        "train.adam_beta1": np.array(train_cfg.adam_beta1),
        "train.adam_beta2": np.array(train_cfg.adam_beta2),
        "train.adam_epsilon": np.array(train_cfg.adam_epsilon),
        "train.max_steps": np.array(float(train_cfg.max_steps)),
        "train.seed": np.array(float(train_cfg.seed)),
        "train.loss_weights": np.array(train_cfg.loss_weights, dtype=np.float64),
        "train.disable_spatial": np.array(float(train_cfg.disable_spatial)),
        "train.disable_semantic": np.array(float(train_cfg.disable_semantic)),
        "train.detach_spatial_loss": np.array(float(train_cfg.detach_spatial_loss)),
        "train.balance_swap": np.array(float(train_cfg.balance_swap)),
        "train.spatial_warmup_steps": np.array(float(train_cfg.spatial_warmup_steps)),
        "train.holdout_fraction": np.array(train_cfg.holdout_fraction),
        "train.eval_interval": np.array(float(train_cfg.eval_interval)),
        "train.checkpoint_interval": np.array(float(train_cfg.checkpoint_interval)),
        "train.abort_on_nonconverged": np.array(float(train_cfg.abort_on_nonconverged)),
    }
    return enc


def decode_configs(enc: dict[str, np.ndarray]) -> tuple[ModelConfig, TrainConfig]:
    def scalar(key):
        return float(enc[key])

    def ints(key):
        return tuple(int(v) for v in np.atleast_1d(enc[key]))

    upsample = {v: k for k, v in _UPSAMPLE_CODES.items()}[int(scalar("model.upsample_mode"))]
    orient = {v: k for k, v in _ORIENT_CODES.items()}[int(scalar("model.orientation"))]
    model_cfg = ModelConfig(
        backbone=BackboneConfig(
            stage_channels=ints("model.stage_channels"),
            fused_channels=int(scalar("model.fused_channels")),
            working_resolution=ints("model.working_resolution"),
            convs_per_stage=int(scalar("model.convs_per_stage")),
        ),
        sp_channels=int(scalar("model.sp_channels")),
        n_categories=int(scalar("model.n_categories")),
        upsample_mode=upsample,
        orientation=orient,
        center_covariance=bool(scalar("model.center_covariance")),
        solver_tol=scalar("model.solver_tol"),
        solver_max_iter=int(scalar("model.solver_max_iter")),
    )
    train_cfg = TrainConfig(
        group_size=int(scalar("train.group_size")),
        groups_per_batch=int(scalar("train.groups_per_batch")),
        image_size=ints("train.image_size"),
        learning_rate=scalar("train.learning_rate"),
        lr_halving_interval_steps=int(scalar("train.lr_halving_interval_steps")),
        adam_beta1=scalar("train.adam_beta1"),
        adam_beta2=scalar("train.adam_beta2"),
        adam_epsilon=scalar("train.adam_epsilon"),
        max_steps=int(scalar("train.max_steps")),
        seed=int(scalar("train.seed")),
        loss_weights=tuple(float(v) for v in enc["train.loss_weights"]),
        disable_spatial=bool(scalar("train.disable_spatial")),
        disable_semantic=bool(scalar("train.disable_semantic")),
        detach_spatial_loss=bool(scalar("train.detach_spatial_loss")),
        balance_swap=bool(scalar("train.balance_swap")),
        spatial_warmup_steps=int(scalar("train.spatial_warmup_steps")),
        holdout_fraction=scalar("train.holdout_fraction"),
        eval_interval=int(scalar("train.eval_interval")),
        checkpoint_interval=int(scalar("train.checkpoint_interval")),
        abort_on_nonconverged=bool(scalar("train.abort_on_nonconverged")),
    )
    return model_cfg, train_cfg


def save_model(path, model: CosegModel, train_cfg: TrainConfig,
               opt_state: AdamState | None = None) -> None:
    records: dict[str, np.ndarray] = {name: p.data for name, p in model.named_parameters()}
    if opt_state is not None:
        records[OPT_PREFIX + "step"] = np.array(float(opt_state.step))
        for name, arr in opt_state.m.items():
            records[f"{OPT_PREFIX}m/{name}"] = arr
        for name, arr in opt_state.v.items():
            records[f"{OPT_PREFIX}v/{name}"] = arr
    for key, arr in encode_configs(model.config, train_cfg).items():
        records[CONFIG_PREFIX + key] = arr
    save_tensors(path, records)


def load_model(path) -> tuple[CosegModel, TrainConfig, AdamState | None]:
    params, opt, config = split_records(load_tensors(path))
    model_cfg, train_cfg = decode_configs(config)
    model = CosegModel.init(model_cfg, seed=train_cfg.seed)
    expected = model.parameters()
    unknown = sorted(set(params) - set(expected))
    if unknown:
        raise CheckpointError(f"unknown parameter names in checkpoint: {unknown}")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint is missing parameters: {missing}")
    for name, tensor in expected.items():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, expected {tensor.data.shape}"
            )
        tensor.data = arr.copy()
    state = None
    if opt:
        state = AdamState.zeros(expected)
        state.step = int(float(opt["step"]))
        for name in expected:
            state.m[name] = opt[f"m/{name}"].copy()
            state.v[name] = opt[f"v/{name}"].copy()
    return model, train_cfg, state


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainResult:
    model: CosegModel
    state: AdamState
    loss_rows: list[str]
    metric_rows: list[str]
    final_report: MetricReport | None
    checkpoint_path: Path | None


def train(groups: list[ImageGroup], model_cfg: ModelConfig,
          config: TrainConfig, out_dir=None,
          resume_from=None, quiet: bool = True) -> TrainResult:
    train_groups, holdout_groups = split_train_holdout(groups, config.holdout_fraction)
    pools = build_pools(train_groups, config.group_size)

    if resume_from is not None:
        # the snapshot owns everything except how far to keep training
        model, saved_cfg, state = load_model(resume_from)
        config = replace(saved_cfg, max_steps=config.max_steps)
        train_groups, holdout_groups = split_train_holdout(groups, config.holdout_fraction)
        pools = build_pools(train_groups, config.group_size)
        if state is None:
            state = AdamState.zeros(model.parameters())
    else:
        model = CosegModel.init(model_cfg, seed=config.seed)
        state = AdamState.zeros(model.parameters())

    params = model.parameters()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    loss_rows = [LOSS_CSV_HEADER]
    metric_rows = [METRICS_CSV_HEADER]
    effective_weights = (
        0.0 if config.disable_spatial else config.loss_weights[0],
        0.0 if config.disable_semantic else config.loss_weights[1],
        config.loss_weights[2],
    )

    final_report = None
    start = state.step
    for step in range(start, config.max_steps):
        batch = sample_batch(pools, config, step)
        model.zero_grad()
        sums = {"loss_spa": 0.0, "loss_sem": 0.0, "loss_seg": 0.0, "loss": 0.0}
        with Graph() as graph:
            total = None
            for slot, (cat, picks) in enumerate(batch):
                images = [train_groups[gi].images[ii] for gi, ii in picks]
                gts = [train_groups[gi].gt_masks[ii] for gi, ii in picks]
                out = model.forward_group(
                    images, category=cat, gt_masks=gts,
                    disable_spatial=config.disable_spatial,
                    disable_semantic=config.disable_semantic,
                    detach_spatial_loss=config.detach_spatial_loss,
                    balance_swap=config.balance_swap,
                    solver_seed=(config.seed, 2, step, slot),
                    inject_spatial=step >= config.spatial_warmup_steps)
                if out.spectral is not None and not out.spectral.converged:
                    if config.abort_on_nonconverged:
                        raise ConvergenceError(
                            f"spectral solve did not converge at step {step} "
                            f"(residual {out.spectral.residual:.3e})"
                        )
                    warnings.warn(
                        f"step {step}: spectral solve residual "
                        f"{out.spectral.residual:.3e} above tolerance; proceeding",
                        stacklevel=2)
                group_total, parts = multi_task_loss(out, effective_weights)
                for key in sums:
                    sums[key] += parts[key] / len(batch)
                scaled = mul(group_total, Tensor(1.0 / len(batch)))
                total = scaled if total is None else add(total, scaled)
            backward(graph, total)
        adam_step(params, state, lr_for_step(config, step),
                  beta1=config.adam_beta1, beta2=config.adam_beta2,
                  epsilon=config.adam_epsilon)
        loss_rows.append(
            f"{step},{sums['loss_spa']:.12g},{sums['loss_sem']:.12g},"
            f"{sums['loss_seg']:.12g},{sums['loss']:.12g}")
        if not quiet:
            print(loss_rows[-1], flush=True)

        is_last = step == config.max_steps - 1
        if holdout_groups and (is_last or (config.eval_interval > 0
                                           and (step + 1) % config.eval_interval == 0)):
            report = evaluate_model(model, holdout_groups, config)
            metric_rows.append(
                f"{step},{report.overall_precision:.6f},{report.overall_jaccard:.6f}")
            if is_last:
                final_report = report
        if out_dir is not None and config.checkpoint_interval > 0 \
                and (step + 1) % config.checkpoint_interval == 0 and not is_last:
            save_model(out_dir / f"checkpoint_step{step + 1:06d}.ckpt", model,
                       config, state)

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = out_dir / "checkpoint.ckpt"
        save_model(checkpoint_path, model, config, state)
        (out_dir / "loss.csv").write_text("\n".join(loss_rows) + "\n")
        (out_dir / "metrics.csv").write_text("\n".join(metric_rows) + "\n")
    return TrainResult(model=model, state=state, loss_rows=loss_rows,
                       metric_rows=metric_rows, final_report=final_report,
                       checkpoint_path=checkpoint_path)
