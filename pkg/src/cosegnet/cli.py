"""Command-line surface.

Subcommands: synth, train, infer, eval, grad-check, check-spectral.  All
accept ``--seed``, ``--config`` (plain key=value file) and ``--out``.  Exit
code 0 on success; on failure the first stderr line is
``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data, train as training
from .backbone import BackboneConfig
from .data import SynthConfig, gen_synthetic, load_dataset, load_group
from .errors import ConfigError, ContractError, ConvergenceError, CosegError, DataError
from .metrics import MetricReport, evaluate
from .model import ModelConfig
from .tensor import _resample_kernel
from .train import TrainConfig, load_model, train
from .verification import gradient_suite, spectral_report, spectral_table


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"usage: {message}")


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_pair(text: str) -> tuple[int, int]:
    sep = "x" if "x" in text else ","
    parts = [p for p in text.split(sep) if p]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ConfigError(f"expected 'AxB' or a single extent, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p)


_SYNTH_KEYS = {
    "n_groups": int,
    "images_per_group": int,
    "categories": int,
    "image_size": _parse_pair,
    "clutter_level": int,
}

_TRAIN_KEYS = {
    "group_size": int,
    "groups_per_batch": int,
    "image_size": _parse_pair,
    "learning_rate": float,
    "lr_halving_interval_steps": int,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_epsilon": float,
    "max_steps": int,
    "seed": int,
    "loss_weight_spa": float,
    "loss_weight_sem": float,
    "loss_weight_seg": float,
    "disable_spatial": _parse_bool,
    "disable_semantic": _parse_bool,
    "detach_spatial_loss": _parse_bool,
    "balance_swap": _parse_bool,
    "spatial_warmup_steps": int,
    "holdout_fraction": float,
    "eval_interval": int,
    "checkpoint_interval": int,
    "abort_on_nonconverged": _parse_bool,
}

_MODEL_KEYS = {
    "stage_channels": _parse_int_list,
    "fused_channels": int,
    "working_resolution": _parse_pair,
    "convs_per_stage": int,
    "sp_channels": int,
    "upsample_mode": str,
    "orientation": str,
    "center_covariance": _parse_bool,
    "solver_tol": float,
    "solver_max_iter": int,
}


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _typed(kv: dict[str, str], tables: list[dict]) -> dict:
    merged = {}
    for key, raw in kv.items():
        for table in tables:
            if key in table:
                merged[key] = table[key](raw)
                break
        else:
            known = sorted(set().union(*tables))
            raise ConfigError(f"unknown config key {key!r}; known keys: {known}")
    return merged


def _build_synth_config(kv: dict[str, str]) -> SynthConfig:
    vals = _typed(kv, [_SYNTH_KEYS])
    return SynthConfig(**vals)


def _build_train_configs(kv: dict[str, str], seed_override: int | None,
                         n_categories: int) -> tuple[ModelConfig, TrainConfig]:
    vals = _typed(kv, [_TRAIN_KEYS, _MODEL_KEYS])
    bb_kwargs = {k: vals.pop(k) for k in
                 ("stage_channels", "fused_channels", "working_resolution",
                  "convs_per_stage") if k in vals}
    model_kwargs = {k: vals.pop(k) for k in
                    ("sp_channels", "upsample_mode", "orientation",
                     "center_covariance", "solver_tol", "solver_max_iter")
                    if k in vals}
    weights = (vals.pop("loss_weight_spa", 1.0), vals.pop("loss_weight_sem", 1.0),
               vals.pop("loss_weight_seg", 1.0))
    train_cfg = TrainConfig(loss_weights=weights, **vals)
    if seed_override is not None:
        train_cfg.seed = seed_override
    model_cfg = ModelConfig(backbone=BackboneConfig(**bb_kwargs),
                            n_categories=n_categories, **model_kwargs)
    return model_cfg, train_cfg


def _cmd_synth(args) -> int:
    kv = parse_config_file(args.config) if args.config else {}
    cfg = _build_synth_config(kv)
    if args.out is None:
        raise ConfigError("synth needs --out for the dataset root")
    names = gen_synthetic(args.out, cfg, seed=args.seed)
    print(f"wrote {len(names)} groups ({cfg.categories} categories) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    kv = parse_config_file(args.config) if args.config else {}
    if args.out is None:
        raise ConfigError("train needs --out for logs and checkpoints")
    image_size = _parse_pair(kv["image_size"]) if "image_size" in kv else (64, 64)
    groups = load_dataset(args.data, image_size=image_size)
    if not groups:
        raise DataError(f"no groups under {args.data}")
    labeled = [g.category_id for g in groups if g.category_id is not None]
    if not labeled:
        raise DataError("training requires labels.txt with category ids")
    n_categories = max(labeled) + 1
    model_cfg, train_cfg = _build_train_configs(kv, args.seed, n_categories)
    result = train(groups, model_cfg, train_cfg, out_dir=args.out,
                   resume_from=args.resume, quiet=args.quiet)
    if result.final_report is not None:
        print(f"final holdout: precision {result.final_report.overall_precision:.4f} "
              f"jaccard {result.final_report.overall_jaccard:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_infer(args) -> int:
    if args.out is None:
        raise ConfigError("infer needs --out for the mask files")
    model, train_cfg, _ = load_model(args.checkpoint)
    group = load_group(args.group, image_size=tuple(train_cfg.image_size))
    if group.n_images < 2:
        raise ContractError(
            "co-segmentation is group-relative: need at least 2 images, "
            f"got {group.n_images}"
        )
    out = model.forward_group(
        group.images, disable_spatial=train_cfg.disable_spatial,
        disable_semantic=train_cfg.disable_semantic,
        solver_seed=(train_cfg.seed, 4), with_losses=False)
    if out.spectral is not None and not out.spectral.converged:
        raise ConvergenceError(
            f"spectral solve residual {out.spectral.residual:.3e} above tolerance"
        )
    out_dir = Path(args.out)
    prob_dir, mask_dir = out_dir / "prob", out_dir / "mask"
    prob_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    spatial_dir = None
    if out.spatial_masks is not None:
        spatial_dir = out_dir / "spatial"
        spatial_dir.mkdir(parents=True, exist_ok=True)
        smin = min(float(m.data.min()) for m in out.spatial_masks.masks)
        smax = max(float(m.data.max()) for m in out.spatial_masks.masks)
        span = (smax - smin) or 1.0
    stems = [f"im{i:02d}" for i in range(group.n_images)]
    img_stems = sorted(p.stem for p in (Path(args.group) / "images").glob("*.png"))
    if len(img_stems) == len(stems):
        stems = img_stems
    for i, (pred, (orig_h, orig_w)) in enumerate(zip(out.prob_masks, group.source_sizes)):
        prob = _resample_kernel(pred.data[:, :, None], orig_h, orig_w,
                                "bilinear")[:, :, 0]
        data.write_mask(prob_dir / f"{stems[i]}.png", prob)
        data.write_mask(mask_dir / f"{stems[i]}.png", (prob >= 0.5).astype(np.float64))
        if spatial_dir is not None:
            heat = out.spatial_masks.masks[i].data
            heat = _resample_kernel(heat[:, :, None], orig_h, orig_w, "bilinear")[:, :, 0]
            data.write_mask(spatial_dir / f"{stems[i]}.png", (heat - smin) / span)
    print(f"wrote {group.n_images} masks to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_files = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gt_files = {p.stem: p for p in sorted(gt_dir.glob("*.png"))}
    if not pred_files:
        raise DataError(f"no PNG masks under {pred_dir}")
    if set(pred_files) != set(gt_files):
        raise DataError(
            f"stem mismatch: pred-only={sorted(set(pred_files) - set(gt_files))}, "
            f"gt-only={sorted(set(gt_files) - set(pred_files))}"
        )
    preds, gts = [], []
    for stem in sorted(pred_files):
        preds.append(data.read_mask(pred_files[stem]))
        gts.append(data.read_mask(gt_files[stem]))
    report = MetricReport(groups=[evaluate(preds, gts, name=pred_dir.name)])
    text = report.table()
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return 0


def _cmd_grad_check(args) -> int:
    results = gradient_suite(seed=args.seed, include_full=not args.skip_full)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.value:.3e}  "
              f"tol={r.tolerance:.0e}  {status}")
        failed += not r.passed
    if failed:
        raise ContractError(f"{failed} gradient checks failed")
    print(f"all {len(results)} gradient checks passed")
    return 0


def _cmd_check_spectral(args) -> int:
    rows = spectral_report(n_instances=args.instances, seed=args.seed)
    text = spectral_table(rows)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    not_converged = [r.index for r in rows if not r.converged]
    if not_converged:
        raise ConvergenceError(f"instances did not converge: {not_converged}")
    bad_bound = [r.index for r in rows if not r.bound_ok]
    if bad_bound:
        raise ContractError(f"relaxation bound violated at instances {bad_bound}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cosegnet",
                     description="group-wise object co-segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", default=None)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("infer", help="co-segment one group directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group", required=True)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("grad-check", help="run the finite-difference suite")
    common(p)
    p.add_argument("--skip-full", action="store_true",
                   help="skip the full multi-task loss check")
    p.set_defaults(fn=_cmd_grad_check)

    p = sub.add_parser("check-spectral", help="relaxation vs oracle report")
    common(p)
    p.add_argument("--instances", type=int, default=100)
    p.set_defaults(fn=_cmd_check_spectral)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CosegError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - keep the contractual error line
        print(f"error: internal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
