"""Self-contained verification suites shared by the CLI and the test suite.

Two families:

* finite-difference gradient checks per differentiable op, plus one over the
  full multi-task loss of a two-image toy group;
* spectral reports comparing the matrix-free power iteration against a dense
  eigensolver and the exhaustive partition enumerator on small instances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seghead, semantic, spatial, tensor as T
from .backbone import BackboneConfig
from .gradcheck import grad_check, nudge_away_from
from .model import CosegModel, ModelConfig
from .train import multi_task_loss

OP_TOLERANCE = 1e-6
CHAIN_TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.value < self.tolerance


def _t(rng, shape, lo=-1.0, hi=1.0):
    return T.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def op_grad_checks(seed: int = 0) -> list[CheckResult]:
    """One finite-difference check per differentiable op (tolerance 1e-6)."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, callable, list[T.Tensor]]] = []

    def quad(x):
        return T.sum_all(T.mul(x, x))

    a = _t(rng, (3, 4))
    b = _t(rng, (3, 4))
    checks.append(("add", lambda x, y: quad(T.add(x, y)), [a, b]))
    checks.append(("add_scalar", lambda x, s: quad(T.add(x, s)),
                   [_t(rng, (3, 4)), _t(rng, ())]))
    checks.append(("add_channel", lambda x, v: quad(T.add(x, v)),
                   [_t(rng, (3, 4, 2)), _t(rng, (2,))]))
    checks.append(("sub", lambda x, y: quad(T.sub(x, y)),
                   [_t(rng, (3, 4)), _t(rng, (3, 4))]))
    checks.append(("mul", lambda x, y: quad(T.mul(x, y)),
                   [_t(rng, (3, 4)), _t(rng, (3, 4))]))
    checks.append(("mul_scalar", lambda x, s: quad(T.mul(x, s)),
                   [_t(rng, (3, 4)), _t(rng, ())]))
    checks.append(("mul_channel", lambda x, v: quad(T.mul(x, v)),
                   [_t(rng, (3, 4, 2)), _t(rng, (2,))]))
    checks.append(("neg", lambda x: quad(T.neg(x)), [_t(rng, (3, 4))]))

    relu_in = T.Tensor(nudge_away_from(rng.uniform(-1, 1, size=(4, 5)), margin=1e-2),
                       requires_grad=True)
    checks.append(("relu", lambda x: quad(T.relu(x)), [relu_in]))
    checks.append(("sigmoid", lambda x: quad(T.sigmoid(x)), [_t(rng, (4, 5), -3, 3)]))
    checks.append(("log", lambda x: quad(T.log(x)), [_t(rng, (4, 5), 0.1, 2.0)]))
    checks.append(("sum", lambda x: T.sum_all(x), [_t(rng, (4, 5))]))
    checks.append(("matmul", lambda x, y: quad(T.matmul(x, y)),
                   [_t(rng, (3, 4)), _t(rng, (4, 2))]))
    checks.append(("transpose", lambda x: quad(T.transpose(x)), [_t(rng, (3, 4))]))
    checks.append(("reshape", lambda x: quad(T.reshape(x, (6, 2))), [_t(rng, (3, 4))]))
    checks.append(("concat", lambda x, y: quad(T.concat([x, y], axis=1)),
                   [_t(rng, (3, 2)), _t(rng, (3, 3))]))
    checks.append(("l2_normalize_positions",
                   lambda x: quad(T.l2_normalize_positions(x)),
                   [_t(rng, (3, 3, 4))]))
    checks.append(("scale_shift",
                   lambda x, g, s: quad(T.scale_shift(x, g, s)),
                   [_t(rng, (3, 4, 2)), _t(rng, (2,)), _t(rng, (3, 4))]))
    checks.append(("conv2d",
                   lambda x, k, b: quad(T.conv2d(x, k, b, stride=1, padding=1)),
                   [_t(rng, (5, 5, 2)), _t(rng, (3, 3, 2, 3)), _t(rng, (3,))]))
    checks.append(("conv2d_stride2",
                   lambda x, k: quad(T.conv2d(x, k, stride=2, padding=0)),
                   [_t(rng, (6, 6, 2)), _t(rng, (3, 3, 2, 2))]))
    checks.append(("resample_bilinear_up",
                   lambda x: quad(T.resample(x, 5, 7, mode="bilinear")),
                   [_t(rng, (3, 4, 2))]))
    checks.append(("resample_bilinear_down",
                   lambda x: quad(T.resample(x, 2, 3, mode="bilinear")),
                   [_t(rng, (5, 6, 2))]))
    checks.append(("resample_nearest",
                   lambda x: quad(T.resample(x, 6, 2, mode="nearest")),
                   [_t(rng, (3, 4, 2))]))
    checks.append(("covariance",
                   lambda x: quad(semantic.covariance(x)), [_t(rng, (3, 4, 3))]))
    checks.append(("covariance_raw",
                   lambda x: quad(semantic.covariance(x, center=False)),
                   [_t(rng, (3, 4, 3))]))

    results = []
    for name, f, inputs in checks:
        results.append(CheckResult(name, grad_check(f, inputs), OP_TOLERANCE))
    return results


def chain_grad_checks(seed: int = 0) -> list[CheckResult]:
    """Composite checks over each sub-network's op chain (tolerance 1e-5)."""
    rng = np.random.default_rng(seed)
    results = []

    # SP / HSP / classifier / semantic loss
    d_in, c, d = 3, 2, 4
    sp1 = semantic.SPParams(_t(rng, (1, 1, d_in, c)), _t(rng, (c * c, d)), _t(rng, (d,)))
    sp2 = semantic.SPParams(_t(rng, (1, 1, d, c)), _t(rng, (c * c, d)), _t(rng, (d,)))
    clf = semantic.ClassifierParams(_t(rng, (3, d)), _t(rng, (3,)))
    maps = [_t(rng, (2, 2, d_in)) for _ in range(3)]
    target = semantic.one_hot(1, 3)

    def sem_chain(*tensors):
        m1, m2, m3 = tensors[:3]
        gamma = semantic.hsp_forward([m1, m2, m3], sp1, sp2)
        return semantic.semantic_loss(semantic.classify(gamma, clf), target)

    sem_inputs = maps + [sp1.reduce_kernel, sp1.fc_weight, sp1.fc_bias,
                         sp2.reduce_kernel, sp2.fc_weight, sp2.fc_bias,
                         clf.weight, clf.bias]
    results.append(CheckResult("semantic_chain",
                               grad_check(lambda *a: sem_chain(*a), sem_inputs),
                               CHAIN_TOLERANCE))

    # modulate -> fpn_fuse -> predict_mask -> segmentation loss
    head = seghead.SegHeadParams(
        proj_kernels=[_t(rng, (1, 1, ch, d)) for ch in (2, 3, 4, 5)],
        lateral_kernels=[_t(rng, (1, 1, d, d)) for _ in range(3)],
        final3_kernel=_t(rng, (3, 3, d, d)),
        final3_bias=_t(rng, (d,)),
        final1_kernel=_t(rng, (1, 1, d, 1)),
        final1_bias=_t(rng, (1,)),
    )
    levels = [_t(rng, (8, 8, 2)), _t(rng, (4, 4, 3)), _t(rng, (2, 2, 4)),
              _t(rng, (1, 1, 5))]
    gamma_t = _t(rng, (d,))
    smask = _t(rng, (4, 4))
    gt = (rng.uniform(size=(16, 16)) < 0.4).astype(np.float64)

    def seg_chain(*tensors):
        lv = list(tensors[:4])
        g, s = tensors[4], tensors[5]
        projected = seghead.project_levels(lv, head)
        modulated = seghead.modulate(projected, g, s)
        fused = seghead.fpn_fuse(modulated, head)
        pred = seghead.predict_mask(fused, head, 16, 16)
        return seghead.segmentation_loss([pred], [gt])

    seg_inputs = levels + [gamma_t, smask] + head.proj_kernels \
        + head.lateral_kernels + [head.final3_kernel, head.final3_bias,
                                  head.final1_kernel, head.final1_bias]
    results.append(CheckResult("segmentation_chain",
                               grad_check(lambda *a: seg_chain(*a), seg_inputs),
                               CHAIN_TOLERANCE))
    return results


def toy_model_config() -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(stage_channels=(2, 3, 4, 5), fused_channels=4,
                                working_resolution=(4, 4), convs_per_stage=1),
        sp_channels=2, n_categories=3, solver_tol=1e-10,
    )


def full_loss_grad_check(seed: int = 0) -> CheckResult:
    """Finite differences over every parameter of the full multi-task loss.

    Two 32x32 images, toy channel counts.  The spectral solve is a stop-
    gradient boundary: the eigenpair is computed once at the base parameters
    and frozen while probing, which is the derivative the tape implements.
    The envelope property that makes the frozen gradient track the true
    optimal-value derivative is verified separately at its own tolerance.
    """
    rng = np.random.default_rng(seed)
    model = CosegModel.init(toy_model_config(), seed=seed)
    images = []
    for _ in range(2):
        img = rng.uniform(0.1, 0.9, size=(32, 32, 3))
        img[8:20, 8:20, 0] += 0.8
        images.append(np.clip(img, 0.0, 1.0))
    gts = [np.zeros((32, 32)) for _ in range(2)]
    for gt in gts:
        gt[8:20, 8:20] = 1.0
    params = model.parameters()
    names = sorted(params)
    tensors = [params[n] for n in names]
    base = model.forward_group(images, with_losses=False, solver_seed=(seed, 7))

    def f(*_unused):
        out = model.forward_group(images, category=1, gt_masks=gts,
                                  frozen_spectral=base.spectral)
        total, _ = multi_task_loss(out)
        return total

    err = grad_check(f, tensors)
    return CheckResult("full_multi_task_loss", err, CHAIN_TOLERANCE)


def gradient_suite(seed: int = 0, include_full: bool = True) -> list[CheckResult]:
    results = op_grad_checks(seed)
    results.extend(chain_grad_checks(seed))
    if include_full:
        results.append(full_loss_grad_check(seed))
    return results


# ---------------------------------------------------------------------------
# spectral relaxation reports


@dataclass
class SpectralReportRow:
    index: int
    whn: int
    channels: int
    lambda_power: float
    lambda_dense: float
    residual: float
    iterations: int
    converged: bool
    relaxed_value: float
    discrete_opt_scaled: float
    bound_ok: bool
    rounded_value: float
    discrete_opt: float
    within_10pct: bool


def random_instance(rng: np.random.Generator, whn: int, channels: int
                    ) -> spatial.DescriptorMatrix:
    x = rng.standard_normal((channels, whn))
    x /= np.linalg.norm(x, axis=0, keepdims=True)
    return spatial.DescriptorMatrix(x=T.Tensor(x), n_images=1, width=whn,
                                    height=1, channels=channels)


def spectral_report(n_instances: int = 100, seed: int = 0,
                    whn_range: tuple[int, int] = (4, 12),
                    d_range: tuple[int, int] = (2, 8)) -> list[SpectralReportRow]:
    """Relaxation vs oracle on random unit-column instances.

    Per instance: power iteration eigenpair vs dense eigensolver, the
    relaxation lower bound against the enumerated discrete optimum, and the
    quality of the sign-rounded relaxed solution (within 10% of optimal).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_instances):
        whn = int(rng.integers(whn_range[0], whn_range[1] + 1))
        ch = int(rng.integers(d_range[0], d_range[1] + 1))
        inst = random_instance(rng, whn, ch)
        sol = spatial.dominant_eigenvector(inst, tol=1e-8, max_iter=10000,
                                           seed=(seed, i))
        lam_dense = float(np.linalg.eigvalsh(spatial.dense_gram(inst))[-1])
        relaxed = spatial.relaxed_objective(inst, sol.s_hat)
        best_signs, best_value = spatial.brute_force_partition(inst)
        discrete_opt_scaled = -float(
            best_signs @ spatial.gram_product(inst, best_signs)) / whn
        rounded = spatial.sign_rounded(sol.s_hat)
        dist = spatial.distance_matrix(inst)
        rounded_value = float(spatial.discrete_objective(dist, rounded)[0])
        if abs(best_value) < 1e-12:
            within = rounded_value <= 1e-9
        else:
            within = rounded_value <= best_value + 0.10 * abs(best_value)
        rows.append(SpectralReportRow(
            index=i, whn=whn, channels=ch, lambda_power=sol.lambda_max,
            lambda_dense=lam_dense, residual=sol.residual,
            iterations=sol.iterations, converged=sol.converged,
            relaxed_value=relaxed, discrete_opt_scaled=discrete_opt_scaled,
            bound_ok=relaxed <= discrete_opt_scaled + 1e-12,
            rounded_value=rounded_value, discrete_opt=best_value,
            within_10pct=bool(within)))
    return rows


def spectral_table(rows: list[SpectralReportRow]) -> str:
    header = (f"{'idx':>4} {'whN':>4} {'d':>3} {'lam_power':>12} {'lam_dense':>12} "
              f"{'residual':>10} {'iters':>6} {'relaxed':>12} {'disc_opt/whN':>13} "
              f"{'bound':>6} {'rounded':>12} {'disc_opt':>12} {'<=10%':>6}")
    lines = [header]
    for r in rows:
        lines.append(
            f"{r.index:>4} {r.whn:>4} {r.channels:>3} {r.lambda_power:>12.6f} "
            f"{r.lambda_dense:>12.6f} {r.residual:>10.2e} {r.iterations:>6} "
            f"{r.relaxed_value:>12.6f} {r.discrete_opt_scaled:>13.6f} "
            f"{'ok' if r.bound_ok else 'FAIL':>6} {r.rounded_value:>12.6f} "
            f"{r.discrete_opt:>12.6f} {'yes' if r.within_10pct else 'NO':>6}")
    n = len(rows)
    n_conv = sum(r.converged for r in rows)
    n_bound = sum(r.bound_ok for r in rows)
    n_within = sum(r.within_10pct for r in rows)
    lam_err = max((abs(r.lambda_power - r.lambda_dense) for r in rows), default=0.0)
    lines.append(f"summary: {n} instances, converged {n_conv}/{n}, "
                 f"bound ok {n_bound}/{n}, rounded within 10% {n_within}/{n}, "
                 f"max |lambda_power - lambda_dense| = {lam_err:.3e}")
    return "\n".join(lines)
