"""Unsupervised spatial modulator.

The group's fused feature maps are flattened into unit-norm descriptor
columns; a two-way partition of those descriptors is relaxed to the dominant
eigenvector of the Gram-style matrix G = X^T X - 11^T, solved matrix-free by
shifted power iteration.  The eigenvector is sign-oriented, rescaled, and
reshaped into one continuous heatmap per image.

An exhaustive enumerator over the discrete partition objective doubles as a
small-instance oracle for the relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, concat, matmul, mul, neg, reshape, sum_all, transpose

BRUTE_FORCE_LIMIT = 16
DENSE_LIMIT = 4096


@dataclass
class DescriptorMatrix:
    """Columns are the per-position channel vectors of all fused maps.

    Column ``i`` corresponds to image ``n = i // (h*w)`` and raster position
    ``(row, col) = divmod(i % (h*w), w)`` — image-major, then row-major.
    """

    x: Tensor  # (d, w*h*N)
    n_images: int
    width: int
    height: int
    channels: int

    @property
    def n_columns(self) -> int:
        return self.n_images * self.width * self.height


@dataclass
class SpectralSolution:
    s_hat: np.ndarray  # unit norm, length w*h*N
    lambda_max: float
    residual: float
    iterations: int
    converged: bool


@dataclass
class SpatialMaskSet:
    """Continuous per-image heatmaps; positive values mark foreground."""

    masks: list[Tensor]  # N tensors of shape (h, w)
    n_images: int
    width: int
    height: int


def collect_descriptors(fused_maps: list[Tensor]) -> DescriptorMatrix:
    """Stack N fused (h, w, d) maps into one (d, whN) descriptor matrix."""
    if not fused_maps:
        raise ShapeError("collect_descriptors: empty group")
    shape = fused_maps[0].dims
    if len(shape) != 3:
        raise ShapeError(f"collect_descriptors: maps must be (h,w,d), got {shape}")
    for m in fused_maps[1:]:
        if m.dims != shape:
            raise ShapeError(
                f"collect_descriptors: shape mismatch across group: {shape} vs {m.dims}"
            )
    h, w, d = shape
    blocks = [transpose(reshape(m, (h * w, d))) for m in fused_maps]
    x = blocks[0] if len(blocks) == 1 else concat(blocks, axis=1)
    return DescriptorMatrix(x=x, n_images=len(fused_maps), width=w, height=h,
                            channels=d)


def pairwise_distance(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """Squared Euclidean distance between unit vectors: 2 - 2 x_i.x_j."""
    return 2.0 - 2.0 * float(np.dot(x_i, x_j))


def gram_product(x: DescriptorMatrix | np.ndarray, v: np.ndarray) -> np.ndarray:
    """(X^T X - 11^T) v computed without materializing the whN x whN matrix."""
    xd = x.x.data if isinstance(x, DescriptorMatrix) else x
    if v.shape != (xd.shape[1],):
        raise ShapeError(f"gram_product: vector length {v.shape} vs {xd.shape[1]} columns")
    return xd.T @ (xd @ v) - v.sum()


def dense_gram(x: DescriptorMatrix | np.ndarray) -> np.ndarray:
    """Materialized G for small-instance oracles only."""
    xd = x.x.data if isinstance(x, DescriptorMatrix) else x
    n = xd.shape[1]
    if n > DENSE_LIMIT:
        raise ContractError(f"dense_gram: {n} columns exceeds oracle limit {DENSE_LIMIT}")
    return xd.T @ xd - np.ones((n, n))


def dominant_eigenvector(x: DescriptorMatrix, tol: float = 1e-8,
                         max_iter: int = 10000, seed: int = 0) -> SpectralSolution:
    """Top-eigenpair of G by power iteration on the shifted operator G + 2m I.

    All entries of G lie in [-2, 0], so by Gershgorin the shift 2m (m = number
    of columns) makes the operator PSD and the iteration converges to the
    maximum algebraic eigenvalue of G.  The eigenvalue is recovered as the
    Rayleigh quotient of the returned iterate, the residual as |G s - lam s|.
    """
    if tol <= 0:
        raise ContractError("dominant_eigenvector: tol must be > 0")
    xd = x.x.data
    m = xd.shape[1]
    shift = 2.0 * m
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = np.inf
    iterations = 0
    converged = False
    for it in range(1, max_iter + 1):
        iterations = it
        gv = xd.T @ (xd @ v) - v.sum()
        lam = float(v @ gv)
        residual = float(np.linalg.norm(gv - lam * v))
        if residual <= tol:
            converged = True
            break
        u = gv + shift * v
        norm_u = np.linalg.norm(u)
        v = u / norm_u
    return SpectralSolution(s_hat=v, lambda_max=lam, residual=residual,
                            iterations=iterations, converged=converged)


def orient_and_rescale(sol: SpectralSolution, whN: int,
                       orientation: str = "minority") -> np.ndarray:
    """Fix the eigenvector's sign and restore indicator-scale magnitudes.

    ``minority`` flips the sign so the strictly-positive entries are the
    smaller cluster (foreground occupies part of each image); an exact tie
    keeps the solver's sign.  ``raw`` keeps the sign as solved.  The result
    is scaled by sqrt(whN) so a perfect two-level vector lands on +-1.
    """
    v = sol.s_hat
    if v.shape != (whN,):
        raise ShapeError(f"orient_and_rescale: vector length {v.shape} vs whN={whN}")
    if orientation not in ("minority", "raw"):
        raise ContractError(f"orient_and_rescale: unknown orientation {orientation!r}")
    out = v.copy()
    if orientation == "minority":
        positives = int((out > 0).sum())
        if positives * 2 > whN:
            out = -out
    return out * np.sqrt(whN)


def reshape_masks(oriented: np.ndarray, n_images: int, width: int,
                  height: int) -> SpatialMaskSet:
    """Inverse of the collect_descriptors column ordering."""
    expected = n_images * width * height
    if oriented.shape != (expected,):
        raise ShapeError(
            f"reshape_masks: length {oriented.shape} vs N*w*h={expected}"
        )
    stacked = oriented.reshape(n_images, height, width)
    masks = [Tensor(stacked[n]) for n in range(n_images)]
    return SpatialMaskSet(masks=masks, n_images=n_images, width=width, height=height)


def spatial_loss(x: DescriptorMatrix, s_hat: np.ndarray) -> Tensor:
    """-s^T (X^T X - 11^T) s with s held constant (no gradient into the solve).

    Evaluates as -|X s|^2 + (sum s)^2, so the gradient w.r.t. the descriptor
    matrix is -2 (X s) s^T and flows back into the features that built X.
    """
    m = x.n_columns
    if s_hat.shape != (m,):
        raise ShapeError(f"spatial_loss: vector length {s_hat.shape} vs {m} columns")
    s_col = Tensor(s_hat.reshape(m, 1))
    xs = matmul(x.x, s_col)
    quad = neg(sum_all(mul(xs, xs)))
    return quad + float(s_hat.sum()) ** 2


def _all_sign_assignments(m: int) -> np.ndarray:
    codes = np.arange(2 ** m, dtype=np.uint32)
    bits = (codes[:, None] >> np.arange(m, dtype=np.uint32)) & 1
    return bits.astype(np.float64) * 2.0 - 1.0


def distance_matrix(x: DescriptorMatrix | np.ndarray) -> np.ndarray:
    """Pairwise squared distances of unit columns, 2 - 2 X^T X, zero diagonal."""
    xd = x.x.data if isinstance(x, DescriptorMatrix) else x
    d = 2.0 - 2.0 * (xd.T @ xd)
    np.fill_diagonal(d, 0.0)
    return d


def discrete_objective(dist: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Raw partition objective for rows of +-1 assignments.

    Three-sum form: within-foreground + within-background - 2 * cross, with
    the double sums running over ordered pairs.
    """
    signs = np.atleast_2d(signs)
    fg = (signs > 0).astype(np.float64)
    bg = 1.0 - fg
    fd = fg @ dist
    bd = bg @ dist
    s_ff = (fd * fg).sum(axis=1)
    s_bb = (bd * bg).sum(axis=1)
    s_fb = (fd * bg).sum(axis=1)
    return s_ff + s_bb - 2.0 * s_fb


def brute_force_partition(x: DescriptorMatrix) -> tuple[np.ndarray, float]:
    """Enumerate every two-way sign assignment and return a minimizer.

    Guarded at whN <= 16.  Every assignment's three-sum objective is
    cross-checked against the indicator quadratic form whN * s^T D s
    (s = signs / sqrt(whN)); the two are algebraically identical.
    """
    m = x.n_columns
    if m > BRUTE_FORCE_LIMIT:
        raise ContractError(
            f"brute_force_partition: whN={m} exceeds enumeration guard {BRUTE_FORCE_LIMIT}"
        )
    dist = distance_matrix(x)
    signs = _all_sign_assignments(m)
    values = discrete_objective(dist, signs)
    quad = ((signs @ dist) * signs).sum(axis=1)  # == whN * s^T D s
    gap = np.abs(values - quad)
    tol = 1e-9 * np.maximum(1.0, np.abs(values))
    if (gap > tol).any():
        worst = int(np.argmax(gap - tol))
        raise AssertionError(
            f"partition objective forms disagree at assignment {worst}: "
            f"{values[worst]} vs {quad[worst]}"
        )
    best = int(np.argmin(values))
    return signs[best].copy(), float(values[best])


def sign_rounded(s_hat: np.ndarray) -> np.ndarray:
    """Round a relaxed indicator to +-1 (zeros go to +1)."""
    return np.where(s_hat >= 0.0, 1.0, -1.0)


def relaxed_objective(x: DescriptorMatrix, s_hat: np.ndarray) -> float:
    """-s^T G s for a unit vector, computed matrix-free."""
    return -float(s_hat @ gram_product(x, s_hat))
