"""Dataset ingestion and the synthetic co-segmentation corpus.

Disk layout, shared by the generator and the loader:

    root/
      labels.txt            # "<group> <category_id>" per line (optional)
      <group>/images/*.png
      <group>/masks/*.png   # same stems as images (optional)

Synthetic groups place one category-consistent archetype (shape + hue band)
at a random position and scale in every image, over a dull noisy background
with distractor shapes drawn from the other categories.  The emitted mask is
exactly the co-object's rasterized coverage (the co-object is painted last).
"""

from __future__ import annotations

import colorsys
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError
from .tensor import _nearest_indices, _resample_kernel

SHAPES = ("disk", "triangle", "cross", "ring", "bar")
# archetype k: shape cycles through the five kinds, hue bands alternate
# between a warm and a cool family so ten categories stay separable.
N_ARCHETYPES = 10
MASK_THRESHOLD = 128


@dataclass
class ImageGroup:
    name: str
    images: list[np.ndarray]                 # (h, w, 3) floats in [0, 1]
    gt_masks: list[np.ndarray] | None        # (h, w) binary float arrays
    category_id: int | None
    source_sizes: list[tuple[int, int]]

    @property
    def n_images(self) -> int:
        return len(self.images)


@dataclass
class SynthConfig:
    n_groups: int = 40
    images_per_group: int = 6
    categories: int = 8
    image_size: tuple[int, int] = (64, 64)   # (height, width)
    clutter_level: int = 2

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if self.categories < 1 or self.categories > N_ARCHETYPES:
            raise ConfigError(
                f"categories must be in [1, {N_ARCHETYPES}], got {self.categories}"
            )
        if self.n_groups < self.categories:
            raise ConfigError("need at least one group per category")
        if self.clutter_level < 0:
            raise ConfigError("clutter_level must be >= 0")


@dataclass
class Placement:
    shape: str
    cx: float
    cy: float
    radius: float


def rasterize(shape: str, cx: float, cy: float, radius: float,
              height: int, width: int) -> np.ndarray:
    """Boolean coverage mask of one filled archetype shape."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= radius * radius
    if shape == "ring":
        rho2 = dx * dx + dy * dy
        return (rho2 <= radius * radius) & (rho2 > (0.55 * radius) ** 2)
    if shape == "cross":
        arm = 0.35 * radius
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= radius))
    if shape == "bar":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= 0.3 * radius)
    if shape == "triangle":
        ax, ay = cx, cy - radius
        bx, by = cx - 0.9 * radius, cy + 0.75 * radius
        tx, ty = cx + 0.9 * radius, cy + 0.75 * radius
        d1 = (xx - bx) * (ay - by) - (ax - bx) * (yy - by)
        d2 = (xx - tx) * (by - ty) - (bx - tx) * (yy - ty)
        d3 = (xx - ax) * (ty - ay) - (tx - ax) * (yy - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    raise ConfigError(f"unknown shape {shape!r}")


def archetype(category: int) -> tuple[str, float]:
    """(shape, hue center) of one category."""
    if not (0 <= category < N_ARCHETYPES):
        raise ConfigError(f"category {category} outside [0, {N_ARCHETYPES})")
    shape = SHAPES[category % len(SHAPES)]
    hue = (0.03 + category * 0.61803398875) % 1.0
    return shape, hue


def _sample_color(rng: np.random.Generator, hue: float) -> np.ndarray:
    h = (hue + rng.uniform(-0.03, 0.03)) % 1.0
    s = rng.uniform(0.65, 0.95)
    v = rng.uniform(0.6, 0.95)
    return np.array(colorsys.hsv_to_rgb(h, s, v))


def _sample_placement(rng: np.random.Generator, shape: str,
                      height: int, width: int) -> Placement:
    scale = min(height, width)
    radius = rng.uniform(0.16, 0.3) * scale
    margin = radius + 1.0
    cx = rng.uniform(margin, width - margin)
    cy = rng.uniform(margin, height - margin)
    return Placement(shape=shape, cx=cx, cy=cy, radius=radius)


def render_image(rng: np.random.Generator, category: int, n_categories: int,
                 image_size: tuple[int, int], clutter_level: int
                 ) -> tuple[np.ndarray, np.ndarray, Placement]:
    """One synthetic image: returns (image, co-object mask, placement)."""
    height, width = image_size
    base = rng.uniform(0.2, 0.7)
    img = np.full((height, width, 3), base)
    img += rng.normal(0.0, 0.05, size=img.shape)

    others = [c for c in range(n_categories) if c != category]
    for _ in range(clutter_level):
        if not others:
            break
        dist_cat = int(rng.choice(others))
        shape, hue = archetype(dist_cat)
        place = _sample_placement(rng, shape, height, width)
        cover = rasterize(shape, place.cx, place.cy, place.radius, height, width)
        img[cover] = _sample_color(rng, hue) + rng.normal(0.0, 0.02, size=(int(cover.sum()), 3))

    shape, hue = archetype(category)
    place = _sample_placement(rng, shape, height, width)
    cover = rasterize(shape, place.cx, place.cy, place.radius, height, width)
    img[cover] = _sample_color(rng, hue) + rng.normal(0.0, 0.02, size=(int(cover.sum()), 3))

    np.clip(img, 0.0, 1.0, out=img)
    return img, cover.astype(np.float64), place


def gen_synthetic(root, config: SynthConfig, seed: int) -> list[str]:
    """Write a synthetic dataset; deterministic per seed.  Returns group names."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    labels = []
    for g in range(config.n_groups):
        category = g % config.categories
        name = f"g{g:03d}"
        names.append(name)
        labels.append(f"{name} {category}")
        img_dir = root / name / "images"
        mask_dir = root / name / "masks"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(config.images_per_group):
            img, mask, _ = render_image(rng, category, config.categories,
                                        config.image_size, config.clutter_level)
            write_image(img_dir / f"im{i:02d}.png", img)
            write_mask(mask_dir / f"im{i:02d}.png", mask)
    (root / "labels.txt").write_text("\n".join(labels) + "\n")
    return names


# ---------------------------------------------------------------------------
# PNG I/O and loading


def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return arr / 255.0


def read_mask(path) -> np.ndarray:
    """Binarize a grayscale mask at 128: values >= 128 count as foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as exc:
        raise DataError(f"unreadable mask {path}: {exc}") from exc
    return (arr >= MASK_THRESHOLD).astype(np.float64)


def write_image(path, arr: np.ndarray) -> None:
    data = np.clip(np.asarray(arr) * 255.0, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def write_mask(path, arr: np.ndarray) -> None:
    """Write a [0, 1] probability or binary mask as 8-bit grayscale."""
    data = np.clip(np.asarray(arr, dtype=np.float64) * 255.0, 0.0, 255.0)
    Image.fromarray(data.round().astype(np.uint8), mode="L").save(path)


def resize_image(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    if arr.shape[:2] == (height, width):
        return arr
    return _resample_kernel(arr, height, width, "bilinear")


def resize_mask(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor so binary masks stay binary."""
    if arr.shape == (height, width):
        return arr
    si = _nearest_indices(arr.shape[0], height)
    sj = _nearest_indices(arr.shape[1], width)
    return np.ascontiguousarray(arr[si][:, sj])


def _read_labels(root: Path) -> dict[str, int]:
    path = root / "labels.txt"
    if not path.exists():
        return {}
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected '<group> <category_id>'")
        try:
            out[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad category id {parts[1]!r}") from exc
    return out


def load_group(group_dir, image_size: tuple[int, int] | None = None,
               category_id: int | None = None) -> ImageGroup:
    """Load one group folder; masks are optional but must match image stems."""
    group_dir = Path(group_dir)
    img_dir = group_dir / "images"
    if not img_dir.is_dir():
        raise DataError(f"no images/ directory under {group_dir}")
    image_paths = sorted(img_dir.glob("*.png"))
    if not image_paths:
        raise DataError(f"no PNG images under {img_dir}")
    mask_dir = group_dir / "masks"
    masks = None
    if mask_dir.is_dir():
        mask_stems = {p.stem for p in mask_dir.glob("*.png")}
        image_stems = {p.stem for p in image_paths}
        if mask_stems != image_stems:
            raise DataError(
                f"image/mask stem mismatch under {group_dir}: "
                f"images-only={sorted(image_stems - mask_stems)}, "
                f"masks-only={sorted(mask_stems - image_stems)}"
            )
        masks = []
    images = []
    sizes = []
    for path in image_paths:
        img = read_image(path)
        sizes.append(img.shape[:2])
        if image_size is not None:
            img = resize_image(img, *image_size)
        images.append(img)
        if masks is not None:
            mask = read_mask(mask_dir / path.name)
            if image_size is not None:
                mask = resize_mask(mask, *image_size)
            masks.append(mask)
    return ImageGroup(name=group_dir.name, images=images, gt_masks=masks,
                      category_id=category_id, source_sizes=sizes)


def load_dataset(root, image_size: tuple[int, int] | None = None) -> list[ImageGroup]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    labels = _read_labels(root)
    group_dirs = sorted(p for p in root.iterdir() if (p / "images").is_dir())
    if not group_dirs:
        warnings.warn(f"dataset root {root} contains no groups", stacklevel=2)
        return []
    groups = []
    for gdir in group_dirs:
        groups.append(load_group(gdir, image_size=image_size,
                                 category_id=labels.get(gdir.name)))
    return groups
