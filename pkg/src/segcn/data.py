"""Patch datasets on disk and a synthetic two-domain H&E-like generator."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .baselines import StainBasis, render_od
from .errors import ConfigError, InvalidInput

log = logging.getLogger(__name__)

DEFAULT_H = (0.65, 0.70, 0.29)
DEFAULT_E = (0.07, 0.99, 0.11)
DOMAINS = ("a", "b")
MIN_DOMAIN_GAP = 10.0
MIN_BASIS_ANGLE = 10.0


def rotate_in_plane(matrix, degrees):
    """Rotate both columns of a 3x2 basis by ``degrees`` about the normal of their plane."""
    m = np.asarray(matrix, dtype=np.float64)
    n = np.cross(m[:, 0], m[:, 1])
    n /= np.linalg.norm(n)
    t = np.radians(degrees)
    k = np.array([[0, -n[2], n[1]], [n[2], 0, -n[0]], [-n[1], n[0], 0]])
    rot = np.eye(3) + np.sin(t) * k + (1 - np.cos(t)) * (k @ k)
    return rot @ m


def default_basis_a():
    return StainBasis(np.array([DEFAULT_H, DEFAULT_E]).T)


def default_basis_b(degrees=15.0):
    """The default domain-A basis rotated in its own plane, keeping entries non-negative."""
    a = default_basis_a().matrix
    for sign in (1.0, -1.0):
        m = rotate_in_plane(a, sign * degrees)
        if (m >= 0).all():
            return StainBasis(m)
    raise ConfigError(f"no non-negative {degrees} degree rotation of the default basis")


@dataclass
class SynthConfig:
    n_images: int = 200
    size: int = 64
    seed: int = 0
    stain_basis_a: StainBasis = field(default_factory=default_basis_a)
    stain_basis_b: StainBasis = field(default_factory=default_basis_b)
    # expected blob count per 64x64 area
    blob_density: float = 6.0
    # floor on the blob count when density > 0, so every image shows both stains
    min_blobs: int = 3
    radius_range: tuple = (4.0, 9.0)
    noise_scale: float = 0.1
    edge_sigma: float = 1.0
    hematoxylin_level: tuple = (0.7, 1.1)
    eosin_level: tuple = (0.25, 0.6)

    def __post_init__(self):
        if self.n_images < 1 or self.size < 8:
            raise ConfigError("need n_images >= 1 and size >= 8")
        if self.blob_density < 0 or self.noise_scale < 0 or self.edge_sigma < 0:
            raise ConfigError("density, noise scale and edge sigma must be non-negative")
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid radius range {self.radius_range}")
        angles = self.stain_basis_a.angles_to(self.stain_basis_b)
        if min(angles) < MIN_BASIS_ANGLE:
            raise ConfigError(f"domain bases are only {min(angles):.1f} degrees apart")


def _smooth_field(rng, size, sigma):
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    f -= f.min()
    return f / max(f.max(), 1e-12)


def _ellipse_mask(rng, size, n_blobs, radius_range):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, size, 2)
        ra, rb = rng.uniform(*radius_range, 2)
        t = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(t) + dy * np.sin(t)
        v = -dx * np.sin(t) + dy * np.cos(t)
        mask |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    return mask


def synth_concentrations(rng, config):
    """One sample of per-pixel ``(H, E)`` concentrations and its blob mask."""
    size = config.size
    n_blobs = rng.poisson(config.blob_density * (size / 64.0) ** 2)
    if config.blob_density > 0:
        n_blobs = max(n_blobs, config.min_blobs)
    mask = _ellipse_mask(rng, size, n_blobs, config.radius_range)
    alpha = mask.astype(np.float64)
    if config.edge_sigma > 0:
        alpha = gaussian_filter(alpha, config.edge_sigma)

    h_level = rng.uniform(*config.hematoxylin_level)
    e_level = rng.uniform(*config.eosin_level)
    # smooth field with slightly negative floor so some glass stays unstained
    field_ = np.clip(1.3 * _smooth_field(rng, size, size / 8.0) - 0.15, 0.0, 1.0)

    def noise():
        return np.exp(config.noise_scale * rng.standard_normal((size, size)))

    h = alpha * h_level * noise()
    e = (1.0 - alpha) * e_level * field_ * noise()
    return np.stack([h, e], axis=-1), mask


def render(concentrations, basis):
    """Beer-Lambert RGB in [0, 255] (float) from ``(..., 2)`` concentrations."""
    return render_od(np.asarray(concentrations) @ basis.matrix.T)


def generate_synthetic(config=None):
    """Two unpaired domains rendered from the same structure statistics.

    Returns:
        ``(images_a, images_b, masks_a, masks_b)``: uint8 arrays of shape
        ``(n, size, size, 3)`` and ``(n, size, size)`` with masks in {0, 1}.
    """
    config = config or SynthConfig()
    out = []
    for d, basis in enumerate((config.stain_basis_a, config.stain_basis_b)):
        rng = np.random.default_rng([config.seed, d])
        images = np.empty((config.n_images, config.size, config.size, 3), dtype=np.uint8)
        masks = np.empty((config.n_images, config.size, config.size), dtype=np.uint8)
        for i in range(config.n_images):
            conc, mask = synth_concentrations(rng, config)
            images[i] = np.clip(np.rint(render(conc, basis)), 0, 255).astype(np.uint8)
            masks[i] = mask
        out.append((images, masks))
    (ia, ma), (ib, mb) = out
    gap = np.abs(ia.reshape(-1, 3).mean(0) - ib.reshape(-1, 3).mean(0)).max()
    if gap < MIN_DOMAIN_GAP:
        raise ConfigError(f"domain gap of {gap:.2f} is below {MIN_DOMAIN_GAP}")
    return ia, ib, ma, mb


# --- disk I/O -----------------------------------------------------------------


def _write_png(path, array):
    Image.fromarray(array).save(path, format="PNG")


def domain_dirs(root, domain):
    base = Path(root) / f"domain_{domain}"
    return base / "images", base / "masks"


def save_dataset(root, images_a, images_b, masks_a=None, masks_b=None):
    """Write ``root/domain_{a,b}/{images,masks}/NNNN.png``; masks stored as 0/255."""
    for domain, images, masks in (("a", images_a, masks_a), ("b", images_b, masks_b)):
        img_dir, mask_dir = domain_dirs(root, domain)
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(images):
            _write_png(img_dir / f"{i:04d}.png", np.asarray(img, dtype=np.uint8))
        if masks is not None:
            mask_dir.mkdir(parents=True, exist_ok=True)
            for i, m in enumerate(masks):
                _write_png(mask_dir / f"{i:04d}.png", (np.asarray(m) > 0).astype(np.uint8) * 255)


def read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path):
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def center_crop(array, size):
    h, w = array.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return array[top:top + size, left:left + size]


@dataclass
class PatchDataset:
    """RGB patches (uint8, ``(N, P, P, 3)``) with optional binary masks ``(N, P, P)``."""

    root: Path
    paths: list
    patch_size: int
    images: np.ndarray
    domain: str = None
    masks: np.ndarray = None

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return self.images[i], None if self.masks is None else self.masks[i]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return PatchDataset(self.root, [self.paths[i] for i in indices], self.patch_size,
                            self.images[indices], self.domain,
                            None if self.masks is None else self.masks[indices])


def load_patches(root, patch_size, mask_dir=None, domain=None):
    """Load every PNG in ``root`` (lexicographic order) as a ``patch_size`` patch.

    Larger images are center-cropped; smaller ones are skipped with a warning.
    When ``mask_dir`` is given, each image needs a same-named mask there.
    """
    root = Path(root)
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise InvalidInput(f"no PNG files in {root}")
    kept, images, masks = [], [], []
    for p in paths:
        img = read_rgb(p)
        if min(img.shape[:2]) < patch_size:
            log.warning("skipping %s: %dx%d is smaller than %d", p, img.shape[0], img.shape[1], patch_size)
            continue
        kept.append(p)
        images.append(center_crop(img, patch_size))
        if mask_dir is not None:
            mp = Path(mask_dir) / p.name
            if not mp.exists():
                raise InvalidInput(f"missing mask {mp}")
            masks.append(center_crop(read_mask(mp), patch_size))
    if not kept:
        raise InvalidInput(f"no image in {root} is at least {patch_size}px")
    return PatchDataset(root, kept, patch_size, np.stack(images), domain,
                        np.stack(masks) if mask_dir is not None else None)


def load_domain(root, domain, patch_size, with_masks=True):
    """Load ``root/domain_<domain>/images`` (and masks when present)."""
    img_dir, mask_dir = domain_dirs(root, domain)
    use_masks = with_masks and mask_dir.is_dir()
    return load_patches(img_dir, patch_size, mask_dir if use_masks else None, domain)


def split_sizes(n, fractions):
    """Largest-remainder allocation of ``n`` items to ``fractions``."""
    raw = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return sizes


def split(dataset, fractions=(0.5, 0.3, 0.2), seed=0):
    """Disjoint, exhaustive, seed-determined ``(train, val, test)`` split.

    Works on a :class:`PatchDataset` (returns sub-datasets) or any sized
    sequence (returns index arrays).
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInput(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum(split_sizes(n, fractions))[:-1]
    parts = [np.sort(p) for p in np.split(perm, bounds)]
    if isinstance(dataset, PatchDataset):
        return tuple(dataset.subset(p) for p in parts)
    return tuple(parts)
