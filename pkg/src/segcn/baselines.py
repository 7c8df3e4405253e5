"""Classical stain normalisers: Reinhard colour statistics and Macenko stain vectors.

Images are ``(H, W, 3)`` RGB arrays on the 0..255 scale (uint8 or float).
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStains, InvalidInput, NoTissue, ShapeMismatch

log = logging.getLogger(__name__)

# --- Reinhard -----------------------------------------------------------------

# RGB -> LMS cone response and log-LMS -> decorrelated l-alpha-beta
RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LOGLMS_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
LAB_TO_LOGLMS = np.linalg.inv(LOGLMS_TO_LAB)
# log10(LMS + 1) keeps black pixels finite and inverts exactly
LMS_OFFSET = 1.0


def _as_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) RGB image, got {image.shape}")
    return image.astype(np.float64)


def rgb_to_lab(image):
    rgb = _as_rgb(image)
    lms = rgb @ RGB_TO_LMS.T
    # unclipped intermediates may dip below -1; floor keeps the log finite
    log_lms = np.log10(np.maximum(lms + LMS_OFFSET, 1e-12))
    return log_lms @ LOGLMS_TO_LAB.T


def lab_to_rgb(lab):
    log_lms = np.asarray(lab, dtype=np.float64) @ LAB_TO_LOGLMS.T
    lms = 10.0 ** log_lms - LMS_OFFSET
    return lms @ LMS_TO_RGB.T


@dataclass
class LabStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if (self.std < 0).any():
            raise InvalidInput("standard deviations must be non-negative")


def lab_stats(image):
    lab = rgb_to_lab(image).reshape(-1, 3)
    return LabStats(lab.mean(axis=0), lab.std(axis=0))


def reinhard_transform(source, target_stats, eps=1e-12):
    """Unclipped float RGB whose lab statistics equal ``target_stats``.

    A channel with zero spread in the source is only shifted to the target mean.
    """
    lab = rgb_to_lab(source)
    flat = lab.reshape(-1, 3)
    mean, std = flat.mean(axis=0), flat.std(axis=0)
    scale = np.where(std > eps, target_stats.std / np.where(std > eps, std, 1.0), 1.0)
    out = (lab - mean) * scale + target_stats.mean
    return lab_to_rgb(out)


def reinhard_normalize(source, target_stats):
    """Reinhard colour transfer; returns a uint8 RGB image of the same size."""
    return to_uint8(reinhard_transform(source, target_stats))


def to_uint8(rgb):
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


# --- optical density and stain bases ------------------------------------------------

OD_THRESHOLD = 0.15
BACKGROUND_LEVEL = 235
ANGLE_PERCENTILES = (1.0, 99.0)
MIN_TISSUE_PIXELS = 50


def optical_density(image, background=255.0):
    """Beer-Lambert optical density ``-log10(I / background)`` (exact inverse of :func:`render_od`)."""
    image = np.asarray(image, dtype=np.float64)
    return -np.log10(np.maximum(image, 1e-6) / background)


def render_od(od, background=255.0):
    """Intensity ``background * 10^(-od)`` for an optical-density array."""
    return background * 10.0 ** (-np.asarray(od, dtype=np.float64))


def macenko_od(image):
    """Optical density with the +1 offset used for fitting: ``-log10((I + 1) / 256)``."""
    return -np.log10((np.asarray(image, dtype=np.float64) + 1.0) / 256.0)


def macenko_od_inverse(od):
    return 256.0 * 10.0 ** (-od) - 1.0


def background_mask(image, level=BACKGROUND_LEVEL):
    """True where every channel exceeds ``level`` (unstained glass)."""
    return (np.asarray(image) > level).all(axis=-1)


def angle_between(u, v):
    """Angle in degrees between two vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


@dataclass
class StainBasis:
    """Unit optical-density stain vectors (columns: hematoxylin, eosin)."""

    matrix: np.ndarray
    max_concentrations: np.ndarray = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ShapeMismatch(f"stain matrix must be 3x2, got {m.shape}")
        if (m < -1e-12).any():
            raise InvalidInput("stain vectors must be non-negative")
        self.matrix = np.clip(m, 0, None) / np.linalg.norm(m, axis=0)
        if self.max_concentrations is not None:
            self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)

    @property
    def hematoxylin(self):
        return self.matrix[:, 0]

    @property
    def eosin(self):
        return self.matrix[:, 1]

    def angles_to(self, other):
        """Per-column angular error in degrees against another basis."""
        return [angle_between(self.matrix[:, i], other.matrix[:, i]) for i in range(2)]


def nnls_2(od, basis_matrix):
    """Non-negative least squares ``od ~ c @ M.T`` for a 3x2 ``M``, vectorised over pixels.

    With two unknowns the active-set solution is one of: the unconstrained fit,
    either single-stain fit, or zero. The feasible candidate with the smallest
    residual is returned.
    """
    y = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(basis_matrix, dtype=np.float64)
    both = y @ np.linalg.pinv(m).T
    candidates = [both]
    for i in range(2):
        c = np.zeros_like(both)
        c[:, i] = np.clip(y @ m[:, i] / (m[:, i] @ m[:, i]), 0, None)
        candidates.append(c)
    candidates.append(np.zeros_like(both))

    best = np.zeros_like(both)
    best_res = np.full(len(y), np.inf)
    for c in candidates:
        feasible = (c >= 0).all(axis=1)
        res = ((y - c @ m.T) ** 2).sum(axis=1)
        take = feasible & (res < best_res)
        best[take] = c[take]
        best_res[take] = res[take]
    return best.reshape(np.shape(od)[:-1] + (2,))


def _tissue_od(image, od_threshold, background_level):
    od = macenko_od(image).reshape(-1, 3)
    keep = (np.linalg.norm(od, axis=1) > od_threshold) & ~background_mask(image, background_level).reshape(-1)
    return od[keep]


def macenko_fit(image, od_threshold=OD_THRESHOLD, percentiles=ANGLE_PERCENTILES,
                background_level=BACKGROUND_LEVEL, min_pixels=MIN_TISSUE_PIXELS,
                min_angle=1.0):
    """Estimate the two stain vectors of an H&E image.

    Tissue pixels (OD norm above ``od_threshold``, not background) are projected
    onto the plane of their two leading principal directions; the robust
    extreme angles (``percentiles``) in that plane give the stain directions.
    Column 0 of the result is the stain with the larger blue absorbance.

    Raises:
        NoTissue: fewer than ``min_pixels`` tissue pixels.
        DegenerateStains: the tissue optical densities span a single direction.
    """
    _as_rgb(image)
    od = _tissue_od(image, od_threshold, background_level)
    if len(od) < min_pixels:
        raise NoTissue(f"only {len(od)} tissue pixels (need {min_pixels})")

    evals, evecs = np.linalg.eigh(np.cov(od, rowvar=False))
    if evals[-1] <= 0 or evals[-2] / evals[-1] < 1e-4:
        raise DegenerateStains("optical densities are rank one")
    plane = evecs[:, [2, 1]]
    # orient both axes so tissue projects mostly positively
    plane *= np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, percentiles)
    vecs = [plane @ np.array([np.cos(a), np.sin(a)]) for a in (lo, hi)]
    vecs = [v if v.sum() >= 0 else -v for v in vecs]
    vecs = [np.clip(v, 0, None) for v in vecs]
    if any(np.linalg.norm(v) == 0 for v in vecs) or angle_between(*vecs) < min_angle:
        raise DegenerateStains("stain directions collapse onto one another")
    vecs = [v / np.linalg.norm(v) for v in vecs]
    if vecs[0][2] < vecs[1][2]:
        vecs = vecs[::-1]
    matrix = np.stack(vecs, axis=1)
    conc = nnls_2(od, matrix)
    max_conc = np.percentile(conc, 99, axis=0)
    return StainBasis(matrix, max_conc)


def macenko_transform(source, target_basis, source_basis=None):
    """Unclipped float RGB of ``source`` re-rendered with ``target_basis``."""
    rgb = _as_rgb(source)
    if source_basis is None:
        source_basis = macenko_fit(source)
    if target_basis.max_concentrations is None or source_basis.max_concentrations is None:
        raise InvalidInput("both bases need max_concentrations")
    conc = nnls_2(macenko_od(rgb), source_basis.matrix)
    ratio = target_basis.max_concentrations / np.maximum(source_basis.max_concentrations, 1e-12)
    od = (conc * ratio) @ target_basis.matrix.T
    return macenko_od_inverse(od)


def macenko_normalize(source, target_basis, source_basis=None):
    """Macenko normalisation; returns a uint8 RGB image of the same size."""
    return to_uint8(macenko_transform(source, target_basis, source_basis))
