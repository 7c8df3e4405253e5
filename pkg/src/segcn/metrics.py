"""Colour-constancy and structure metrics for normalised images."""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from skimage.metrics import structural_similarity

from .baselines import BACKGROUND_LEVEL, background_mask
from .errors import InvalidInput, NoTissue, ShapeMismatch

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])
CWSSIM_K = 0.01
CWSSIM_LEVELS = 3
CWSSIM_ORIENTATIONS = 6
CWSSIM_WINDOW = 7
MIN_CWSSIM_SIZE = 32


def nearest_rank(values, percent):
    """Nearest-rank percentile: the smallest value with at least ``percent``% of data at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InvalidInput("percentile of an empty set")
    rank = max(int(math.ceil(percent / 100.0 * v.size)), 1)
    return float(v[rank - 1])


def nmi(image, background_level=BACKGROUND_LEVEL):
    """Normalised median intensity of the tissue pixels of an RGB image.

    Per-pixel intensity is the mean over RGB; NMI is its median divided by its
    95th percentile (both nearest-rank). Pixels brighter than
    ``background_level`` in every channel are background.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) RGB image, got {image.shape}")
    tissue = ~background_mask(image, background_level)
    if not tissue.any():
        raise NoTissue("image has no tissue pixels")
    intensity = image[tissue].mean(axis=-1)
    p95 = nearest_rank(intensity, 95)
    if p95 <= 0:
        raise NoTissue("tissue is black; NMI undefined")
    return nearest_rank(intensity, 50) / p95


def nmi_values(images):
    """Per-image NMI, skipping (with a warning) images that have no tissue."""
    out = []
    for i, img in enumerate(images):
        try:
            out.append(nmi(img))
        except NoTissue as exc:
            log.warning("image %d skipped for NMI: %s", i, exc)
    if not out:
        raise InvalidInput("no image has tissue pixels")
    return out


def mean_sd_cv(values):
    """Mean, population SD and CV (SD / mean; 0 when both are 0)."""
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    sd = float(v.std())
    if mean == 0:
        cv = 0.0 if sd == 0 else math.inf
    else:
        cv = sd / abs(mean)
    return mean, sd, cv


def nmi_aggregate(images):
    """``(SD, CV)`` of per-image NMI values across an image set."""
    _, sd, cv = mean_sd_cv(nmi_values(images))
    return sd, cv


# --- CW-SSIM --------------------------------------------------------------------


def to_gray(image):
    """Luminance on the 0..255 scale for RGB ``(H, W, 3)`` or gray ``(H, W)`` input."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[-1] == 3:
        return image @ LUMA
    if image.ndim == 2:
        return image
    raise ShapeMismatch(f"expected a gray or RGB image, got {image.shape}")


def _lowpass(r, cutoff):
    """Log-radial raised cosine: 1 below cutoff / 2, 0 above cutoff."""
    out = np.zeros_like(r)
    out[r <= cutoff / 2] = 1.0
    band = (r > cutoff / 2) & (r < cutoff)
    out[band] = np.cos(np.pi / 2 * np.log2(2 * r[band] / cutoff))
    return out


def steerable_filters(shape, levels=CWSSIM_LEVELS, orientations=CWSSIM_ORIENTATIONS):
    """Frequency responses of an undecimated complex steerable pyramid.

    Returns a list of ``levels * orientations`` real arrays; each is one-sided
    in angle, so filtering yields analytic (complex) subbands.
    """
    h, w = shape
    fy = np.fft.fftfreq(h) * 2 * np.pi
    fx = np.fft.fftfreq(w) * 2 * np.pi
    wy, wx = np.meshgrid(fy, fx, indexing="ij")
    r = np.hypot(wx, wy)
    theta = np.arctan2(wy, wx)
    k = orientations
    norm = 2 ** (k - 1) * math.factorial(k - 1) / math.sqrt(k * math.factorial(2 * (k - 1)))
    filters = []
    for j in range(levels):
        hi = np.pi / 2**j
        radial = _lowpass(r, hi) * np.sqrt(np.clip(1 - _lowpass(r, hi / 2) ** 2, 0, None))
        for o in range(k):
            d = np.angle(np.exp(1j * (theta - np.pi * o / k)))
            angular = np.where(np.abs(d) < np.pi / 2, norm * np.cos(d) ** (k - 1), 0.0)
            filters.append(radial * angular)
    return filters


def cwssim(image_x, image_y, levels=CWSSIM_LEVELS, orientations=CWSSIM_ORIENTATIONS,
           k=CWSSIM_K, window=CWSSIM_WINDOW):
    """Complex wavelet SSIM in [0, 1], averaged over windows and subbands.

    Per ``window``x``window`` neighbourhood of a complex subband ``c``:
    ``(2 |sum c_x conj(c_y)| + K) / (sum |c_x|^2 + sum |c_y|^2 + K)``.
    """
    x, y = to_gray(image_x), to_gray(image_y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    if min(x.shape) < MIN_CWSSIM_SIZE:
        raise InvalidInput(f"images must be at least {MIN_CWSSIM_SIZE}px, got {x.shape}")
    fx, fy = np.fft.fft2(x), np.fft.fft2(y)
    half = window // 2
    inner = (slice(half, x.shape[0] - half), slice(half, x.shape[1] - half))
    scores = []
    for filt in steerable_filters(x.shape, levels, orientations):
        cx = np.fft.ifft2(fx * filt)
        cy = np.fft.ifft2(fy * filt)
        cross = cx * np.conj(cy)

        def wsum(a):
            return uniform_filter(a, window, mode="constant")[inner] * window**2

        num = 2 * np.hypot(wsum(cross.real), wsum(cross.imag)) + k
        den = wsum(np.abs(cx) ** 2) + wsum(np.abs(cy) ** 2) + k
        scores.append(np.mean(num / den))
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def ssim(image_x, image_y):
    """Luminance SSIM with a 0..255 data range."""
    x, y = to_gray(image_x), to_gray(image_y)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    return float(structural_similarity(x, y, data_range=255.0))


def structure_dice(mask_x, mask_y):
    """Dice overlap of two binary masks; 1 when both are empty."""
    x = np.asarray(mask_x).astype(bool)
    y = np.asarray(mask_y).astype(bool)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    total = x.sum() + y.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(x, y).sum() / total)


# --- reporting --------------------------------------------------------------------


@dataclass
class MetricReport:
    """Per-image metric values with mean/SD/CV aggregates."""

    method: str
    dataset: str = ""
    seed: int = None
    per_image: dict = field(default_factory=dict)

    def add(self, name, values):
        values = [float(v) for v in values]
        if not all(math.isfinite(v) for v in values):
            raise InvalidInput(f"non-finite values for metric {name}")
        self.per_image[name] = values

    @property
    def aggregates(self):
        out = {}
        for name, values in self.per_image.items():
            if values:
                mean, sd, cv = mean_sd_cv(values)
                out[name] = {"mean": mean, "sd": sd, "cv": cv}
        return out

    def to_dict(self):
        return {**asdict(self), "aggregates": self.aggregates}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path):
        """Long format: ``metric,index,value`` rows, then ``mean``/``sd``/``cv`` rows per metric."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "index", "value"])
            for name, values in self.per_image.items():
                for i, v in enumerate(values):
                    writer.writerow([name, i, repr(v)])
            for name, agg in self.aggregates.items():
                for key, v in agg.items():
                    writer.writerow([name, key, repr(v)])
