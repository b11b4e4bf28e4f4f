"""Image-quality and diagnostic metrics on images mapped to [0, 1]."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, stats

from .errors import ConfigurationError, DimensionError
from .objectives import SurrogateFeatures

logger = logging.getLogger("hpalf")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GMS_C = 1e-4
FFD_LOADING = 1e-6
NOISE_PATCH = 7
NOISE_CONFIDENCE = 1.0 - 1e-6
NOISE_MAX_ITERATIONS = 10
NOISE_MIN_PATCHES = 50

# reference values of the mean feature-map cosine per context block
REFERENCE_DIVERSITY = {"biconvlstm": 0.43, "3dcnn": 0.53, "2dcnn": 0.66}


def to_unit_range(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] intensities onto [0, 1]."""
    return (np.asarray(image, dtype=np.float64) + 1.0) / 2.0


def _same_shape(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"images differ in shape: {x.shape} vs {y.shape}")
    return x, y


def psnr(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    x, y = _same_shape(x, y)
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets**2) / (2.0 * sigma**2))
    window = np.outer(profile, profile)
    return window / window.sum()


def ssim(x: np.ndarray, y: np.ndarray, data_range: float = 1.0) -> float:
    """Windowed SSIM with an 11x11 Gaussian window, averaged over valid window positions."""
    x, y = _same_shape(x, y)
    if x.ndim != 2:
        raise DimensionError(f"SSIM expects a single-channel 2D image, got {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ConfigurationError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    window = gaussian_window()
    crop = SSIM_WINDOW // 2

    def filtered(image: np.ndarray) -> np.ndarray:
        return ndimage.correlate(image, window, mode="reflect")[crop:-crop, crop:-crop]

    mu_x, mu_y = filtered(x), filtered(y)
    var_x = filtered(x * x) - mu_x**2
    var_y = filtered(y * y) - mu_y**2
    cov = filtered(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


@dataclass(frozen=True)
class FrechetResult:
    value: float
    loaded: bool = False


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh(matrix)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _is_singular(cov: np.ndarray) -> bool:
    values = np.linalg.eigvalsh(cov)
    return bool(values[0] <= 1e-12 * max(values[-1], 1e-300))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> FrechetResult:
    """Fréchet distance between Gaussian fits of two (N, F) feature sets."""
    features_a = np.atleast_2d(np.asarray(features_a, dtype=np.float64))
    features_b = np.atleast_2d(np.asarray(features_b, dtype=np.float64))
    if features_a.shape[1] != features_b.shape[1]:
        raise DimensionError(f"feature widths differ: {features_a.shape[1]} vs {features_b.shape[1]}")
    if min(features_a.shape[0], features_b.shape[0]) < 2:
        raise ConfigurationError("each feature set needs at least two samples")
    mu_a, mu_b = features_a.mean(axis=0), features_b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(features_a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(features_b, rowvar=False))
    loaded = _is_singular(cov_a) or _is_singular(cov_b)
    if loaded:
        logger.warning("Singular feature covariance; applying %s diagonal loading", FFD_LOADING)
        eye = np.eye(cov_a.shape[0])
        cov_a = cov_a + FFD_LOADING * eye
        cov_b = cov_b + FFD_LOADING * eye
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    cross = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (middle + middle.T)), 0.0, None))))
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return FrechetResult(value=max(value, 0.0), loaded=loaded)


def ffd(set_a: np.ndarray, set_b: np.ndarray, surrogate: SurrogateFeatures | None = None) -> FrechetResult:
    """Fréchet feature distance over the frozen surrogate's pooled features."""
    surrogate = surrogate or SurrogateFeatures()
    return frechet_distance(surrogate.pooled(set_a), surrogate.pooled(set_b))


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    return np.hypot(ndimage.sobel(image, axis=0, mode="reflect"), ndimage.sobel(image, axis=1, mode="reflect"))


def psim_lite(x: np.ndarray, y: np.ndarray) -> float:
    """Mean gradient-magnitude similarity, a stand-in for a perceptual similarity index."""
    x, y = _same_shape(x, y)
    gx, gy = _gradient_magnitude(x), _gradient_magnitude(y)
    return float(np.mean((2.0 * gx * gy + GMS_C) / (gx**2 + gy**2 + GMS_C)))


@dataclass(frozen=True)
class NoiseEstimate:
    sigma: float
    patches: int
    threshold: float
    iterations: int
    low_confidence: bool


def _difference_operator(patch: int) -> np.ndarray:
    """Central differences at the interior pixels of a flattened patch, horizontal rows then vertical."""
    interior = [(i, j) for i in range(1, patch - 1) for j in range(1, patch - 1)]
    rows = []
    for di, dj in ((0, 1), (1, 0)):
        for i, j in interior:
            row = np.zeros(patch * patch)
            row[(i - di) * patch + j - dj], row[(i + di) * patch + j + dj] = -0.5, 0.5
            rows.append(row)
    return np.asarray(rows)


def _smallest_eigenvalue(patches: np.ndarray) -> float:
    return float(max(np.linalg.eigvalsh(np.cov(patches, rowvar=False))[0], 0.0))


def _texture_strength(image: np.ndarray, patch: int) -> np.ndarray:
    """Largest eigenvalue of each patch's 2x2 gradient covariance, over the patch interior."""
    kernel = np.array([-0.5, 0.0, 0.5])
    grad_h = ndimage.correlate1d(image, kernel, axis=1, mode="nearest")[1:-1, 1:-1]
    grad_v = ndimage.correlate1d(image, kernel, axis=0, mode="nearest")[1:-1, 1:-1]
    inner = (patch - 2, patch - 2)

    def window_sum(values: np.ndarray) -> np.ndarray:
        return sliding_window_view(values, inner).sum(axis=(2, 3)).reshape(-1)

    sxx, syy, sxy = window_sum(grad_h**2), window_sum(grad_v**2), window_sum(grad_h * grad_v)
    covariance = np.stack([np.stack([sxx, sxy], axis=-1), np.stack([sxy, syy], axis=-1)], axis=-2)
    return np.linalg.eigvalsh(covariance)[:, -1]


def estimate_noise_level(image: np.ndarray, patch: int = NOISE_PATCH) -> NoiseEstimate:
    """Weak-texture patch PCA noise estimate with an iterated texture threshold."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < 32:
        raise ConfigurationError(f"noise estimation needs a 2D image of at least 32x32, got {image.shape}")
    patches = sliding_window_view(image, (patch, patch)).reshape(-1, patch * patch)
    texture = _texture_strength(image, patch)

    # the gradient-trace quantile bounds the largest eigenvalue from above
    operator = _difference_operator(patch)
    gram = operator.T @ operator
    rank = float(np.linalg.matrix_rank(gram))
    tau0 = float(stats.gamma.ppf(NOISE_CONFIDENCE, rank / 2.0, scale=2.0 * np.trace(gram) / rank))

    dimension = patch * patch
    sig2 = _smallest_eigenvalue(patches)
    selected = np.ones(texture.size, dtype=bool)
    threshold, iterations = math.inf, 0
    for iterations in range(1, NOISE_MAX_ITERATIONS + 1):
        threshold = sig2 * tau0
        candidate = texture < threshold
        if int(candidate.sum()) <= dimension:
            selected = candidate
            break
        if np.array_equal(candidate, selected):
            break
        selected = candidate
        sig2 = _smallest_eigenvalue(patches[selected])

    count = int(selected.sum())
    low_confidence = count < NOISE_MIN_PATCHES
    if low_confidence:
        logger.warning("Only %s weak-texture patches; noise estimate is low confidence", count)
    return NoiseEstimate(
        sigma=math.sqrt(sig2), patches=count, threshold=threshold, iterations=iterations, low_confidence=low_confidence
    )


@dataclass(frozen=True)
class DiversityResult:
    mean_cosine: float
    excluded: tuple[int, ...] = ()


def feature_cosine_diversity(feature_maps: Sequence[np.ndarray]) -> DiversityResult:
    """Mean pairwise cosine similarity of flattened feature maps; zero-norm maps are excluded."""
    if len(feature_maps) < 2:
        raise ConfigurationError("cosine diversity needs at least two feature maps")
    shape = np.shape(feature_maps[0])
    if any(np.shape(m) != shape for m in feature_maps):
        raise DimensionError("feature maps must share one shape")
    flat = [np.asarray(m, dtype=np.float64).reshape(-1) for m in feature_maps]
    norms = [float(np.linalg.norm(v)) for v in flat]
    excluded = tuple(i for i, n in enumerate(norms) if n == 0.0)
    if excluded:
        logger.warning("Excluded %s zero-norm feature maps from the cosine diversity", len(excluded))
    kept = [v / n for v, n in zip(flat, norms) if n > 0.0]
    if len(kept) < 2:
        raise ConfigurationError("fewer than two feature maps with nonzero norm")
    unit = np.stack(kept)
    gram = unit @ unit.T
    upper = np.triu_indices(len(kept), k=1)
    return DiversityResult(mean_cosine=float(np.mean(gram[upper])), excluded=excluded)


@dataclass(frozen=True)
class SliceMetrics:
    index: int
    psnr: float
    ssim: float
    psim_lite: float


@dataclass
class MetricReport:
    """Volume-level summary plus the per-slice breakdown; images are compared on [0, 1]."""

    psnr: float
    ssim: float
    ffd: float
    psim_lite: float
    per_slice: list[SliceMetrics] = field(default_factory=list)
    ffd_loaded: bool = False


def mean_psnr(values: Sequence[float]) -> float:
    """Average of finite PSNR values; ``inf`` only when every slice is exact."""
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return math.inf
    if len(finite) < len(values):
        logger.warning("PSNR mean skips %s exact slices out of %s", len(values) - len(finite), len(values))
    return float(np.mean(finite))


def evaluate_volumes(
    reference: np.ndarray, reconstruction: np.ndarray, surrogate: SurrogateFeatures | None = None
) -> MetricReport:
    """Compare two (D, H, W) stacks in [-1, 1] slice by slice."""
    reference, reconstruction = _same_shape(reference, reconstruction)
    if reference.ndim != 3:
        raise DimensionError(f"expected (D, H, W) stacks, got {reference.shape}")
    ref_unit, rec_unit = to_unit_range(reference), to_unit_range(reconstruction)
    rows = [
        SliceMetrics(index=i, psnr=psnr(r, x), ssim=ssim(r, x), psim_lite=psim_lite(r, x))
        for i, (r, x) in enumerate(zip(ref_unit, rec_unit))
    ]
    distance = ffd(ref_unit, rec_unit, surrogate) if reference.shape[0] >= 2 else FrechetResult(0.0)
    return MetricReport(
        psnr=mean_psnr([r.psnr for r in rows]),
        ssim=float(np.mean([r.ssim for r in rows])),
        ffd=distance.value,
        psim_lite=float(np.mean([r.psim_lite for r in rows])),
        per_slice=rows,
        ffd_loaded=distance.loaded,
    )
