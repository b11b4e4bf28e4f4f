"""Simulated single-coil Cartesian acquisition on synthetic phantoms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError
from .schemas import MaskSpec

logger = logging.getLogger("hpalf")

BACKGROUND = -1.0
NOISE_LEVELS = (0.0, 0.05, 0.10, 0.15, 0.20)


@dataclass
class SliceVolume:
    """A (D, H, W) stack of real slices normalised to [-1, 1]."""

    voxels: np.ndarray
    intensity_range: tuple[float, float] = (-1.0, 1.0)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.voxels.ndim != 3:
            raise DimensionError(f"volume must be (D, H, W), got {self.voxels.shape}")
        if self.voxels.shape[1] != self.voxels.shape[2]:
            raise DimensionError(f"slices must be square, got {self.voxels.shape[1:]}")

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]


@dataclass
class KSpaceSample:
    """Masked, possibly noisy spectrum of one slice."""

    spectrum: np.ndarray
    mask: np.ndarray
    noise_sigma: float
    seed: int
    imag_leakage: float = 0.0


@dataclass(frozen=True)
class SliceWindow:
    start: int
    slices: np.ndarray = field(repr=False)

    @property
    def center(self) -> np.ndarray:
        return self.slices[self.slices.shape[0] // 2]


def _check_power_of_two(*extents: int) -> None:
    for extent in extents:
        if extent < 1 or extent & (extent - 1):
            raise ConfigurationError(f"extent {extent} is not a power of two")


def fft2c(image: np.ndarray) -> np.ndarray:
    """Orthonormal 2D FFT over the last two axes with DC at (H/2, W/2)."""
    _check_power_of_two(*image.shape[-2:])
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image, axes=axes), norm="ortho"), axes=axes)


def ifft2c(spectrum: np.ndarray) -> np.ndarray:
    _check_power_of_two(*spectrum.shape[-2:])
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spectrum, axes=axes), norm="ortho"), axes=axes)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


# masks -------------------------------------------------------------------


def _gaussian_weights(offsets: np.ndarray, sigma: float) -> np.ndarray:
    return np.exp(-0.5 * (offsets / sigma) ** 2)


def _pick_pairs(rng: np.random.Generator, weights: np.ndarray, count: int) -> np.ndarray:
    if count <= 0:
        return np.empty(0, dtype=int)
    probs = weights / weights.sum()
    return rng.choice(weights.size, size=min(count, weights.size), replace=False, p=probs)


def _g1d_mask(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    target = min(width, max(1, round_half_up(spec.fraction * width)))
    dc = width // 2
    # columns j and width - j mirror each other about DC; 0 is its own mirror
    reps = np.arange(1, dc)
    weights = _gaussian_weights(reps - dc, width / 6.0)
    remaining = target - 1
    chosen = reps[_pick_pairs(rng, weights, remaining // 2)]
    columns = [dc, *chosen, *(width - chosen)]
    if remaining % 2:
        columns.append(0)
    mask = np.zeros((height, width), dtype=np.float64)
    mask[:, columns] = 1.0
    return mask


def _point_pairs(height: int, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Representatives of conjugate pairs plus the self-mirrored points other than DC."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    flat = rows * width + cols
    partner = ((height - rows) % height) * width + (width - cols) % width
    reps = flat[flat < partner]
    dc = (height // 2) * width + width // 2
    singles = flat[(flat == partner) & (flat != dc)]
    return reps, partner.reshape(-1), singles


def _g2d_mask(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    target = min(height * width, max(1, round_half_up(spec.fraction * height * width)))
    reps, partner, singles = _point_pairs(height, width)
    dy = reps // width - height // 2
    dx = reps % width - width // 2
    weights = _gaussian_weights(dy, height / 6.0) * _gaussian_weights(dx, width / 6.0)
    remaining = target - 1
    chosen = reps[_pick_pairs(rng, weights, remaining // 2)]
    mask = np.zeros(height * width)
    mask[(height // 2) * width + width // 2] = 1.0
    mask[chosen] = 1.0
    mask[partner[chosen]] = 1.0
    if remaining % 2:
        # the self-mirrored point nearest DC
        distances = np.hypot(singles // width - height // 2, singles % width - width // 2)
        mask[singles[np.argmin(distances)]] = 1.0
    return mask.reshape(height, width)


def _poisson_pass(
    order: np.ndarray, partner: np.ndarray, height: int, width: int, radius: np.ndarray, r0: float, target: int
) -> list[int]:
    occupied = np.zeros((height, width), dtype=bool)
    accepted: list[int] = []
    count = 0
    for index in order:
        r = r0 * radius[index]
        y, x = divmod(int(index), width)
        reach = int(math.ceil(r)) - 1
        if reach >= 1:
            y0, y1 = max(0, y - reach), min(height, y + reach + 1)
            x0, x1 = max(0, x - reach), min(width, x + reach + 1)
            window = occupied[y0:y1, x0:x1]
            if window.any():
                ys, xs = np.nonzero(window)
                if np.any((ys + y0 - y) ** 2 + (xs + x0 - x) ** 2 < r * r):
                    continue
        mate = int(partner[index])
        occupied[y, x] = True
        occupied[mate // width, mate % width] = True
        accepted.append(int(index))
        count += 1 if mate == index else 2
        if count >= target:
            break
    return accepted


def _p2d_mask(spec: MaskSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    target = min(height * width, max(1, round_half_up(spec.fraction * height * width)))
    reps, partner, singles = _point_pairs(height, width)
    dc = (height // 2) * width + width // 2
    rows, cols = np.divmod(np.arange(height * width), width)
    distance = np.hypot(rows - height // 2, cols - width // 2)
    radius = 1.0 + 2.0 * distance / distance.max()
    order = np.concatenate([[dc], rng.permutation(np.concatenate([reps, singles]))])

    def realised(points: list[int]) -> int:
        return sum(1 if partner[p] == p else 2 for p in points)

    low, high = 0.0, float(max(height, width))
    best = _poisson_pass(order, partner, height, width, radius, low, target)
    for _ in range(24):
        mid = 0.5 * (low + high)
        points = _poisson_pass(order, partner, height, width, radius, mid, target)
        if realised(points) >= target:
            low, best = mid, points
        else:
            high = mid
    mask = np.zeros(height * width)
    count = 0
    for point in best:
        step = 1 if partner[point] == point else 2
        if count + step > target:
            continue
        mask[point] = mask[partner[point]] = 1.0
        count += step
    logger.debug("Poisson-disc mask radius %.4f realised %s of %s points", low, count, target)
    return mask.reshape(height, width)


def make_mask(spec: MaskSpec, height: int, width: int) -> np.ndarray:
    """Binary, conjugate-symmetric undersampling mask with DC always sampled."""
    if not 0.0 < spec.fraction <= 1.0:
        raise ConfigurationError(f"sampling fraction must lie in (0, 1], got {spec.fraction}")
    _check_power_of_two(height, width)
    if spec.fraction >= 1.0:
        return np.ones((height, width))
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "g1d":
        return _g1d_mask(spec, height, width, rng)
    if spec.kind == "g2d":
        return _g2d_mask(spec, height, width, rng)
    if spec.kind == "p2d":
        return _p2d_mask(spec, height, width, rng)
    raise ConfigurationError(f"unknown mask kind {spec.kind!r}")


def mask_tolerance(spec: MaskSpec, height: int, width: int) -> float:
    """Allowed deviation of the realised sample count, in lines or points."""
    if spec.kind == "g1d":
        return 1.0
    return max(1.0, 0.005 * height * width)


# degradation -------------------------------------------------------------


def degrade(
    image: np.ndarray, mask: np.ndarray, noise_sigma: float = 0.0, seed: int = 0
) -> tuple[KSpaceSample, np.ndarray]:
    """Undersample one real slice; returns the sample and the real zero-filled image."""
    if image.shape != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match slice {image.shape}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be non-negative, got {noise_sigma}")
    full = fft2c(image.astype(np.complex128))
    spectrum = full
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        std = noise_sigma * float(np.abs(full).max())
        spectrum = full + std * (rng.standard_normal(full.shape) + 1j * rng.standard_normal(full.shape))
    spectrum = mask * spectrum
    inverse = ifft2c(spectrum)
    total = float(np.linalg.norm(inverse))
    leakage = float(np.linalg.norm(inverse.imag)) / total if total > 0 else 0.0
    sample = KSpaceSample(spectrum=spectrum, mask=mask, noise_sigma=noise_sigma, seed=seed, imag_leakage=leakage)
    return sample, inverse.real.copy()


def zero_fill(sample: KSpaceSample) -> np.ndarray:
    return ifft2c(sample.spectrum).real


def degrade_window(
    slices: np.ndarray, mask: np.ndarray, noise_sigma: float = 0.0, seed: int = 0
) -> tuple[list[KSpaceSample], np.ndarray]:
    """Degrade each slice of an (n, H, W) window with per-slice noise seeds."""
    samples, filled = [], []
    for index, image in enumerate(slices):
        sample, zero_filled = degrade(image, mask, noise_sigma, seed * 1009 + index)
        samples.append(sample)
        filled.append(zero_filled)
    return samples, np.stack(filled)


# phantoms and slice windows ---------------------------------------------


def normalize_volume(voxels: np.ndarray) -> SliceVolume:
    """Map raw intensities linearly onto [-1, 1], remembering the original range."""
    low, high = float(voxels.min()), float(voxels.max())
    if high > low:
        scaled = 2.0 * (voxels - low) / (high - low) - 1.0
    else:
        scaled = np.full_like(voxels, BACKGROUND, dtype=np.float64)
    return SliceVolume(voxels=np.clip(scaled, -1.0, 1.0).astype(np.float64), intensity_range=(low, high))


def gen_phantom_volume(depth: int, height: int, width: int, complexity: float = 0.5, seed: int = 0) -> SliceVolume:
    """Drifting-ellipse phantom with texture bands, normalised to [-1, 1]."""
    if depth < 7:
        raise ConfigurationError(f"phantom depth must be at least 7, got {depth}")
    if height != width:
        raise DimensionError(f"phantom slices must be square, got {height}x{width}")
    _check_power_of_two(height)
    complexity = float(np.clip(complexity, 0.0, 1.0))
    rng = np.random.default_rng(seed)
    n_inner = 4 + round_half_up(7 * complexity)

    ys, xs = np.meshgrid(np.linspace(-1, 1, height), np.linspace(-1, 1, width), indexing="ij")
    t = np.linspace(0.0, 1.0, depth)

    head_axes = rng.uniform(0.7, 0.85, size=2)
    head_tilt = rng.uniform(-0.3, 0.3)
    inner = {
        "center": rng.uniform(-0.4, 0.4, size=(n_inner, 2)),
        "velocity": rng.uniform(-0.3, 0.3, size=(n_inner, 2)),
        "axes": rng.uniform(0.08, 0.35, size=(n_inner, 2)),
        "pulse": rng.uniform(0.5, 1.5, size=n_inner),
        "phase": rng.uniform(0, 2 * np.pi, size=n_inner),
        "angle": rng.uniform(0, np.pi, size=n_inner),
        "spin": rng.uniform(-0.8, 0.8, size=n_inner),
        "value": rng.uniform(-0.25, 0.5, size=n_inner),
    }
    band_freq = rng.uniform(10.0, 16.0)
    band_dir = rng.uniform(0, np.pi)
    band_amp = 0.04 + 0.08 * complexity

    def ellipse(cy: float, cx: float, ay: float, ax: float, angle: float) -> np.ndarray:
        c, s = np.cos(angle), np.sin(angle)
        u = (xs - cx) * c + (ys - cy) * s
        v = -(xs - cx) * s + (ys - cy) * c
        return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0

    raw = np.zeros((depth, height, width))
    for z, tz in enumerate(t):
        scale = 1.0 - 0.1 * abs(tz - 0.5)
        head = ellipse(0.0, 0.0, head_axes[0] * scale, head_axes[1] * scale, head_tilt)
        values = np.full((height, width), 0.4)
        for k in range(n_inner):
            cy, cx = inner["center"][k] + inner["velocity"][k] * (tz - 0.5)
            wobble = 1.0 + 0.25 * np.sin(2 * np.pi * inner["pulse"][k] * tz + inner["phase"][k])
            ay, ax = inner["axes"][k] * wobble
            region = ellipse(cy, cx, ay, ax, inner["angle"][k] + inner["spin"][k] * tz)
            values = values + inner["value"][k] * region
        bands = band_amp * np.sin(
            band_freq * np.pi * (xs * np.cos(band_dir) + ys * np.sin(band_dir)) + 2.0 * np.pi * tz
        )
        raw[z] = np.where(head, np.maximum(values + bands, 0.05), 0.0)
    return normalize_volume(raw)


def void_fraction(image: np.ndarray) -> float:
    return float(np.mean(image <= BACKGROUND + 1e-6))


def prepare_sequences(volume: SliceVolume, n_slices: int, void_threshold: float = 0.9) -> list[SliceWindow]:
    """Sliding windows of consecutive slices, skipping any window that touches a void slice."""
    if not 3 <= n_slices <= 7:
        raise ConfigurationError(f"n_slices must lie in 3..7, got {n_slices}")
    if volume.depth < n_slices:
        raise ConfigurationError(f"volume depth {volume.depth} is smaller than the window size {n_slices}")
    void = [void_fraction(image) > void_threshold for image in volume.voxels]
    windows = []
    for start in range(volume.depth - n_slices + 1):
        if any(void[start : start + n_slices]):
            continue
        windows.append(SliceWindow(start=start, slices=volume.voxels[start : start + n_slices]))
    return windows
