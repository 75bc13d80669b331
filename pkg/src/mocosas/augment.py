"""Two-view augmentation for contrastive pretraining, flip-only augmentation for evaluation.

Every transform takes a (C, S, S) snippet and a ``numpy.random.Generator`` and
returns a new array of the same shape; the same generator state always gives
the same output. Geometric transforms resample bilinearly with edge clamping.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .imageops import warp_affine


@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    crop_scale_range: Tuple[float, float] = (0.6, 1.0)
    crop_aspect_range: Tuple[float, float] = (0.9, 1.1)
    rotation_max_degrees: float = 10.0
    affine_translate_frac: float = 0.1
    affine_shear_degrees: float = 5.0
    p_blur: float = 0.5
    blur_sigma_range: Tuple[float, float] = (0.3, 1.5)
    p_speckle: float = 0.5
    speckle_looks_range: Tuple[int, int] = (4, 16)

    def __post_init__(self):
        for name in ("p_hflip", "p_blur", "p_speckle"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        for name in ("crop_scale_range", "crop_aspect_range", "blur_sigma_range", "speckle_looks_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
            setattr(self, name, (lo, hi))
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale_range must lie in (0, 1], got {self.crop_scale_range}")
        if not 0 <= self.rotation_max_degrees <= 45:
            raise ValueError("rotation_max_degrees must be in [0, 45] so content stays in frame")
        if not 0 <= self.affine_translate_frac <= 0.25:
            raise ValueError("affine_translate_frac must be in [0, 0.25]")
        if self.speckle_looks_range[0] < 1:
            raise ValueError("speckle looks must be >= 1")


def hflip(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x[..., ::-1])


def _per_channel(x: np.ndarray, fn) -> np.ndarray:
    return np.stack([fn(ch) for ch in x])


def random_resized_crop(x: np.ndarray, rng: np.random.Generator, scale_range=(0.6, 1.0), aspect_range=(0.9, 1.1)) -> np.ndarray:
    """Crop a random box of relative area ``scale`` and aspect ``w/h``, resample to full size."""
    s = x.shape[-1]
    scale = rng.uniform(*scale_range)
    aspect = rng.uniform(*aspect_range)
    h = min(s, s * np.sqrt(scale / aspect))
    w = min(s, s * np.sqrt(scale * aspect))
    top = rng.uniform(0.0, s - h)
    left = rng.uniform(0.0, s - w)
    if h == s and w == s:
        return x.copy()
    matrix = np.diag([h / s, w / s])
    offset = np.array([top + 0.5 * h / s - 0.5, left + 0.5 * w / s - 0.5])
    return _per_channel(x, lambda ch: warp_affine(ch, matrix, offset))


def _about_centre(x: np.ndarray, matrix: np.ndarray, shift=(0.0, 0.0)) -> np.ndarray:
    c = (x.shape[-1] - 1) / 2.0
    centre = np.array([c, c])
    offset = centre - matrix @ centre - matrix @ np.asarray(shift)
    return _per_channel(x, lambda ch: warp_affine(ch, matrix, offset))


def rotate(x: np.ndarray, rng: np.random.Generator, max_degrees: float = 10.0) -> np.ndarray:
    angle = np.deg2rad(rng.uniform(-max_degrees, max_degrees))
    if angle == 0.0:
        return x.copy()
    c, s = np.cos(angle), np.sin(angle)
    return _about_centre(x, np.array([[c, -s], [s, c]]))


def affine(x: np.ndarray, rng: np.random.Generator, translate_frac: float = 0.1, shear_degrees: float = 5.0) -> np.ndarray:
    """Random translation (fraction of the side) and horizontal shear about the centre."""
    n = x.shape[-1]
    ty, tx = rng.uniform(-translate_frac, translate_frac, size=2) * n
    shear = np.tan(np.deg2rad(rng.uniform(-shear_degrees, shear_degrees)))
    if ty == 0.0 and tx == 0.0 and shear == 0.0:
        return x.copy()
    # output (r, c) samples input (r - ty, c - tx + shear * (r - centre))
    return _about_centre(x, np.array([[1.0, 0.0], [shear, 1.0]]), shift=(ty, tx))


def gaussian_blur(x: np.ndarray, rng: np.random.Generator, sigma_range=(0.3, 1.5)) -> np.ndarray:
    sigma = rng.uniform(*sigma_range)
    return _per_channel(x, lambda ch: ndimage.gaussian_filter(ch, sigma, mode="nearest"))


def speckle_noise(x: np.ndarray, rng: np.random.Generator, looks_range=(4, 16)) -> np.ndarray:
    """Multiply by unit-mean Gamma(L, 1/L) noise with L drawn from ``looks_range``."""
    looks = rng.uniform(*looks_range)
    return x * rng.gamma(looks, 1.0 / looks, size=x.shape)


def augment_once(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One draw of the chain hflip -> resized crop -> rotation -> affine -> blur -> speckle."""
    x = np.asarray(x, dtype=np.float64)
    if rng.random() < config.p_hflip:
        x = hflip(x)
    x = random_resized_crop(x, rng, config.crop_scale_range, config.crop_aspect_range)
    x = rotate(x, rng, config.rotation_max_degrees)
    x = affine(x, rng, config.affine_translate_frac, config.affine_shear_degrees)
    if rng.random() < config.p_blur:
        x = gaussian_blur(x, rng, config.blur_sigma_range)
    if rng.random() < config.p_speckle:
        x = speckle_noise(x, rng, config.speckle_looks_range)
    return x


def two_views(snippet: np.ndarray, config: AugmentConfig, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return augment_once(snippet, config, rng), augment_once(snippet, config, rng)


def eval_augment(snippet: np.ndarray, p_hflip: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = np.asarray(snippet, dtype=np.float64)
    return hflip(x) if rng.random() < p_hflip else x.copy()


def sample_seed(epoch_seed: int, index: int) -> int:
    """Per-sample seed, independent of how samples are scheduled across workers."""
    return int(epoch_seed) ^ int(index)


def network_input(batch: np.ndarray) -> np.ndarray:
    """Log-compress intensities before they enter the backbone."""
    return np.log1p(np.maximum(batch, 0.0))


def batch_views(snippets: Sequence[np.ndarray], indices: Sequence[int], config: AugmentConfig, epoch_seed: int):
    """Two stacked view batches for ``snippets``, seeded per sample by its dataset index."""
    pairs = [two_views(s, config, sample_seed(epoch_seed, i)) for s, i in zip(snippets, indices)]
    v1 = np.stack([p[0] for p in pairs])
    v2 = np.stack([p[1] for p in pairs])
    return network_input(v1), network_input(v2)
