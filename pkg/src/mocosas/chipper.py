"""Anomaly-detection chipping: energy detector + RX detector, fused, then cropped.

Both detectors score every pixel, keep those above threshold, and thin them with
greedy non-maximum suppression. Candidates are ordered by score, then by raw
intensity, then by row-major position, so ties resolve deterministically.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .imageops import box_count, box_sum, resize_bilinear


class DetectorError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    """Detector and chip geometry.

    ``window`` and ``guard`` are square side lengths centred on the pixel under
    test. The RX background is the ring inside ``window`` but outside ``guard``.
    """

    window: int = 15
    guard: int = 7
    energy_threshold_sigma: float = 1.0
    rx_threshold: float = 35.0
    nms_radius: float = 24.0
    snippet_size: int = 64
    resize: int = 224
    channels: int = 2
    prefilter: int = 5

    def __post_init__(self):
        if self.window % 2 != 1:
            raise ValueError(f"window must be odd, got {self.window}")
        if not self.window > self.guard >= 0:
            raise ValueError(f"need window > guard >= 0, got window={self.window}, guard={self.guard}")
        if self.energy_threshold_sigma <= 0 or self.rx_threshold <= 0:
            raise ValueError("detector thresholds must be positive")
        if self.channels not in (1, 2):
            raise ValueError(f"channels must be 1 or 2, got {self.channels}")


@dataclass
class Detection:
    x: int
    y: int
    energy_score: float = 0.0
    rx_score: float = 0.0
    fused_score: float = 0.0


def nms(ys: np.ndarray, xs: np.ndarray, order: np.ndarray, radius: float) -> List[int]:
    """Greedy suppression in ``order``; returns kept indices, none closer than or equal to ``radius``."""
    kept: List[int] = []
    ky = np.empty(len(order))
    kx = np.empty(len(order))
    r2 = radius * radius
    for i in order:
        n = len(kept)
        if n:
            d2 = (ky[:n] - ys[i]) ** 2 + (kx[:n] - xs[i]) ** 2
            if np.any(d2 <= r2):
                continue
        ky[n], kx[n] = ys[i], xs[i]
        kept.append(int(i))
    return kept


def _threshold_and_suppress(score: np.ndarray, intensity: np.ndarray, threshold: float, radius: float):
    ys, xs = np.nonzero(score > threshold)
    if ys.size == 0:
        return []
    s = score[ys, xs]
    v = intensity[ys, xs]
    flat = ys * score.shape[1] + xs
    # lexsort: last key is primary
    order = np.lexsort((flat, -v, -s))
    return [(int(ys[i]), int(xs[i]), float(s[i])) for i in nms(ys, xs, order, radius)]


def energy_map(image: np.ndarray, window: int) -> np.ndarray:
    """Per-pixel (local window mean - global mean) / global std; zeros for a constant image."""
    image = np.asarray(image, dtype=np.float64)
    if window > min(image.shape):
        raise DetectorError(f"window {window} exceeds image {image.shape}")
    std = image.std()
    if std == 0:
        return np.zeros_like(image)
    local = box_sum(image, window) / box_count(image.shape, window)
    return (local - image.mean()) / std


def energy_detect(image: np.ndarray, config: DetectorConfig) -> List[Detection]:
    image = np.asarray(image, dtype=np.float64)
    if np.any(image < 0):
        raise ValueError("energy detector expects a nonnegative intensity image")
    score = energy_map(image, config.window)
    hits = _threshold_and_suppress(score, image, config.energy_threshold_sigma, config.nms_radius)
    return [Detection(x=x, y=y, energy_score=s) for y, x, s in hits]


def rx_map(image: np.ndarray, window: int, guard: int) -> np.ndarray:
    """Mahalanobis distance of every pixel vector from its local ring background.

    ``image`` is (C, H, W) or (H, W). Covariance is the population estimate,
    regularized as Sigma + lambda I with lambda = 1e-6 * trace(Sigma) / C.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if window > min(h, w):
        raise DetectorError(f"window {window} exceeds image {(h, w)}")
    count = box_count((h, w), window) - box_count((h, w), guard)
    if np.any(count < 2):
        raise DetectorError("RX background ring has fewer than two pixels")

    def ring(a):
        return box_sum(a, window) - box_sum(a, guard)

    mu = np.stack([ring(image[i]) for i in range(c)]) / count
    cov = np.empty((h, w, c, c))
    for i in range(c):
        for j in range(i, c):
            second = ring(image[i] * image[j]) / count
            cov[:, :, i, j] = cov[:, :, j, i] = second - mu[i] * mu[j]
    lam = 1e-6 * np.trace(cov, axis1=2, axis2=3) / c
    lam = np.where(lam > 0, lam, 1e-12)
    cov = cov + lam[:, :, None, None] * np.eye(c)
    diff = (image - mu).transpose(1, 2, 0)[..., None]
    try:
        sol = np.linalg.solve(cov, diff)
    except np.linalg.LinAlgError as exc:
        raise DetectorError("singular RX background covariance") from exc
    return (diff * sol).sum(axis=(2, 3))


def rx_detect(image: np.ndarray, config: DetectorConfig) -> List[Detection]:
    image = np.asarray(image, dtype=np.float64)
    score = rx_map(image, config.window, config.guard)
    intensity = image if image.ndim == 2 else image.sum(axis=0)
    hits = _threshold_and_suppress(score, intensity, config.rx_threshold, config.nms_radius)
    return [Detection(x=x, y=y, rx_score=s) for y, x, s in hits]


def _rank_weights(scores: Sequence[float]) -> np.ndarray:
    """Map scores to (0, 1]: the best gets 1, the worst 1/n; ties share the higher rank."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n == 0:
        return s
    sorted_s = np.sort(s)
    return np.searchsorted(sorted_s, s, side="right") / n


def fuse_detections(energy: List[Detection], rx: List[Detection], config: DetectorConfig) -> List[Detection]:
    """Rank-normalize each detector, average with weight 1/2 each, then apply NMS."""
    merged = {}
    for det, wgt in zip(energy, _rank_weights([d.energy_score for d in energy])):
        merged[(det.y, det.x)] = Detection(det.x, det.y, energy_score=det.energy_score, fused_score=0.5 * wgt)
    for det, wgt in zip(rx, _rank_weights([d.rx_score for d in rx])):
        cur = merged.get((det.y, det.x))
        if cur is None:
            merged[(det.y, det.x)] = Detection(det.x, det.y, rx_score=det.rx_score, fused_score=0.5 * wgt)
        else:
            cur.rx_score = det.rx_score
            cur.fused_score += 0.5 * wgt
    if not merged:
        return []
    dets = list(merged.values())
    ys = np.array([d.y for d in dets])
    xs = np.array([d.x for d in dets])
    fused = np.array([d.fused_score for d in dets])
    order = np.lexsort((xs, ys, -fused))
    return [dets[i] for i in nms(ys, xs, order, config.nms_radius)]


def crop_origin(shape, cy: int, cx: int, size: int):
    """Top-left corner of a ``size`` crop centred on (cy, cx), clamped inside ``shape``."""
    h, w = shape
    return int(np.clip(cy - size // 2, 0, h - size)), int(np.clip(cx - size // 2, 0, w - size))


def _crop(img: np.ndarray, cy: int, cx: int, size: int) -> np.ndarray:
    top, left = crop_origin(img.shape, cy, cx, size)
    return img[top : top + size, left : left + size]


def extract_snippets(scene, detections: List[Detection], config: DetectorConfig) -> List[np.ndarray]:
    """Crop ``snippet_size`` squares around detections (clamped inside the scene), resize, stack.

    Two-channel snippets are (HF, LF); one-channel snippets keep HF only.
    """
    s = config.snippet_size
    if s > min(scene.hf.shape):
        raise DetectorError(f"snippet_size {s} exceeds scene {scene.hf.shape}")
    bands = [scene.hf] if config.channels == 1 else [scene.hf, scene.lf]
    out = []
    for d in detections:
        chans = [resize_bilinear(_crop(b, d.y, d.x, s), config.resize) for b in bands]
        out.append(np.stack(chans))
    return out


def detector_bands(scene, config: DetectorConfig) -> np.ndarray:
    """Locally averaged (HF, LF) stack fed to the RX detector; suppresses single-pixel speckle."""
    k = config.prefilter
    if k <= 1:
        return np.stack([scene.hf, scene.lf])
    cnt = box_count(scene.hf.shape, k)
    return np.stack([box_sum(scene.hf, k) / cnt, box_sum(scene.lf, k) / cnt])


def detect(scene, config: DetectorConfig) -> List[Detection]:
    """Full chipper detection stage on a scene: energy on HF, RX on the band stack, fused."""
    energy = energy_detect(scene.hf, config)
    rx = rx_detect(detector_bands(scene, config), config)
    return fuse_detections(energy, rx, config)


def chip_scene(scene, config: DetectorConfig):
    """Return ``(detections, snippets)`` for one scene."""
    dets = detect(scene, config)
    return dets, extract_snippets(scene, dets, config)
