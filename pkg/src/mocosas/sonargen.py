"""Synthetic sonar scenes and chipped datasets.

A scene is a smooth seabed texture with elliptical targets (bright highlight plus
a dark acoustic shadow cast in the +x range direction) and irregular clutter
blobs (highlight only). The HF band is the reflectivity times unit-mean Gamma
speckle; the LF band is a blurred copy of the reflectivity with its own speckle.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .chipper import DetectorConfig, chip_scene, crop_origin
from .io import DatasetManifest, ManifestEntry, write_snippet

log = logging.getLogger(__name__)

TARGET, CLUTTER = "target", "clutter"
SPLITS = ("pretrain", "train", "test")


class InsufficientDetections(RuntimeError):
    def __init__(self, split: str, wanted: dict, achieved: dict):
        self.split, self.wanted, self.achieved = split, wanted, achieved
        super().__init__(f"could not fill split {split!r}: wanted {wanted}, achieved {achieved}")


@dataclass
class SceneConfig:
    scene_size: int = 256
    looks: int = 2
    background_texture_scale: float = 10.0
    texture_contrast: float = 0.25
    target_rate: float = 2.0
    clutter_rate: float = 3.0
    highlight_gain: float = 5.0
    shadow_gain: float = 0.1
    lf_blur_sigma: float = 2.0
    min_separation: float = 36.0
    seed: int = 0

    def __post_init__(self):
        if self.looks < 1:
            raise ValueError(f"looks must be >= 1, got {self.looks}")
        if self.target_rate < 0 or self.clutter_rate < 0:
            raise ValueError("object rates must be nonnegative")
        if self.highlight_gain <= 1:
            raise ValueError("highlight_gain must exceed 1")
        if not 0 < self.shadow_gain < 1:
            raise ValueError("shadow_gain must lie in (0, 1)")


@dataclass
class Scene:
    hf: np.ndarray
    lf: np.ndarray
    truth: List[Tuple[float, float, str]] = field(default_factory=list)


def speckle(rng: np.random.Generator, shape, looks: float) -> np.ndarray:
    """Fully developed speckle: Gamma(looks, 1/looks), unit mean."""
    return rng.gamma(looks, 1.0 / looks, size=shape)


def _texture(rng, n: int, scale: float, contrast: float) -> np.ndarray:
    z = ndimage.gaussian_filter(rng.standard_normal((n, n)), scale, mode="wrap")
    z /= z.std() + 1e-12
    t = np.exp(contrast * z)
    return t / t.mean()


def _place(rng, n: int, count: int, taken: List[Tuple[float, float]], margin: float, sep: float):
    pts = []
    for _ in range(count):
        for _attempt in range(50):
            cx, cy = rng.uniform(margin, n - margin, size=2)
            if all((cx - x) ** 2 + (cy - y) ** 2 >= sep * sep for x, y in taken):
                taken.append((cx, cy))
                pts.append((cx, cy))
                break
    return pts


def generate_scene(config: SceneConfig) -> Scene:
    rng = np.random.default_rng(config.seed)
    n = config.scene_size
    refl = _texture(rng, n, config.background_texture_scale, config.texture_contrast)
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    taken: List[Tuple[float, float]] = []
    truth = []

    n_targets = rng.poisson(config.target_rate)
    n_clutter = rng.poisson(config.clutter_rate)
    for cx, cy in _place(rng, n, n_targets, taken, 16, config.min_separation):
        a = rng.uniform(3.0, 6.0)  # semi-axis along range (x)
        b = rng.uniform(5.0, 9.0)  # semi-axis along track (y)
        theta = rng.uniform(-0.3, 0.3)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        body = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        length = rng.uniform(14.0, 26.0)
        shadow = (dx > 0) & (dx <= a + length) & (np.abs(dy) <= b * 0.9) & ~body
        refl[shadow] *= config.shadow_gain
        refl[body] *= config.highlight_gain * rng.uniform(0.8, 1.2)
        truth.append((float(cx), float(cy), TARGET))
    for cx, cy in _place(rng, n, n_clutter, taken, 16, config.min_separation):
        blob = np.zeros((n, n))
        for _ in range(rng.integers(2, 5)):
            ox, oy = rng.normal(0.0, 3.5, size=2)
            s = rng.uniform(1.5, 3.5)
            blob = np.maximum(blob, np.exp(-((xx - cx - ox) ** 2 + (yy - cy - oy) ** 2) / (2 * s * s)))
        refl *= 1.0 + (config.highlight_gain * rng.uniform(0.8, 1.2) - 1.0) * (blob > 0.35)
        truth.append((float(cx), float(cy), CLUTTER))

    hf = refl * speckle(rng, refl.shape, config.looks)
    lf = ndimage.gaussian_filter(refl, config.lf_blur_sigma, mode="nearest") * speckle(rng, refl.shape, config.looks)
    return Scene(hf=hf, lf=lf, truth=truth)


def chip_label(scene: Scene, det, config: DetectorConfig) -> int:
    """1 when a target lies within snippet_size/4 of the crop centre, else 0."""
    top, left = crop_origin(scene.hf.shape, det.y, det.x, config.snippet_size)
    half = config.snippet_size / 2.0
    cy, cx = top + half, left + half
    r = config.snippet_size / 4.0
    for tx, ty, cls in scene.truth:
        if cls == TARGET and (tx - cx) ** 2 + (ty - cy) ** 2 <= r * r:
            return 1
    return 0


def desk_detector_config() -> DetectorConfig:
    return DetectorConfig(resize=64)


def generate_dataset(
    scene_config: SceneConfig,
    counts: Dict[str, int],
    out_dir,
    seed: int = 0,
    detector_config: Optional[DetectorConfig] = None,
    max_scenes: int = 100_000,
) -> DatasetManifest:
    """Generate scenes, chip them and write snippets plus ``manifest.jsonl`` under ``out_dir``.

    Scene ``i`` uses seed ``seed ^ i``; scene indices run on across the
    pretrain, train and test splits so no scene is shared between splits.
    Labeled splits draw scenes until both classes can be filled, then keep
    ``n // 2`` positives and ``n - n // 2`` negatives by seeded subsampling.
    """
    det_cfg = detector_config or desk_detector_config()
    for k in SPLITS:
        if counts.get(k, 0) < 0:
            raise ValueError(f"negative count for {k}")
    manifest = DatasetManifest(root=os.path.abspath(out_dir))
    if sum(counts.get(k, 0) for k in SPLITS) == 0:
        return manifest
    os.makedirs(os.path.join(out_dir, "snippets"), exist_ok=True)
    rng = np.random.default_rng(seed)

    scene_idx = 0
    for split in SPLITS:
        want = counts.get(split, 0)
        if want == 0:
            continue
        quota = {None: want} if split == "pretrain" else {1: want // 2, 0: want - want // 2}
        pool: Dict[Optional[int], List[np.ndarray]] = {k: [] for k in quota}
        while any(len(pool[k]) < quota[k] for k in quota):
            if scene_idx >= max_scenes:
                raise InsufficientDetections(split, quota, {k: len(v) for k, v in pool.items()})
            scene = generate_scene(replace(scene_config, seed=seed ^ scene_idx))
            scene_idx += 1
            dets, snippets = chip_scene(scene, det_cfg)
            for det, snip in zip(dets, snippets):
                label = None if split == "pretrain" else chip_label(scene, det, det_cfg)
                if split == "pretrain" and len(pool[None]) >= want:
                    break
                pool[label].append(snip.astype(np.float32))
        chosen = []
        for label, snips in pool.items():
            keep = np.arange(len(snips))
            if len(snips) > quota[label]:
                keep = np.sort(rng.choice(len(snips), size=quota[label], replace=False))
            chosen.append((label, [snips[i] for i in keep]))
        serial = 0
        for label, snips in chosen:
            for snip in snips:
                sid = f"{split}_{serial:06d}"
                serial += 1
                rel = os.path.join("snippets", sid + ".snip")
                write_snippet(os.path.join(out_dir, rel), snip)
                manifest.entries.append(ManifestEntry(sid, rel, split, label, snip.shape[0]))
        log.info("split %s: %d snippets, scenes used so far %d", split, serial, scene_idx)
    manifest.write(out_dir)
    return manifest


def save_scene(path, scene: Scene) -> None:
    truth = np.array([(x, y, 1.0 if c == TARGET else 0.0) for x, y, c in scene.truth]).reshape(-1, 3)
    np.savez(path, hf=scene.hf, lf=scene.lf, truth=truth)


def load_scene(path) -> Scene:
    with np.load(path) as z:
        truth = [(float(x), float(y), TARGET if c > 0.5 else CLUTTER) for x, y, c in z["truth"]]
        return Scene(hf=z["hf"], lf=z["lf"], truth=truth)


def scene_config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
