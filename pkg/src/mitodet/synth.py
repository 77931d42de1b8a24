"""Synthetic multi-domain regions for end-to-end experiments.

Each domain restains a textured tissue wash by per-channel
optical-density factors, standing in for scanner and lab variability:
optical density is multiplicative in stain concentration, so a domain
is a per-channel scale of the stain planes, the same family of
transforms the stain augmenter samples.  Detection targets are dark
elongated blobs and distractors are round ones, so shape rather than
color is the detection cue and the domain staining is exactly the
confound the adaptation scheme has to remove.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .data import AnnotatedRegion, DomainLabel
from .stain import DEFAULT_STAIN_MATRIX, hed_to_rgb, rgb_to_hed

DEFAULT_TINTS = (
    (0.00, 0.00, 0.00),
    (0.60, -0.25, 0.20),
    (-0.20, 0.70, -0.10),
)

BACKGROUND_RGB = (0.76, 0.60, 0.79)  # light eosin-pink tissue wash
TEXTURE_AMP = 0.035
TEXTURE_CELLS = 5


@dataclass(frozen=True)
class SynthConfig:
    domain_tints: tuple = DEFAULT_TINTS  # per-domain stain strength offsets
    regions_per_domain: int = 12
    region_size: int = 256
    targets_mean: float = 5.0  # Poisson mean of annotated blobs
    distractors_mean: float = 5.0
    blob_radius: tuple = (4.0, 7.0)
    min_separation: float = 40.0
    tint_jitter: float = 0.01
    pixel_noise: float = 0.008
    seed: int = 0

    def __post_init__(self):
        if len(self.domain_tints) < 2:
            raise ValueError("adaptation experiments need >= 2 domains")
        tints = np.asarray(self.domain_tints, dtype=np.float64)
        if tints.shape[1] != 3:
            raise ValueError("each domain tint is a 3-vector of stain "
                             "strength offsets")
        if tints.min() <= -0.9:
            raise ValueError("stain strength offsets must stay above -0.9 "
                             "so every channel keeps a positive scale")
        for i in range(len(tints)):
            for j in range(i + 1, len(tints)):
                if np.linalg.norm(tints[i] - tints[j]) < 0.05:
                    raise ValueError(
                        f"domain tints {i} and {j} are closer than 0.05")
        if self.blob_radius[0] > self.blob_radius[1] or self.blob_radius[0] <= 0:
            raise ValueError(f"bad blob_radius range {self.blob_radius}")
        if self.region_size < 64:
            raise ValueError("region_size must be at least 64")


def _stamp_blob(img: np.ndarray, x: float, y: float, long_axis: float,
                short_axis: float, angle: float, color: np.ndarray) -> None:
    """Blend an anti-aliased ellipse into the image in place."""
    h, w = img.shape[:2]
    reach = int(np.ceil(long_axis)) + 2
    x0, x1 = max(0, int(x) - reach), min(w, int(x) + reach + 1)
    y0, y1 = max(0, int(y) - reach), min(h, int(y) + reach + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs + 0.5 - x
    dy = ys + 0.5 - y
    c, s = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * s) / long_axis
    v = (-dx * s + dy * c) / short_axis
    mask = np.clip(3.0 * (1.0 - (u * u + v * v)), 0.0, 1.0)
    patch = img[y0:y1, x0:x1]
    patch += mask[..., None] * (color[None, None, :] - patch)


def _place_centers(rng: np.random.Generator, count: int, size: int,
                   margin: float, min_sep: float, taken: list) -> list:
    placed = []
    for _ in range(count):
        for _attempt in range(200):
            x = rng.uniform(margin, size - margin)
            y = rng.uniform(margin, size - margin)
            if all((x - px) ** 2 + (y - py) ** 2 >= min_sep * min_sep
                   for px, py in taken):
                taken.append((x, y))
                placed.append((x, y))
                break
    return placed


def generate_region(domain_id: int, cfg: SynthConfig,
                    rng: np.random.Generator,
                    region_index: int = 0) -> AnnotatedRegion:
    """One tinted region with annotated targets and unannotated distractors."""
    if not 0 <= domain_id < len(cfg.domain_tints):
        raise ValueError(f"domain_id {domain_id} outside configured domains")
    size = cfg.region_size
    field = rng.normal(0.0, 1.0, (TEXTURE_CELLS, TEXTURE_CELLS, 3))
    field = zoom(field, (size / TEXTURE_CELLS, size / TEXTURE_CELLS, 1.0),
                 order=1)
    img = np.clip(np.asarray(BACKGROUND_RGB) + TEXTURE_AMP * field,
                  0.05, 0.95)

    n_targets = int(rng.poisson(cfg.targets_mean))
    n_distractors = int(rng.poisson(cfg.distractors_mean))
    margin = cfg.blob_radius[1] + 3.0
    taken: list = []
    targets = _place_centers(rng, n_targets, size, margin,
                             cfg.min_separation, taken)
    distractors = _place_centers(rng, n_distractors, size, margin,
                                 cfg.min_separation, taken)

    base_color = np.array([0.40, 0.30, 0.55])
    for x, y in targets:
        r = rng.uniform(*cfg.blob_radius)
        color = np.clip(base_color + rng.normal(0.0, 0.03, 3), 0.05, 0.9)
        _stamp_blob(img, x, y, long_axis=2.4 * r, short_axis=0.8 * r,
                    angle=rng.uniform(0, np.pi), color=color)
    for x, y in distractors:
        r = rng.uniform(*cfg.blob_radius)
        color = np.clip(base_color + rng.normal(0.0, 0.03, 3), 0.05, 0.9)
        _stamp_blob(img, x, y, long_axis=1.4 * r, short_axis=1.4 * r,
                    angle=0.0, color=color)

    tint = np.asarray(cfg.domain_tints[domain_id], dtype=np.float64)
    scale = 1.0 + tint + rng.normal(0.0, cfg.tint_jitter, 3)
    hed = rgb_to_hed(img, DEFAULT_STAIN_MATRIX) * np.clip(scale, 0.05, None)
    img = hed_to_rgb(hed, DEFAULT_STAIN_MATRIX)
    img = np.clip(img + rng.normal(0.0, cfg.pixel_noise, img.shape), 0.0, 1.0)

    return AnnotatedRegion(
        image=img, points=targets,
        label=DomainLabel(scanner=domain_id, tissue=0,
                          case=domain_id * cfg.regions_per_domain + region_index),
        labeled=True,
        region_id=f"d{domain_id}_r{region_index:03d}")


def generate_dataset(cfg: SynthConfig) -> list:
    regions = []
    for domain_id in range(len(cfg.domain_tints)):
        for idx in range(cfg.regions_per_domain):
            rng = np.random.default_rng(
                np.random.SeedSequence([cfg.seed, domain_id, idx]))
            regions.append(generate_region(domain_id, cfg, rng, idx))
    return regions
