"""Stain color deconvolution and stain-space augmentation.

RGB pixels are converted to optical density (stains mix additively
there), projected onto the hematoxylin/eosin/DAB stain basis, scaled
per channel by factors drawn from fitted beta distributions, and
converted back.  White stays white: it has zero optical density, the
fixed point of any channel scaling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OD_FLOOR = 1e-6  # light transmission floor before the log


class StainMatrix:
    """Stain mixing matrix; rows are the unit OD vectors of H, E and DAB.

    Rows are normalized at construction.  The inverse is cached since
    every deconvolution uses it.
    """

    def __init__(self, rows):
        m = np.asarray(rows, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms < 1e-12):
            raise ValueError("stain matrix has a zero row")
        self.rows = m / norms[:, None]
        if np.linalg.cond(self.rows) >= 1e6:
            raise ValueError("stain matrix is ill-conditioned")
        self.inverse = np.linalg.inv(self.rows)

    def __repr__(self):
        return f"StainMatrix({self.rows.tolist()})"


# standard H&E-DAB deconvolution vectors (row-normalized in the constructor)
DEFAULT_STAIN_MATRIX = StainMatrix([
    (0.650, 0.704, 0.286),
    (0.072, 0.990, 0.105),
    (0.268, 0.570, 0.776),
])


def rgb_to_hed(img: np.ndarray, m: StainMatrix = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    """Per pixel: OD = -log10(max(rgb, floor)), HED = OD @ inverse(m)."""
    img = np.asarray(img, dtype=np.float64)
    od = -np.log10(np.maximum(img, OD_FLOOR))
    return od @ m.inverse


def hed_to_rgb(hed: np.ndarray, m: StainMatrix = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    """Inverse of :func:`rgb_to_hed`: rgb = clamp(10^-(hed @ m), 0, 1)."""
    hed = np.asarray(hed, dtype=np.float64)
    with np.errstate(over="ignore"):
        rgb = np.power(10.0, -(hed @ m.rows))
    return np.clip(rgb, 0.0, 1.0)


@dataclass(frozen=True)
class StainAlphas:
    """Per-channel multipliers applied in stain space."""

    h: float
    e: float
    d: float

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.e, self.d])


def augment_stain(img: np.ndarray, alphas: StainAlphas,
                  m: StainMatrix = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    return hed_to_rgb(rgb_to_hed(img, m) * alphas.as_array(), m)


# ---------------------------------------------------------------------------
# per-domain stain profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BetaSpec:
    """Scaled and translated beta distribution over [shift, shift + scale]."""

    a: float
    b: float
    scale: float
    shift: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"beta shapes must be positive, got {self.a}, {self.b}")
        if self.scale < 0:
            raise ValueError(f"scale must be >= 0, got {self.scale}")

    def sample(self, rng: np.random.Generator) -> float:
        if self.scale == 0.0:
            return self.shift
        return self.shift + self.scale * rng.beta(self.a, self.b)

    def mean(self) -> float:
        return self.shift + self.scale * self.a / (self.a + self.b)


IDENTITY_SPEC = BetaSpec(a=2.0, b=2.0, scale=0.0, shift=1.0)


@dataclass(frozen=True)
class StainProfile:
    """One domain's sampling specs for the three channel factors."""

    domain_key: tuple
    spec_h: BetaSpec
    spec_e: BetaSpec
    spec_d: BetaSpec

    def specs(self) -> tuple:
        return (self.spec_h, self.spec_e, self.spec_d)


IDENTITY_PROFILE = StainProfile((-1, -1), IDENTITY_SPEC, IDENTITY_SPEC,
                                IDENTITY_SPEC)


def sample_alphas(profile: StainProfile, rng: np.random.Generator) -> StainAlphas:
    # clamp keeps a factor positive even for profiles fitted near zero
    vals = [max(spec.sample(rng), 1e-6) for spec in profile.specs()]
    return StainAlphas(*vals)


def image_hed_mean(img: np.ndarray,
                   m: StainMatrix = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    return rgb_to_hed(img, m).reshape(-1, 3).mean(axis=0)


def fit_beta_moments(samples: np.ndarray) -> tuple:
    """Method-of-moments beta shapes for samples in [0, 1]."""
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean()
    var = samples.var()
    if var < 1e-12 or not 0.0 < mean < 1.0:
        return 2.0, 2.0
    common = mean * (1.0 - mean) / var - 1.0
    if common <= 0.0:
        return 2.0, 2.0
    a = mean * common
    b = (1.0 - mean) * common
    return max(a, 0.05), max(b, 0.05)


def fit_profile(domain_images: list, all_hed_means: list,
                m: StainMatrix = DEFAULT_STAIN_MATRIX,
                domain_key: tuple = (0, 0)) -> StainProfile:
    """Build a domain's sampling profile from the corpus stain statistics.

    Per channel the corpus means span an interval [lo, hi]; a base beta
    shape is fitted to the means normalized onto [0, 1], and the
    domain's spec is shifted/scaled so that multiplying the domain's
    mean by a sampled factor sweeps exactly [lo, hi].  A channel whose
    domain mean is within 1e-6 of zero cannot be steered by a
    multiplier and falls back to the identity spec.
    """
    if len(domain_images) < 2:
        raise ValueError(f"domain {domain_key} needs >= 2 images, "
                         f"got {len(domain_images)}")
    means = np.asarray(all_hed_means, dtype=np.float64).reshape(-1, 3)
    if means.shape[0] < 2:
        raise ValueError("need >= 2 corpus mean vectors")
    domain_mean = np.mean([image_hed_mean(img, m) for img in domain_images],
                          axis=0)
    specs = []
    for c in range(3):
        lo = float(means[:, c].min())
        hi = float(means[:, c].max())
        dm = float(domain_mean[c])
        if abs(dm) < 1e-6 or hi - lo < 1e-12:
            specs.append(IDENTITY_SPEC if abs(dm) < 1e-6 else
                         BetaSpec(2.0, 2.0, 0.0, lo / dm))
            continue
        a, b = fit_beta_moments((means[:, c] - lo) / (hi - lo))
        shift = lo / dm
        scale = hi / dm - shift
        if scale < 0:  # negative domain mean flips the interval
            shift, scale = shift + scale, -scale
        specs.append(BetaSpec(a, b, scale, shift))
    return StainProfile(tuple(domain_key), *specs)


def fit_all_profiles(images_by_domain: dict,
                     m: StainMatrix = DEFAULT_STAIN_MATRIX) -> dict:
    """Fit one profile per domain key over a shared corpus interval."""
    all_means = [image_hed_mean(img, m)
                 for imgs in images_by_domain.values() for img in imgs]
    return {key: fit_profile(imgs, all_means, m, domain_key=key)
            for key, imgs in images_by_domain.items()}
