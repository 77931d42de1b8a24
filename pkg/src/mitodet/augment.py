"""Geometric and blur/sharpen augmentation for images with point labels.

Point coordinates are continuous with pixel (row i, col j) covering
[j, j+1) x [i, i+1), so a flip of point x to W - x lands exactly on the
mirrored pixel's span and matches ``np.flip`` on the image.  Flips are
applied with ``np.flip`` (exact); rotation and translation resample the
image bilinearly with white fill.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GeoParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0  # radians, about the image center
    shift: tuple = (0.0, 0.0)  # (dx, dy) pixels


def sample_geo_params(rng: np.random.Generator,
                      max_shift: float = 200.0) -> GeoParams:
    return GeoParams(
        hflip=bool(rng.random() < 0.5),
        vflip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(0.0, 2.0 * np.pi)),
        shift=(float(rng.uniform(-max_shift, max_shift)),
               float(rng.uniform(-max_shift, max_shift))))


def _rot_shift_matrix(params: GeoParams, w: int, h: int) -> np.ndarray:
    """Homogeneous forward map of rotation about center then translation."""
    cx, cy = w / 2.0, h / 2.0
    c, s = np.cos(params.angle), np.sin(params.angle)
    dx, dy = params.shift
    return np.array([
        [c, -s, cx - c * cx + s * cy + dx],
        [s, c, cy - s * cx - c * cy + dy],
        [0.0, 0.0, 1.0],
    ])


def apply_geometric(img: np.ndarray, points: list,
                    params: GeoParams) -> tuple:
    """Transform image and points by the same map; white fill, points
    leaving the canvas are dropped.  Returns (image, points (N, 2))."""
    h, w = img.shape[:2]
    out = img
    if params.hflip:
        out = np.flip(out, axis=1)
    if params.vflip:
        out = np.flip(out, axis=0)

    # always copy: the flip writes below must not touch the caller's array
    pts = np.array(points, dtype=np.float64).reshape(-1, 2)
    if params.hflip:
        pts[:, 0] = w - pts[:, 0]
    if params.vflip:
        pts[:, 1] = h - pts[:, 1]

    if params.angle != 0.0 or params.shift != (0.0, 0.0):
        fwd = _rot_shift_matrix(params, w, h)
        inv = np.linalg.inv(fwd)
        # scipy maps output index o to input index A @ o + b; indices are
        # pixel centers, i.e. continuous coords minus 0.5, in (row, col)
        a_xy = inv[:2, :2]
        b_xy = inv[:2, 2]
        a_rc = a_xy[::-1, ::-1].copy()
        b_rc = (a_xy @ [0.5, 0.5] + b_xy - 0.5)[::-1]
        # grid-constant interpolates against the fill at the canvas edge;
        # plain constant would blank a whole border row when float noise
        # pushes a half-turn sample a few ulp past the last pixel
        out = np.stack([
            ndimage.affine_transform(np.ascontiguousarray(out[..., ch]),
                                     a_rc, offset=b_rc, order=1,
                                     mode="grid-constant", cval=1.0)
            for ch in range(img.shape[2])], axis=-1)
        if len(pts):
            pts = pts @ fwd[:2, :2].T + fwd[:2, 2]
    else:
        out = np.ascontiguousarray(out)

    inside = (pts[:, 0] >= 0.0) & (pts[:, 0] < w) & \
             (pts[:, 1] >= 0.0) & (pts[:, 1] < h)
    return out, pts[inside]


def geometric_augment(img: np.ndarray, points: list, rng: np.random.Generator,
                      max_shift: float = 200.0) -> tuple:
    return apply_geometric(img, points, sample_geo_params(rng, max_shift))


# ---------------------------------------------------------------------------
# blur / sharpen
# ---------------------------------------------------------------------------

def blur_or_sharpen(img: np.ndarray, rng: np.random.Generator,
                    blur_sigma: tuple = (0.3, 1.0),
                    sharpen_amount: tuple = (0.2, 0.8)) -> np.ndarray:
    """With probability 1/3 each: weak Gaussian blur, weak unsharp mask,
    or identity.  Output stays in [0, 1]."""
    branch = rng.random()
    if branch < 1.0 / 3.0:
        sigma = rng.uniform(*blur_sigma)
        out = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0.0),
                                      mode="nearest")
    elif branch < 2.0 / 3.0:
        amount = rng.uniform(*sharpen_amount)
        smooth = ndimage.gaussian_filter(img, sigma=(1.0, 1.0, 0.0),
                                         mode="nearest")
        out = img + amount * (img - smooth)
    else:
        return img
    return np.clip(out, 0.0, 1.0)
