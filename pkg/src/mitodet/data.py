"""Dataset types, on-disk layout, stratified splitting and patch extraction.

A dataset on disk is one directory per region holding ``image.png``
(8-bit RGB) and ``region.json`` with scanner/tissue/case ids, the
labeled flag and the point annotations.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class DomainLabel:
    """Scanner / tissue / case indices of a region."""

    scanner: int
    tissue: int
    case: int

    def component(self, head: int) -> int:
        return (self.scanner, self.tissue, self.case)[head]


@dataclass
class AnnotatedRegion:
    """One tissue region: image, point annotations and domain identity.

    Unlabeled regions carry an empty point list but a valid label.
    Point coordinates are continuous, pixel (i, j) spanning
    [j, j+1) x [i, i+1).
    """

    image: np.ndarray  # H x W x 3 float64 in [0, 1]
    points: np.ndarray = field(default_factory=list)  # (N, 2) x, y
    label: DomainLabel = DomainLabel(0, 0, 0)
    labeled: bool = True
    region_id: str = ""

    def __post_init__(self):
        # accept any (x, y) sequence; always copy so later edits to the
        # source cannot alias the stored annotations
        self.points = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        h, w = self.image.shape[:2]
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(
                    f"annotation ({x}, {y}) outside {w}x{h} region {self.region_id}")


@dataclass
class Patch:
    """A training patch cut from a region, annotations remapped."""

    image: np.ndarray
    points: list
    label: DomainLabel
    labeled: bool
    region_id: str
    origin: tuple = (0, 0)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def save_region(region: AnnotatedRegion, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img8 = np.clip(np.round(region.image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img8, mode="RGB").save(directory / "image.png")
    meta = {
        "scanner": region.label.scanner,
        "tissue": region.label.tissue,
        "case_id": region.label.case,
        "labeled": region.labeled,
        "points": [{"x": float(x), "y": float(y)} for x, y in region.points],
    }
    (directory / "region.json").write_text(json.dumps(meta, indent=2))


def load_region(directory: Path) -> AnnotatedRegion:
    directory = Path(directory)
    img = np.asarray(Image.open(directory / "image.png").convert("RGB"),
                     dtype=np.float64) / 255.0
    meta = json.loads((directory / "region.json").read_text())
    label = DomainLabel(int(meta["scanner"]), int(meta["tissue"]),
                        int(meta["case_id"]))
    points = [(float(p["x"]), float(p["y"])) for p in meta["points"]]
    return AnnotatedRegion(image=img, points=points, label=label,
                           labeled=bool(meta["labeled"]),
                           region_id=directory.name)


def load_dataset(root: Path) -> list[AnnotatedRegion]:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if (d / "region.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no regions found under {root}")
    return [load_region(d) for d in dirs]


def save_dataset(regions: list[AnnotatedRegion], root: Path) -> None:
    root = Path(root)
    for region in regions:
        save_region(region, root / region.region_id)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def stratified_split(regions: list[AnnotatedRegion],
                     ratios: tuple = (0.8, 0.1, 0.1),
                     seed: int = 0) -> dict:
    """Assign regions to train/val/test, balanced per (scanner, tissue) group.

    Within each group the regions are shuffled by ``seed`` and cut at
    round(r1*k) and round((r1+r2)*k); rounding is half away from zero.
    Groups smaller than 3 go entirely to train with a warning.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    groups: dict = {}
    for idx, region in enumerate(regions):
        key = (region.label.scanner, region.label.tissue)
        groups.setdefault(key, []).append(idx)

    assignment: dict = {}
    rng = np.random.default_rng(seed)
    for key in sorted(groups):
        idxs = groups[key]
        order = rng.permutation(len(idxs))
        shuffled = [idxs[i] for i in order]
        k = len(shuffled)
        if k < 3:
            warnings.warn(f"group {key} has {k} regions; all assigned to train")
            for i in shuffled:
                assignment[regions[i].region_id] = "train"
            continue
        cut1 = int(np.floor(ratios[0] * k + 0.5))
        cut2 = int(np.floor((ratios[0] + ratios[1]) * k + 0.5))
        for pos, i in enumerate(shuffled):
            split = "train" if pos < cut1 else ("val" if pos < cut2 else "test")
            assignment[regions[i].region_id] = split
    return assignment


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------

def extract_patches(region: AnnotatedRegion, patch_size: int = 1280,
                    count: int = 30, keep: int = 10) -> list[Patch]:
    """Cut a 6x5 grid of overlapping patches and keep the most annotated.

    Patch origins are evenly spaced (per-origin rounding), patches are
    ranked by annotation count with ties broken by grid index, and the
    top ``keep`` are returned.  A region smaller than the patch yields a
    single white-padded centered patch.
    """
    h, w = region.image.shape[:2]
    if h < patch_size or w < patch_size:
        warnings.warn(f"region {region.region_id} ({w}x{h}) smaller than "
                      f"patch {patch_size}; center-padding")
        return [_padded_patch(region, patch_size)]

    nx, ny = 6, 5
    if count != nx * ny:
        # keep the 6x5 aspect of the default layout for other counts
        nx = max(1, int(round(np.sqrt(count * 6 / 5))))
        ny = max(1, int(np.ceil(count / nx)))
    xs = [int(np.floor(i * (w - patch_size) / max(1, nx - 1) + 0.5)) for i in range(nx)]
    ys = [int(np.floor(j * (h - patch_size) / max(1, ny - 1) + 0.5)) for j in range(ny)]

    seen = set()
    patches = []
    duplicates = False
    for oy in ys:
        for ox in xs:
            if (ox, oy) in seen:
                duplicates = True
                continue
            seen.add((ox, oy))
            pts = [(x - ox, y - oy) for x, y in region.points
                   if ox <= x < ox + patch_size and oy <= y < oy + patch_size]
            patches.append(Patch(
                image=region.image[oy:oy + patch_size, ox:ox + patch_size],
                points=pts, label=region.label, labeled=region.labeled,
                region_id=region.region_id, origin=(ox, oy)))
    if duplicates:
        warnings.warn(f"region {region.region_id}: duplicate patch origins "
                      "removed (degenerate stride)")
    ranked = sorted(range(len(patches)),
                    key=lambda i: (-len(patches[i].points), i))
    return [patches[i] for i in ranked[:keep]]


def _padded_patch(region: AnnotatedRegion, patch_size: int) -> Patch:
    h, w = region.image.shape[:2]
    canvas = np.ones((patch_size, patch_size, 3))
    oy = (patch_size - h) // 2
    ox = (patch_size - w) // 2
    canvas[oy:oy + h, ox:ox + w] = region.image
    pts = [(x + ox, y + oy) for x, y in region.points]
    return Patch(image=canvas, points=pts, label=region.label,
                 labeled=region.labeled, region_id=region.region_id,
                 origin=(-ox, -oy))
