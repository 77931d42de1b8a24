"""Small multi-scale detector with gated skip joins and domain-head taps.

The trunk is a stack of stride-2 convolutions.  A top-down pass
upsamples deeper maps into shallower ones and a bottom-up pass walks
back down; every skip join is a gated concatenation with its own
learnable scalar.  Three refined maps at strides 8, 16 and 32 feed both
the detection heads and the domain classifier.  Boxes have a single
fixed size, so each head predicts only an objectness logit and a
within-cell center offset per grid cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

STRIDES = (8, 16, 32)
OFFSET_WEIGHT = 5.0


@dataclass(frozen=True)
class DetectorConfig:
    input_size: int = 256
    base_channels: int = 16
    box_size: float = 50.0

    def __post_init__(self):
        if self.input_size % 32 != 0 or self.input_size < 32:
            raise ValueError(f"input_size must be a positive multiple of 32, "
                             f"got {self.input_size}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        if self.box_size <= 0:
            raise ValueError("box_size must be positive")


@dataclass
class ScaleMap:
    """One detection scale: objectness logits and within-cell offsets.

    ``objectness`` is [1,H,W] (or [N,1,H,W]); ``offsets`` is [2,H,W]
    with channel 0 the x offset and channel 1 the y offset, both
    sigmoid-squashed into the cell at decode time.
    """

    stride: int
    objectness: Tensor
    offsets: Tensor


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    size: float
    score: float


# gate names in architecture order; gate count is derived from this
GATE_NAMES = ("gate.td4", "gate.td3", "gate.bu4", "gate.bu5")


class Detector:
    """Weights plus forward pass; parameters live in a flat name->Tensor map."""

    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        self.params: dict = {}
        self._conv("trunk.p1", 3, c, 3, rng)
        self._conv("trunk.p2", c, 2 * c, 3, rng)
        self._conv("trunk.p3", 2 * c, 4 * c, 3, rng)
        self._conv("trunk.p4", 4 * c, 4 * c, 3, rng)
        self._conv("trunk.p5", 4 * c, 4 * c, 3, rng)
        self._conv("neck.lat4", 8 * c, 4 * c, 1, rng)
        self._conv("neck.lat3", 8 * c, 4 * c, 1, rng)
        self._conv("neck.down4", 4 * c, 4 * c, 3, rng)
        self._conv("neck.mix4", 8 * c, 4 * c, 1, rng)
        self._conv("neck.down5", 4 * c, 4 * c, 3, rng)
        self._conv("neck.mix5", 8 * c, 4 * c, 1, rng)
        for name in GATE_NAMES:
            self.params[name] = Tensor(0.0, requires_grad=True)
        for stride in STRIDES:
            self._conv(f"head{stride}.hidden", 4 * c, 2 * c, 3, rng)
            self._conv(f"head{stride}.obj", 2 * c, 1, 1, rng)
            self._conv(f"head{stride}.off", 2 * c, 2, 1, rng)

    def _conv(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.kernel"] = Tensor(
            rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    @property
    def gate_count(self) -> int:
        return len(GATE_NAMES)

    @property
    def tap_channels(self) -> int:
        return 3 * 4 * self.cfg.base_channels

    def gate_sigmoids(self) -> dict:
        with T.no_grad():
            return {n: float(1.0 / (1.0 + np.exp(-self.params[n].data)))
                    for n in GATE_NAMES}

    def _block(self, name: str, x: Tensor, stride: int = 1,
               padding: int = 0) -> Tensor:
        p = self.params
        return T.silu(T.conv2d(x, p[f"{name}.kernel"], p[f"{name}.bias"],
                               stride=stride, padding=padding))

    def forward(self, img: Tensor) -> tuple:
        """Run the network; returns (list of ScaleMap, list of 3 tap Tensors).

        Accepts [3,S,S] or [N,3,S,S] with S equal to the configured
        input size.  Taps are the refined maps at strides 8/16/32, the
        exact inputs of the detection heads.
        """
        s = self.cfg.input_size
        if img.ndim not in (3, 4) or img.shape[-3:] != (3, s, s):
            raise ShapeError(f"expected input [..,3,{s},{s}], got {img.shape}")
        p = self.params
        p1 = self._block("trunk.p1", img, stride=2, padding=1)
        p2 = self._block("trunk.p2", p1, stride=2, padding=1)
        p3 = self._block("trunk.p3", p2, stride=2, padding=1)
        p4 = self._block("trunk.p4", p3, stride=2, padding=1)
        p5 = self._block("trunk.p5", p4, stride=2, padding=1)

        # top-down: deeper context joins the shallower map
        u5 = T.upsample_nearest(p5, p4.shape[-2], p4.shape[-1])
        f4 = self._block("neck.lat4", T.gated_concat(p4, u5, p["gate.td4"]))
        u4 = T.upsample_nearest(f4, p3.shape[-2], p3.shape[-1])
        f3 = self._block("neck.lat3", T.gated_concat(p3, u4, p["gate.td3"]))

        # bottom-up: walk back to the coarse scales
        d4 = self._block("neck.down4", f3, stride=2, padding=1)
        m4 = self._block("neck.mix4", T.gated_concat(f4, d4, p["gate.bu4"]))
        d5 = self._block("neck.down5", m4, stride=2, padding=1)
        m5 = self._block("neck.mix5", T.gated_concat(p5, d5, p["gate.bu5"]))

        taps = [f3, m4, m5]
        maps = []
        for stride, tap in zip(STRIDES, taps):
            h = self._block(f"head{stride}.hidden", tap, padding=1)
            obj = T.conv2d(h, p[f"head{stride}.obj.kernel"],
                           p[f"head{stride}.obj.bias"])
            off = T.conv2d(h, p[f"head{stride}.off.kernel"],
                           p[f"head{stride}.off.bias"])
            maps.append(ScaleMap(stride, obj, off))
        return maps, taps


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _positive_cells(points: list, stride: int, cells: int) -> dict:
    """Map grid cell (cy, cx) -> within-cell target offset (tx, ty)."""
    cellmap: dict = {}
    for x, y in points:
        cx = min(int(x // stride), cells - 1)
        cy = min(int(y // stride), cells - 1)
        cellmap[(cy, cx)] = (x / stride - cx, y / stride - cy)
    return cellmap


def detection_loss(pred: list, annotations, labeled=None) -> Tensor:
    """Objectness BCE plus squared error on offsets at annotated cells.

    Per sample and scale the BCE runs over all cells with the positive
    cells upweighted by (#cells / #positives), and offsets at positive
    cells add OFFSET_WEIGHT times the mean squared error between the
    sigmoid-squashed prediction and the within-cell target; both terms
    are means over their cells, summed across the three scales.

    ``annotations`` is a point list for a single-sample prediction or a
    list of point lists for a batched one; ``labeled`` optionally masks
    out samples that carry no annotations by design.  The batch loss is
    the sum of per-sample losses divided by the full batch size, so an
    accumulated sum of mini-batch losses scaled by 1/steps reproduces
    the whole-batch loss.
    """
    batched = pred[0].objectness.ndim == 4
    if not batched:
        annotations = [annotations]
        labeled = [True] if labeled is None else [labeled]
    n = pred[0].objectness.shape[0] if batched else 1
    if labeled is None:
        labeled = [True] * n
    if len(annotations) != n or len(labeled) != n:
        raise ShapeError(f"batch of {n} with {len(annotations)} annotation lists")

    total = None
    for sm in pred:
        obj = sm.objectness if batched else T.reshape(
            sm.objectness, (1,) + sm.objectness.shape)
        off = sm.offsets if batched else T.reshape(
            sm.offsets, (1,) + sm.offsets.shape)
        _, _, gh, gw = obj.shape
        cells = gh * gw
        targets = np.zeros((n, 1, gh, gw))
        weights = np.zeros((n, 1, gh, gw))
        off_t = np.zeros((n, 2, gh, gw))
        off_m = np.zeros((n, 2, gh, gw))  # holds per-sample mean factors
        any_pos = False
        for i in range(n):
            if not labeled[i]:
                continue
            weights[i] = 1.0
            cellmap = _positive_cells(annotations[i], sm.stride, gh)
            if cellmap:
                any_pos = True
                for (cy, cx), (tx, ty) in cellmap.items():
                    targets[i, 0, cy, cx] = 1.0
                    weights[i, 0, cy, cx] = cells / len(cellmap)
                    off_t[i, :, cy, cx] = (tx, ty)
                    off_m[i, :, cy, cx] = 1.0 / (2 * len(cellmap))
        bce = T.bce_with_logits(obj, targets)
        scale_loss = T.mul(Tensor(1.0 / (cells * n)),
                           T.tensor_sum(T.mul(bce, Tensor(weights))))
        if any_pos:
            d = T.sub(T.sigmoid(off), Tensor(off_t))
            se = T.tensor_sum(T.mul(Tensor(off_m), T.mul(d, d)))
            scale_loss = T.add(scale_loss, T.mul(Tensor(OFFSET_WEIGHT / n), se))
        total = scale_loss if total is None else T.add(total, scale_loss)
    return total


# ---------------------------------------------------------------------------
# decode
# ---------------------------------------------------------------------------

def suppress(candidates: list, radius: float) -> list:
    """Greedy suppression: keep score-descending, drop centers within radius."""
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].score, i))
    kept: list = []
    for i in order:
        c = candidates[i]
        if all((c.x - k.x) ** 2 + (c.y - k.y) ** 2 >= radius * radius
               for k in kept):
            kept.append(c)
    return kept


def decode(pred: list, threshold: float, box_size: float = 50.0) -> list:
    """Grid predictions -> detections above threshold, close centers suppressed.

    A cell becomes a candidate when sigmoid(objectness) >= threshold;
    its center is (cell index + sigmoid(offset)) * stride.  Candidates
    from all scales are then thinned greedily by descending score with
    minimum center distance box_size / 2.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0,1], got {threshold}")
    candidates = []
    for sm in pred:
        obj = sm.objectness.data
        off = sm.offsets.data
        if obj.ndim != 3:
            raise ShapeError("decode expects single-sample predictions")
        scores = 1.0 / (1.0 + np.exp(-obj[0]))
        frac = 1.0 / (1.0 + np.exp(-off))
        ys, xs = np.nonzero(scores >= threshold)
        for cy, cx in zip(ys, xs):
            candidates.append(Detection(
                x=(cx + frac[0, cy, cx]) * sm.stride,
                y=(cy + frac[1, cy, cx]) * sm.stride,
                size=box_size,
                score=float(scores[cy, cx])))
    return suppress(candidates, box_size / 2.0)
