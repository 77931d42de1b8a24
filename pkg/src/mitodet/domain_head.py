"""Radial-prediction domain classifier: prototypes, head network, losses.

Each domain attribute (scanner, tissue, case) gets a bank of moving
prototypes, one per attribute value.  Prototype i is pulled toward a
fixed anchor, the i-th standard basis vector, and toward the network
predictions of samples from domain i.  The network itself is a small
conv head over the detector's intermediate feature maps with one linear
output per bank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ANCHOR_PULL = 0.1
PREDICTION_PULL = 0.9


class PrototypeBank:
    """Moving prototypes for one domain attribute with n values.

    Anchors are the rows of the n x n identity and never change.
    Prototypes start at ``ANCHOR_PULL`` times their anchor and are
    updated by gradient descent on :func:`domain_loss`.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"bank needs at least one domain value, got {n}")
        self.n = n
        self.anchors = np.eye(n)
        self.prototypes = Tensor(ANCHOR_PULL * np.eye(n), requires_grad=True)

    def __repr__(self):
        return f"PrototypeBank(n={self.n})"


def prototype_fixed_point(bank: PrototypeBank, value: int,
                          z: np.ndarray) -> np.ndarray:
    """Minimizer of the per-sample prototype objective for one domain value.

    For a lone sample with prediction z, the pull terms are minimized at
    ``ANCHOR_PULL * anchor + PREDICTION_PULL * z``.
    """
    return ANCHOR_PULL * bank.anchors[value] + PREDICTION_PULL * np.asarray(z, dtype=np.float64)


def _as_batch(z: Tensor, n: int) -> Tensor:
    if z.ndim == 1:
        z = T.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != n:
        raise ShapeError(f"expected predictions [N, {n}], got {z.shape}")
    return z


def domain_loss(banks: list, preds: list, labels: list) -> Tensor:
    """Prototype-pull loss, averaged per bank over batch and bank size.

    ``preds[i]`` holds the [N, n_i] predictions for bank i; sample j
    uses the prototype selected by ``labels[j].component(i)``.  Each
    bank contributes (1 / (N * n_i)) times the summed pulls
    ``ANCHOR_PULL * |p - a|^2 + PREDICTION_PULL * |p - z|^2``.
    Gradients flow into both the prototypes and the predictions.
    """
    if len(banks) != len(preds):
        raise ShapeError(f"{len(banks)} banks but {len(preds)} prediction sets")
    total = None
    for head, (bank, z) in enumerate(zip(banks, preds)):
        z = _as_batch(z, bank.n)
        batch = z.shape[0]
        if len(labels) != batch:
            raise ShapeError(f"{batch} predictions but {len(labels)} labels")
        select = np.zeros((batch, bank.n))
        for j, lab in enumerate(labels):
            value = lab.component(head)
            if not 0 <= value < bank.n:
                raise ValueError(f"domain value {value} outside bank of {bank.n}")
            select[j, value] = 1.0
        chosen = T.matmul(Tensor(select), bank.prototypes)  # [N, n]
        anchors = Tensor(select @ bank.anchors)
        pull = T.add(T.mul(Tensor(ANCHOR_PULL), T.sqdist(chosen, anchors)),
                     T.mul(Tensor(PREDICTION_PULL), T.sqdist(chosen, z)))
        term = T.mul(Tensor(1.0 / (batch * bank.n)), pull)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ShapeError("domain_loss needs at least one bank")
    return total


def agnostic_loss(banks: list, preds: list) -> Tensor:
    """Pull every prediction toward all prototypes of its bank at once.

    Per bank: (1 / (N * n)) sum over samples and prototypes of
    |p - z|^2, with the prototypes held constant so the gradient only
    moves the predictions.  Expanding the square gives the closed form
    ``n * |Z|^2 - 2 * Z . s + N * q`` with s the prototype sum and q the
    summed squared prototype norms, which avoids materializing the
    N x n x n difference tensor.
    """
    if len(banks) != len(preds):
        raise ShapeError(f"{len(banks)} banks but {len(preds)} prediction sets")
    total = None
    for bank, z in zip(banks, preds):
        z = _as_batch(z, bank.n)
        batch = z.shape[0]
        protos = bank.prototypes.data  # constant here by design
        s = protos.sum(axis=0)  # [n]
        q = float((protos * protos).sum())
        zsq = T.tensor_sum(T.mul(z, z))
        zdots = T.tensor_sum(T.matmul(z, Tensor(s.reshape(bank.n, 1))))
        pull = T.add(T.sub(T.mul(Tensor(float(bank.n)), zsq),
                           T.mul(Tensor(2.0), zdots)),
                     Tensor(batch * q))
        term = T.mul(Tensor(1.0 / (batch * bank.n)), pull)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ShapeError("agnostic_loss needs at least one bank")
    return total


# ---------------------------------------------------------------------------
# head network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainHeadConfig:
    """Shape of the domain classifier head."""

    reduced_channels: int = 64
    head_dims: tuple = (4, 6, 403)

    def __post_init__(self):
        if self.reduced_channels < 1:
            raise ValueError("reduced_channels must be positive")
        if not self.head_dims or any(d < 1 for d in self.head_dims):
            raise ValueError(f"bad head_dims {self.head_dims}")


class DomainHead:
    """Conv head mapping three detector feature maps to domain predictions.

    The maps are nearest-upsampled to the largest spatial size,
    concatenated on channels, reduced by a 1x1 conv and downsampled by
    two stride-2 3x3 convs, then average-pooled into one linear layer
    per prototype bank.
    """

    def __init__(self, in_channels: int, cfg: DomainHeadConfig, seed: int = 0):
        self.cfg = cfg
        self.in_channels = in_channels
        rng = np.random.default_rng(seed)
        c = cfg.reduced_channels
        self.params: dict = {}
        self._conv("reduce", in_channels, c, 1, rng)
        self._conv("down1", c, c, 3, rng)
        self._conv("down2", c, c, 3, rng)
        for i, dim in enumerate(cfg.head_dims):
            self.params[f"out{i}.weight"] = Tensor(
                rng.normal(0.0, np.sqrt(1.0 / c), size=(c, dim)),
                requires_grad=True)
            self.params[f"out{i}.bias"] = Tensor(np.zeros(dim), requires_grad=True)

    def _conv(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self.params[f"{name}.kernel"] = Tensor(
            rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    def forward(self, taps: list) -> list:
        """Run the head; returns one [N, n_i] prediction tensor per bank."""
        if len(taps) != 3:
            raise ShapeError(f"expected 3 feature maps, got {len(taps)}")
        sizes = [(t.shape[-2], t.shape[-1]) for t in taps]
        th = max(h for h, _ in sizes)
        tw = max(w for _, w in sizes)
        chans = sum(t.shape[-3] for t in taps)
        if chans != self.in_channels:
            raise ShapeError(
                f"feature maps carry {chans} channels, head built for {self.in_channels}")
        aligned = [T.upsample_nearest(t, th, tw) for t in taps]
        x = T.concat_channels(aligned)
        p = self.params
        x = T.silu(T.conv2d(x, p["reduce.kernel"], p["reduce.bias"]))
        x = T.silu(T.conv2d(x, p["down1.kernel"], p["down1.bias"],
                            stride=2, padding=1))
        x = T.silu(T.conv2d(x, p["down2.kernel"], p["down2.bias"],
                            stride=2, padding=1))
        pooled = T.global_avg_pool(x)
        return [T.linear(pooled, p[f"out{i}.weight"], p[f"out{i}.bias"])
                for i in range(len(self.cfg.head_dims))]
