"""Dense float64 tensors with a reverse-mode gradient tape.

Everything the detector and the domain heads need is built from the
operations in this module: convolution, linear maps, elementwise
activations, channel concatenation, pooling, nearest upsampling and a
handful of reductions.  All math is done in 64-bit floats so numerical
tests have one precision story.

Gradients are recorded on an explicit :class:`Graph` tape.  Operations
record themselves only while a graph is active (``with Graph() as g:``)
and at least one input requires gradients; ``no_grad()`` suspends
recording entirely.  ``Graph.backward`` replays the tape in exact
reverse execution order, touching each recorded operation once.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense n-d array of float64 values, optionally tracked for gradients.

    ``grad`` is lazily allocated during backward and always matches
    ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple, backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Graph:
    """Ordered tape of executed operations.

    Used as a context manager; the innermost active graph records
    operations.  ``backward`` replays adjoints in exact reverse
    execution order.  ``clear`` drops all recorded references.
    """

    _stack: list = []
    _enabled: bool = True

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Graph":
        Graph._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Graph._stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    @staticmethod
    def active() -> Optional["Graph"]:
        if Graph._enabled and Graph._stack:
            return Graph._stack[-1]
        return None

    def backward(self, loss: Tensor) -> int:
        """Seed the adjoint of ``loss`` with 1 and replay the tape in reverse.

        Returns the number of operations whose adjoint was applied
        (operations not on a path to ``loss`` carry no output gradient
        and are skipped).  Parameter gradients accumulate into ``grad``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        else:
            loss.grad = loss.grad + np.ones_like(loss.data)
        applied = 0
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            grads = node.backward_fn(out_grad)
            applied += 1
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    g = np.asarray(g, dtype=np.float64)
                    inp.grad = g if g.flags.owndata and g.base is None else g.copy()
                    if inp.grad.shape != inp.data.shape:
                        inp.grad = np.broadcast_to(inp.grad, inp.data.shape).copy()
                else:
                    inp.grad += g
        return applied

    def clear(self) -> None:
        self._nodes.clear()


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording inside the block."""
    prev = Graph._enabled
    Graph._enabled = False
    try:
        yield
    finally:
        Graph._enabled = prev


def _record(out: Tensor, inputs: tuple, backward_fn: Callable) -> Tensor:
    g = Graph.active()
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; broadcasting is supported for bias-add and scalars."""
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a scalar tensor."""
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * b_data, a_data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a_data, b_data.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [n,k] (or [k]) tensor with a [k,m] tensor."""
    if b.ndim != 2:
        raise ShapeError(f"matmul rhs must be 2-d, got {b.shape}")
    vector_lhs = a.ndim == 1
    a2 = a.data[None, :] if vector_lhs else a.data
    if a2.ndim != 2 or a2.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out_data = a2 @ b.data
    out = Tensor(out_data[0] if vector_lhs else out_data)

    def backward(g):
        g2 = g[None, :] if vector_lhs else g
        ga = g2 @ b.data.T
        gb = a2.T @ g2
        return (ga[0] if vector_lhs else ga), gb

    return _record(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight [d_in, d_out]."""
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative x yields inf -> result rounds to exactly 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(s)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _record(out, (x,), backward)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = Tensor(x.data * s)

    def backward(g):
        return (g * (s + x.data * s * (1.0 - s)),)

    return _record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0.0))

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and composites
# ---------------------------------------------------------------------------

def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), backward)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.sum() / n)
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape),)

    return _record(out, (x,), backward)


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance ``sum((a - b)**2)``."""
    d = sub(a, b)
    return tensor_sum(mul(d, d))


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy against constant targets in [0,1].

    Uses the overflow-safe form max(x,0) - x*t + log1p(exp(-|x|)).
    """
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if t.shape != x.shape:
        raise ShapeError(f"bce targets {t.shape} vs logits {x.shape}")
    out = Tensor(np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x))))

    def backward(g):
        return (g * (_sigmoid(x) - t),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    out = Tensor(x.data.reshape(shape))
    old = x.data.shape

    def backward(g):
        return (g.reshape(old),)

    return _record(out, (x,), backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate [C,H,W] or [N,C,H,W] tensors along the channel axis."""
    ndim = tensors[0].ndim
    if ndim not in (3, 4) or any(t.ndim != ndim for t in tensors):
        raise ShapeError("concat_channels needs matching 3-d or 4-d tensors")
    axis = ndim - 3
    spatial = tensors[0].data.shape[-2:]
    lead = tensors[0].data.shape[0] if ndim == 4 else None
    for t in tensors:
        if t.data.shape[-2:] != spatial or (ndim == 4 and t.data.shape[0] != lead):
            raise ShapeError("concat_channels spatial/batch mismatch")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), backward)


def gated_concat(early: Tensor, late: Tensor, gate: Tensor) -> Tensor:
    """Skip-join ``[sigmoid(gate) * early ; late]`` along channels.

    ``gate`` is a learnable scalar; gradient flows to all three inputs.
    """
    if gate.data.size != 1:
        raise ShapeError("gate must be a scalar tensor")
    if early.data.shape[-2:] != late.data.shape[-2:]:
        raise ShapeError(
            f"gated_concat spatial mismatch {early.shape} vs {late.shape}")
    scaled = mul(early, sigmoid(gate))
    return concat_channels([scaled, late])


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [C,H,W] -> [C] or [N,C,H,W] -> [N,C]."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs 3-d or 4-d input, got {x.shape}")
    h, w = x.data.shape[-2:]
    out = Tensor(x.data.mean(axis=(-2, -1)))
    shape = x.data.shape

    def backward(g):
        return (np.broadcast_to((g / (h * w))[..., None, None], shape).copy(),)

    return _record(out, (x,), backward)


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbor upsampling of [C,H,W] or [N,C,H,W] spatial dims."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample needs 3-d or 4-d input, got {x.shape}")
    h, w = x.data.shape[-2:]
    if target_h < h or target_w < w:
        raise ShapeError(f"upsample cannot shrink {h}x{w} to {target_h}x{target_w}")
    rows = (np.arange(target_h) * h) // target_h
    cols = (np.arange(target_w) * w) // target_w
    out = Tensor(x.data[..., rows[:, None], cols[None, :]])
    exact = target_h % h == 0 and target_w % w == 0
    fh, fw = target_h // h, target_w // w
    shape = x.data.shape

    def backward(g):
        if exact:
            lead = g.shape[:-2]
            return (g.reshape(lead + (h, fh, w, fw)).sum(axis=(-3, -1)),)
        gx = np.zeros(shape)
        lead = int(np.prod(shape[:-2]))
        gx2 = gx.reshape(lead, h, w)
        g2 = g.reshape(lead, target_h, target_w)
        idx_l = np.arange(lead)[:, None, None]
        np.add.at(gx2, (idx_l, rows[None, :, None], cols[None, None, :]), g2)
        return (gx,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of [C,H,W] or [N,C,H,W] input with a
    [C_out,C_in,kH,kW] kernel plus per-channel bias.

    Output spatial size is floor((H + 2*padding - kH)/stride) + 1.  The
    reduction runs as one tensordot contraction, so the summation order
    is fixed and forward passes are bit-deterministic.
    """
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-d, got {kernel.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d input must be 3-d or 4-d, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.data.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("kernel larger than padded input")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, C_in, H', W', kH, kW]
    out_data = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))
    out_data = out_data.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = Tensor(out_data if batched else out_data[0])
    h_out, w_out = out_data.shape[2:]

    def backward(g):
        g4 = g if batched else g[None]
        gb = g4.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if x.requires_grad:
            # spread grad_out * kernel back onto each window position
            t = np.tensordot(g4, kernel.data, axes=([1], [0]))  # [N,H',W',C,kH,kW]
            t = t.transpose(0, 3, 4, 5, 1, 2)  # [N,C,kH,kW,H',W']
            gxp = np.zeros_like(xp)
            for ky in range(kh):
                row = slice(ky, ky + stride * (h_out - 1) + 1, stride)
                for kx in range(kw):
                    col = slice(kx, kx + stride * (w_out - 1) + 1, stride)
                    gxp[:, :, row, col] += t[:, :, ky, kx]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    return _record(out, (x, kernel, bias), backward)
