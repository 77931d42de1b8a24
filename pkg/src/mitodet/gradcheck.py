"""Finite-difference verification of tape gradients.

``finite_diff_check`` compares the analytic gradient of a scalar-valued
function against central differences, coordinate by coordinate, and
returns the worst relative error.  ``run_suite`` sweeps every
differentiable operation (and the two composed losses) over a number of
random seeds; the CLI prints its table.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor, no_grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central| / max(1e-12, |central|).

    ``f`` must be deterministic and must not mutate ``x``.  Non-finite
    values anywhere in the evaluation are reported as ``inf``.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x.requires_grad = True
    x.zero_grad()
    with Graph() as g:
        y = f(x)
        if y.data.size != 1 or not np.isfinite(y.data).all():
            return float("inf")
        g.backward(y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    grad_flat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(x).data.reshape(())
            flat[i] = orig - step
            lo = f(x).data.reshape(())
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                return float("inf")
            central = (hi - lo) / (2.0 * step)
            err = abs(grad_flat[i] - central) / max(1e-12, abs(central))
            if err > worst:
                worst = float(err)
    return worst


def _op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Tensor]]:
    """One (name, f, x) probe per differentiable operation.

    Every constant is drawn up front so each probe is a fixed
    deterministic function of its argument; the weighting tensors keep
    the gradients dense.
    """
    def rt(*shape):
        return Tensor(rng.standard_normal(shape))

    x_img = rt(2, 5, 6)
    kern = rt(3, 2, 3, 3)
    bias = rt(3)
    a45, w45 = rt(4, 5), rt(4, 5)
    m53, w43, b3 = rt(5, 3), rt(4, 3), rt(3)
    bce_t = rng.uniform(0, 1, (4, 5))
    cc_b, cc_w = rt(2, 3, 4), rt(4, 3, 4)
    gc_late, gc_w = rt(3, 5, 6), rt(5, 5, 6)
    gap_w = rt(3)
    up_w = rt(2, 6, 8)
    cv_wi, cv_wk, cv_wb = rt(3, 5, 6), rt(3, 3, 3), rt(3, 3, 4)
    sq_b = rt(6)
    cases = [
        ("add", lambda t: T.tensor_sum(T.mul(T.add(t, a45), w45)), rt(4, 5)),
        ("mul", lambda t: T.tensor_sum(T.mul(t, w45)), rt(4, 5)),
        ("matmul", lambda t: T.tensor_sum(T.mul(T.matmul(t, m53), w43)), rt(4, 5)),
        ("linear", lambda t: T.tensor_sum(T.mul(T.linear(t, m53, b3), w43)),
         rt(4, 5)),
        ("relu", lambda t: T.tensor_sum(T.mul(T.relu(t), w45)),
         Tensor(rng.standard_normal((4, 5)) + 0.05)),
        ("silu", lambda t: T.tensor_sum(T.mul(T.silu(t), w45)), rt(4, 5)),
        ("sigmoid", lambda t: T.tensor_sum(T.mul(T.sigmoid(t), w45)), rt(4, 5)),
        ("bce_with_logits", lambda t: T.tensor_sum(T.bce_with_logits(t, bce_t)),
         rt(4, 5)),
        ("concat_channels", lambda t: T.tensor_sum(
            T.mul(T.concat_channels([t, cc_b]), cc_w)), rt(2, 3, 4)),
        ("gated_concat_gate", lambda t: T.tensor_sum(
            T.mul(T.gated_concat(x_img, gc_late, t), gc_w)),
         Tensor(rng.standard_normal(()))),
        ("global_avg_pool", lambda t: T.tensor_sum(
            T.mul(T.global_avg_pool(t), gap_w)), rt(3, 4, 5)),
        ("upsample_nearest", lambda t: T.tensor_sum(
            T.mul(T.upsample_nearest(t, 6, 8), up_w)), rt(2, 3, 4)),
        ("conv2d_input", lambda t: T.tensor_sum(
            T.mul(T.conv2d(t, kern, bias, stride=1, padding=1), cv_wi)),
         Tensor(x_img.data.copy())),
        ("conv2d_kernel", lambda t: T.tensor_sum(
            T.mul(T.conv2d(x_img, t, bias, stride=2, padding=1), cv_wk)),
         Tensor(kern.data.copy())),
        ("conv2d_bias", lambda t: T.tensor_sum(
            T.mul(T.conv2d(x_img, kern, t, stride=1, padding=0), cv_wb)),
         Tensor(bias.data.copy())),
        ("sqdist", lambda t: T.sqdist(t, sq_b), rt(6)),
    ]
    return cases


def _composed_cases(rng: np.random.Generator) -> list[tuple[str, Callable, Tensor]]:
    """The two composed losses checked end to end at toy size."""
    from .data import DomainLabel
    from .detector import Detector, DetectorConfig, detection_loss
    from .domain_head import (DomainHead, DomainHeadConfig, PrototypeBank,
                              agnostic_loss, domain_loss)

    cases = []

    # classifier loss w.r.t. the moving prototypes
    bank = PrototypeBank(3)
    start = bank.prototypes.data + 0.05 * rng.standard_normal((3, 3))
    z = rng.standard_normal((2, 3)) * 0.3
    labels = [DomainLabel(0, 0, 0), DomainLabel(2, 0, 1)]

    def f_dac(p: Tensor) -> Tensor:
        probe = PrototypeBank(3)
        probe.prototypes = p
        return domain_loss([probe], [Tensor(z)], labels)

    cases.append(("domain_loss_prototypes", f_dac, Tensor(start.copy())))

    # full detector forward + both losses w.r.t. one trunk conv kernel
    det = Detector(DetectorConfig(input_size=32, base_channels=4),
                   seed=int(rng.integers(2 ** 31)))
    dhead = DomainHead(det.tap_channels,
                       DomainHeadConfig(reduced_channels=8, head_dims=(3,)),
                       seed=int(rng.integers(2 ** 31)))
    banks = [PrototypeBank(3)]
    img = rng.uniform(0, 1, (3, 32, 32))
    pts = [(11.0, 21.0)]
    kname = "trunk.p2.kernel"
    orig = det.params[kname]

    def f_det(k: Tensor) -> Tensor:
        det.params[kname] = k
        try:
            pred, taps = det.forward(Tensor(img))
            zs = dhead.forward(taps)
            return T.add(detection_loss(pred, pts), agnostic_loss(banks, zs))
        finally:
            det.params[kname] = orig

    cases.append(("detector_agnostic_kernel", f_det, Tensor(orig.data.copy())))
    return cases


def run_suite(seed: int = 0, seeds: int = 20, step: float = 1e-5,
              include_composed: bool = True) -> list[tuple[str, float]]:
    """Worst finite-difference error per operation over ``seeds`` draws."""
    worst: dict[str, float] = {}
    order: list[str] = []
    for k in range(seeds):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        cases = _op_cases(rng)
        if include_composed:
            cases += _composed_cases(rng)
        for name, f, x in cases:
            err = finite_diff_check(f, x, step=step)
            if name not in worst:
                order.append(name)
                worst[name] = err
            else:
                worst[name] = max(worst[name], err)
    return [(name, worst[name]) for name in order]
