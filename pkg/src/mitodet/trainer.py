"""Alternating two-step training of detector and domain classifier.

Every iteration runs two accumulated updates on the same sampled
mini-batches: step 1 trains the domain head and the prototypes on
unaugmented inputs with the trunk frozen; step 2 trains the detector
under the detection loss on augmented inputs plus the domain-agnostic
pull on the clean inputs, with the domain head and prototypes frozen.
The two parameter sets get independent AdamW states and share one
learning-rate schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import blur_or_sharpen, geometric_augment
from .data import DomainLabel
from .detector import GATE_NAMES, Detector, detection_loss
from .domain_head import DomainHead, PrototypeBank, agnostic_loss, domain_loss
from .optim import AdamW, one_cycle_lr
from .persist import MetricsLog, digest, save_tensors, write_prototype_trace
from .stain import IDENTITY_PROFILE, augment_stain, sample_alphas
from .tensor import Graph, Tensor, no_grad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 800
    iterations: int = 0  # explicit override; 0 derives from epochs
    accumulated_batch: int = 64
    mini_batch: int = 8
    accum_steps: int = 8
    peak_lr: float = 0.002
    warmup_fraction: float = 0.05
    final_lr_factor: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    max_shift: float = 200.0
    augment: bool = True
    checkpoint_every: int = 0  # 0: only at the end
    seed: int = 0

    def __post_init__(self):
        if self.accumulated_batch != self.mini_batch * self.accum_steps:
            raise ValueError(
                f"accumulated_batch {self.accumulated_batch} != "
                f"{self.mini_batch} x {self.accum_steps}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.iterations < 0 or self.epochs < 1:
            raise ValueError("iterations/epochs must be positive")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3, [0,1]
    points: list
    label: DomainLabel
    labeled: bool


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient; a diagnostic snapshot was written."""


def _chw_batch(images: list) -> Tensor:
    return Tensor(np.stack([np.ascontiguousarray(img.transpose(2, 0, 1))
                            for img in images]))


def step1_dac_update(detector: Detector, dhead: DomainHead, banks: list,
                     mini_batches: list, opt: AdamW, lr: float) -> dict:
    """Accumulate the prototype-pull loss and update only the domain side.

    The trunk runs under no_grad, so its weights cannot move and no
    trunk operations are even recorded.
    """
    opt.zero_grad()
    steps = len(mini_batches)
    total = 0.0
    for mb in mini_batches:
        with no_grad():
            _, taps = detector.forward(_chw_batch([s.image for s in mb]))
        with Graph() as g:
            zs = dhead.forward(taps)
            loss = domain_loss(banks, zs, [s.label for s in mb])
            g.backward(T.mul(Tensor(1.0 / steps), loss))
        total += loss.item()
    opt.step(lr)
    return {"dac_loss": total / steps}


def step2_detector_update(detector: Detector, dhead: DomainHead, banks: list,
                          mini_batches: list, opt: AdamW, lr: float,
                          enable_dac: bool = True,
                          clean_batches: list = None) -> dict:
    """Accumulate detection loss (+ agnostic pull) and update the detector.

    Labeled samples drive the detection term on the (augmented)
    mini-batches.  The agnostic pull uses predictions for the clean
    counterparts in ``clean_batches``: the domain identity lives in the
    unaugmented colors, so that is where the pull has to aim.  When a
    clean batch is the same object as its mini-batch the forward pass
    is shared.  Domain-head weights and prototypes receive no update
    here (their gradients are discarded at the next step 1).
    """
    opt.zero_grad()
    steps = len(mini_batches)
    det_total = 0.0
    agn_total = 0.0
    for mb, clean in zip(mini_batches, clean_batches or mini_batches):
        with Graph() as g:
            pred, taps = detector.forward(_chw_batch([s.image for s in mb]))
            loss = detection_loss(pred, [s.points for s in mb],
                                  [s.labeled for s in mb])
            det_total += loss.item()
            if enable_dac:
                if clean is not mb:
                    _, taps = detector.forward(
                        _chw_batch([s.image for s in clean]))
                agn = agnostic_loss(banks, dhead.forward(taps))
                agn_total += agn.item()
                loss = T.add(loss, agn)
            g.backward(T.mul(Tensor(1.0 / steps), loss))
    opt.step(lr)
    return {"det_loss": det_total / steps,
            "agnostic_loss": agn_total / steps if enable_dac else None}


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

def model_state(detector: Detector, dhead: DomainHead, banks: list) -> dict:
    named = {f"det.{k}": p.data for k, p in detector.params.items()}
    named.update({f"dac.{k}": p.data for k, p in dhead.params.items()})
    for i, bank in enumerate(banks):
        named[f"bank{i}.prototypes"] = bank.prototypes.data
    return named


def load_model_state(detector: Detector, dhead: DomainHead, banks: list,
                     named: dict) -> None:
    expected = model_state(detector, dhead, banks)
    missing = sorted(set(expected) - set(named))
    extra = sorted(set(named) - set(expected))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch; missing {missing}, extra {extra}")
    for key, value in named.items():
        if value.shape != expected[key].shape:
            raise ValueError(f"{key}: checkpoint shape {value.shape} != "
                             f"model shape {expected[key].shape}")
        expected[key][...] = value


def _crop(img: np.ndarray, points: list, size: int, rng) -> tuple:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img, points
    if h < size or w < size:
        raise ValueError(f"patch {w}x{h} smaller than input size {size}")
    ox = int(rng.integers(0, w - size + 1))
    oy = int(rng.integers(0, h - size + 1))
    pts = [(x - ox, y - oy) for x, y in points
           if ox <= x < ox + size and oy <= y < oy + size]
    return img[oy:oy + size, ox:ox + size], pts


def _augmented(sample: Sample, profiles: dict, cfg: TrainConfig, rng) -> Sample:
    img, pts = geometric_augment(sample.image, sample.points, rng,
                                 max_shift=cfg.max_shift)
    key = (sample.label.scanner, sample.label.tissue)
    profile = profiles.get(key, IDENTITY_PROFILE) if profiles else IDENTITY_PROFILE
    img = augment_stain(img, sample_alphas(profile, rng))
    img = blur_or_sharpen(img, rng)
    return Sample(image=img, points=pts, label=sample.label,
                  labeled=sample.labeled)


def train_loop(patches: list, detector: Detector, dhead: DomainHead,
               banks: list, cfg: TrainConfig, out_dir=None,
               profiles: dict = None, enable_dac: bool = True,
               trace_prototypes: bool = False) -> dict:
    """Run the alternating optimization; returns paths and final metrics.

    ``patches`` may be Patch or Sample-like objects (image, points,
    label, labeled).  With ``enable_dac`` off, step 1 and the agnostic
    term are skipped entirely (the ablation arm).
    """
    if not patches:
        raise ValueError("empty training set")
    total = cfg.iterations or cfg.epochs * max(
        1, round(len(patches) / cfg.accumulated_batch))

    dac_params = dict(dhead.params)
    proto_names = []
    for i, bank in enumerate(banks):
        name = f"bank{i}.prototypes"
        dac_params[name] = bank.prototypes
        proto_names.append(name)
    opt_dac = AdamW(dac_params, betas=cfg.adam_betas,
                    weight_decay=cfg.weight_decay, no_decay=set(proto_names))
    opt_det = AdamW(detector.params, betas=cfg.adam_betas,
                    weight_decay=cfg.weight_decay, no_decay=set(GATE_NAMES))

    out_dir = Path(out_dir) if out_dir is not None else None
    log = MetricsLog(out_dir / "metrics.jsonl") if out_dir else None
    trace_rows = []
    last = {}
    try:
        for it in range(total):
            lr = one_cycle_lr(it, total, cfg.peak_lr, cfg.warmup_fraction,
                              cfg.final_lr_factor)
            clean, augmented = _sample_batches(patches, cfg,
                                               detector.cfg.input_size, it,
                                               profiles)
            record = {"iteration": it, "lr": lr, "dac_loss": None}
            if enable_dac:
                record.update(step1_dac_update(detector, dhead, banks,
                                               clean, opt_dac, lr))
            record.update(step2_detector_update(detector, dhead, banks,
                                                augmented, opt_det, lr,
                                                enable_dac=enable_dac,
                                                clean_batches=clean))
            record["gate_sigmoids"] = detector.gate_sigmoids()
            record["prototype_coords_digest"] = digest(
                [b.prototypes.data for b in banks])
            for key in ("dac_loss", "det_loss", "agnostic_loss"):
                value = record.get(key)
                if value is not None and not np.isfinite(value):
                    _snapshot(detector, dhead, banks, out_dir)
                    raise TrainingDiverged(
                        f"iteration {it}: non-finite {key} = {value}")
            if log:
                log.append(record)
            if trace_prototypes:
                for head, bank in enumerate(banks):
                    for idx in range(bank.n):
                        trace_rows.append((it, head, idx,
                                           bank.prototypes.data[idx].tolist()))
            if out_dir and cfg.checkpoint_every and \
                    (it + 1) % cfg.checkpoint_every == 0:
                save_tensors(model_state(detector, dhead, banks),
                             out_dir / f"checkpoint_{it + 1:06d}.bin")
            last = record
    finally:
        if log:
            log.close()

    result = {"iterations": total, "final": last}
    if out_dir:
        ckpt = out_dir / "checkpoint.bin"
        save_tensors(model_state(detector, dhead, banks), ckpt)
        result["checkpoint"] = str(ckpt)
        result["metrics"] = str(out_dir / "metrics.jsonl")
        if trace_prototypes:
            write_prototype_trace(trace_rows, out_dir / "prototypes.csv")
            result["prototype_trace"] = str(out_dir / "prototypes.csv")
    return result


def _snapshot(detector, dhead, banks, out_dir) -> None:
    if out_dir:
        save_tensors(model_state(detector, dhead, banks),
                     Path(out_dir) / "diverged_snapshot.bin")


def _sample_batches(patches: list, cfg: TrainConfig, input_size: int,
                    iteration: int, profiles: dict) -> tuple:
    """Draw mini-batches for one iteration: (clean, augmented) lists."""
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 1, iteration]))
    clean_batches = []
    for _ in range(cfg.accum_steps):
        clean = []
        for _ in range(cfg.mini_batch):
            patch = patches[int(rng.integers(len(patches)))]
            img, pts = _crop(patch.image, patch.points, input_size, rng)
            clean.append(Sample(image=img, points=pts, label=patch.label,
                                labeled=patch.labeled))
        clean_batches.append(clean)
    if not cfg.augment:
        return clean_batches, clean_batches
    aug_batches = [[_augmented(s, profiles, cfg, rng) for s in clean]
                   for clean in clean_batches]
    return clean_batches, aug_batches
