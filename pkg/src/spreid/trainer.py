"""Nesterov-momentum SGD training with clipping, step decay and two resolution phases."""

from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import ModelCheckpoint, capture
from .tensor import bilinear_resize

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised on non-finite gradients or losses."""

    def __init__(self, message, last_good: ModelCheckpoint | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class OptimizerConfig:
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_norm: float = 2.0


@dataclass(frozen=True)
class TrainSchedule:
    phase1_iters: int = 2000
    phase2_iters: int = 500
    phase1_size: tuple[int, int] = (64, 24)
    phase2_size: tuple[int, int] = (97, 36)
    phase1_lr: float = 0.01
    phase2_lr: float = 0.001
    n_decays: int = 10
    decay_rate: float = 0.9
    batch_size: int = 15

    def validate(self) -> None:
        if self.phase1_iters < self.n_decays + 1 or (self.phase2_iters and self.phase2_iters < self.n_decays + 1):
            raise ValueError(f"each phase needs more than {self.n_decays} iterations")
        if self.phase2_iters and not all(b > a for a, b in zip(self.phase1_size, self.phase2_size)):
            raise ValueError(f"phase-2 size {self.phase2_size} must exceed phase-1 size {self.phase1_size}")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def decay_points(total: int, n_decays: int = 10) -> list[int]:
    """``n_decays`` evenly spaced, strictly increasing iterations inside ``[1, total)``."""
    if total < n_decays + 1:
        raise ValueError(f"{total} iterations cannot hold {n_decays} distinct decay points")
    return [k * total // (n_decays + 1) for k in range(1, n_decays + 1)]


def lr_at(it: int, total: int, base_lr: float, n_decays: int = 10, rate: float = 0.9) -> float:
    if not 0 <= it < total:
        raise ValueError(f"iteration {it} outside [0, {total})")
    passed = sum(1 for p in decay_points(total, n_decays) if p <= it)
    return base_lr * rate ** passed


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float = 2.0):
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before)``.
    """
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise TrainingError("non-finite gradient encountered")
    if norm <= max_norm:
        return [g.copy() for g in grads], norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class NesterovSGD:
    """SGD with Nesterov momentum and coupled L2 weight decay.

    Per step, with ``d = grad + weight_decay * param``::

        v     <- momentum * v - lr * d
        param <- param + momentum * v - lr * d
    """

    def __init__(self, params, cfg: OptimizerConfig = OptimizerConfig(), lr_scales: dict | None = None):
        self.params = list(params)
        self.cfg = cfg
        self.lr_scales = lr_scales or {}
        self.velocity = {p.name: np.zeros_like(p.value) for p in self.params}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> float:
        """Clip, apply one update and return the pre-clip gradient norm."""
        clipped, norm = clip_gradients([p.grad for p in self.params], self.cfg.clip_norm)
        mu, wd = self.cfg.momentum, self.cfg.weight_decay
        for p, g in zip(self.params, clipped):
            step_lr = lr * self.lr_scales.get(p.name, 1.0)
            d = g + wd * p.value
            v = self.velocity[p.name]
            v *= mu
            v -= step_lr * d
            p.value = p.value + mu * v - step_lr * d
        return norm


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, phase, it, lr, loss, grad_norm, acc):
        self.rows.append({"phase": phase, "iter": it, "lr": lr, "loss": loss,
                          "grad_norm_preclip": grad_norm, "accuracy": acc})

    def losses(self, phase=None) -> list[float]:
        return [r["loss"] for r in self.rows if phase is None or r["phase"] == phase]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["phase", "iter", "lr", "loss", "grad_norm_preclip"])
            for r in self.rows:
                writer.writerow([r["phase"], r["iter"], repr(r["lr"]), repr(r["loss"]), repr(r["grad_norm_preclip"])])


def shuffle_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(b"shuffle")])


def batches(rng: np.random.Generator, n_items: int, batch_size: int):
    """Endless stream of index batches drawn epoch by epoch from ``rng``."""
    while True:
        order = rng.permutation(n_items)
        for start in range(0, n_items - batch_size + 1 if n_items >= batch_size else 1, batch_size):
            yield order[start:start + batch_size]


def run_phase(model, batch_loss, n_items, iters, base_lr, batch_size, rng, opt: NesterovSGD,
              history: History, phase: int, schedule: TrainSchedule, architecture: dict,
              provenance: dict) -> ModelCheckpoint:
    """Run ``iters`` optimizer steps; ``batch_loss(indices)`` must fill ``param.grad``."""
    stream = batches(rng, n_items, batch_size)
    last_good = capture(model.named_params(), architecture, {**provenance, "phase": phase, "iteration": 0})
    loss = float("nan")
    for it in range(iters):
        lr = lr_at(it, iters, base_lr, schedule.n_decays, schedule.decay_rate)
        opt.zero_grad()
        loss, acc = batch_loss(next(stream))
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at phase {phase} iteration {it}", last_good)
        try:
            norm = opt.step(lr)
        except TrainingError as exc:
            raise TrainingError(f"{exc} at phase {phase} iteration {it}", last_good) from exc
        history.add(phase, it, lr, loss, norm, acc)
        if (it + 1) % 100 == 0:
            log.info("phase %d iter %d lr %.5f loss %.4f acc %.3f", phase, it + 1, lr, loss, acc)
            last_good = capture(model.named_params(), architecture,
                                {**provenance, "phase": phase, "iteration": it + 1, "loss": loss})
    return capture(model.named_params(), architecture,
                   {**provenance, "phase": phase, "iteration": iters, "loss": loss})


def train_reid(model, images, labels, maps=None, schedule: TrainSchedule = TrainSchedule(),
               opt_cfg: OptimizerConfig = OptimizerConfig(), seed: int = 0,
               history: History | None = None, phases=(1, 2), on_phase_end=None) -> list[ModelCheckpoint]:
    """Two-phase identity-classification training.

    ``images`` are at full resolution and resized per phase; ``maps`` are the
    frozen parser's coarse maps and do not depend on the phase. Phase 2
    continues from the phase-1 weights with a fresh optimizer state.
    ``on_phase_end(phase, size)`` runs after each phase, e.g. for evaluation.
    """
    schedule.validate()
    history = history if history is not None else History()
    labels = np.asarray(labels)
    rng = shuffle_rng(seed)
    arch = model.architecture()
    checkpoints = []
    plan = {1: (schedule.phase1_size, schedule.phase1_iters, schedule.phase1_lr),
            2: (schedule.phase2_size, schedule.phase2_iters, schedule.phase2_lr)}
    for phase in phases:
        size, iters, base_lr = plan[phase]
        if iters == 0:
            continue
        x = bilinear_resize(np.asarray(images, dtype=np.float64), *size)

        def batch_loss(idx, x=x):
            return model.loss_and_grad(x[idx], labels[idx], None if maps is None else maps[idx])

        opt = NesterovSGD(model.params(), opt_cfg)
        checkpoints.append(run_phase(
            model, batch_loss, len(labels), iters, base_lr, schedule.batch_size, rng, opt,
            history, phase, schedule, arch,
            {"seed": seed, "input_size": list(size), "base_lr": base_lr},
        ))
        if on_phase_end is not None:
            on_phase_end(phase, size)
    return checkpoints


def train_parser(net, images, masks, iters=1000, size=None, base_lr=0.01, head_lr_scale=10.0,
                 batch_size=15, opt_cfg: OptimizerConfig = OptimizerConfig(), seed=0,
                 history: History | None = None, n_decays=10, decay_rate=0.9,
                 label_stride=1) -> ModelCheckpoint:
    """Train the parsing network with per-pixel cross-entropy (single phase).

    ``label_stride`` > 1 scores the loss on a nearest-subsampled label grid
    (every ``label_stride``-th pixel, centred), which is much cheaper than full
    resolution and still far finer than the logit grid.
    """
    history = history if history is not None else History()
    x = np.asarray(images, dtype=np.float64)
    if size is not None:
        x = bilinear_resize(x, *size)
    masks = np.asarray(masks)
    if label_stride > 1:
        off = label_stride // 2
        masks = masks[:, off::label_stride, off::label_stride]
    schedule = TrainSchedule(phase1_iters=iters, phase2_iters=0, n_decays=n_decays,
                             decay_rate=decay_rate, batch_size=batch_size)
    opt = NesterovSGD(net.params(), opt_cfg, lr_scales=net.lr_scales(1.0, head_lr_scale))
    return run_phase(
        net, lambda idx: net.loss_and_grad(x[idx], masks[idx]), len(x), iters, base_lr,
        batch_size, shuffle_rng(seed), opt, history, 1, schedule, net.architecture(),
        {"seed": seed, "input_size": list(x.shape[2:]), "base_lr": base_lr, "label_stride": label_stride},
    )
