"""AdamW pretraining loop over omnivorous mini-batches."""

from __future__ import annotations

import csv
import logging
import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ndcore
from .datapipe import BatchPlan, DatasetHandle, build_epoch_plan, iter_batches
from .masking import MaskSpec
from .model import OmniMaeConfig, forward, init_params, save_checkpoint
from .ndcore import Tape, UsageError
from .objective import masked_mse, normalize_targets
from .patchify import IMAGE, VIDEO, VisualTensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    warmup_epochs: float = 40
    epochs: float = 800
    batch_size: int = 2048

    def __post_init__(self):
        if self.lr < 0:
            raise ndcore.ParameterError("learning rate must be >= 0")
        if self.warmup_epochs > self.epochs:
            raise ndcore.ParameterError("warmup cannot exceed the total number of epochs")


DEFAULT_MASKS = {IMAGE: MaskSpec("random", 0.90), VIDEO: MaskSpec("random", 0.95)}


@dataclass
class TrainState:
    cfg: OmniMaeConfig
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    seed: int = 0

    @classmethod
    def create(cls, cfg: OmniMaeConfig, seed: int = 0, dtype=ndcore.DEFAULT_DTYPE) -> TrainState:
        params = init_params(cfg, seed, dtype)
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(cfg, params, zeros, {k: v.copy() for k, v in zeros.items()}, 0, 0, seed)

    def copy(self) -> TrainState:
        dup = {k: v.copy() for k, v in self.params.items()}
        return replace(self, params=dup, m={k: v.copy() for k, v in self.m.items()},
                       v={k: v.copy() for k, v in self.v.items()})


def lr_at(step: int, spec: OptimSpec, steps_per_epoch: int) -> float:
    """Linear warmup to the peak, then half-cosine down to zero at the final step."""
    warmup = spec.warmup_epochs * steps_per_epoch
    last = spec.epochs * steps_per_epoch - 1
    if step < warmup:
        return spec.lr * step / warmup
    if last <= warmup:
        return spec.lr if step == warmup else 0.0
    progress = min(1.0, (step - warmup) / (last - warmup))
    return spec.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only: no norms, biases or mask token."""
    return value.ndim >= 2


def batch_loss(params, cfg: OmniMaeConfig, batch: Sequence[VisualTensor],
               specs: Sequence[MaskSpec], tape: Tape):
    """Mean of per-sample masked losses, each sample with its own mask."""
    total = None
    for x, spec in zip(batch, specs):
        pred, mask, grid = forward(x, spec, cfg, params, tape)
        loss = masked_mse(pred, normalize_targets(grid), mask)
        total = loss if total is None else tape.add(total, loss)
    return tape.scale(total, 1.0 / len(batch))


def sample_specs(state: TrainState, batch: Sequence[VisualTensor], masks: Mapping[str, MaskSpec],
                 mask_seeds: Sequence[int] | None = None) -> list[MaskSpec]:
    base = masks[batch[0].modality]
    if mask_seeds is None:
        mask_seeds = [ndcore.derive_seed(state.seed, "mask", state.step, i) for i in range(len(batch))]
    return [replace(base, seed=int(s)) for s in mask_seeds]


def adamw_update(state: TrainState, grads: Mapping[str, np.ndarray], lr: float, spec: OptimSpec) -> None:
    t = state.step + 1
    c1 = 1.0 - spec.beta1**t
    c2 = 1.0 - spec.beta2**t
    for name, p in state.params.items():
        g = grads[name]
        m = state.m[name] = spec.beta1 * state.m[name] + (1.0 - spec.beta1) * g
        v = state.v[name] = spec.beta2 * state.v[name] + (1.0 - spec.beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + spec.eps)
        shrink = 1.0 - lr * spec.weight_decay if decays(name, p) else 1.0
        state.params[name] = (p * shrink - lr * update).astype(p.dtype, copy=False)


def train_step(state: TrainState, batch: Sequence[VisualTensor], spec: OptimSpec,
               masks: Mapping[str, MaskSpec] = DEFAULT_MASKS, steps_per_epoch: int = 1,
               mask_seeds: Sequence[int] | None = None, lr: float | None = None):
    """One AdamW step on a single-modality batch. Returns ``(new_state, loss)``."""
    if not batch:
        raise UsageError("empty batch")
    modalities = {x.modality for x in batch}
    if len(modalities) != 1:
        raise UsageError(f"a mini-batch must hold a single modality, got {sorted(modalities)}")
    tape = Tape()
    loss = batch_loss(state.params, state.cfg, batch, sample_specs(state, batch, masks, mask_seeds), tape)
    grads = tape.backward(loss)
    new = state.copy()
    adamw_update(new, grads, lr_at(state.step, spec, steps_per_epoch) if lr is None else lr, spec)
    new.step += 1
    return new, float(loss.value)


def overfit(state: TrainState, dataset: Sequence[VisualTensor], steps: int, spec: OptimSpec | None = None,
            masks: Mapping[str, MaskSpec] | None = None) -> tuple[TrainState, list[tuple[str, float]]]:
    """Repeatedly fit a tiny dataset; modalities alternate step by step.

    Returns the final state and a ``(modality, loss)`` trace with one entry
    per step. Masks are redrawn every step.
    """
    if len(dataset) > 8 * 2:
        raise UsageError("overfit expects a handful of samples")
    spec = spec or OptimSpec(lr=5e-3, weight_decay=0.0, warmup_epochs=min(20, steps), epochs=max(steps, 1))
    masks = masks or {IMAGE: MaskSpec("random", 0.5), VIDEO: MaskSpec("random", 0.5)}
    groups = [[x for x in dataset if x.modality == m] for m in (IMAGE, VIDEO)]
    groups = [g for g in groups if g]
    trace = []
    for i in range(steps):
        batch = groups[i % len(groups)]
        state, loss = train_step(state, batch, spec, masks, steps_per_epoch=1)
        trace.append((batch[0].modality, loss))
    return state, trace


def loss_drop(trace: Sequence[tuple[str, float]], modality: str, tail: int = 10) -> float:
    """Mean of the last ``tail`` losses for ``modality`` over its first loss."""
    losses = [l for m, l in trace if m == modality]
    return float(np.mean(losses[-tail:]) / losses[0])


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def _loss_value(params, cfg, x, spec) -> float:
    pred, mask, grid = forward(x, spec, cfg, params)
    return masked_mse(pred, normalize_targets(grid), mask)


def grad_check(cfg: OmniMaeConfig, x: VisualTensor, spec: MaskSpec, params=None, seed: int = 0,
               probes: int = 64, step: float = 1e-5, floor: float = 1e-6,
               per_tensor: bool = False):
    """Compare tape gradients with central differences.

    For each parameter tensor up to ``probes`` coordinates are perturbed.
    The error of a tensor is ``max|analytic - numeric|`` over its probes,
    divided by the larger of the two gradients' max magnitudes (at least
    ``floor``). Returns the worst tensor error, or a per-tensor dict.
    """
    if params is None:
        params = init_params(cfg, seed)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    tape = Tape()
    pred, mask, grid = forward(x, spec, cfg, params, tape)
    grads = tape.backward(masked_mse(pred, normalize_targets(grid), mask))
    errors = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        gen = ndcore.rng(seed, "gradcheck:" + name)
        idx = gen.choice(flat.size, size=min(probes, flat.size), replace=False)
        analytic = grads[name].reshape(-1)[idx]
        numeric = np.empty_like(analytic)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = _loss_value(params, cfg, x, spec)
            flat[i] = orig - step
            down = _loss_value(params, cfg, x, spec)
            flat[i] = orig
            numeric[j] = (up - down) / (2 * step)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), floor)
        errors[name] = float(np.abs(analytic - numeric).max() / scale)
    return errors if per_tensor else max(errors.values())


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------

LOG_FIELDS = ["step", "epoch", "modality", "loss", "lr", "wall_ms"]


@dataclass
class RunResult:
    state: TrainState
    rows: list[dict] = field(default_factory=list)
    plans: list[BatchPlan] = field(default_factory=list)


def fit(state: TrainState, datasets: Sequence[DatasetHandle], spec: OptimSpec, epochs: int,
        masks: Mapping[str, MaskSpec] = DEFAULT_MASKS, replication: Mapping[str, int] | None = None,
        ratios: Mapping[str, int] | None = None, log_path: str | Path | None = None,
        checkpoint_dir: str | Path | None = None, checkpoint_every: int = 0,
        workers: int = 2) -> RunResult:
    """Train for ``epochs`` epochs, one freshly shuffled plan per epoch."""
    plan0 = build_epoch_plan(datasets, spec.batch_size, replication, ratios, state.seed, 0)
    steps_per_epoch = plan0.steps
    if steps_per_epoch == 0:
        raise UsageError("the datasets are too small for one batch of the configured size")
    result = RunResult(state)
    fh = None
    writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
    try:
        for epoch in range(state.epoch, epochs):
            plan = plan0 if epoch == 0 else build_epoch_plan(
                datasets, spec.batch_size, replication, ratios, state.seed, epoch)
            result.plans.append(plan)
            for batch, samples in iter_batches(plan, datasets, workers=workers):
                t0 = time.perf_counter()
                lr = lr_at(state.step, spec, steps_per_epoch)
                state, loss = train_step(state, samples, spec, masks, steps_per_epoch,
                                         mask_seeds=batch.mask_seeds, lr=lr)
                row = {"step": state.step - 1, "epoch": epoch, "modality": batch.modality,
                       "loss": repr(loss), "lr": repr(lr),
                       "wall_ms": f"{(time.perf_counter() - t0) * 1e3:.3f}"}
                result.rows.append(row)
                if writer is not None:
                    writer.writerow(row)
            state.epoch = epoch + 1
            log.info("epoch %d done, last loss %s", epoch, result.rows[-1]["loss"])
            if checkpoint_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"epoch_{epoch + 1:04d}", state.cfg, state.params,
                                step=state.step, epoch=state.epoch, seed=state.seed)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "final", state.cfg, state.params,
                        step=state.step, epoch=state.epoch, seed=state.seed)
    result.state = state
    return result
