"""Per-patch normalized pixel targets and the masked L2 loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import Mask
from .ndcore import ParameterError, ShapeError, Var
from .patchify import PatchGrid

EPS = 1e-6


@dataclass(frozen=True)
class NormalizedTargets:
    values: np.ndarray  # N x p
    mean: np.ndarray  # N x 3
    var: np.ndarray  # N x 3, population variance
    eps: float = EPS


def _channels(rows: np.ndarray) -> np.ndarray:
    # rows are flattened (time, row, col, channel): channel is the fastest axis
    return rows.reshape(rows.shape[0], -1, 3)


def normalize_targets(g: PatchGrid, eps: float = EPS) -> NormalizedTargets:
    """Zero mean, unit variance per patch and per colour channel, on 0-255 pixels."""
    px = _channels(g.patches.astype(np.float64))
    mean = px.mean(axis=1)
    var = px.var(axis=1)
    values = (px - mean[:, None, :]) / np.sqrt(var[:, None, :] + eps)
    return NormalizedTargets(values.reshape(g.patches.shape), mean, var, eps)


def denormalize(pred: np.ndarray, targets: NormalizedTargets, clamp: bool = True) -> np.ndarray:
    px = _channels(np.asarray(pred, dtype=np.float64))
    out = px * np.sqrt(targets.var[:, None, :] + targets.eps) + targets.mean[:, None, :]
    out = out.reshape(np.shape(pred))
    return np.clip(out, 0.0, 255.0) if clamp else out


def masked_mse(pred, targets: NormalizedTargets, m: Mask):
    """Mean squared error over the masked rows only.

    ``pred`` may be a plain array (returns a float) or a tape :class:`Var`
    (returns a scalar Var). Kept rows never enter the computation, so their
    gradient is exactly zero.
    """
    value = pred.value if isinstance(pred, Var) else np.asarray(pred)
    if value.shape != targets.values.shape:
        raise ShapeError(f"predictions {value.shape} vs targets {targets.values.shape}")
    if m.n != value.shape[0]:
        raise ShapeError(f"mask covers {m.n} patches, predictions have {value.shape[0]}")
    if m.m == 0:
        raise ParameterError("masked loss is undefined when no patch is masked")
    idx = list(m.masked)
    target_rows = targets.values[idx]
    if not isinstance(pred, Var):
        diff = value[idx] - target_rows
        return float((diff * diff).mean())
    tape = pred.tape
    diff = tape.sub(tape.gather_rows(pred, idx), tape.constant(target_rows.astype(value.dtype)))
    return tape.mean(tape.mul(diff, diff))
