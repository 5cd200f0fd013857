"""Top-k mask selection and the probability-weighted reconstruction loss.

Selection is a hard, non-differentiable cut: gradients reach the masking
network only through the probability weights inside the loss, never through
the chosen index sets (the selection Jacobian is treated as identity).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, gather_rows, mul, scale, sub

__all__ = [
    "MaskSelection", "ReconLossParts", "FixedRatio", "LinearRatio",
    "select_mask", "weighted_recon_loss", "mask_ratio_at",
]


@dataclass(frozen=True)
class MaskSelection:
    """Index partition for one image; both arrays are ascending."""

    masked_idx: np.ndarray
    visible_idx: np.ndarray
    ratio: float


@dataclass(frozen=True)
class FixedRatio:
    ratio: float

    def __post_init__(self):
        if not (0.0 < self.ratio < 1.0):
            raise ConfigError(f"mask ratio must lie in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class LinearRatio:
    """Ramp from start to end over total_steps, then hold at end."""

    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        for r in (self.start, self.end):
            if not (0.0 < r < 1.0):
                raise ConfigError(f"mask ratio must lie in (0, 1), got {r}")
        if self.total_steps < 1:
            raise ConfigError(f"schedule length must be >= 1, got {self.total_steps}")


def mask_ratio_at(step: int, schedule) -> float:
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if isinstance(schedule, FixedRatio):
        return schedule.ratio
    if isinstance(schedule, LinearRatio):
        frac = min(step, schedule.total_steps) / schedule.total_steps
        return schedule.start + (schedule.end - schedule.start) * frac
    raise ConfigError(f"unknown ratio schedule {schedule!r}")


def select_mask(probs, ratio: float) -> MaskSelection:
    """Mask the top probabilities: |visible| = floor(N*(1-ratio)).

    Stable order: probability descending, index ascending on ties. Reads raw
    values only; carries no gradient.
    """
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs, dtype=np.float64)
    p = p.reshape(-1)
    n = p.size
    num_visible = math.floor(n * (1.0 - ratio))
    num_masked = n - num_visible
    if num_visible < 1 or num_masked < 1:
        raise ConfigError(
            f"ratio {ratio} degenerate for {n} patches: "
            f"visible={num_visible}, masked={num_masked}")
    order = np.lexsort((np.arange(n), -p))  # primary: prob desc; ties: index asc
    masked = np.sort(order[:num_masked])
    visible = np.sort(order[num_masked:])
    return MaskSelection(masked_idx=masked, visible_idx=visible, ratio=float(ratio))


@dataclass
class ReconLossParts:
    """total is the scalar objective; per_patch and weights align with masked_idx."""

    total: Tensor
    per_patch: Tensor
    weights: Tensor


def weighted_recon_loss(sel: MaskSelection, predicted: Tensor, target_grid,
                        probs: Tensor) -> ReconLossParts:
    """Mean over masked patches of sigma_j * mse_j.

    per_patch_j is the mean squared pixel error of masked patch j; the weight
    is the live masking probability at that patch, so d(total)/d(probs_j)
    equals per_patch_j / |masked| exactly and is zero at visible positions.
    """
    tgt = target_grid.data if isinstance(target_grid, Tensor) else np.asarray(target_grid, dtype=np.float64)
    m = sel.masked_idx.size
    if predicted.shape != (m, tgt.shape[1]):
        raise ConfigError(
            f"predicted shape {predicted.shape} does not match {m} masked patches "
            f"of {tgt.shape[1]} pixels")
    target_rows = Tensor(tgt[sel.masked_idx])
    diff = sub(predicted, target_rows)
    per_patch = mul(diff, diff).mean(axis=1)
    weights = gather_rows(probs, sel.masked_idx)
    total = scale(mul(weights, per_patch).sum(), 1.0 / m)
    return ReconLossParts(total=total, per_patch=per_patch, weights=weights)
