"""Stochastic schedules: cosine masking, layer choice, unmask budgets.

Training draws a masking timestep u ~ U[0,1], a target codebook layer
c ~ p(c), and keeps each target-layer token with probability cos(pi*u/2).
Inference walks the layers in order, spending a fixed number of steps per
layer and unmasking a cosine-scheduled number of positions per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaskingDraw",
    "StepBudget",
    "keep_probability",
    "layer_distribution",
    "draw_training_mask",
    "unmask_counts",
    "DEFAULT_STEPS_PER_LAYER_9",
]

# Reference per-codebook step budget for a 9-codebook grid (N = 64).
DEFAULT_STEPS_PER_LAYER_9 = (40, 16, 2, 1, 1, 1, 1, 1, 1)


@dataclass(frozen=True)
class MaskingDraw:
    """One training-time masking decision for a T x C grid."""

    u: float
    target_layer: int
    keep_row: np.ndarray  # binary, length T, for the target layer only

    def __post_init__(self):
        row = np.asarray(self.keep_row, dtype=np.int64)
        if not np.isin(row, (0, 1)).all():
            raise ValueError("keep_row entries must be 0 or 1")
        object.__setattr__(self, "keep_row", row)


@dataclass(frozen=True)
class StepBudget:
    """Iteration counts per codebook layer; total N is their sum."""

    steps_per_layer: tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps_per_layer)
        if len(steps) < 1 or any(s < 1 for s in steps):
            raise ValueError(f"every layer needs at least one step, got {steps}")
        object.__setattr__(self, "steps_per_layer", steps)

    @property
    def total(self) -> int:
        return sum(self.steps_per_layer)


def keep_probability(u: float) -> float:
    """Bernoulli keep parameter cos(pi*u/2) for masking timestep u."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"masking timestep must lie in [0, 1], got {u}")
    if u == 0.0:
        return 1.0
    if u == 1.0:
        return 0.0
    return math.cos(math.pi * u / 2.0)


def layer_distribution(num_codebooks: int) -> np.ndarray:
    """Probability of targeting each codebook layer.

    Raw weights w(c) = 1 - 2(c+1)/(C(C+1)) sum to C-1, so they are
    normalized here. Coarser layers are targeted more often.
    """
    C = int(num_codebooks)
    if C < 2:
        raise ValueError(f"layer distribution needs C >= 2, got C={C}")
    c = np.arange(C, dtype=np.float64)
    w = 1.0 - 2.0 * (c + 1.0) / (C * (C + 1.0))
    return w / w.sum()


def draw_training_mask(num_frames: int, num_codebooks: int, rng: np.random.Generator) -> MaskingDraw:
    """Sample (u, c, keep_row) for one training example.

    Consumes the caller's stream in a fixed order (u, then c, then the
    per-frame keeps), so a seeded generator reproduces the draw exactly.
    """
    if num_frames < 1:
        raise ValueError(f"need at least one frame, got {num_frames}")
    u = float(rng.uniform(0.0, 1.0))
    p = layer_distribution(num_codebooks)
    c = int(rng.choice(num_codebooks, p=p))
    keep = (rng.uniform(size=num_frames) < keep_probability(u)).astype(np.int64)
    return MaskingDraw(u=u, target_layer=c, keep_row=keep)


def unmask_counts(total_masked: int, steps: int) -> np.ndarray:
    """Per-step unmask counts over a layer's stage.

    After step s of S, floor(total * cos(pi/2 * s/S)) positions remain
    masked, except the final step which always drains to zero. Counts are
    the successive differences; they are non-negative and sum to total.
    """
    if total_masked < 0:
        raise ValueError(f"total_masked must be non-negative, got {total_masked}")
    if steps < 1:
        raise ValueError(f"need at least one step, got {steps}")
    s = np.arange(1, steps + 1, dtype=np.float64)
    remaining = np.floor(total_masked * np.cos(math.pi / 2.0 * s / steps)).astype(np.int64)
    remaining[-1] = 0
    prev = np.concatenate(([total_masked], remaining[:-1]))
    counts = prev - remaining
    # cos is decreasing on [0, pi/2], so the floors are non-increasing
    return counts
