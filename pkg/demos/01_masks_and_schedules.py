"""Layered masking and the cosine schedules that drive it.

Walks through the three schedule pieces: the keep probability for the
target layer, the distribution over which layer gets masked, and the
per-step unmasking budget used at decode time.
"""

import numpy as np

from maskcodec import (
    LayeredMask,
    TokenGrid,
    apply_mask,
    draw_training_mask,
    keep_probability,
    layer_distribution,
    masked_positions,
    unmask_counts,
)

rng = np.random.default_rng(7)

# 1. keep probability: cos(pi*u/2) sweeps from keep-everything to keep-nothing
print("keep probability over u:")
for u in (0.0, 0.25, 0.5, 0.75, 1.0):
    print(f"  u={u:.2f}  p_keep={keep_probability(u):.4f}")

# 2. which layer gets masked: lower layers more often (they carry more signal)
for C in (2, 3, 4, 8):
    p = layer_distribution(C)
    print(f"C={C}: layer probs {np.round(p, 4)}  (sum {p.sum():.12f})")

# 3. a full training draw on a 10-frame, 3-layer grid
T, C, K = 10, 3, 16
draw = draw_training_mask(T, C, rng)
print(f"\ntraining draw: u={draw.u:.3f} target_layer={draw.target_layer} "
      f"kept {int(draw.keep_row.sum())}/{T} frames in that layer")

mask = LayeredMask.from_keep_row(draw.keep_row, draw.target_layer, C)
grid = TokenGrid(tokens=rng.integers(0, K, size=(T, C)), vocab_size=K)
masked = apply_mask(grid, mask)

# sentinel id K marks hidden cells; layers above the target are fully hidden,
# layers below fully visible
print("masked grid (rows are frames, columns are codebook layers):")
print(masked.tokens)
print(f"positions the loss/sampler will look at: {masked_positions(mask)}")

# 4. decode-time pacing: how many positions each step commits.
# Counts follow floor(total * cos(pi/2 * s/S)) remaining mass, so early
# steps commit many cells and late steps refine one at a time.
print("\nunmask pacing for 64 masked cells over 10 steps:",
      unmask_counts(64, 10), "(sums to 64)")
print("unmask pacing for 3 cells over 8 steps:   ", unmask_counts(3, 8))
