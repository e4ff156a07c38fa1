"""Pitch embeddings, linguistic upsampling, and condition dropout.

Shows the three per-frame condition channels and the categorical
dropout that teaches the model to run with any subset of them.
"""

import collections

import numpy as np

from maskcodec import (
    LinguisticSequence,
    PitchContour,
    embed_pitch_contour,
    pitch_embedding,
    sample_condition_drop,
    upsample_linguistic,
)

# 1. pitch embedding: log-compressed f0 through a sin block then a cos block.
# f=0 is the unvoiced marker and lands exactly on [0..0, 1..1].
print("pitch_embedding(0, d=8)     =", pitch_embedding(0.0, 8))
print("pitch_embedding(220, d=8)   =", np.round(pitch_embedding(220.0, 8), 4))
print("pitch_embedding(440, d=8)   =", np.round(pitch_embedding(440.0, 8), 4))

# a whole contour at once; unvoiced frames keep the marker row
contour = PitchContour(f0_hz=np.array([0.0, 196.0, 220.0, 247.0, 0.0]),
                       frame_rate_hz=50.0)
E = embed_pitch_contour(contour, 4)
print("\ncontour embedding (5 frames x d=4):")
print(np.round(E, 4))

# 2. linguistic tokens arrive on their own clock and are repeated out to
# the acoustic frame rate by start-time lookup
seq = LinguisticSequence(
    mode="discrete",
    frame_times=np.array([0.00, 0.10, 0.22]),
    tokens=np.array([4, 9, 2]),
    vectors=None,
    vocab_size=16,
)
frames = upsample_linguistic(seq, target_frames=15, target_rate=50.0)
print("\nupsampled linguistic ids at 50 Hz:", frames)

# 3. condition dropout: one categorical draw per sample picks which
# condition state the model trains under. Ratios 6:2:2:1 over
# (everything, no pitch, linguistics only, nothing) - exactly the four
# states the guidance combination needs at decode time.
rng = np.random.default_rng(0)
counts = collections.Counter()
for _ in range(20000):
    flags = sample_condition_drop(rng)
    counts[(flags.speaker, flags.ling, flags.pitch)] += 1
print("\ndropout pattern frequencies over 20000 draws "
      "(speaker, ling, pitch) -> share:")
for pattern, n in sorted(counts.items()):
    print(f"  drop {pattern}: {n / 20000:.4f}")
print("expected 6:2:2:1  ->", [round(x / 11, 4) for x in (6, 2, 2, 1)])
