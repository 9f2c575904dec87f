"""The cosine mask schedule that drives both training and decoding.

Run:  python demos/02_mask_schedule.py
"""

import math

import numpy as np

from codm.masking import (
    MaskState,
    mask_ratio,
    masked_count_at,
    sample_training_mask,
    select_unmask,
)

print("mask ratio across decode progress:")
for p in (0.0, 0.25, 0.5, 0.75, 1.0):
    print(f"  progress {p:.2f} -> ratio {mask_ratio(p):.4f}")

# A 20-step decode of an 87-token canvas reveals slowly at first, then in
# larger chunks as confidence accumulates.
counts = [masked_count_at(t, 20, 87) for t in range(1, 21)]
print("masked counts over 20 steps (n=87):", counts)
print("tokens revealed per step:          ",
      [87 - counts[0]] + [a - b for a, b in zip(counts, counts[1:])])

# Training masks draw a random progress point through the same schedule.
rng = np.random.default_rng(0)
fractions = [sample_training_mask(100, rng).mean() for _ in range(20000)]
print(f"mean training mask fraction {np.mean(fractions):.4f}"
      f"  (analytic integral 2/pi = {2 / math.pi:.4f})")

# Confidence-based unmasking fixes the strongest predictions first.
state = MaskState.fully_masked(6)
confidences = np.array([0.2, 0.9, 0.1, 0.7, 0.5, 0.3])
sampled = np.array([10, 11, 12, 13, 14, 15])
state = select_unmask(confidences, state, 3, sampled)
print("after fixing the top 3:", state.tokens.tolist(), "masked:", state.masked.tolist())
