"""Multi-rate token hierarchies: decimation, lengths, and the three strategies.

Run:  python demos/01_hierarchy_basics.py
"""

import numpy as np

from codm.hierarchy import (
    Codebook,
    HierarchySpec,
    TokenSequence,
    build_hierarchy,
    decimate,
    level_length,
    quantize,
    train_codebook,
)

rng = np.random.default_rng(0)

# The reference setup: a 86.13 Hz finest token stream with decimation
# factors 4 / 2 / 1, giving rates 21.5325, 43.065, and 86.13 Hz.
spec = HierarchySpec(
    num_levels=3, finest_rate_hz=86.13, decimation_factors=(4, 2, 1), vocab_size=32
)
print("token rates per level:", [round(spec.rate(l), 4) for l in (1, 2, 3)])

# Canvas lengths for a 1-second utterance, coarsest to finest.
print("lengths for 1.0 s:", [level_length(1.0, spec, l) for l in (1, 2, 3)])

# Stride decimation keeps every factor-th token, index 0 first.
finest = TokenSequence(level=3, rate_hz=86.13, tokens=rng.integers(0, 32, size=12))
print("finest tokens:  ", finest.tokens.tolist())
print("decimate by 2:  ", decimate(finest, 2).tokens.tolist())
print("decimate by 4:  ", decimate(finest, 4).tokens.tolist())

# The decimated strategy builds the whole hierarchy from the finest stream.
levels = build_hierarchy(finest, spec)
print("decimated hierarchy lengths:", [len(s) for s in levels])

# The extra-quantizer strategies re-encode pooled code vectors instead.
# Embed the finest tokens with a toy codec table, train a shared codebook on
# pooled windows, and rebuild.
codec = rng.standard_normal((32, 8))
frames = codec[finest.tokens]
pooled = np.concatenate(
    [frames.reshape(-1, 2, 8).mean(axis=1)], axis=0
)
shared = train_codebook(np.tile(pooled, (40, 1)), 32, rng, passes=6)
shared_spec = HierarchySpec(
    num_levels=3, finest_rate_hz=86.13, decimation_factors=(4, 2, 1),
    vocab_size=32, strategy="extra_shared",
)
shared_levels = build_hierarchy(finest, shared_spec, frames=frames, codebooks=[shared])
print("extra_shared hierarchy lengths:", [len(s) for s in shared_levels])
print("coarse tokens come from one shared codebook:",
      [s.tokens.max() < 32 for s in shared_levels])

# Nearest-neighbor quantization breaks ties toward the smaller index.
cb = Codebook(entries=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
tokens, residuals = quantize(np.array([[0.5, 0.0], [0.0, 0.9]]), cb)
print("quantized:", tokens.tokens.tolist(), "residual norms:",
      np.linalg.norm(residuals, axis=1).round(3).tolist())
