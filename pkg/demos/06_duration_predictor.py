"""The phoneme-to-seconds regressor on the linear synthetic rule.

Run:  python demos/06_duration_predictor.py
"""

import numpy as np

from codm.duration import DurationModelConfig, DurationTrainConfig, train_duration

rng = np.random.default_rng(0)


def rule(length):
    return 0.08 * length + 0.2


pairs = []
for _ in range(800):
    n = int(rng.integers(4, 11))
    pairs.append((rng.integers(0, 16, size=n), rule(n) + 0.02 * (2 * rng.random() - 1)))

cfg = DurationModelConfig(phoneme_vocab=16, num_layers=2, hidden_dim=64, num_heads=2)
model = train_duration(
    pairs, cfg, DurationTrainConfig(steps=800, batch_size=16, seed=0), log_every=200
)

held_out = []
for _ in range(200):
    n = int(rng.integers(4, 11))
    held_out.append((rng.integers(0, 16, size=n), rule(n) + 0.02 * (2 * rng.random() - 1)))
mae = float(np.mean([abs(model.predict_duration(p) - d) for p, d in held_out]))
print(f"\nheld-out MAE: {mae:.4f} s")

print("\npredictions by phoneme count (rule: 0.08 * n + 0.2):")
for n in (4, 6, 8, 10):
    pred = model.predict_duration(np.full(n, 3, dtype=np.int64))
    print(f"  {n} phonemes -> {pred:.3f} s   (rule {rule(n):.3f} s)")
