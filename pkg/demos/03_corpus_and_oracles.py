"""The synthetic corpus and its closed-form oracles.

Run:  python demos/03_corpus_and_oracles.py
"""

import numpy as np

from codm.corpus import (
    SynthSpec,
    bayes_entropy_floor,
    gen_corpus,
    gen_utterance,
    law_for,
    oracle_fine_distribution,
    ter_reference,
)

spec = SynthSpec(
    phoneme_vocab=16, vocab_size=32, num_speakers=4, num_levels=3,
    factors=(4, 2, 1), finest_rate_hz=86.13, fine_noise=0.15,
    duration_rule=(0.08, 0.2, 0.02), seed=31415,
)

utt = gen_utterance(spec, np.random.default_rng(4), utt_id="demo")
print("phonemes:      ", utt.phonemes.tolist())
print("speaker:       ", utt.speaker_id, "  duration:", round(utt.duration_s, 3), "s")
for seq in utt.levels:
    print(f"level {seq.level} ({seq.rate_hz:8.4f} Hz, {len(seq):3d} tokens):",
          seq.tokens[:16].tolist(), "...")

# The law expands each coarse token deterministically and then resamples a
# fraction fine_noise of the fine tokens uniformly; sub-position 0 is the
# identity, so the coarse chain is the denoised stride-decimation.
law = law_for(spec)
clean = law.expand_clean(utt.levels[1].tokens, utt.speaker_id, 2, len(utt.levels[2]))
agreement = (clean == utt.levels[2].tokens).mean()
print(f"\nfine level matches its clean expansion at {agreement:.3f}"
      f"  (expected {1 - spec.fine_noise * (1 - 1 / spec.vocab_size):.3f})")

# Exact per-position predictive distribution and its entropy floor.
dist = oracle_fine_distribution(utt.levels[1], utt.speaker_id, spec, fine_len=len(utt.levels[2]))
print("oracle top probability:", dist.max(axis=1)[0].round(6),
      " = (1 - eps) + eps/V =", round(1 - spec.fine_noise + spec.fine_noise / 32, 6))
floor = bayes_entropy_floor(spec.fine_noise, spec.vocab_size)
print(f"closed-form conditional entropy floor: {floor:.4f} nats")
print(f"numeric entropy of one oracle row:     "
      f"{-(dist[0] * np.log(dist[0])).sum():.4f} nats")

# Empirical cross-entropy of the true conditional approaches the floor.
total, count = 0.0, 0
for u in gen_corpus(spec, 150):
    d = oracle_fine_distribution(u.levels[1], u.speaker_id, spec, fine_len=len(u.levels[2]))
    total += -np.log(d[np.arange(len(u.levels[2])), u.levels[2].tokens]).sum()
    count += len(u.levels[2])
print(f"empirical NLL of the true conditional: {total / count:.4f} nats over {count} tokens")

# The token-error-rate reference: the noise-free expansion of the true chain.
ref = ter_reference(utt, spec)
print("\nTER reference vs actual finest level mismatch:",
      round(float((ref != utt.levels[2].tokens).mean()), 3),
      "(the irreducible fine-noise floor)")
