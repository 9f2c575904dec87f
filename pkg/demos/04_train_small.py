"""Train a small decoder for a few hundred steps and watch the losses move.

Run:  python demos/04_train_small.py      (about a minute on a laptop CPU)
"""

import numpy as np

from codm.corpus import SynthSpec, gen_corpus, bayes_entropy_floor
from codm.model import Model, ModelConfig
from codm.training import TrainConfig, Trainer

spec = SynthSpec(
    phoneme_vocab=8, vocab_size=16, num_speakers=2, num_levels=3,
    factors=(4, 2, 1), finest_rate_hz=40.0, fine_noise=0.1,
    duration_rule=(0.06, 0.15, 0.01), seed=5, min_phonemes=3, max_phonemes=7,
)
utts = gen_corpus(spec, 400)

model = Model(
    ModelConfig(
        num_layers=2, hidden_dim=64, num_heads=2, vocab_size=16, phoneme_vocab=8,
        num_levels=3, max_seq_len=96, speaker_dim=8,
    ),
    rng=np.random.default_rng(0),
)
print(f"model parameters: {model.param_count():,}")

trainer = Trainer(
    model, utts,
    TrainConfig(batch_size=8, lr_peak=1e-3, warmup_steps=50, total_steps=600,
                level_probs=(0.2, 0.3, 0.5), seed=0),
)
window = {1: [], 2: [], 3: []}
for _ in range(trainer.cfg.total_steps):
    rec = trainer.step()
    window[rec.level].append(rec.loss)
    if rec.step % 100 == 0:
        means = {l: round(float(np.mean(v[-40:])), 3) for l, v in window.items() if v}
        print(f"step {rec.step:4d}  lr {rec.lr:.2e}  recent loss by level {means}")

floor = bayes_entropy_floor(spec.fine_noise, spec.vocab_size)
print(f"\nconditional floor for the fine levels: {floor:.3f} nats")
print("level-2/3 losses head toward the floor; level-1 (the deterministic")
print("phoneme-driven chain) heads toward zero as the alignment is learned.")
