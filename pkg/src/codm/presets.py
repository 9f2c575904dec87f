"""The desk-scale profile: one place that pins every default.

These values define the corpus, model, training, and sampling setup used by
the CLI defaults, the demos, and the acceptance suite.  The sampler defaults
follow the reference recipe (20 steps per level, guidance 3 -> 0.75, logit
noise variance 3 -> 0); training uses AdamW with betas (0.9, 0.95), weight
decay 0.05, and level sampling probabilities (0.2, 0.3, 0.5) biased toward
the finer temporal levels.
"""

from __future__ import annotations

from .corpus import SynthSpec
from .model import ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig, default_level_probs

DESK_FINEST_RATE_HZ = 86.13

DESK_SYNTH = SynthSpec(
    phoneme_vocab=16,
    vocab_size=32,
    num_speakers=4,
    num_levels=3,
    factors=(4, 2, 1),
    finest_rate_hz=DESK_FINEST_RATE_HZ,
    fine_noise=0.15,
    duration_rule=(0.08, 0.2, 0.02),
    seed=31415,
    min_phonemes=4,
    max_phonemes=10,
)

DESK_CORPUS_SIZE = 5000


def desk_model_config(
    num_levels: int = 3,
    phoneme_vocab: int = 16,
    vocab_size: int = 32,
    max_seq_len: int = 160,
) -> ModelConfig:
    """The 4-layer, dim-128 desk decoder."""
    return ModelConfig(
        num_layers=4,
        hidden_dim=128,
        num_heads=4,
        vocab_size=vocab_size,
        phoneme_vocab=phoneme_vocab,
        num_levels=num_levels,
        max_seq_len=max_seq_len,
        speaker_dim=16,
        ffn_mult=2,
    )


def desk_train_config(num_levels: int = 3, seed: int = 0, total_steps: int = 20000) -> TrainConfig:
    return TrainConfig(
        batch_size=8,
        lr_peak=1e-3,
        warmup_steps=500,
        total_steps=total_steps,
        level_probs=default_level_probs(num_levels),
        seed=seed,
    )


DESK_SAMPLER = SamplerConfig(
    steps_per_level=(20, 20, 20),
    guidance_start=3.0,
    guidance_end=0.75,
    noise_var_start=3.0,
    noise_var_end=0.0,
    temperature=1.0,
)

# acceptance-grid evaluation sizes
ACCEPT_SEEDS = (0, 1, 2)
ACCEPT_TER_UTTS = 64
ACCEPT_CE_POSITIONS = 10500
