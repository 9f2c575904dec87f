import numpy as np
import pytest

from codm.corpus import SynthSpec, gen_corpus
from codm.model import Model, ModelConfig


TINY_SPEC = SynthSpec(
    phoneme_vocab=6,
    vocab_size=16,
    num_speakers=2,
    num_levels=3,
    factors=(4, 2, 1),
    finest_rate_hz=40.0,
    fine_noise=0.1,
    duration_rule=(0.06, 0.15, 0.01),
    seed=7,
    min_phonemes=3,
    max_phonemes=6,
)


def tiny_model_config(num_levels=3, dtype="float32", **overrides) -> ModelConfig:
    base = dict(
        num_layers=2,
        hidden_dim=32,
        num_heads=2,
        vocab_size=16,
        phoneme_vocab=6,
        num_levels=num_levels,
        max_seq_len=96,
        speaker_dim=8,
        ffn_mult=2,
        dtype=dtype,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def tiny_spec() -> SynthSpec:
    return TINY_SPEC


@pytest.fixture(scope="session")
def tiny_corpus(tiny_spec):
    return gen_corpus(tiny_spec, 120)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_model():
    return Model(tiny_model_config(), rng=np.random.default_rng(5))
