"""codm: coarse-to-fine masked audio-token modeling on a desk-scale synthetic corpus.

The package is a plain numpy library.  The pieces, coarse to fine:

* :mod:`codm.hierarchy`   multi-rate token sequences, decimation, vector
  quantization, and the three coarse-token construction strategies
* :mod:`codm.masking`     cosine mask schedule, training masks, and
  confidence-based unmasking
* :mod:`codm.corpus`      seeded synthetic corpus with closed-form oracles
* :mod:`codm.model`       the shared bidirectional transformer decoder
* :mod:`codm.training`    the multi-level masked-NLL training loop
* :mod:`codm.sampling`    iterative coarse-to-fine decoding with guidance
* :mod:`codm.duration`    phoneme-to-seconds regressor
* :mod:`codm.evaluation`  conditional cross-entropy, token error rate
* :mod:`codm.ablation`    the level/strategy ablation grid runner
* :mod:`codm.cli`         the ``codm`` command-line entry point
"""

from .hierarchy import (
    Codebook,
    HierarchySpec,
    TokenSequence,
    build_hierarchy,
    decimate,
    level_length,
    quantize,
)
from .masking import (
    MaskState,
    ScheduleConfig,
    corrupt_condition,
    mask_ratio,
    masked_count_at,
    sample_training_mask,
    select_unmask,
)
from .model import ConditioningBundle, Model, ModelConfig, adaln_modulate, param_count
from .corpus import (
    CorpusDataset,
    SynthSpec,
    SynthUtterance,
    bayes_entropy_floor,
    gen_corpus,
    gen_utterance,
    oracle_fine_distribution,
    read_corpus,
    speaker_vector,
    write_corpus,
)
from .training import (
    TrainConfig,
    Trainer,
    TrainRecord,
    apply_cfg_dropout,
    load_model,
    lr_at,
    masked_nll,
    sample_level,
    save_model,
)
from .sampling import (
    SamplerConfig,
    cfg_combine,
    decode_level,
    generate,
    guidance_at,
    noise_variance_at,
)
from .duration import (
    DurationModel,
    DurationModelConfig,
    load_duration_model,
    save_duration_model,
    train_duration,
)

__version__ = "0.1.0"
