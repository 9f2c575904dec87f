"""A miniature level-ablation grid: do more temporal levels help?

Trains tiny 1-, 2-, and 3-level models under the same budget and compares
token error rates against the oracle expansion.  At this toy scale the gap
is noisy; the full desk-scale grid lives in the acceptance suite.

Run:  python demos/07_mini_ablation.py      (several minutes on CPU)
"""

import tempfile

from codm.ablation import AblationJob, run_ablation
from codm.corpus import SynthSpec, write_corpus
from codm.model import ModelConfig
from codm.sampling import SamplerConfig
from codm.training import TrainConfig, default_level_probs

spec = SynthSpec(
    phoneme_vocab=8, vocab_size=16, num_speakers=2, num_levels=3,
    factors=(4, 2, 1), finest_rate_hz=40.0, fine_noise=0.1,
    duration_rule=(0.06, 0.15, 0.01), seed=5, min_phonemes=3, max_phonemes=7,
)

with tempfile.TemporaryDirectory() as tmp:
    dataset = write_corpus(spec, 800, tmp + "/corpus")

    def model_cfg_for(job):
        return ModelConfig(
            num_layers=2, hidden_dim=64, num_heads=2, vocab_size=16, phoneme_vocab=8,
            num_levels=job.levels, max_seq_len=96, speaker_dim=8,
        )

    def train_cfg_for(job, seed):
        return TrainConfig(
            batch_size=8, lr_peak=1e-3, warmup_steps=100, total_steps=1500,
            level_probs=default_level_probs(job.levels), seed=seed,
        )

    jobs = [AblationJob(f"decimated_{k}lvl", k) for k in (1, 2, 3)]
    raw, summary = run_ablation(
        dataset, jobs, seeds=[0], out_dir=tmp + "/grid",
        model_cfg_for=model_cfg_for, train_cfg_for=train_cfg_for,
        scfg=SamplerConfig(steps_per_level=(20, 20, 20)),
        ter_utts=24, ce_positions=1200, log_every=500,
    )
    print("\nconfig                levels  ter      finest-level ce")
    for row in summary:
        print(f"{row['config']:<22}{row['levels']:<8}{row['mean_ter']:<9.4f}{row['mean_ce']:.4f}")
