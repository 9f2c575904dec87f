import numpy as np
import pytest

from conftest import TINY_SPEC, tiny_model_config
from codm.ablation import (
    AblationJob,
    codec_embedding,
    rebuild_dataset,
    run_ablation,
    RAW_HEADER,
    SUMMARY_HEADER,
)
from codm.corpus import write_corpus
from codm.sampling import SamplerConfig
from codm.training import TrainConfig, default_level_probs


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return write_corpus(TINY_SPEC, 160, out)


def tiny_train_cfg(job, seed, steps=25):
    return TrainConfig(
        batch_size=4, lr_peak=1e-3, warmup_steps=5, total_steps=steps,
        level_probs=default_level_probs(job.levels), seed=seed,
    )


def tiny_model_cfg(job):
    return tiny_model_config(
        num_levels=job.levels,
        vocab_size=TINY_SPEC.vocab_size,
        phoneme_vocab=TINY_SPEC.phoneme_vocab,
        max_seq_len=128,
    )


class TestRebuild:
    def test_decimated_rebuild_is_stride_sample(self, tiny_dataset):
        rebuilt = rebuild_dataset(tiny_dataset, "decimated", np.random.default_rng(0))
        for orig, new in zip(tiny_dataset.train[:20], rebuilt.train[:20]):
            assert np.array_equal(new.levels[2].tokens, orig.levels[2].tokens)
            assert np.array_equal(new.levels[1].tokens, orig.levels[2].tokens[::2])
            assert np.array_equal(new.levels[0].tokens, orig.levels[2].tokens[::4])

    @pytest.mark.parametrize("strategy", ["extra_shared", "extra_independent"])
    def test_vq_rebuild_well_formed(self, tiny_dataset, strategy):
        rebuilt = rebuild_dataset(tiny_dataset, strategy, np.random.default_rng(0))
        spec = tiny_dataset.spec
        for orig, new in zip(tiny_dataset.train[:20], rebuilt.train[:20]):
            assert np.array_equal(new.levels[2].tokens, orig.levels[2].tokens)
            for level_idx in (0, 1):
                seq = new.levels[level_idx]
                assert len(seq) == len(orig.levels[level_idx])
                assert (seq.tokens >= 0).all() and (seq.tokens < spec.vocab_size).all()

    def test_codec_embedding_fixed(self):
        a = codec_embedding(16)
        b = codec_embedding(16)
        assert a is b or np.array_equal(a, b)

    def test_unknown_strategy_rejected(self, tiny_dataset):
        from codm.errors import InvalidArgument

        with pytest.raises(InvalidArgument):
            rebuild_dataset(tiny_dataset, "bogus", np.random.default_rng(0))


class TestRunAblation:
    def jobs(self):
        return [AblationJob("decimated_1lvl", 1), AblationJob("decimated_2lvl", 2)]

    def test_grid_outputs_and_determinism(self, tiny_dataset, tmp_path):
        scfg = SamplerConfig(steps_per_level=(3, 3), noise_var_start=0.0, noise_var_end=0.0)
        common = dict(
            dataset=tiny_dataset,
            jobs=self.jobs(),
            seeds=[0, 1],
            model_cfg_for=tiny_model_cfg,
            train_cfg_for=tiny_train_cfg,
            scfg=scfg,
            ter_utts=4,
            ce_positions=80,
        )
        raw1, summary1 = run_ablation(out_dir=str(tmp_path / "a"), **common)
        raw2, summary2 = run_ablation(out_dir=str(tmp_path / "b"), **common)
        assert raw1 == raw2
        assert summary1 == summary2
        # one raw row per (config, seed)
        assert len(raw1) == 4
        assert len(summary1) == 2

        raw_csv = (tmp_path / "a" / "ablation_raw.csv").read_text().splitlines()
        summary_csv = (tmp_path / "a" / "ablation_summary.csv").read_text().splitlines()
        assert raw_csv[0] == RAW_HEADER == "config,seed,level,cond_ce,ter"
        assert summary_csv[0] == SUMMARY_HEADER == "config,levels,strategy,mean_ter,std_ter,mean_ce,std_ce"
        assert len(raw_csv) == 5 and len(summary_csv) == 3

    def test_resume_reuses_results(self, tiny_dataset, tmp_path):
        scfg = SamplerConfig(steps_per_level=(2,), noise_var_start=0.0, noise_var_end=0.0)
        jobs = [AblationJob("decimated_1lvl", 1)]
        kwargs = dict(
            dataset=tiny_dataset, jobs=jobs, seeds=[0],
            model_cfg_for=tiny_model_cfg, train_cfg_for=tiny_train_cfg, scfg=scfg,
            ter_utts=3, ce_positions=50, out_dir=str(tmp_path / "grid"),
        )
        import time

        t0 = time.perf_counter()
        raw1, _ = run_ablation(**kwargs)
        first = time.perf_counter() - t0
        t0 = time.perf_counter()
        raw2, _ = run_ablation(**kwargs)
        second = time.perf_counter() - t0
        assert raw1 == raw2
        assert second < first / 3
