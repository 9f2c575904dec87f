import json
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import TINY_SPEC
from codm.corpus import (
    SynthSpec,
    bayes_entropy_floor,
    bayes_map_expansion,
    gen_corpus,
    gen_utterance,
    law_for,
    oracle_fine_distribution,
    project_hierarchy,
    project_levels,
    read_corpus,
    speaker_vector,
    split_of,
    ter_reference,
    write_corpus,
)
from codm.errors import InvalidArgument, ParseError
from codm.hierarchy import level_length


class TestGenUtterance:
    def test_same_seed_identical(self, tiny_spec):
        a = gen_utterance(tiny_spec, np.random.default_rng(42))
        b = gen_utterance(tiny_spec, np.random.default_rng(42))
        assert a.speaker_id == b.speaker_id
        assert a.duration_s == b.duration_s
        assert np.array_equal(a.phonemes, b.phonemes)
        for sa, sb in zip(a.levels, b.levels):
            assert sa == sb

    def test_lengths_match_level_length(self, tiny_corpus, tiny_spec):
        hs = tiny_spec.hierarchy()
        for utt in tiny_corpus[:40]:
            for level, seq in enumerate(utt.levels, start=1):
                assert len(seq) == level_length(utt.duration_s, hs, level)

    def test_fixed_duration_gives_paper_rate_lengths(self):
        spec = SynthSpec(
            phoneme_vocab=8, vocab_size=16, num_speakers=2, num_levels=3,
            factors=(4, 2, 1), finest_rate_hz=86.13, fine_noise=0.1,
            duration_rule=(0.0, 1.0, 0.0), seed=1, min_phonemes=4, max_phonemes=8,
        )
        utt = gen_utterance(spec, np.random.default_rng(0))
        assert utt.duration_s == 1.0
        assert [len(s) for s in utt.levels] == [22, 44, 87]

    def test_noise_free_law_is_deterministic_expansion(self):
        spec = replace(TINY_SPEC, fine_noise=0.0)
        law = law_for(spec)
        hs = spec.hierarchy()
        utt = gen_utterance(spec, np.random.default_rng(3))
        for level in (1, 2):
            clean = law.expand_clean(
                utt.levels[level - 1].tokens, utt.speaker_id, hs.window(level),
                len(utt.levels[level]),
            )
            assert np.array_equal(clean, utt.levels[level].tokens)

    def test_noise_rate_matches_spec(self):
        spec = replace(TINY_SPEC, fine_noise=0.2, min_phonemes=6, max_phonemes=6)
        law = law_for(spec)
        hs = spec.hierarchy()
        hits = 0
        total = 0
        for utt in gen_corpus(spec, 150):
            clean = law.expand_clean(
                utt.levels[1].tokens, utt.speaker_id, hs.window(2), len(utt.levels[2])
            )
            hits += (utt.levels[2].tokens != clean).sum()
            total += len(clean)
        # a resampled token keeps its value with probability 1/V
        expect = 0.2 * (1 - 1 / spec.vocab_size)
        assert hits / total == pytest.approx(expect, abs=0.01)

    def test_subposition_zero_is_identity(self, tiny_spec):
        law = law_for(tiny_spec)
        v = tiny_spec.vocab_size
        assert np.array_equal(law.expansion[:, :, 0], np.tile(np.arange(v)[:, None], (1, law.expansion.shape[1])))

    def test_other_subpositions_are_permutations(self, tiny_spec):
        law = law_for(tiny_spec)
        v = tiny_spec.vocab_size
        for spk in range(tiny_spec.num_speakers):
            for sub in range(1, law.expansion.shape[2]):
                assert sorted(law.expansion[:, spk, sub].tolist()) == list(range(v))


class TestOracles:
    def test_point_mass_at_zero_noise(self, tiny_spec):
        spec = replace(tiny_spec, fine_noise=0.0)
        utt = gen_utterance(spec, np.random.default_rng(5))
        dist = oracle_fine_distribution(utt.levels[0], utt.speaker_id, spec, fine_len=len(utt.levels[1]))
        assert np.allclose(dist.max(axis=1), 1.0)
        assert np.allclose(dist.sum(axis=1), 1.0)

    def test_uniform_at_full_noise(self, tiny_spec):
        spec = replace(tiny_spec, fine_noise=1.0)
        utt = gen_utterance(spec, np.random.default_rng(5))
        dist = oracle_fine_distribution(utt.levels[0], utt.speaker_id, spec, fine_len=len(utt.levels[1]))
        assert np.allclose(dist, 1.0 / spec.vocab_size)

    def test_top_probability_value(self):
        spec = SynthSpec(
            phoneme_vocab=4, vocab_size=8, num_speakers=1, num_levels=2,
            factors=(2, 1), finest_rate_hz=20.0, fine_noise=0.2,
            duration_rule=(0.1, 0.2, 0.0), seed=3, min_phonemes=3, max_phonemes=5,
        )
        utt = gen_utterance(spec, np.random.default_rng(1))
        dist = oracle_fine_distribution(utt.levels[0], utt.speaker_id, spec, fine_len=len(utt.levels[1]))
        assert dist.max(axis=1) == pytest.approx(0.825)

    def test_rows_normalize(self, tiny_spec):
        utt = gen_utterance(tiny_spec, np.random.default_rng(6))
        dist = oracle_fine_distribution(utt.levels[1], utt.speaker_id, tiny_spec, fine_len=len(utt.levels[2]))
        assert np.allclose(dist.sum(axis=1), 1.0)

    def test_entropy_floor_matches_numeric_entropy(self, tiny_spec):
        utt = gen_utterance(tiny_spec, np.random.default_rng(7))
        dist = oracle_fine_distribution(utt.levels[0], utt.speaker_id, tiny_spec, fine_len=len(utt.levels[1]))
        numeric = -(dist * np.log(dist)).sum(axis=1)
        floor = bayes_entropy_floor(tiny_spec.fine_noise, tiny_spec.vocab_size)
        assert np.allclose(numeric, floor, atol=1e-12)

    def test_entropy_floor_edges(self):
        assert bayes_entropy_floor(0.0, 32) == 0.0
        assert bayes_entropy_floor(1.0, 32) == pytest.approx(math.log(32))

    def test_map_expansion_is_argmax(self, tiny_spec):
        utt = gen_utterance(tiny_spec, np.random.default_rng(8))
        dist = oracle_fine_distribution(utt.levels[0], utt.speaker_id, tiny_spec, fine_len=len(utt.levels[1]))
        mapped = bayes_map_expansion(utt.levels[0], utt.speaker_id, tiny_spec, fine_len=len(utt.levels[1]))
        assert np.array_equal(dist.argmax(axis=1), mapped)

    def test_ter_reference_expands_coarse_chain(self, tiny_spec):
        utt = gen_utterance(tiny_spec, np.random.default_rng(9))
        ref = ter_reference(utt, tiny_spec)
        assert len(ref) == len(utt.levels[-1])
        direct = bayes_map_expansion(
            utt.levels[-2], utt.speaker_id, tiny_spec, fine_len=len(utt.levels[-1])
        )
        assert np.array_equal(ref, direct)

    def test_marginal_entropy_exceeds_conditional_floor(self, tiny_corpus, tiny_spec):
        # without coarse conditioning the fine-token distribution is much wider
        counts = np.zeros(tiny_spec.vocab_size)
        for utt in tiny_corpus:
            counts += np.bincount(utt.levels[2].tokens, minlength=tiny_spec.vocab_size)
        p = counts / counts.sum()
        marginal = float(-(p[p > 0] * np.log(p[p > 0])).sum())
        floor = bayes_entropy_floor(tiny_spec.fine_noise, tiny_spec.vocab_size)
        assert marginal > floor + 0.5

    def test_bayes_floor_is_a_floor_for_empirical_nll(self, tiny_spec):
        # mean NLL of the true conditional approaches the closed-form entropy
        spec = replace(tiny_spec, min_phonemes=6, max_phonemes=6)
        total, count = 0.0, 0
        for utt in gen_corpus(spec, 250):
            dist = oracle_fine_distribution(
                utt.levels[1], utt.speaker_id, spec, fine_len=len(utt.levels[2])
            )
            total += -np.log(dist[np.arange(len(utt.levels[2])), utt.levels[2].tokens]).sum()
            count += len(utt.levels[2])
        floor = bayes_entropy_floor(spec.fine_noise, spec.vocab_size)
        assert total / count == pytest.approx(floor, abs=0.05)
        assert total / count >= floor - 0.05


class TestSpeakerVectors:
    def test_deterministic_and_unit_norm(self):
        a = speaker_vector(3, 16)
        b = speaker_vector(3, 16)
        assert np.array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        assert not np.allclose(speaker_vector(4, 16), a)


class TestSplit:
    def test_fractions(self):
        names = [f"u{i:06d}" for i in range(10_000)]
        counts = {"train": 0, "dev": 0, "test": 0}
        for name in names:
            counts[split_of(name)] += 1
        assert counts["train"] / 10_000 == pytest.approx(0.8, abs=0.01)
        assert counts["dev"] / 10_000 == pytest.approx(0.1, abs=0.01)
        assert counts["test"] / 10_000 == pytest.approx(0.1, abs=0.01)

    def test_seed_independent(self):
        assert split_of("u000123") == split_of("u000123")


class TestCorpusIO:
    def test_roundtrip(self, tmp_path, tiny_spec):
        ds = write_corpus(tiny_spec, 60, tmp_path / "c")
        back = read_corpus(tmp_path / "c")
        assert back.spec == tiny_spec
        for split in ("train", "dev", "test"):
            orig, loaded = ds.split(split), back.split(split)
            assert len(orig) == len(loaded)
            for a, b in zip(orig, loaded):
                assert a.utt_id == b.utt_id
                assert a.speaker_id == b.speaker_id
                assert a.duration_s == b.duration_s
                assert np.array_equal(a.phonemes, b.phonemes)
                for sa, sb in zip(a.levels, b.levels):
                    assert sa == sb

    def test_rerun_byte_identical(self, tmp_path, tiny_spec):
        write_corpus(tiny_spec, 40, tmp_path / "a")
        write_corpus(tiny_spec, 40, tmp_path / "b")
        for name in ("train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_out_of_range_token_names_line(self, tmp_path, tiny_spec):
        ds = write_corpus(tiny_spec, 30, tmp_path / "c")
        path = tmp_path / "c" / "train.jsonl"
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["levels"][2][0] = tiny_spec.vocab_size + 5
        lines[1] = json.dumps(rec, sort_keys=True)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as err:
            read_corpus(tmp_path / "c")
        assert err.value.line == 2
        assert "vocab" in str(err.value)

    def test_malformed_json_names_line(self, tmp_path, tiny_spec):
        write_corpus(tiny_spec, 30, tmp_path / "c")
        path = tmp_path / "c" / "dev.jsonl"
        content = path.read_text().splitlines()
        content.insert(1, "{not json")
        path.write_text("\n".join(content) + "\n")
        with pytest.raises(ParseError) as err:
            read_corpus(tmp_path / "c")
        assert err.value.line == 2


class TestProjection:
    def test_project_levels(self, tiny_corpus):
        utt = tiny_corpus[0]
        two = project_levels(utt, 2)
        assert len(two.levels) == 2
        assert two.levels[0].level == 1 and two.levels[1].level == 2
        assert two.levels[0] .rate_hz == utt.levels[1].rate_hz
        assert np.array_equal(two.levels[1].tokens, utt.levels[2].tokens)

    def test_project_hierarchy(self, tiny_spec):
        hs = tiny_spec.hierarchy()
        two = project_hierarchy(hs, 2)
        assert two.num_levels == 2
        assert two.decimation_factors == (2, 1)
        assert two.finest_rate_hz == hs.finest_rate_hz
        with pytest.raises(InvalidArgument):
            project_hierarchy(hs, 4)
