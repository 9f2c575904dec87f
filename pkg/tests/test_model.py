import math

import numpy as np
import pytest

from conftest import tiny_model_config
from codm.errors import InvalidArgument, StateError
from codm.masking import MaskState
from codm.model import (
    ConditioningBundle,
    Model,
    ModelConfig,
    adaln_modulate,
    input_layout,
    pack_batch,
    param_count,
)
from codm.training import masked_nll_and_grad


def closed_form_param_count(cfg: ModelConfig) -> int:
    d, s, f = cfg.hidden_dim, cfg.speaker_dim, cfg.ffn_mult * cfg.hidden_dim
    embeddings = (
        (cfg.vocab_size + 2) * d      # tokens + [MASK] + null-prev
        + (cfg.phoneme_vocab + 1) * d  # phonemes + null-phoneme
        + cfg.max_seq_len * d
        + (cfg.num_levels + 1) * d
        + s                            # null speaker vector
    )
    per_layer = 4 * d * d + 2 * d * f + 2 * (2 * (s * d + d))
    final = 2 * (s * d + d) + d * cfg.vocab_size
    return embeddings + cfg.num_layers * per_layer + final


def simple_bundle(cfg, level=1, n_ph=3, rng=None, prev_len=None):
    rng = rng or np.random.default_rng(0)
    prev = None
    if level > 1:
        prev = rng.integers(0, cfg.vocab_size, size=prev_len or 4)
    return ConditioningBundle(
        level=level,
        phonemes=rng.integers(0, cfg.phoneme_vocab, size=n_ph),
        speaker=rng.standard_normal(cfg.speaker_dim),
        prev_tokens=prev,
    )


class TestInputLayout:
    def test_level1_length(self):
        cfg = tiny_model_config()
        cond = simple_bundle(cfg, level=1, n_ph=5)
        canvas = MaskState.fully_masked(22)
        _, total = input_layout(canvas, cond, cfg)
        assert total == 27

    def test_level2_length(self):
        cfg = tiny_model_config()
        cond = simple_bundle(cfg, level=2, n_ph=5, prev_len=22)
        canvas = MaskState.fully_masked(44)
        _, total = input_layout(canvas, cond, cfg)
        assert total == 71

    def test_null_prev_is_single_slot(self):
        cfg = tiny_model_config()
        cond = ConditioningBundle(
            level=2,
            phonemes=np.array([1, 2]),
            speaker=np.zeros(cfg.speaker_dim),
            prev_null=True,
        )
        segments, total = input_layout(MaskState.fully_masked(4), cond, cfg)
        names = [name for name, _, _ in segments]
        assert names == ["phonemes", "prev", "canvas"]
        assert len(segments[1][1]) == 1
        assert segments[1][1][0] == cfg.null_prev_id
        assert total == 7

    def test_level1_has_no_prev_segment(self):
        cfg = tiny_model_config()
        segments, _ = input_layout(
            MaskState.fully_masked(3), simple_bundle(cfg, level=1), cfg
        )
        assert [name for name, _, _ in segments] == ["phonemes", "canvas"]

    def test_overlong_rejected(self):
        cfg = tiny_model_config(max_seq_len=16)
        cond = simple_bundle(cfg, level=1, n_ph=4)
        with pytest.raises(InvalidArgument):
            input_layout(MaskState.fully_masked(20), cond, cfg)


class TestParamCount:
    def test_matches_closed_form(self):
        for cfg in (
            tiny_model_config(),
            tiny_model_config(num_levels=1),
            ModelConfig(
                num_layers=4, hidden_dim=128, num_heads=4, vocab_size=32,
                phoneme_vocab=16, num_levels=3, max_seq_len=160, speaker_dim=16,
                ffn_mult=2,
            ),
        ):
            assert param_count(cfg) == closed_form_param_count(cfg)
            model = Model(cfg, rng=np.random.default_rng(0))
            assert sum(p.size for p in model.params.values()) == param_count(cfg)

    def test_doubling_layers_doubles_block_params(self):
        cfg0 = tiny_model_config(num_layers=1)
        cfg1 = tiny_model_config(num_layers=2)
        cfg2 = tiny_model_config(num_layers=4)
        per_layer = param_count(cfg1) - param_count(cfg0)
        assert param_count(cfg2) - param_count(cfg1) == 2 * per_layer


class TestAdalnModulate:
    def test_zero_weights_reduce_to_layernorm(self, rng):
        hidden = rng.standard_normal((5, 8))
        speaker = rng.standard_normal(3)
        wz = np.zeros((3, 8))
        bz = np.zeros(8)
        out = adaln_modulate(hidden, speaker, wz, bz, wz, bz)
        mu = hidden.mean(axis=1, keepdims=True)
        var = hidden.var(axis=1, keepdims=True)
        expect = (hidden - mu) / np.sqrt(var + 1e-5)
        assert np.allclose(out, expect, atol=1e-6)

    def test_constant_row_normalizes_to_shift(self, rng):
        hidden = np.full((2, 8), 3.7)
        speaker = rng.standard_normal(3)
        w_gamma = rng.standard_normal((3, 8)) * 0.1
        b_gamma = np.zeros(8)
        w_beta = rng.standard_normal((3, 8)) * 0.1
        b_beta = np.zeros(8)
        out = adaln_modulate(hidden, speaker, w_gamma, b_gamma, w_beta, b_beta)
        # constant rows normalize to zero, so only the shift survives
        assert np.allclose(out, np.tile(speaker @ w_beta, (2, 1)), atol=1e-6)

    def test_speaker_changes_output(self, rng):
        hidden = rng.standard_normal((4, 8))
        w_gamma = rng.standard_normal((3, 8)) * 0.5
        b_gamma = rng.standard_normal(8) * 0.1
        w_beta = rng.standard_normal((3, 8)) * 0.5
        b_beta = rng.standard_normal(8) * 0.1
        out1 = adaln_modulate(hidden, np.array([1.0, 0.0, 0.0]), w_gamma, b_gamma, w_beta, b_beta)
        out2 = adaln_modulate(hidden, np.array([0.0, 1.0, 0.0]), w_gamma, b_gamma, w_beta, b_beta)
        assert not np.allclose(out1, out2)

    def test_dim_mismatch_rejected(self, rng):
        with pytest.raises(InvalidArgument):
            adaln_modulate(
                rng.standard_normal((2, 8)), rng.standard_normal(4),
                np.zeros((3, 8)), np.zeros(8), np.zeros((3, 8)), np.zeros(8),
            )


class TestForward:
    def test_deterministic(self, tiny_model, rng):
        cfg = tiny_model.cfg
        cond = simple_bundle(cfg, level=2, rng=rng)
        canvas = MaskState.from_tokens(
            rng.integers(0, cfg.vocab_size, size=6), rng.random(6) < 0.5
        )
        a = tiny_model.forward(canvas, cond)
        b = tiny_model.forward(canvas, cond)
        assert np.array_equal(a, b)
        assert a.shape == (6, cfg.vocab_size)

    def test_untrained_entropy_near_uniform(self, tiny_model, rng):
        cfg = tiny_model.cfg
        cond = simple_bundle(cfg, level=1, rng=rng)
        logits = tiny_model.forward(MaskState.fully_masked(12), cond).astype(np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        entropy = -(p * np.log(p)).sum(axis=1)
        assert np.all(np.abs(entropy - math.log(cfg.vocab_size)) < 0.5)

    def test_permutation_equivariance_with_zero_positions(self, rng):
        cfg = tiny_model_config()
        model = Model(cfg, rng=np.random.default_rng(3))
        model.params["emb.pos"][:] = 0.0
        cond = simple_bundle(cfg, level=1, rng=rng)
        tokens = rng.integers(0, cfg.vocab_size, size=6)
        masked = np.array([True, False, False, True, False, False])
        canvas = MaskState.from_tokens(tokens, masked)
        base = model.forward(canvas, cond)
        # swap two unmasked canvas positions (1 and 4)
        tokens2 = tokens.copy()
        tokens2[1], tokens2[4] = tokens2[4], tokens2[1]
        swapped = model.forward(MaskState.from_tokens(tokens2, masked), cond)
        perm = np.arange(6)
        perm[1], perm[4] = 4, 1
        assert np.allclose(swapped, base[perm], atol=1e-5)

    def test_attention_is_bidirectional(self, tiny_model, rng):
        cfg = tiny_model.cfg
        cond = simple_bundle(cfg, level=1, rng=rng)
        tokens = rng.integers(0, cfg.vocab_size, size=8)
        masked = np.zeros(8, dtype=bool)
        masked[0] = True
        base = tiny_model.forward(MaskState.from_tokens(tokens, masked), cond)
        tokens2 = tokens.copy()
        tokens2[7] = (tokens2[7] + 1) % cfg.vocab_size
        changed = tiny_model.forward(MaskState.from_tokens(tokens2, masked), cond)
        assert not np.allclose(base[0], changed[0])

    def test_uninitialized_model_raises(self):
        model = Model(tiny_model_config())
        with pytest.raises(StateError):
            model.forward(MaskState.fully_masked(3), simple_bundle(tiny_model_config()))

    def test_speaker_dim_checked(self, tiny_model):
        cfg = tiny_model.cfg
        cond = ConditioningBundle(
            level=1, phonemes=np.array([0, 1]), speaker=np.zeros(cfg.speaker_dim + 1)
        )
        with pytest.raises(InvalidArgument):
            pack_batch([(cond, MaskState.fully_masked(2))], cfg)


def build_loss_case(cfg, model, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    gts = []
    masks = []
    for level, n in ((2, 7), (1, 5)):
        cond = simple_bundle(cfg, level=level, rng=rng)
        gt = rng.integers(0, cfg.vocab_size, size=n)
        mask = np.zeros(n, dtype=bool)
        mask[rng.choice(n, size=max(1, n // 2), replace=False)] = True
        items.append((cond, MaskState.from_tokens(gt, mask)))
        gts.append(gt)
        masks.append(mask)
    packed = pack_batch(items, cfg)
    targets = np.full((packed.batch, packed.width), -1, dtype=np.int64)
    loss_mask = np.zeros((packed.batch, packed.width), dtype=bool)
    for i, (start, length) in enumerate(packed.canvas_slices):
        targets[i, start : start + length] = gts[i]
        loss_mask[i, start : start + length] = masks[i]
    return packed, targets, loss_mask


class TestGradients:
    def test_analytic_matches_finite_differences(self):
        cfg = tiny_model_config(
            num_layers=2, hidden_dim=8, num_heads=2, vocab_size=6, phoneme_vocab=5,
            max_seq_len=48, speaker_dim=3, dtype="float64",
        )
        model = Model(cfg, rng=np.random.default_rng(0))
        packed, targets, loss_mask = build_loss_case(cfg, model)

        logits, cache = model.forward_packed(packed, want_cache=True)
        _, dlogits = masked_nll_and_grad(logits, targets, loss_mask)
        grads = model.backward_packed(cache, dlogits)

        def loss_fn():
            lg = model.forward_packed(packed)
            return masked_nll_and_grad(lg, targets, loss_mask)[0]

        h = 1e-4
        check_rng = np.random.default_rng(99)
        names = sorted(model.params)
        checked = 0
        worst = 0.0
        while checked < 120:
            name = names[int(check_rng.integers(0, len(names)))]
            flat = model.params[name].reshape(-1)
            k = int(check_rng.integers(0, flat.size))
            orig = flat[k]
            flat[k] = orig + h
            lp = loss_fn()
            flat[k] = orig - h
            lm = loss_fn()
            flat[k] = orig
            numeric = (lp - lm) / (2 * h)
            analytic = grads[name].reshape(-1)[k]
            denom = max(abs(numeric), abs(analytic), 1.0)
            rel = abs(numeric - analytic) / denom
            worst = max(worst, rel)
            assert rel <= 1e-3, (name, k, numeric, analytic)
            checked += 1
        assert checked >= 100

    def test_null_embeddings_receive_gradient(self):
        cfg = tiny_model_config(dtype="float64")
        model = Model(cfg, rng=np.random.default_rng(1))
        rng = np.random.default_rng(2)
        cond = ConditioningBundle(
            level=2,
            phonemes=None,
            speaker=rng.standard_normal(cfg.speaker_dim),
            phoneme_null=True,
            prev_null=True,
        )
        n = 6
        gt = rng.integers(0, cfg.vocab_size, size=n)
        mask = np.ones(n, dtype=bool)
        packed = pack_batch([(cond, MaskState.from_tokens(gt, mask))], cfg)
        targets = np.full((1, packed.width), -1, dtype=np.int64)
        loss_mask = np.zeros((1, packed.width), dtype=bool)
        start, length = packed.canvas_slices[0]
        targets[0, start : start + length] = gt
        loss_mask[0, start : start + length] = mask
        logits, cache = model.forward_packed(packed, want_cache=True)
        _, dlogits = masked_nll_and_grad(logits, targets, loss_mask)
        grads = model.backward_packed(cache, dlogits)
        assert np.abs(grads["emb.ph"][cfg.null_phoneme_id]).max() > 0
        assert np.abs(grads["emb.tok"][cfg.null_prev_id]).max() > 0

    def test_null_speaker_gradient_when_used(self):
        cfg = tiny_model_config(dtype="float64")
        model = Model(cfg, rng=np.random.default_rng(1))
        rng = np.random.default_rng(2)
        # adaLN projections start at zero; give them mass so the speaker path is live
        for name in model.params:
            if ".adaln" in name and (name.endswith(".wg") or name.endswith(".wb")):
                model.params[name][:] = rng.standard_normal(model.params[name].shape) * 0.1
        cond = ConditioningBundle(
            level=1, phonemes=rng.integers(0, cfg.phoneme_vocab, 3), speaker_null=True
        )
        gt = rng.integers(0, cfg.vocab_size, size=4)
        packed = pack_batch([(cond, MaskState.from_tokens(gt, np.ones(4, bool)))], cfg)
        targets = np.full((1, packed.width), -1, dtype=np.int64)
        loss_mask = np.zeros((1, packed.width), dtype=bool)
        start, length = packed.canvas_slices[0]
        targets[0, start : start + length] = gt
        loss_mask[0, start : start + length] = True
        logits, cache = model.forward_packed(packed, want_cache=True)
        _, dlogits = masked_nll_and_grad(logits, targets, loss_mask)
        grads = model.backward_packed(cache, dlogits)
        assert np.abs(grads["emb.null_spk"]).max() > 0
