"""Iterative multi-level decoding with guidance ramp and annealed logit noise.

Each level starts from a fully masked canvas whose length is set by the
utterance duration.  Every step runs the decoder twice (conditional and
null-condition), combines the two logit grids with the current guidance
weight, adds zero-mean Gaussian noise whose variance anneals linearly to
zero, samples a token per masked position from the tempered softmax, and
fixes the highest-confidence samples down to the cosine-schedule count.
Finished levels condition the next one through the sequence prefix; the
finest level is returned last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidArgument, StateError
from .hierarchy import HierarchySpec, TokenSequence, level_length
from .masking import MaskState, masked_count_at, select_unmask
from .model import ConditioningBundle, Model, pack_batch


@dataclass(frozen=True)
class SamplerConfig:
    steps_per_level: tuple = (20, 20, 20)
    guidance_start: float = 3.0
    guidance_end: float = 0.75
    noise_var_start: float = 3.0
    noise_var_end: float = 0.0
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "steps_per_level", tuple(int(t) for t in self.steps_per_level))
        if any(t < 1 for t in self.steps_per_level):
            raise InvalidArgument("every steps_per_level entry must be >= 1")
        if not self.noise_var_start >= self.noise_var_end >= 0.0:
            raise InvalidArgument("need noise_var_start >= noise_var_end >= 0")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")

    def steps_for(self, level: int) -> int:
        if not 1 <= level <= len(self.steps_per_level):
            raise InvalidArgument(f"no step count configured for level {level}")
        return self.steps_per_level[level - 1]


def _ramp(step: int, total: int, start: float, end: float) -> float:
    if not 1 <= step <= total:
        raise InvalidArgument(f"step must be in [1, {total}], got {step}")
    if total == 1:
        return start
    return start + (end - start) * (step - 1) / (total - 1)


def guidance_at(step: int, total: int, w_start: float, w_end: float) -> float:
    """Linear guidance ramp from w_start at step 1 to w_end at the final step."""
    return _ramp(step, total, w_start, w_end)


def noise_variance_at(step: int, total: int, v_start: float, v_end: float) -> float:
    """Linear decay of the logit-noise variance across decode steps."""
    return _ramp(step, total, v_start, v_end)


def cfg_combine(cond_logits: np.ndarray, uncond_logits: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance: uncond + w * (cond - uncond).

    The w = 1 and w = 0 endpoints return the conditional/unconditional grid
    exactly (no floating-point residue).
    """
    cond_logits = np.asarray(cond_logits)
    uncond_logits = np.asarray(uncond_logits)
    if cond_logits.shape != uncond_logits.shape:
        raise InvalidArgument(
            f"logit shapes differ: {cond_logits.shape} vs {uncond_logits.shape}"
        )
    if w == 1.0:
        return cond_logits.copy()
    if w == 0.0:
        return uncond_logits.copy()
    return uncond_logits + w * (cond_logits - uncond_logits)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator):
    """One categorical draw per row; returns (tokens, their probabilities)."""
    cum = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cum[:, -1]
    tokens = (cum < u[:, None]).sum(axis=1)
    np.clip(tokens, 0, probs.shape[1] - 1, out=tokens)
    return tokens, probs[np.arange(len(probs)), tokens]


def decode_level_batch(
    model: Model,
    conds: list,
    canvas_lens: list,
    scfg: SamplerConfig,
    rng: np.random.Generator,
    rates_hz: list | None = None,
    diag_sinks: list | None = None,
) -> list[TokenSequence]:
    """Decode a batch of canvases at one level in lockstep.

    The conditional and null-condition passes run as one packed forward per
    step; per-utterance noise and sampling draws happen in fixed batch
    order, so a seeded rng reproduces the outputs exactly.
    """
    if model is None or not model.initialized:
        raise StateError("decode requires an initialized model")
    if len(conds) != len(canvas_lens):
        raise InvalidArgument("need one canvas length per conditioning bundle")
    n_utts = len(conds)
    level = conds[0].level
    total = scfg.steps_for(level)
    if any(c.level != level for c in conds):
        raise InvalidArgument("all bundles in one batch must share a level")
    if any(n < 1 for n in canvas_lens):
        raise InvalidArgument("canvas lengths must be >= 1")
    states = [MaskState.fully_masked(n) for n in canvas_lens]
    null_conds = [c.as_null_condition() for c in conds]

    for t in range(1, total + 1):
        items = [(c, s) for c, s in zip(conds, states)] + [
            (c, s) for c, s in zip(null_conds, states)
        ]
        packed = pack_batch(items, model.cfg)
        logits = model.forward_packed(packed)
        w = guidance_at(t, total, scfg.guidance_start, scfg.guidance_end)
        var = noise_variance_at(t, total, scfg.noise_var_start, scfg.noise_var_end)
        sigma = math.sqrt(var)
        for i in range(n_utts):
            n = canvas_lens[i]
            cs, cl = packed.canvas_slices[i]
            us, ul = packed.canvas_slices[n_utts + i]
            grid_c = logits[i, cs : cs + cl, :].astype(np.float64)
            grid_u = logits[n_utts + i, us : us + ul, :].astype(np.float64)
            guided = cfg_combine(grid_c, grid_u, w)
            guided = guided + rng.standard_normal(guided.shape) * sigma
            probs = nn.softmax(guided / scfg.temperature, axis=-1)
            state = states[i]
            if state.n_masked > 0:
                masked_pos = np.flatnonzero(state.masked)
                tokens, conf = _sample_rows(probs[masked_pos], rng)
                target = masked_count_at(t, total, n)
                states[i] = select_unmask(conf, state, target, tokens)
            if diag_sinks is not None:
                diag_sinks[i].append(
                    {
                        "level": level,
                        "step": t,
                        "guidance": w,
                        "noise_var": var,
                        "masked_count": states[i].n_masked,
                    }
                )
    out = []
    for i, state in enumerate(states):
        rate = rates_hz[i] if rates_hz is not None else 1.0
        out.append(TokenSequence(level=level, rate_hz=rate, tokens=state.tokens.copy()))
    return out


def decode_level(
    model: Model,
    cond: ConditioningBundle,
    canvas_len: int,
    scfg: SamplerConfig,
    rng: np.random.Generator,
    rate_hz: float = 1.0,
    diag: list | None = None,
) -> TokenSequence:
    """Decode one fully masked canvas; exactly T forward pairs, n total fixings."""
    sinks = [diag] if diag is not None else None
    return decode_level_batch(
        model, [cond], [canvas_len], scfg, rng, rates_hz=[rate_hz], diag_sinks=sinks
    )[0]


def generate_batch(
    model: Model,
    phoneme_seqs: list,
    speakers: list,
    durations: list,
    scfg: SamplerConfig,
    hspec: HierarchySpec,
    rng: np.random.Generator,
    diag_sinks: list | None = None,
) -> list[list[TokenSequence]]:
    """Coarse-to-fine generation for a batch; returns per-utterance level lists."""
    n = len(phoneme_seqs)
    if not (n == len(speakers) == len(durations)):
        raise InvalidArgument("phonemes, speakers, and durations must align")
    if any(d is None or not d > 0 for d in durations):
        raise InvalidArgument("durations must be positive")
    outputs: list[list[TokenSequence]] = [[] for _ in range(n)]
    for level in range(1, hspec.num_levels + 1):
        conds = []
        for i in range(n):
            prev = outputs[i][-1].tokens if level > 1 else None
            conds.append(
                ConditioningBundle(
                    level=level,
                    phonemes=phoneme_seqs[i],
                    speaker=speakers[i],
                    prev_tokens=prev,
                )
            )
        lens = [level_length(durations[i], hspec, level) for i in range(n)]
        rates = [hspec.rate(level)] * n
        seqs = decode_level_batch(
            model, conds, lens, scfg, rng, rates_hz=rates, diag_sinks=diag_sinks
        )
        for i, seq in enumerate(seqs):
            outputs[i].append(seq)
    return outputs


def generate(
    model: Model,
    phonemes,
    speaker: np.ndarray,
    scfg: SamplerConfig,
    hspec: HierarchySpec,
    rng: np.random.Generator,
    duration_s: float | None = None,
    duration_model=None,
    diag: list | None = None,
) -> list[TokenSequence]:
    """Generate all levels for one utterance, coarsest first, finest last.

    Duration comes from the duration predictor when not given explicitly.
    """
    phonemes = np.asarray(phonemes, dtype=np.int64)
    if len(phonemes) == 0:
        raise InvalidArgument("phonemes must be non-empty")
    if duration_s is None:
        if duration_model is None:
            raise InvalidArgument("need duration_s or a duration_model")
        duration_s = duration_model.predict_duration(phonemes)
    sinks = [diag] if diag is not None else None
    return generate_batch(
        model, [phonemes], [speaker], [duration_s], scfg, hspec, rng, diag_sinks=sinks
    )[0]
