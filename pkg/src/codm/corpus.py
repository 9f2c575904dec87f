"""Deterministic synthetic corpus with a known coarse-to-fine generative law.

Each utterance is built as follows:

* a phoneme sequence is drawn from a seeded first-order Markov chain,
* total duration follows a linear rule in the phoneme count plus jitter,
* level-1 tokens come from a phoneme-conditioned deterministic automaton
  (a first-order Markov source with point-mass transitions), where position
  i reads phoneme min(i // tokens_per_phoneme, n_phonemes - 1); the fixed
  consumption rate keeps the text-to-token alignment learnable,
* each finer level expands its parent through a fixed table
  E[coarse_token, speaker, sub_position] and then independently resamples
  every fine token uniformly with probability ``fine_noise``.

Sub-position 0 of the expansion is the identity, so a coarse token is (up to
the noise) the stride-subsample of its own expansion; the corpus hierarchy
therefore plays the role of an idealized decimated tokenizer.  Because the
law is conditionally independent given the parent level and speaker, the
optimal predictive distribution of a fine token is known in closed form,
which gives exact oracles for cross-entropy floors and map expansions.
"""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .errors import InvalidArgument, ParseError
from .fileio import atomic_write, write_json, read_json
from .hierarchy import HierarchySpec, TokenSequence, level_length

_LAW_SALT = 0xC0D_1A3
_UTT_SALT = 0xC0D_0177
_SPEAKER_SALT = 0xC0D_05BE


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic generative law."""

    phoneme_vocab: int = 16
    vocab_size: int = 32
    num_speakers: int = 4
    num_levels: int = 3
    factors: tuple = (4, 2, 1)
    finest_rate_hz: float = 86.13
    fine_noise: float = 0.15
    duration_rule: tuple = (0.08, 0.2, 0.02)  # slope s/phoneme, intercept s, jitter s
    seed: int = 0
    min_phonemes: int = 4
    max_phonemes: int = 10
    l1_tokens_per_phoneme: int = 2
    automaton_states: int = 8

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        object.__setattr__(self, "duration_rule", tuple(float(x) for x in self.duration_rule))
        if self.vocab_size < 4:
            raise InvalidArgument(f"vocab_size must be >= 4, got {self.vocab_size}")
        if not 0.0 <= self.fine_noise <= 1.0:
            raise InvalidArgument("fine_noise must be in [0, 1]")
        if self.phoneme_vocab < 2:
            raise InvalidArgument("phoneme_vocab must be >= 2")
        if self.num_speakers < 1:
            raise InvalidArgument("num_speakers must be >= 1")
        if not 1 <= self.min_phonemes <= self.max_phonemes:
            raise InvalidArgument("need 1 <= min_phonemes <= max_phonemes")
        if self.l1_tokens_per_phoneme < 1:
            raise InvalidArgument("l1_tokens_per_phoneme must be >= 1")
        if not 1 <= self.automaton_states <= self.vocab_size:
            raise InvalidArgument("automaton_states must be in [1, vocab_size]")
        spec = self.hierarchy()
        for level in range(1, self.num_levels):
            spec.window(level)  # raises if the factor ratio is fractional

    def hierarchy(self) -> HierarchySpec:
        return HierarchySpec(
            num_levels=self.num_levels,
            finest_rate_hz=self.finest_rate_hz,
            decimation_factors=self.factors,
            vocab_size=self.vocab_size,
            strategy="decimated",
        )


@dataclass
class SynthUtterance:
    utt_id: str
    phonemes: np.ndarray
    speaker_id: int
    duration_s: float
    levels: list

    def __post_init__(self):
        self.phonemes = np.asarray(self.phonemes, dtype=np.int64)

    @property
    def finest(self) -> TokenSequence:
        return self.levels[-1]


class SynthLaw:
    """The seeded tables behind a SynthSpec: phoneme chain, automaton, expansion."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence([_LAW_SALT, spec.seed]))
        p, v, s = spec.phoneme_vocab, spec.vocab_size, spec.num_speakers
        self.phoneme_init = rng.dirichlet(np.full(p, 0.8))
        self.phoneme_trans = rng.dirichlet(np.full(p, 0.8), size=p)
        self.automaton_init = rng.integers(0, v, size=p)
        # transitions key on a compressed state (prev mod automaton_states) so
        # the lookup table stays small enough for the shared decoder to saturate
        self.automaton_trans = rng.integers(0, v, size=(spec.automaton_states, p))
        hspec = spec.hierarchy()
        windows = [hspec.window(l) for l in range(1, spec.num_levels)] or [1]
        w = max(windows)
        self.expansion = np.empty((v, s, w), dtype=np.int64)
        self.expansion[:, :, 0] = np.arange(v)[:, None]
        for spk in range(s):
            for sub in range(1, w):
                self.expansion[:, spk, sub] = rng.permutation(v)

    def sample_phonemes(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty(n, dtype=np.int64)
        out[0] = _categorical(self.phoneme_init, rng)
        for i in range(1, n):
            out[i] = _categorical(self.phoneme_trans[out[i - 1]], rng)
        return out

    def level1_tokens(self, phonemes: np.ndarray, n1: int) -> np.ndarray:
        n_ph = len(phonemes)
        k = self.spec.l1_tokens_per_phoneme
        aligned = phonemes[np.minimum(np.arange(n1) // k, n_ph - 1)]
        states = self.spec.automaton_states
        out = np.empty(n1, dtype=np.int64)
        out[0] = self.automaton_init[aligned[0]]
        for i in range(1, n1):
            out[i] = self.automaton_trans[out[i - 1] % states, aligned[i]]
        return out

    def expand_clean(self, coarse: np.ndarray, speaker_id: int, window: int, fine_len: int) -> np.ndarray:
        j = np.arange(fine_len)
        return self.expansion[coarse[j // window], speaker_id, j % window]

    def expand_noisy(
        self, coarse: np.ndarray, speaker_id: int, window: int, fine_len: int, rng: np.random.Generator
    ) -> np.ndarray:
        fine = self.expand_clean(coarse, speaker_id, window, fine_len)
        hit = rng.random(fine_len) < self.spec.fine_noise
        fine[hit] = rng.integers(0, self.spec.vocab_size, size=int(hit.sum()))
        return fine


def _categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, len(probs) - 1))


@functools.lru_cache(maxsize=16)
def _law_cache(spec: SynthSpec) -> SynthLaw:
    return SynthLaw(spec)


def law_for(spec: SynthSpec) -> SynthLaw:
    return _law_cache(spec)


def speaker_vector(speaker_id: int, dim: int) -> np.ndarray:
    """Frozen unit-norm embedding for a speaker id (the speaker-encoder stand-in)."""
    rng = np.random.default_rng(np.random.SeedSequence([_SPEAKER_SALT, int(speaker_id), int(dim)]))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def gen_utterance(spec: SynthSpec, rng: np.random.Generator, utt_id: str = "u0") -> SynthUtterance:
    """Draw one utterance from the law, all levels coarsest to finest."""
    law = law_for(spec)
    hspec = spec.hierarchy()
    n_ph = int(rng.integers(spec.min_phonemes, spec.max_phonemes + 1))
    phonemes = law.sample_phonemes(n_ph, rng)
    speaker_id = int(rng.integers(0, spec.num_speakers))
    slope, intercept, jitter = spec.duration_rule
    duration = slope * n_ph + intercept + jitter * (2.0 * rng.random() - 1.0)
    duration = max(duration, 0.05)

    lengths = [level_length(duration, hspec, l) for l in range(1, spec.num_levels + 1)]
    tokens = [law.level1_tokens(phonemes, lengths[0])]
    for level in range(1, spec.num_levels):
        w = hspec.window(level)
        tokens.append(law.expand_noisy(tokens[-1], speaker_id, w, lengths[level], rng))
    levels = [
        TokenSequence(level=l + 1, rate_hz=hspec.rate(l + 1), tokens=t)
        for l, t in enumerate(tokens)
    ]
    return SynthUtterance(
        utt_id=utt_id, phonemes=phonemes, speaker_id=speaker_id, duration_s=duration, levels=levels
    )


def gen_corpus(spec: SynthSpec, n_utts: int) -> list[SynthUtterance]:
    """Generate ``n_utts`` utterances with per-utterance derived rng streams."""
    out = []
    for i in range(n_utts):
        rng = np.random.default_rng(np.random.SeedSequence([_UTT_SALT, spec.seed, i]))
        out.append(gen_utterance(spec, rng, utt_id=f"u{i:06d}"))
    return out


def oracle_fine_distribution(
    coarse: TokenSequence, speaker_id: int, spec: SynthSpec, fine_len: int | None = None
) -> np.ndarray:
    """Exact per-position predictive distribution of the next-finer level.

    Probability (1 - fine_noise) + fine_noise/V on the expansion target and
    fine_noise/V elsewhere; this is the Bayes-optimal prediction of level
    l+1 given level l and the speaker.
    """
    hspec = spec.hierarchy()
    if coarse.level >= spec.num_levels:
        raise InvalidArgument("coarse sequence is already the finest level")
    w = hspec.window(coarse.level)
    if fine_len is None:
        fine_len = w * len(coarse)
    law = law_for(spec)
    targets = law.expand_clean(coarse.tokens, speaker_id, w, fine_len)
    eps, v = spec.fine_noise, spec.vocab_size
    dist = np.full((fine_len, v), eps / v, dtype=np.float64)
    dist[np.arange(fine_len), targets] += 1.0 - eps
    return dist


def bayes_entropy_floor(fine_noise: float, vocab_size: int) -> float:
    """Closed-form conditional entropy of a fine token given its parent."""
    eps, v = fine_noise, vocab_size
    p = (1.0 - eps) + eps / v
    q = eps / v
    h = 0.0
    if p > 0:
        h -= p * math.log(p)
    if q > 0:
        h -= (v - 1) * q * math.log(q)
    return h


def bayes_map_expansion(
    coarse: TokenSequence, speaker_id: int, spec: SynthSpec, fine_len: int | None = None
) -> np.ndarray:
    """Most likely next-finer sequence given a coarse sequence (noise-free expansion)."""
    hspec = spec.hierarchy()
    w = hspec.window(coarse.level)
    if fine_len is None:
        fine_len = w * len(coarse)
    return law_for(spec).expand_clean(coarse.tokens, speaker_id, w, fine_len)


def ter_reference(utt: SynthUtterance, spec: SynthSpec) -> np.ndarray:
    """Bayes-map expansion of the utterance's ground-truth coarse chain."""
    if spec.num_levels == 1:
        return utt.levels[0].tokens.copy()
    return bayes_map_expansion(
        utt.levels[-2], utt.speaker_id, spec, fine_len=len(utt.levels[-1])
    )


def split_of(utt_id: str) -> str:
    """Deterministic, seed-independent 80/10/10 split by utterance-id hash."""
    digest = hashlib.sha1(utt_id.encode("utf-8")).digest()
    bucket = int.from_bytes(digest[:8], "big") % 1000
    if bucket < 800:
        return "train"
    if bucket < 900:
        return "dev"
    return "test"


@dataclass
class CorpusDataset:
    spec: SynthSpec
    train: list
    dev: list
    test: list

    @property
    def law(self) -> SynthLaw:
        return law_for(self.spec)

    def split(self, name: str) -> list:
        return {"train": self.train, "dev": self.dev, "test": self.test}[name]

    @property
    def all_utts(self) -> list:
        return self.train + self.dev + self.test


def _utt_to_json(utt: SynthUtterance) -> str:
    return json.dumps(
        {
            "utt_id": utt.utt_id,
            "phonemes": [int(p) for p in utt.phonemes],
            "speaker_id": utt.speaker_id,
            "duration_s": utt.duration_s,
            "levels": [[int(t) for t in seq.tokens] for seq in utt.levels],
        },
        sort_keys=True,
    )


def write_corpus(spec: SynthSpec, n_utts: int, out_dir: str | os.PathLike) -> CorpusDataset:
    """Generate, split, and write train/dev/test JSONL files plus a manifest."""
    out_dir = os.fspath(out_dir)
    utts = gen_corpus(spec, n_utts)
    splits = {"train": [], "dev": [], "test": []}
    for utt in utts:
        splits[split_of(utt.utt_id)].append(utt)
    for name, items in splits.items():
        body = "\n".join(_utt_to_json(u) for u in items)
        atomic_write(os.path.join(out_dir, f"{name}.jsonl"), body + ("\n" if body else ""))
    hspec = spec.hierarchy()
    manifest = {
        "spec": asdict(spec),
        "counts": {name: len(items) for name, items in splits.items()},
        "total": n_utts,
        "rates_hz": [hspec.rate(l) for l in range(1, spec.num_levels + 1)],
        "bayes_entropy_floor_nats": bayes_entropy_floor(spec.fine_noise, spec.vocab_size),
    }
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return CorpusDataset(spec=spec, **splits)


def spec_from_manifest(manifest: dict) -> SynthSpec:
    fields = dict(manifest["spec"])
    fields["factors"] = tuple(fields["factors"])
    fields["duration_rule"] = tuple(fields["duration_rule"])
    return SynthSpec(**fields)


def read_corpus(path: str | os.PathLike) -> CorpusDataset:
    """Read a corpus directory back; validates ids, vocab bounds, and lengths."""
    path = os.fspath(path)
    manifest = read_json(os.path.join(path, "manifest.json"))
    spec = spec_from_manifest(manifest)
    hspec = spec.hierarchy()
    splits = {}
    for name in ("train", "dev", "test"):
        fname = os.path.join(path, f"{name}.jsonl")
        items = []
        with open(fname, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"bad JSON: {exc}", path=fname, line=lineno) from exc
                items.append(_utt_from_record(rec, spec, hspec, fname, lineno))
        splits[name] = items
    return CorpusDataset(spec=spec, **splits)


def _utt_from_record(rec, spec, hspec, fname, lineno) -> SynthUtterance:
    try:
        phonemes = np.asarray(rec["phonemes"], dtype=np.int64)
        levels_raw = rec["levels"]
        utt = SynthUtterance(
            utt_id=rec["utt_id"],
            phonemes=phonemes,
            speaker_id=int(rec["speaker_id"]),
            duration_s=float(rec["duration_s"]),
            levels=[
                TokenSequence(level=l + 1, rate_hz=hspec.rate(l + 1), tokens=np.asarray(t, dtype=np.int64))
                for l, t in enumerate(levels_raw)
            ],
        )
    except (KeyError, TypeError, ValueError, InvalidArgument) as exc:
        raise ParseError(f"bad utterance record: {exc}", path=fname, line=lineno) from exc
    if len(utt.levels) != spec.num_levels:
        raise ParseError(
            f"expected {spec.num_levels} levels, got {len(utt.levels)}", path=fname, line=lineno
        )
    if (utt.phonemes < 0).any() or (utt.phonemes >= spec.phoneme_vocab).any():
        raise ParseError("phoneme id out of range", path=fname, line=lineno)
    for seq in utt.levels:
        if (seq.tokens >= spec.vocab_size).any():
            raise ParseError(
                f"token id >= vocab_size {spec.vocab_size} at level {seq.level}",
                path=fname,
                line=lineno,
            )
        if len(seq) != level_length(utt.duration_s, hspec, seq.level):
            raise ParseError(
                f"level {seq.level} length {len(seq)} does not match duration",
                path=fname,
                line=lineno,
            )
    return utt


def project_levels(utt: SynthUtterance, keep: int) -> SynthUtterance:
    """Keep only the finest ``keep`` levels, renumbered 1..keep."""
    if not 1 <= keep <= len(utt.levels):
        raise InvalidArgument(f"keep must be in [1, {len(utt.levels)}], got {keep}")
    kept = utt.levels[len(utt.levels) - keep :]
    levels = [
        TokenSequence(level=i + 1, rate_hz=seq.rate_hz, tokens=seq.tokens)
        for i, seq in enumerate(kept)
    ]
    return SynthUtterance(
        utt_id=utt.utt_id,
        phonemes=utt.phonemes,
        speaker_id=utt.speaker_id,
        duration_s=utt.duration_s,
        levels=levels,
    )


def project_hierarchy(hspec: HierarchySpec, keep: int) -> HierarchySpec:
    if not 1 <= keep <= hspec.num_levels:
        raise InvalidArgument(f"keep must be in [1, {hspec.num_levels}], got {keep}")
    return HierarchySpec(
        num_levels=keep,
        finest_rate_hz=hspec.finest_rate_hz,
        decimation_factors=hspec.decimation_factors[hspec.num_levels - keep :],
        vocab_size=hspec.vocab_size,
        strategy=hspec.strategy,
    )
