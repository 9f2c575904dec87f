"""Multi-rate token sequences and the coarse-token construction strategies.

A hierarchy has levels 1..L ordered coarse to fine: level L runs at the
finest token rate and every coarser level l is slower by its decimation
factor, so rate(l) = finest_rate / factor(l) and factor(L) = 1.  Coarse
levels can be built from a finest-level sequence three ways:

* ``decimated``      - stride-sample the finest token stream,
* ``extra_independent`` - mean-pool the finer level's code vectors over the
  factor-ratio window and re-quantize with a codebook trained per level,
* ``extra_shared``   - the same pooling, but one codebook serves every
  coarse level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, ParseError
from .fileio import atomic_write

STRATEGIES = ("decimated", "extra_independent", "extra_shared")


@dataclass
class TokenSequence:
    """One utterance's token stream at a single temporal level."""

    level: int
    rate_hz: float
    tokens: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or len(self.tokens) < 1:
            raise InvalidArgument("tokens must be a non-empty 1-d sequence")
        if self.level < 1:
            raise InvalidArgument(f"level must be >= 1, got {self.level}")
        if not self.rate_hz > 0:
            raise InvalidArgument(f"rate_hz must be positive, got {self.rate_hz}")
        if (self.tokens < 0).any():
            raise InvalidArgument("token ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return (
            self.level == other.level
            and self.rate_hz == other.rate_hz
            and np.array_equal(self.tokens, other.tokens)
        )


@dataclass(frozen=True)
class HierarchySpec:
    """Level count, per-level rates via decimation factors, vocabulary, strategy."""

    num_levels: int
    finest_rate_hz: float
    decimation_factors: tuple
    vocab_size: int
    strategy: str = "decimated"

    def __post_init__(self):
        object.__setattr__(self, "decimation_factors", tuple(int(f) for f in self.decimation_factors))
        if self.num_levels < 1:
            raise InvalidArgument(f"num_levels must be >= 1, got {self.num_levels}")
        if not self.finest_rate_hz > 0:
            raise InvalidArgument("finest_rate_hz must be positive")
        if self.vocab_size < 2:
            raise InvalidArgument(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.strategy not in STRATEGIES:
            raise InvalidArgument(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        f = self.decimation_factors
        if len(f) != self.num_levels:
            raise InvalidArgument("need one decimation factor per level")
        if f[-1] != 1:
            raise InvalidArgument("finest level must have decimation factor 1")
        if any(a <= b for a, b in zip(f, f[1:])):
            raise InvalidArgument(f"decimation factors must be strictly decreasing, got {f}")
        if f[0] < 1:
            raise InvalidArgument("decimation factors must be >= 1")

    def factor(self, level: int) -> int:
        self._check_level(level)
        return self.decimation_factors[level - 1]

    def rate(self, level: int) -> float:
        return self.finest_rate_hz / self.factor(level)

    def window(self, level: int) -> int:
        """Integer pooling window between level ``level`` and ``level + 1``."""
        self._check_level(level)
        if level == self.num_levels:
            raise InvalidArgument("finest level has no child window")
        a, b = self.factor(level), self.factor(level + 1)
        if a % b != 0:
            raise InvalidArgument(f"factor ratio {a}/{b} is not an integer window")
        return a // b

    def _check_level(self, level: int) -> None:
        if not 1 <= level <= self.num_levels:
            raise InvalidArgument(f"level must be in [1, {self.num_levels}], got {level}")


@dataclass
class Codebook:
    """V code vectors plus usage counters for EMA training."""

    entries: np.ndarray
    usage_counts: np.ndarray = None
    ema_counts: np.ndarray = None
    ema_sums: np.ndarray = None
    unused_steps: np.ndarray = None

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2:
            raise InvalidArgument("entries must be a (V, dim) matrix")
        if not np.isfinite(self.entries).all():
            raise InvalidArgument("codebook entries must be finite")
        v = len(self.entries)
        if self.usage_counts is None:
            self.usage_counts = np.zeros(v, dtype=np.int64)
        if self.ema_counts is None:
            self.ema_counts = np.zeros(v, dtype=np.float64)
        if self.ema_sums is None:
            self.ema_sums = self.entries.copy()
        if self.unused_steps is None:
            self.unused_steps = np.zeros(v, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def lookup(self, tokens) -> np.ndarray:
        return self.entries[np.asarray(tokens, dtype=np.int64)]


def decimate(seq: TokenSequence, factor: int) -> TokenSequence:
    """Keep every ``factor``-th token starting at index 0."""
    if int(factor) != factor or factor < 1:
        raise InvalidArgument(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    return TokenSequence(
        level=max(seq.level - 1, 1),
        rate_hz=seq.rate_hz / factor,
        tokens=seq.tokens[::factor].copy(),
    )


def level_length(duration_s: float, spec: HierarchySpec, level: int) -> int:
    """Token count at ``level`` for an utterance of the given duration.

    Ceil at both steps (seconds -> finest tokens -> coarse tokens) so the
    result always matches the length of a stride-decimated finest sequence.
    """
    if not duration_s > 0:
        raise InvalidArgument(f"duration must be positive, got {duration_s}")
    finest = math.ceil(duration_s * spec.finest_rate_hz)
    return math.ceil(finest / spec.factor(level))


def quantize(
    frames: np.ndarray,
    codebook: Codebook,
    level: int = 1,
    rate_hz: float = 1.0,
) -> tuple[TokenSequence, np.ndarray]:
    """Nearest codebook entry per frame under squared Euclidean distance.

    Ties break toward the smallest entry index.  Returns the token sequence
    and the residual frames (frame minus selected entry).
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise InvalidArgument("frames must be a (n, dim) matrix")
    if frames.shape[1] != codebook.dim:
        raise InvalidArgument(
            f"frame dim {frames.shape[1]} does not match codebook dim {codebook.dim}"
        )
    # exact squared distances (not the expanded form) so ties are bit-stable
    d2 = ((frames[:, None, :] - codebook.entries[None, :, :]) ** 2).sum(axis=2)
    tokens = np.argmin(d2, axis=1)
    residuals = frames - codebook.entries[tokens]
    seq = TokenSequence(level=level, rate_hz=rate_hz, tokens=tokens)
    return seq, residuals


def mean_pool(frames: np.ndarray, window: int) -> np.ndarray:
    """Average consecutive windows; a trailing partial window averages what is left."""
    frames = np.asarray(frames, dtype=np.float64)
    if window < 1:
        raise InvalidArgument(f"window must be >= 1, got {window}")
    n = len(frames)
    out = np.empty((math.ceil(n / window), frames.shape[1]), dtype=np.float64)
    for j in range(len(out)):
        out[j] = frames[j * window : (j + 1) * window].mean(axis=0)
    return out


def build_hierarchy(
    finest: TokenSequence,
    spec: HierarchySpec,
    frames: np.ndarray | None = None,
    codebooks: list[Codebook] | None = None,
) -> list[TokenSequence]:
    """Construct all L levels from a finest-level sequence, coarsest first.

    ``decimated`` needs only the tokens.  The extra-quantizer strategies need
    ``frames`` (the finest level's code vectors) and one trained codebook per
    coarse level (``extra_shared`` may pass the same object L-1 times or a
    single-element list).
    """
    if len(finest) < 1:
        raise InvalidArgument("finest sequence must be non-empty")
    levels: list[TokenSequence] = [
        TokenSequence(level=spec.num_levels, rate_hz=spec.rate(spec.num_levels), tokens=finest.tokens.copy())
    ]
    if spec.num_levels == 1:
        return levels

    if spec.strategy == "decimated":
        for level in range(spec.num_levels - 1, 0, -1):
            f = spec.factor(level)
            levels.append(
                TokenSequence(level=level, rate_hz=spec.rate(level), tokens=finest.tokens[::f].copy())
            )
        return levels[::-1]

    if frames is None:
        raise InvalidArgument(f"strategy {spec.strategy!r} requires frames")
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) != len(finest):
        raise InvalidArgument("need one frame per finest token")
    if not codebooks:
        raise InvalidArgument(f"strategy {spec.strategy!r} requires trained codebooks")
    if len(codebooks) == 1:
        codebooks = list(codebooks) * (spec.num_levels - 1)
    if len(codebooks) != spec.num_levels - 1:
        raise InvalidArgument("need one codebook per coarse level")
    if spec.strategy == "extra_shared" and any(cb is not codebooks[0] for cb in codebooks):
        raise InvalidArgument("extra_shared requires a single shared codebook")

    rep = frames
    for level in range(spec.num_levels - 1, 0, -1):
        pooled = mean_pool(rep, spec.window(level))
        cb = codebooks[level - 1]
        seq, _ = quantize(pooled, cb, level=level, rate_hz=spec.rate(level))
        levels.append(seq)
        rep = cb.lookup(seq.tokens)
    return levels[::-1]


def train_codebook(
    vectors: np.ndarray,
    vocab_size: int,
    rng: np.random.Generator,
    passes: int = 4,
    batch_size: int = 1024,
    decay: float = 0.9,
    dead_steps: int = 256,
    eps: float = 1e-5,
) -> Codebook:
    """EMA k-means over a vector set, with dead-code reinit.

    Entries start from random data vectors; every batch updates EMA cluster
    sizes and sums, and any entry unused for ``dead_steps`` consecutive
    batches is reinitialized to a random vector from the current batch.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) < vocab_size:
        raise InvalidArgument("need at least vocab_size training vectors")
    init = rng.choice(len(vectors), size=vocab_size, replace=False)
    cb = Codebook(entries=vectors[init].copy())
    cb.ema_counts = np.ones(vocab_size, dtype=np.float64)
    cb.ema_sums = cb.entries.copy()

    for _ in range(passes):
        order = rng.permutation(len(vectors))
        for start in range(0, len(vectors), batch_size):
            batch = vectors[order[start : start + batch_size]]
            d2 = (
                (batch**2).sum(axis=1, keepdims=True)
                - 2.0 * batch @ cb.entries.T
                + (cb.entries**2).sum(axis=1)
            )
            assign = np.argmin(d2, axis=1)
            counts = np.bincount(assign, minlength=vocab_size).astype(np.float64)
            sums = np.zeros_like(cb.ema_sums)
            np.add.at(sums, assign, batch)
            cb.ema_counts = decay * cb.ema_counts + (1 - decay) * counts
            cb.ema_sums = decay * cb.ema_sums + (1 - decay) * sums
            cb.usage_counts += counts.astype(np.int64)
            cb.entries = cb.ema_sums / (cb.ema_counts + eps)[:, None]
            cb.unused_steps = np.where(counts > 0, 0, cb.unused_steps + 1)
            dead = cb.unused_steps >= dead_steps
            if dead.any():
                pick = rng.integers(0, len(batch), size=int(dead.sum()))
                cb.entries[dead] = batch[pick]
                cb.ema_sums[dead] = batch[pick]
                cb.ema_counts[dead] = 1.0
                cb.unused_steps[dead] = 0
    return cb


def write_token_file(path, entries) -> None:
    """Write ``utt_id<TAB>level<TAB>rate_hz<TAB>id,id,...`` lines (UTF-8, LF)."""
    lines = []
    for utt_id, seq in entries:
        ids = ",".join(str(int(t)) for t in seq.tokens)
        lines.append(f"{utt_id}\t{seq.level}\t{seq.rate_hz!r}\t{ids}")
    atomic_write(path, "\n".join(lines) + "\n")


def read_token_file(path) -> list[tuple[str, TokenSequence]]:
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", path=str(path), line=lineno)
            utt_id, level_s, rate_s, ids_s = parts
            try:
                level = int(level_s)
                rate = float(rate_s)
                tokens = np.array([int(t) for t in ids_s.split(",")], dtype=np.int64)
                seq = TokenSequence(level=level, rate_hz=rate, tokens=tokens)
            except (ValueError, InvalidArgument) as exc:
                raise ParseError(f"bad token record: {exc}", path=str(path), line=lineno) from exc
            out.append((utt_id, seq))
    return out
