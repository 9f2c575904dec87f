"""Mask-schedule machinery shared by training and iterative decoding.

The cosine schedule maps decode progress to the fraction of canvas positions
that are still masked.  Training draws a random progress value and masks that
fraction of a target sequence; decoding walks the schedule step by step,
fixing the highest-confidence sampled tokens at every step until nothing is
masked.  The count sequence is clamped so at least one token is revealed per
step, which guarantees a decode always terminates in exactly ``total_steps``
steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .hierarchy import TokenSequence


@dataclass
class ScheduleConfig:
    total_steps: int
    kind: str = "cosine"

    def __post_init__(self):
        if self.total_steps < 1:
            raise InvalidArgument(f"total_steps must be >= 1, got {self.total_steps}")
        if self.kind != "cosine":
            raise InvalidArgument(f"unsupported schedule kind {self.kind!r}")


@dataclass
class MaskState:
    """Per-position masked/fixed status of one decoding canvas.

    ``tokens`` holds a valid token id at every unmasked position; masked
    entries are kept at -1 so accidental reads fail loudly.
    """

    masked: np.ndarray
    tokens: np.ndarray
    step: int = 0

    @classmethod
    def fully_masked(cls, n: int) -> "MaskState":
        if n < 1:
            raise InvalidArgument(f"canvas length must be >= 1, got {n}")
        return cls(masked=np.ones(n, dtype=bool), tokens=np.full(n, -1, dtype=np.int64))

    @classmethod
    def from_tokens(cls, tokens, masked) -> "MaskState":
        tokens = np.asarray(tokens, dtype=np.int64).copy()
        masked = np.asarray(masked, dtype=bool).copy()
        if tokens.shape != masked.shape:
            raise InvalidArgument("tokens and masked must have the same length")
        tokens[masked] = -1
        return cls(masked=masked, tokens=tokens)

    def __len__(self) -> int:
        return len(self.masked)

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def complete(self) -> bool:
        return not self.masked.any()


def mask_ratio(progress: float) -> float:
    """Cosine schedule: fraction of positions masked at the given progress."""
    if not 0.0 <= progress <= 1.0:
        raise InvalidArgument(f"progress must be in [0, 1], got {progress}")
    return math.cos(progress * math.pi / 2.0)


def masked_count_at(step: int, total_steps: int, n: int) -> int:
    """Number of positions still masked after decode step ``step`` of ``total_steps``.

    floor(n * cos(pi/2 * step/T)), clamped to strictly decrease while positive
    so every step reveals at least one token; exactly 0 at the final step.
    """
    if total_steps < 1:
        raise InvalidArgument(f"total_steps must be >= 1, got {total_steps}")
    if not 1 <= step <= total_steps:
        raise InvalidArgument(f"step must be in [1, {total_steps}], got {step}")
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    count = n
    for t in range(1, step + 1):
        raw = math.floor(n * mask_ratio(t / total_steps))
        if count > 0:
            count = max(min(raw, count - 1), 0)
    if step == total_steps:
        count = 0
    return count


def sample_training_mask(n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one training mask: r ~ U(0,1], mask ceil(n * cos(r*pi/2)) positions."""
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    r = 1.0 - rng.random()
    k = math.ceil(n * mask_ratio(r))
    k = min(max(k, 1), n)
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=k, replace=False)] = True
    return mask


def select_unmask(
    confidences: np.ndarray,
    state: MaskState,
    target_masked: int,
    sampled_tokens: np.ndarray,
) -> MaskState:
    """Fix the highest-confidence masked positions so ``target_masked`` remain.

    Ties are broken toward the lower position index.  Previously fixed
    positions are never touched.
    """
    confidences = np.asarray(confidences, dtype=np.float64)
    sampled_tokens = np.asarray(sampled_tokens, dtype=np.int64)
    cur = state.n_masked
    if not 0 <= target_masked < cur:
        raise InvalidArgument(
            f"target_masked must be in [0, {cur - 1}], got {target_masked}"
        )
    if confidences.shape != (cur,) or sampled_tokens.shape != (cur,):
        raise InvalidArgument("need one confidence and one sampled token per masked position")
    masked_pos = np.flatnonzero(state.masked)
    # lexsort: primary key last -> sort by descending confidence, then position.
    order = np.lexsort((masked_pos, -confidences))
    take = order[: cur - target_masked]
    tokens = state.tokens.copy()
    masked = state.masked.copy()
    tokens[masked_pos[take]] = sampled_tokens[take]
    masked[masked_pos[take]] = False
    return MaskState(masked=masked, tokens=tokens, step=state.step + 1)


def corrupt_condition(
    seq: TokenSequence, rate: float, vocab_size: int, rng: np.random.Generator
) -> TokenSequence:
    """Independently replace each token with a uniform random id with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise InvalidArgument(f"rate must be in [0, 1], got {rate}")
    if vocab_size < 1:
        raise InvalidArgument(f"vocab_size must be >= 1, got {vocab_size}")
    tokens = seq.tokens.copy()
    hit = rng.random(len(tokens)) < rate
    tokens[hit] = rng.integers(0, vocab_size, size=int(hit.sum()))
    return TokenSequence(level=seq.level, rate_hz=seq.rate_hz, tokens=tokens)
