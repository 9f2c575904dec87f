"""Multi-level masked-token training loop.

Each step samples one temporal level for the whole batch (biased toward the
finer levels), masks every target sequence through the cosine schedule,
corrupts the previous-level conditioning tokens, applies classifier-free
guidance dropout (transcript and coarse conditioning nulled jointly, speaker
kept), and takes one decoupled-weight-decay Adam step on the mean negative
log-likelihood of the masked tokens.  The learning rate warms up linearly
and then follows a cosine decay to zero.

All randomness flows through a single generator in a fixed order (level,
batch indices, then per utterance: mask, dropout draw, corruption), so a
seeded run is bit-reproducible and a checkpoint restores mid-run state
exactly, including the rng.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .checkpoint import (
    MODEL_MAGIC,
    read_container,
    rng_state_from_json,
    rng_state_to_json,
    write_container,
)
from .corpus import speaker_vector
from .errors import ConfigError, InvalidArgument, NumericalError
from .fileio import atomic_write
from .hierarchy import TokenSequence
from .masking import MaskState, corrupt_condition, sample_training_mask
from .model import ConditioningBundle, Model, ModelConfig, pack_batch

ADAM_EPS = 1e-8
METRICS_HEADER = "step,level,loss,lr,masked_fraction"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    lr_peak: float = 1e-3
    warmup_steps: int = 500
    total_steps: int = 20000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.05
    level_probs: tuple = (0.2, 0.3, 0.5)
    cfg_dropout: float = 0.1
    condition_corruption: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "level_probs", tuple(float(p) for p in self.level_probs))
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not self.lr_peak > 0:
            raise InvalidArgument("lr_peak must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise InvalidArgument("need 0 <= warmup_steps < total_steps")
        if abs(sum(self.level_probs) - 1.0) > 1e-9:
            raise InvalidArgument(f"level_probs must sum to 1, got {sum(self.level_probs)}")
        if any(p < 0 for p in self.level_probs):
            raise InvalidArgument("level_probs must be nonnegative")
        for name in ("cfg_dropout", "condition_corruption"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgument(f"{name} must be in [0, 1]")


@dataclass
class TrainRecord:
    step: int
    level: int
    loss: float
    lr: float
    masked_fraction: float


def default_level_probs(num_levels: int) -> tuple:
    """Finer levels get more probability; the 3-level case is (0.2, 0.3, 0.5)."""
    base = (0.2, 0.3, 0.5)
    if num_levels <= 3:
        tail = base[3 - num_levels :]
        total = sum(tail)
        return tuple(p / total for p in tail)
    raw = tuple(float(l) for l in range(1, num_levels + 1))
    return tuple(p / sum(raw) for p in raw)


def masked_nll(logits: np.ndarray, targets, mask) -> float:
    """Mean negative log-likelihood of the masked positions of one grid."""
    logits = np.asarray(logits, dtype=np.float64)
    if isinstance(targets, TokenSequence):
        targets = targets.tokens
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or len(logits) != len(targets) or len(targets) != len(mask):
        raise InvalidArgument("logits, targets, and mask lengths must agree")
    if not mask.any():
        raise InvalidArgument("at least one position must be masked")
    lp = nn.log_softmax(logits[mask], axis=-1)
    return float(-lp[np.arange(mask.sum()), targets[mask]].mean())


def masked_nll_and_grad(logits: np.ndarray, targets: np.ndarray, loss_mask: np.ndarray):
    """Batched masked NLL plus d(loss)/d(logits); unmasked rows get zero gradient."""
    if not loss_mask.any():
        raise InvalidArgument("at least one position must be masked")
    v = logits.shape[-1]
    flat_logits = logits.reshape(-1, v)
    rows = np.flatnonzero(loss_mask.ravel())
    sel = flat_logits[rows]
    tgt = targets.ravel()[rows]
    lp = nn.log_softmax(sel, axis=-1)
    loss = float(-lp[np.arange(len(rows)), tgt].mean())
    dsel = np.exp(lp)
    dsel[np.arange(len(rows)), tgt] -= 1.0
    dsel /= len(rows)
    dlogits = np.zeros_like(flat_logits)
    dlogits[rows] = dsel
    return loss, dlogits.reshape(logits.shape)


def sample_level(level_probs, rng: np.random.Generator) -> int:
    """Categorical draw over levels; returns a 1-indexed level."""
    probs = np.asarray(level_probs, dtype=np.float64)
    if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidArgument(f"level_probs must be a distribution, got {level_probs}")
    u = rng.random()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1)) + 1


def apply_cfg_dropout(cond: ConditioningBundle, p: float, rng: np.random.Generator) -> ConditioningBundle:
    """With probability p, null the transcript and coarse conditioning jointly.

    The speaker conditioning is never dropped.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument(f"dropout probability must be in [0, 1], got {p}")
    if rng.random() >= p:
        return cond
    return ConditioningBundle(
        level=cond.level,
        phonemes=None,
        speaker=cond.speaker,
        prev_tokens=None,
        phoneme_null=True,
        prev_null=cond.level > 1,
        speaker_null=cond.speaker_null,
    )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Piecewise schedule: linear 0 -> lr_peak over warmup, cosine to 0 at total_steps."""
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_peak
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


class Trainer:
    """Single-writer training loop over a corpus already projected to model levels."""

    def __init__(self, model: Model, train_utts: list, cfg: TrainConfig,
                 rng: np.random.Generator | None = None):
        if not train_utts:
            raise InvalidArgument("training set is empty")
        num_levels = len(cfg.level_probs)
        if num_levels > model.cfg.num_levels:
            raise InvalidArgument("more level_probs than model levels")
        for utt in train_utts:
            if len(utt.levels) < num_levels:
                raise InvalidArgument(
                    f"utterance {utt.utt_id} provides {len(utt.levels)} levels, need {num_levels}"
                )
        model._require_params()
        self.model = model
        self.utts = train_utts
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.adam_m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.adam_v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.step_count = 0
        self.records: list[TrainRecord] = []

    @property
    def num_levels(self) -> int:
        return len(self.cfg.level_probs)

    def _build_batch(self, level: int, indices):
        cfg = self.cfg
        vocab = self.model.cfg.vocab_size
        sdim = self.model.cfg.speaker_dim
        items = []
        raw = []
        for j in indices:
            utt = self.utts[j]
            seq = utt.levels[level - 1]
            mask = sample_training_mask(len(seq), self.rng)
            canvas = MaskState.from_tokens(seq.tokens, mask)
            dropped = self.rng.random() < cfg.cfg_dropout
            prev = None
            if level > 1 and not dropped:
                prev = corrupt_condition(
                    utt.levels[level - 2], cfg.condition_corruption, vocab, self.rng
                ).tokens
            bundle = ConditioningBundle(
                level=level,
                phonemes=None if dropped else utt.phonemes,
                speaker=speaker_vector(utt.speaker_id, sdim),
                prev_tokens=prev,
                phoneme_null=dropped,
                prev_null=dropped and level > 1,
            )
            items.append((bundle, canvas))
            raw.append((seq.tokens, mask))
        packed = pack_batch(items, self.model.cfg)
        targets = np.full((packed.batch, packed.width), -1, dtype=np.int64)
        loss_mask = np.zeros((packed.batch, packed.width), dtype=bool)
        for i, ((start, length), (tokens, mask)) in enumerate(zip(packed.canvas_slices, raw)):
            targets[i, start : start + length] = tokens
            loss_mask[i, start : start + length] = mask
        return packed, targets, loss_mask

    def step(self) -> TrainRecord:
        cfg = self.cfg
        level = sample_level(cfg.level_probs, self.rng)
        indices = self.rng.integers(0, len(self.utts), size=cfg.batch_size)
        packed, targets, loss_mask = self._build_batch(level, indices)
        logits, cache = self.model.forward_packed(packed, want_cache=True)
        loss, dlogits = masked_nll_and_grad(logits, targets, loss_mask)
        t = self.step_count + 1
        lr = lr_at(t, cfg)
        masked_fraction = float(loss_mask.sum() / packed.canvas_mask.sum())
        record = TrainRecord(step=t, level=level, loss=loss, lr=lr, masked_fraction=masked_fraction)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {t}", record=record)
        grads = self.model.backward_packed(cache, dlogits)
        nn.adamw_step(
            self.model.params, grads, self.adam_m, self.adam_v, t,
            lr, cfg.adam_beta1, cfg.adam_beta2, ADAM_EPS, cfg.weight_decay,
        )
        self.step_count = t
        self.records.append(record)
        return record

    def run(self, out_dir: str | None = None, checkpoint_every: int = 2000,
            log_every: int = 0) -> list[TrainRecord]:
        """Train to cfg.total_steps, flushing metrics/checkpoints along the way."""
        while self.step_count < self.cfg.total_steps:
            record = self.step()
            if log_every and record.step % log_every == 0:
                print(
                    f"step {record.step:>6d}  level {record.level}  "
                    f"loss {record.loss:.4f}  lr {record.lr:.2e}"
                )
            if out_dir and (record.step % checkpoint_every == 0 or record.step == self.cfg.total_steps):
                self.save_checkpoint(os.path.join(out_dir, "checkpoint.codm"))
                self.write_metrics(os.path.join(out_dir, "metrics.csv"))
        return self.records

    def write_metrics(self, path) -> None:
        lines = [METRICS_HEADER]
        for r in self.records:
            lines.append(f"{r.step},{r.level},{r.loss!r},{r.lr!r},{r.masked_fraction!r}")
        atomic_write(path, "\n".join(lines) + "\n")

    def save_checkpoint(self, path) -> None:
        tensors = {}
        for name, arr in self.model.params.items():
            tensors["param." + name] = arr
            tensors["adam_m." + name] = self.adam_m[name]
            tensors["adam_v." + name] = self.adam_v[name]
        extra = {
            "step": self.step_count,
            "rng_state": rng_state_to_json(self.rng),
            "train_config": asdict(self.cfg),
            "records_tail": [asdict(r) for r in self.records[-1:]],
        }
        write_container(path, MODEL_MAGIC, asdict(self.model.cfg), tensors, extra)

    @classmethod
    def restore(cls, path, train_utts: list, metrics_path: str | None = None) -> "Trainer":
        """Rebuild a trainer mid-run; parameters, moments, step, and rng are exact."""
        config, tensors, extra = read_container(path, MODEL_MAGIC)
        mcfg = model_config_from_dict(config)
        params = {k[len("param.") :]: v for k, v in tensors.items() if k.startswith("param.")}
        model = Model(mcfg, params=params)
        tcfg_raw = dict(extra["train_config"])
        tcfg_raw["level_probs"] = tuple(tcfg_raw["level_probs"])
        tcfg = TrainConfig(**tcfg_raw)
        trainer = cls(model, train_utts, tcfg, rng=rng_state_from_json(extra["rng_state"]))
        for name in model.params:
            trainer.adam_m[name] = np.asarray(tensors["adam_m." + name], dtype=mcfg.np_dtype)
            trainer.adam_v[name] = np.asarray(tensors["adam_v." + name], dtype=mcfg.np_dtype)
        trainer.step_count = int(extra["step"])
        if metrics_path and os.path.exists(metrics_path):
            trainer.records = read_metrics(metrics_path, up_to_step=trainer.step_count)
        return trainer


def read_metrics(path, up_to_step: int | None = None) -> list[TrainRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != METRICS_HEADER:
            raise ConfigError(f"unexpected metrics header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            step_s, level_s, loss_s, lr_s, mf_s = line.split(",")
            rec = TrainRecord(
                step=int(step_s), level=int(level_s), loss=float(loss_s),
                lr=float(lr_s), masked_fraction=float(mf_s),
            )
            if up_to_step is None or rec.step <= up_to_step:
                records.append(rec)
    return records


def model_config_from_dict(config: dict) -> ModelConfig:
    try:
        return ModelConfig(**config)
    except TypeError as exc:
        raise ConfigError(f"bad model config in checkpoint: {exc}") from exc


def save_model(model: Model, path) -> None:
    """Model-only checkpoint (no optimizer state)."""
    model._require_params()
    tensors = {"param." + name: arr for name, arr in model.params.items()}
    write_container(path, MODEL_MAGIC, asdict(model.cfg), tensors, {})


def load_model(path, expect_config: ModelConfig | None = None) -> Model:
    """Load a model; with ``expect_config``, mismatches name the first differing field."""
    config, tensors, _ = read_container(path, MODEL_MAGIC)
    mcfg = model_config_from_dict(config)
    if expect_config is not None:
        for name in expect_config.__dataclass_fields__:
            got, want = getattr(mcfg, name), getattr(expect_config, name)
            if got != want:
                raise ConfigError(
                    f"checkpoint config mismatch: field {name!r} is {got!r}, expected {want!r}"
                )
    params = {k[len("param.") :]: v for k, v in tensors.items() if k.startswith("param.")}
    return Model(mcfg, params=params)
