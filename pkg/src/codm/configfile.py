"""Run configuration: a flat key = value schema shared by the CLI and config files.

Precedence is defaults < config file < command-line flags.  Every key is
validated against the schema below; unknown keys are rejected with the full
offending list so typos fail loudly.  The effective configuration is dumped
next to every command's outputs for reproducibility.
"""

from __future__ import annotations

import os

from .errors import ConfigError
from .fileio import format_kv, read_kv_file


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> tuple:
    return tuple(int(x) for x in str(s).split(",") if x != "")


def _float_list(s: str) -> tuple:
    return tuple(float(x) for x in str(s).split(",") if x != "")


def _pair(s: str) -> tuple:
    """Parse 'start:end' ramps like --guidance 3:0.75."""
    parts = str(s).split(":")
    if len(parts) != 2:
        raise ValueError(f"expected 'start:end', got {s!r}")
    return float(parts[0]), float(parts[1])


# key -> (parser, default)
SCHEMA = {
    "corpus.n": (int, 5000),
    "corpus.seed": (int, 31415),
    "corpus.levels": (int, 3),
    "corpus.factors": (_int_list, (4, 2, 1)),
    "corpus.vocab": (int, 32),
    "corpus.phoneme_vocab": (int, 16),
    "corpus.speakers": (int, 4),
    "corpus.fine_noise": (float, 0.15),
    "corpus.finest_rate": (float, 86.13),
    "corpus.min_phonemes": (int, 4),
    "corpus.max_phonemes": (int, 10),
    "corpus.duration_slope": (float, 0.08),
    "corpus.duration_intercept": (float, 0.2),
    "corpus.duration_jitter": (float, 0.02),
    "model.layers": (int, 4),
    "model.dim": (int, 128),
    "model.heads": (int, 4),
    "model.ffn_mult": (int, 2),
    "model.speaker_dim": (int, 16),
    "model.max_seq_len": (int, 160),
    "train.steps": (int, 20000),
    "train.batch_size": (int, 8),
    "train.lr": (float, 1e-3),
    "train.warmup": (int, 500),
    "train.level_probs": (_float_list, ()),  # empty = derive from level count
    "train.cfg_dropout": (float, 0.1),
    "train.corruption": (float, 0.1),
    "train.weight_decay": (float, 0.05),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.95),
    "train.seed": (int, 0),
    "train.levels": (int, 0),  # 0 = use the corpus level count
    "train.strategy": (str, "decimated"),
    "train.checkpoint_every": (int, 2000),
    "sampler.steps": (_int_list, (20,)),  # one value broadcasts to all levels
    "sampler.guidance": (_pair, (3.0, 0.75)),
    "sampler.noise": (_pair, (3.0, 0.0)),
    "sampler.temperature": (float, 1.0),
    "sampler.seed": (int, 0),
    "eval.split": (str, "test"),
    "eval.ter_utts": (int, 64),
    "eval.ce_positions": (int, 10500),
    "ablate.levels": (_int_list, (1, 2, 3)),
    "ablate.strategies": (str, "decimated"),
    "ablate.seeds": (int, 3),
}


def load_run_config(config_path: str | None, overrides: dict) -> dict:
    """Merge defaults, an optional config file, and CLI overrides."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        file_values = read_kv_file(config_path)
        _apply(values, file_values, source=config_path)
    _apply(values, overrides, source="command line")
    return values


def _apply(values: dict, updates: dict, source: str) -> None:
    unknown = [k for k in updates if k not in SCHEMA]
    if unknown:
        raise ConfigError(f"unknown config keys from {source}: {', '.join(sorted(unknown))}")
    for key, raw in updates.items():
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(raw) if isinstance(raw, str) else raw
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key} from {source}: {raw!r} ({exc})") from exc


def dump_effective(values: dict) -> str:
    printable = {}
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            sep = ":" if SCHEMA[key][0] is _pair else ","
            printable[key] = sep.join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
        else:
            printable[key] = v
    return format_kv(printable)
