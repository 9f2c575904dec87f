"""Command-line entry points: corpus, train, generate, eval, ablate.

Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numerical
failure.  Every command accepts ``--config FILE`` (flat ``key = value``
lines) plus long-form flags that override it; the effective configuration is
dumped into the output directory.  ``COD_NUM_THREADS`` caps BLAS worker
threads when threadpoolctl is available.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import configfile
from .ablation import AblationJob, run_ablation
from .corpus import (
    SynthSpec,
    project_hierarchy,
    project_levels,
    read_corpus,
    speaker_vector,
    write_corpus,
)
from .duration import load_duration_model
from .errors import (
    ConfigError,
    FormatError,
    InvalidArgument,
    NumericalError,
    ParseError,
)
from .evaluation import config_fingerprint, evaluate_model
from .fileio import atomic_write, write_json
from .hierarchy import write_token_file
from .model import Model, ModelConfig
from .sampling import SamplerConfig, generate
from .training import (
    TrainConfig,
    Trainer,
    default_level_probs,
    load_model,
)

USAGE_ERROR, IO_ERROR, NUMERIC_ERROR = 1, 2, 3


def _limit_threads() -> None:
    cap = os.environ.get("COD_NUM_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(cap))
    except (ImportError, ValueError):
        pass


def _collect_overrides(args, mapping) -> dict:
    overrides = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _dump_config(values: dict, out_dir: str) -> None:
    atomic_write(os.path.join(out_dir, "run_config.txt"), configfile.dump_effective(values))


def _synth_spec(values: dict) -> SynthSpec:
    return SynthSpec(
        phoneme_vocab=values["corpus.phoneme_vocab"],
        vocab_size=values["corpus.vocab"],
        num_speakers=values["corpus.speakers"],
        num_levels=values["corpus.levels"],
        factors=values["corpus.factors"],
        finest_rate_hz=values["corpus.finest_rate"],
        fine_noise=values["corpus.fine_noise"],
        duration_rule=(
            values["corpus.duration_slope"],
            values["corpus.duration_intercept"],
            values["corpus.duration_jitter"],
        ),
        seed=values["corpus.seed"],
        min_phonemes=values["corpus.min_phonemes"],
        max_phonemes=values["corpus.max_phonemes"],
    )


def _model_config(values: dict, num_levels: int, spec: SynthSpec) -> ModelConfig:
    return ModelConfig(
        num_layers=values["model.layers"],
        hidden_dim=values["model.dim"],
        num_heads=values["model.heads"],
        vocab_size=spec.vocab_size,
        phoneme_vocab=spec.phoneme_vocab,
        num_levels=num_levels,
        max_seq_len=values["model.max_seq_len"],
        speaker_dim=values["model.speaker_dim"],
        ffn_mult=values["model.ffn_mult"],
    )


def _train_config(values: dict, num_levels: int, seed: int | None = None) -> TrainConfig:
    probs = values["train.level_probs"] or default_level_probs(num_levels)
    if len(probs) != num_levels:
        raise ConfigError(
            f"train.level_probs has {len(probs)} entries for {num_levels} levels"
        )
    return TrainConfig(
        batch_size=values["train.batch_size"],
        lr_peak=values["train.lr"],
        warmup_steps=values["train.warmup"],
        total_steps=values["train.steps"],
        adam_beta1=values["train.beta1"],
        adam_beta2=values["train.beta2"],
        weight_decay=values["train.weight_decay"],
        level_probs=probs,
        cfg_dropout=values["train.cfg_dropout"],
        condition_corruption=values["train.corruption"],
        seed=values["train.seed"] if seed is None else seed,
    )


def _sampler_config(values: dict, num_levels: int) -> SamplerConfig:
    steps = values["sampler.steps"]
    if len(steps) == 1:
        steps = steps * num_levels
    if len(steps) != num_levels:
        raise ConfigError(f"sampler.steps has {len(steps)} entries for {num_levels} levels")
    g0, g1 = values["sampler.guidance"]
    n0, n1 = values["sampler.noise"]
    return SamplerConfig(
        steps_per_level=steps,
        guidance_start=g0,
        guidance_end=g1,
        noise_var_start=n0,
        noise_var_end=n1,
        temperature=values["sampler.temperature"],
        seed=values["sampler.seed"],
    )


def cmd_corpus(args) -> int:
    overrides = _collect_overrides(
        args,
        {
            "n": "corpus.n",
            "seed": "corpus.seed",
            "levels": "corpus.levels",
            "factors": "corpus.factors",
            "vocab": "corpus.vocab",
            "phoneme_vocab": "corpus.phoneme_vocab",
            "speakers": "corpus.speakers",
            "fine_noise": "corpus.fine_noise",
            "finest_rate": "corpus.finest_rate",
            "min_phonemes": "corpus.min_phonemes",
            "max_phonemes": "corpus.max_phonemes",
        },
    )
    values = configfile.load_run_config(args.config, overrides)
    spec = _synth_spec(values)
    dataset = write_corpus(spec, values["corpus.n"], args.out)
    _dump_config(values, args.out)
    print(
        f"wrote corpus to {args.out}: train {len(dataset.train)}, "
        f"dev {len(dataset.dev)}, test {len(dataset.test)}"
    )
    return 0


def cmd_train(args) -> int:
    overrides = _collect_overrides(
        args,
        {
            "steps": "train.steps",
            "batch_size": "train.batch_size",
            "lr": "train.lr",
            "warmup": "train.warmup",
            "level_probs": "train.level_probs",
            "cfg_dropout": "train.cfg_dropout",
            "corruption": "train.corruption",
            "seed": "train.seed",
            "levels": "train.levels",
            "strategy": "train.strategy",
            "checkpoint_every": "train.checkpoint_every",
            "layers": "model.layers",
            "dim": "model.dim",
            "heads": "model.heads",
            "ffn_mult": "model.ffn_mult",
            "speaker_dim": "model.speaker_dim",
            "max_seq_len": "model.max_seq_len",
        },
    )
    values = configfile.load_run_config(args.config, overrides)
    dataset = read_corpus(args.corpus)
    spec = dataset.spec
    keep = values["train.levels"] or spec.num_levels
    if not 1 <= keep <= spec.num_levels:
        raise ConfigError(f"train.levels must be in [1, {spec.num_levels}], got {keep}")
    if values["train.strategy"] != "decimated":
        from .ablation import rebuild_dataset

        dataset = rebuild_dataset(dataset, values["train.strategy"], np.random.default_rng(spec.seed))
    train_utts = [project_levels(u, keep) for u in dataset.train]

    os.makedirs(args.out, exist_ok=True)
    _dump_config(values, args.out)
    ckpt = os.path.join(args.out, "checkpoint.codm")
    metrics = os.path.join(args.out, "metrics.csv")
    if args.resume and os.path.exists(ckpt):
        trainer = Trainer.restore(ckpt, train_utts, metrics_path=metrics)
        print(f"resumed from step {trainer.step_count}")
    else:
        mcfg = _model_config(values, keep, spec)
        tcfg = _train_config(values, keep)
        model = Model(mcfg, rng=np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0xC0D])))
        trainer = Trainer(model, train_utts, tcfg)
    trainer.run(
        out_dir=args.out,
        checkpoint_every=values["train.checkpoint_every"],
        log_every=args.log_every,
    )
    trainer.save_checkpoint(ckpt)
    trainer.write_metrics(metrics)
    print(f"trained to step {trainer.step_count}; checkpoint at {ckpt}")
    return 0


def _read_phoneme_file(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rows.append(np.array([int(t) for t in line.split()], dtype=np.int64))
            except ValueError as exc:
                raise ParseError(f"bad phoneme line: {exc}", path=path, line=lineno) from exc
    if not rows:
        raise InvalidArgument(f"no phoneme sequences in {path}")
    return rows


def _read_speaker_file(path, n):
    with open(path, "r", encoding="utf-8") as fh:
        ids = [int(line.strip()) for line in fh if line.strip()]
    if len(ids) != n:
        raise InvalidArgument(f"{path} has {len(ids)} speaker ids for {n} phoneme lines")
    return ids


def cmd_generate(args) -> int:
    overrides = _collect_overrides(
        args,
        {
            "steps": "sampler.steps",
            "guidance": "sampler.guidance",
            "noise": "sampler.noise",
            "temperature": "sampler.temperature",
            "seed": "sampler.seed",
        },
    )
    values = configfile.load_run_config(args.config, overrides)
    if not os.path.exists(args.checkpoint):
        raise FormatError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    cfg = model.cfg
    num_levels = cfg.num_levels
    scfg = _sampler_config(values, num_levels)
    # the decoder's hierarchy: rates recorded in the checkpoint's sibling corpus
    # are not required; factors come from --factors or the default 2x chain
    factors = args.factors or tuple(2 ** (num_levels - 1 - i) for i in range(num_levels))
    from .hierarchy import HierarchySpec

    hspec = HierarchySpec(
        num_levels=num_levels,
        finest_rate_hz=args.finest_rate,
        decimation_factors=factors,
        vocab_size=cfg.vocab_size,
        strategy="decimated",
    )
    phoneme_rows = _read_phoneme_file(args.phonemes)
    if args.speakers:
        speaker_ids = _read_speaker_file(args.speakers, len(phoneme_rows))
    else:
        speaker_ids = [args.speaker] * len(phoneme_rows)
    duration_model = None
    if args.duration is None:
        if not args.duration_checkpoint:
            raise ConfigError("need --duration or --duration-checkpoint")
        duration_model = load_duration_model(args.duration_checkpoint)

    os.makedirs(args.out, exist_ok=True)
    _dump_config(values, args.out)
    rng = np.random.default_rng(scfg.seed)
    token_lines = []
    diag_lines = []
    for i, (phonemes, speaker_id) in enumerate(zip(phoneme_rows, speaker_ids)):
        diag: list = []
        levels = generate(
            model,
            phonemes,
            speaker_vector(speaker_id, cfg.speaker_dim),
            scfg,
            hspec,
            rng,
            duration_s=args.duration,
            duration_model=duration_model,
            diag=diag,
        )
        utt_id = f"gen{i:04d}"
        for seq in levels:
            token_lines.append((utt_id, seq))
        for entry in diag:
            diag_lines.append(json.dumps({"utt_id": utt_id, **entry}, sort_keys=True))
    write_token_file(os.path.join(args.out, "tokens.txt"), token_lines)
    atomic_write(os.path.join(args.out, "diagnostics.jsonl"), "\n".join(diag_lines) + "\n")
    print(f"generated {len(phoneme_rows)} utterances into {args.out}")
    return 0


def cmd_eval(args) -> int:
    overrides = _collect_overrides(
        args,
        {
            "steps": "sampler.steps",
            "guidance": "sampler.guidance",
            "noise": "sampler.noise",
            "temperature": "sampler.temperature",
            "seed": "sampler.seed",
            "split": "eval.split",
            "ter_utts": "eval.ter_utts",
            "ce_positions": "eval.ce_positions",
            "strategy": "train.strategy",
        },
    )
    values = configfile.load_run_config(args.config, overrides)
    if not os.path.exists(args.checkpoint):
        raise FormatError(f"checkpoint not found: {args.checkpoint}")
    model = load_model(args.checkpoint)
    dataset = read_corpus(args.corpus)
    spec = dataset.spec
    keep = model.cfg.num_levels
    if values["train.strategy"] != "decimated":
        from .ablation import rebuild_dataset

        work = rebuild_dataset(dataset, values["train.strategy"], np.random.default_rng(spec.seed))
    else:
        work = dataset
    split = values["eval.split"]
    utts = [project_levels(u, keep) for u in work.split(split)]
    ref = dataset.split(split)
    scfg = _sampler_config(values, keep)
    hspec = project_hierarchy(spec.hierarchy(), keep)
    fingerprint = config_fingerprint(asdict(spec), asdict(model.cfg), asdict(scfg))
    report = evaluate_model(
        model,
        utts,
        ref[: values["eval.ter_utts"]],
        scfg,
        hspec,
        spec,
        seed=scfg.seed,
        ce_positions=values["eval.ce_positions"],
        fingerprint=fingerprint,
    )
    os.makedirs(args.out, exist_ok=True)
    _dump_config(values, args.out)
    write_json(os.path.join(args.out, "report.json"), report.to_json())
    lines = ["config,seed,level,cond_ce,ter"]
    for level in sorted(report.cond_ce):
        lines.append(
            f"eval,{scfg.seed},{level},{report.cond_ce[level]!r},{report.ter!r}"
        )
    atomic_write(os.path.join(args.out, "report.csv"), "\n".join(lines) + "\n")
    ce_str = {k: round(v, 4) for k, v in report.cond_ce.items()}
    print(f"ter {report.ter:.4f}; cond_ce {ce_str}")
    return 0


def cmd_ablate(args) -> int:
    overrides = _collect_overrides(
        args,
        {
            "levels": "ablate.levels",
            "strategies": "ablate.strategies",
            "seeds": "ablate.seeds",
            "steps": "train.steps",
            "batch_size": "train.batch_size",
            "lr": "train.lr",
            "warmup": "train.warmup",
            "ter_utts": "eval.ter_utts",
            "ce_positions": "eval.ce_positions",
        },
    )
    values = configfile.load_run_config(args.config, overrides)
    dataset = read_corpus(args.corpus)
    spec = dataset.spec
    strategies = [s.strip() for s in values["ablate.strategies"].split(",") if s.strip()]
    jobs = []
    for level in values["ablate.levels"]:
        for strategy in strategies:
            name = f"{strategy}_{level}lvl"
            jobs.append(AblationJob(name=name, levels=level, strategy=strategy))
    seeds = list(range(values["ablate.seeds"]))
    os.makedirs(args.out, exist_ok=True)
    _dump_config(values, args.out)

    def model_cfg_for(job):
        return _model_config(values, job.levels, spec)

    def train_cfg_for(job, seed):
        return _train_config(values, job.levels, seed=seed)

    raw, summary = run_ablation(
        dataset,
        jobs,
        seeds,
        args.out,
        model_cfg_for,
        train_cfg_for,
        _sampler_config(values, spec.num_levels),
        ter_utts=values["eval.ter_utts"],
        ce_positions=values["eval.ce_positions"],
        resume=not args.no_resume,
        log_every=args.log_every,
    )
    for row in summary:
        print(
            f"{row['config']}: mean_ter {row['mean_ter']:.4f} (+/- {row['std_ter']:.4f}) "
            f"mean_ce {row['mean_ce']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--factors")
    p.add_argument("--vocab", type=int)
    p.add_argument("--phoneme-vocab", dest="phoneme_vocab", type=int)
    p.add_argument("--speakers", type=int)
    p.add_argument("--fine-noise", dest="fine_noise", type=float)
    p.add_argument("--finest-rate", dest="finest_rate", type=float)
    p.add_argument("--min-phonemes", dest="min_phonemes", type=int)
    p.add_argument("--max-phonemes", dest="max_phonemes", type=int)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train the masked-token decoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--level-probs", dest="level_probs")
    p.add_argument("--cfg-dropout", dest="cfg_dropout", type=float)
    p.add_argument("--corruption", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--strategy")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-mult", dest="ffn_mult", type=int)
    p.add_argument("--speaker-dim", dest="speaker_dim", type=int)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode utterances from phoneme files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--phonemes", required=True, help="file of space-separated phoneme ids, one utterance per line")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--speaker", type=int, default=0)
    p.add_argument("--speakers", help="file with one speaker id per phoneme line")
    p.add_argument("--duration", type=float)
    p.add_argument("--duration-checkpoint", dest="duration_checkpoint")
    p.add_argument("--finest-rate", dest="finest_rate", type=float, default=86.13)
    p.add_argument("--factors", type=lambda s: tuple(int(x) for x in s.split(",")))
    p.add_argument("--steps")
    p.add_argument("--guidance")
    p.add_argument("--noise")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--strategy")
    p.add_argument("--ter-utts", dest="ter_utts", type=int)
    p.add_argument("--ce-positions", dest="ce_positions", type=int)
    p.add_argument("--steps")
    p.add_argument("--guidance")
    p.add_argument("--noise")
    p.add_argument("--temperature", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the level/strategy ablation grid")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--levels")
    p.add_argument("--strategies")
    p.add_argument("--seeds", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup", type=int)
    p.add_argument("--ter-utts", dest="ter_utts", type=int)
    p.add_argument("--ce-positions", dest="ce_positions", type=int)
    p.add_argument("--no-resume", dest="no_resume", action="store_true")
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    _limit_threads()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InvalidArgument) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
