"""Level- and strategy-ablation grid runner.

Each grid cell trains one model (a level count, a coarse-token strategy, a
seed) under an identical budget, evaluates conditional cross-entropy per
level and generation token error rate, and caches everything under a
per-cell directory keyed by a config fingerprint, so interrupted grids
resume instead of retraining.

Strategy semantics on the synthetic corpus:

* ``decimated``       - train on the corpus's own levels.  The synthetic law
  expands sub-position 0 as the identity, so its coarse chain is exactly the
  noise-free stride-decimation of the finest stream; the corpus plays the
  role of the decimated tokenizer, and the closed-form entropy floor applies
  to its conditionals.
* ``extra_shared`` /
  ``extra_independent`` - rebuild the coarse levels from the finest token
  stream by embedding tokens with a fixed codec table, mean-pooling over the
  factor-ratio window, and re-quantizing with EMA-trained codebooks (one
  shared codebook, or one per level).  Models then train on the rebuilt
  chains.  The TER reference stays the original law chain either way.
"""

from __future__ import annotations

import functools
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from .corpus import CorpusDataset, project_hierarchy, project_levels, SynthUtterance
from .errors import InvalidArgument
from .evaluation import config_fingerprint, evaluate_model
from .fileio import atomic_write, read_json, write_json
from .hierarchy import (
    Codebook,
    HierarchySpec,
    build_hierarchy,
    mean_pool,
    quantize,
    train_codebook,
)
from .model import Model, ModelConfig
from .sampling import SamplerConfig
from .training import TrainConfig, Trainer

_CODEC_SALT = 0xC0D_C0DE
CODEC_DIM = 8
RAW_HEADER = "config,seed,level,cond_ce,ter"
SUMMARY_HEADER = "config,levels,strategy,mean_ter,std_ter,mean_ce,std_ce"


@dataclass(frozen=True)
class AblationJob:
    name: str
    levels: int
    strategy: str = "decimated"


@functools.lru_cache(maxsize=8)
def codec_embedding(vocab_size: int, dim: int = CODEC_DIM) -> np.ndarray:
    """Fixed random code vectors standing in for the audio codec latents."""
    rng = np.random.default_rng(np.random.SeedSequence([_CODEC_SALT, vocab_size, dim]))
    table = rng.standard_normal((vocab_size, dim))
    table.setflags(write=False)
    return table


def _pooled_vectors(utts, reps, window: int) -> np.ndarray:
    return np.concatenate([mean_pool(reps[u.utt_id], window) for u in utts], axis=0)


def rebuild_dataset(dataset: CorpusDataset, strategy: str, rng: np.random.Generator) -> CorpusDataset:
    """Replace every utterance's coarse levels with strategy-rebuilt ones.

    Codebooks are trained on the train split only.  For the shared-codebook
    strategy the codebook is fit in two stages so it sees pooled vectors from
    every coarse level before the final encoding.
    """
    spec = dataset.spec
    if spec.num_levels < 2:
        return dataset
    hspec = spec.hierarchy()
    if strategy == "decimated":
        hs = HierarchySpec(
            num_levels=spec.num_levels,
            finest_rate_hz=spec.finest_rate_hz,
            decimation_factors=spec.factors,
            vocab_size=spec.vocab_size,
            strategy="decimated",
        )
        return _apply_rebuild(dataset, lambda utt: build_hierarchy(utt.finest, hs))
    if strategy not in ("extra_shared", "extra_independent"):
        raise InvalidArgument(f"unknown strategy {strategy!r}")

    table = codec_embedding(spec.vocab_size)
    frames = {u.utt_id: table[u.finest.tokens] for u in dataset.all_utts}
    train = dataset.train
    codebooks: list[Codebook | None] = [None] * (spec.num_levels - 1)

    if strategy == "extra_independent":
        reps = dict(frames)
        for level in range(spec.num_levels - 1, 0, -1):
            w = hspec.window(level)
            cb = train_codebook(_pooled_vectors(train, reps, w), spec.vocab_size, rng)
            codebooks[level - 1] = cb
            nxt = {}
            for u in train:
                pooled = mean_pool(reps[u.utt_id], w)
                seq, _ = quantize(pooled, cb)
                nxt[u.utt_id] = cb.lookup(seq.tokens)
            reps = nxt
    else:
        # stage 1: fit on the finest pooling; stage 2: refit on all levels' poolings
        w_fine = hspec.window(spec.num_levels - 1)
        stage1 = train_codebook(_pooled_vectors(train, frames, w_fine), spec.vocab_size, rng)
        pooled_all = []
        reps = dict(frames)
        for level in range(spec.num_levels - 1, 0, -1):
            w = hspec.window(level)
            pooled_level = {u.utt_id: mean_pool(reps[u.utt_id], w) for u in train}
            pooled_all.append(np.concatenate([pooled_level[u.utt_id] for u in train], axis=0))
            nxt = {}
            for u in train:
                seq, _ = quantize(pooled_level[u.utt_id], stage1)
                nxt[u.utt_id] = stage1.lookup(seq.tokens)
            reps = nxt
        shared = train_codebook(np.concatenate(pooled_all, axis=0), spec.vocab_size, rng)
        codebooks = [shared] * (spec.num_levels - 1)

    hs = HierarchySpec(
        num_levels=spec.num_levels,
        finest_rate_hz=spec.finest_rate_hz,
        decimation_factors=spec.factors,
        vocab_size=spec.vocab_size,
        strategy=strategy,
    )

    def rebuild(utt: SynthUtterance):
        return build_hierarchy(utt.finest, hs, frames=frames[utt.utt_id], codebooks=codebooks)

    return _apply_rebuild(dataset, rebuild)


def _apply_rebuild(dataset: CorpusDataset, fn) -> CorpusDataset:
    def convert(utts):
        out = []
        for u in utts:
            out.append(
                SynthUtterance(
                    utt_id=u.utt_id,
                    phonemes=u.phonemes,
                    speaker_id=u.speaker_id,
                    duration_s=u.duration_s,
                    levels=fn(u),
                )
            )
        return out

    return CorpusDataset(
        spec=dataset.spec,
        train=convert(dataset.train),
        dev=convert(dataset.dev),
        test=convert(dataset.test),
    )


def _project_split(utts, keep: int):
    return [project_levels(u, keep) for u in utts]


def run_cell(
    dataset: CorpusDataset,
    job: AblationJob,
    seed: int,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    scfg: SamplerConfig,
    out_dir: str,
    ter_utts: int,
    ce_positions: int,
    resume: bool = True,
    log_every: int = 0,
) -> dict:
    """Train-or-load one grid cell and return its result record."""
    spec = dataset.spec
    cell_dir = os.path.join(out_dir, f"{job.name}_seed{seed}")
    os.makedirs(cell_dir, exist_ok=True)
    fingerprint = config_fingerprint(
        asdict(spec), asdict(job), seed, asdict(model_cfg), asdict(train_cfg),
        asdict(scfg), ter_utts, ce_positions,
    )
    result_path = os.path.join(cell_dir, "result.json")
    if resume and os.path.exists(result_path):
        result = read_json(result_path)
        if result.get("fingerprint") == fingerprint:
            return result

    if job.strategy == "decimated":
        work = dataset
    else:
        work = rebuild_dataset(dataset, job.strategy, np.random.default_rng(spec.seed))
    train_utts = _project_split(work.train, job.levels)
    eval_utts = _project_split(work.test, job.levels)
    hspec = project_hierarchy(spec.hierarchy(), job.levels)

    ckpt_path = os.path.join(cell_dir, "checkpoint.codm")
    fp_path = os.path.join(cell_dir, "train_fingerprint.json")
    metrics_path = os.path.join(cell_dir, "metrics.csv")
    cpu0 = time.process_time()
    wall0 = time.perf_counter()
    trainer = None
    if resume and os.path.exists(ckpt_path) and os.path.exists(fp_path):
        if read_json(fp_path).get("fingerprint") == fingerprint:
            trainer = Trainer.restore(ckpt_path, train_utts, metrics_path=metrics_path)
    if trainer is None:
        model = Model(model_cfg, rng=np.random.default_rng(np.random.SeedSequence([seed, 0xC0D])))
        trainer = Trainer(model, train_utts, train_cfg)
        write_json(fp_path, {"fingerprint": fingerprint})
    if trainer.step_count < train_cfg.total_steps:
        trainer.run(out_dir=cell_dir, checkpoint_every=2000, log_every=log_every)
    train_cpu = time.process_time() - cpu0
    train_wall = time.perf_counter() - wall0

    cpu0 = time.process_time()
    wall0 = time.perf_counter()
    report = evaluate_model(
        trainer.model,
        eval_utts,
        dataset.test[: max(ter_utts, 1)],
        scfg,
        hspec,
        spec,
        seed=seed,
        ce_positions=ce_positions,
        fingerprint=fingerprint,
    )
    result = {
        "config": job.name,
        "levels": job.levels,
        "strategy": job.strategy,
        "seed": seed,
        "fingerprint": fingerprint,
        "report": report.to_json(),
        "train_cpu_s": train_cpu,
        "train_wall_s": train_wall,
        "eval_cpu_s": time.process_time() - cpu0,
        "eval_wall_s": time.perf_counter() - wall0,
        "steps": trainer.step_count,
    }
    write_json(result_path, result)
    return result


def run_ablation(
    dataset: CorpusDataset,
    jobs: list,
    seeds,
    out_dir: str,
    model_cfg_for,
    train_cfg_for,
    scfg: SamplerConfig,
    ter_utts: int = 64,
    ce_positions: int = 10500,
    resume: bool = True,
    log_every: int = 0,
) -> tuple[list, list]:
    """Run the whole grid serially; emits raw and summary CSVs, returns both tables.

    ``model_cfg_for(job)`` and ``train_cfg_for(job, seed)`` supply per-cell
    configurations so every cell trains under the same budget.
    """
    results = []
    for job in jobs:
        for seed in seeds:
            results.append(
                run_cell(
                    dataset, job, seed, model_cfg_for(job), train_cfg_for(job, seed),
                    scfg, out_dir, ter_utts, ce_positions, resume=resume, log_every=log_every,
                )
            )
    # one raw row per grid cell; per-level cross-entropies live in result.json
    raw_rows = []
    for res in results:
        raw_rows.append(
            {
                "config": res["config"],
                "seed": res["seed"],
                "level": res["levels"],
                "cond_ce": res["report"]["cond_ce"][str(res["levels"])],
                "ter": res["report"]["ter"],
            }
        )
    summary_rows = []
    for job in jobs:
        cell = [r for r in results if r["config"] == job.name]
        ters = np.array([r["report"]["ter"] for r in cell], dtype=np.float64)
        ces = np.array(
            [r["report"]["cond_ce"][str(job.levels)] for r in cell], dtype=np.float64
        )
        summary_rows.append(
            {
                "config": job.name,
                "levels": job.levels,
                "strategy": job.strategy,
                "mean_ter": float(ters.mean()),
                "std_ter": float(ters.std(ddof=1)) if len(ters) > 1 else 0.0,
                "mean_ce": float(ces.mean()),
                "std_ce": float(ces.std(ddof=1)) if len(ces) > 1 else 0.0,
            }
        )
    raw_lines = [RAW_HEADER] + [
        f"{r['config']},{r['seed']},{r['level']},{r['cond_ce']!r},{r['ter']!r}" for r in raw_rows
    ]
    summary_lines = [SUMMARY_HEADER] + [
        f"{r['config']},{r['levels']},{r['strategy']},{r['mean_ter']!r},"
        f"{r['std_ter']!r},{r['mean_ce']!r},{r['std_ce']!r}"
        for r in summary_rows
    ]
    atomic_write(os.path.join(out_dir, "ablation_raw.csv"), "\n".join(raw_lines) + "\n")
    atomic_write(os.path.join(out_dir, "ablation_summary.csv"), "\n".join(summary_lines) + "\n")
    return raw_rows, summary_rows
