"""Metrics: teacher-forced conditional cross-entropy and generation token error rate.

Conditional cross-entropy uses leave-one-out masking (each position scored
with only itself masked and everything else revealed), which removes
mask-sampling variance and makes the metric directly comparable with the
closed-form entropy floor of the synthetic law.  The token error rate
compares the finest generated level against the Bayes-map expansion of the
utterance's ground-truth coarse chain, the desk-scale stand-in for WER.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .corpus import SynthSpec, speaker_vector, ter_reference
from .errors import InvalidArgument
from .hierarchy import HierarchySpec
from .masking import MaskState
from .model import ConditioningBundle, Model, pack_batch
from .sampling import SamplerConfig, generate_batch


@dataclass
class EvalReport:
    cond_ce: dict
    masked_accuracy: dict
    ter: float
    exact_match: float
    fingerprint: str
    n_ter_tokens: int = 0
    n_ce_positions: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "cond_ce": {str(k): v for k, v in self.cond_ce.items()},
            "masked_accuracy": {str(k): v for k, v in self.masked_accuracy.items()},
            "ter": self.ter,
            "exact_match": self.exact_match,
            "fingerprint": self.fingerprint,
            "n_ter_tokens": self.n_ter_tokens,
            "n_ce_positions": {str(k): v for k, v in self.n_ce_positions.items()},
        }


def config_fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha1(blob).hexdigest()


def _bundle_for(utt, level: int, speaker_dim: int) -> ConditioningBundle:
    prev = utt.levels[level - 2].tokens if level > 1 else None
    return ConditioningBundle(
        level=level,
        phonemes=utt.phonemes,
        speaker=speaker_vector(utt.speaker_id, speaker_dim),
        prev_tokens=prev,
    )


def conditional_ce(
    model: Model,
    utts: list,
    level: int,
    max_positions: int | None = None,
    chunk: int = 96,
    return_details: bool = False,
):
    """Leave-one-out mean NLL at one level, conditioned on ground-truth coarse levels."""
    if not utts:
        raise InvalidArgument("need at least one utterance")
    sdim = model.cfg.speaker_dim
    total_nll = 0.0
    total_correct = 0
    count = 0
    for utt in utts:
        if level > len(utt.levels):
            raise InvalidArgument(f"utterance has no level {level}")
        seq = utt.levels[level - 1]
        n = len(seq)
        cond = _bundle_for(utt, level, sdim)
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            items = []
            for i in range(start, stop):
                mask = np.zeros(n, dtype=bool)
                mask[i] = True
                items.append((cond, MaskState.from_tokens(seq.tokens, mask)))
            packed = pack_batch(items, model.cfg)
            logits = model.forward_packed(packed)
            for row, i in enumerate(range(start, stop)):
                cs, _ = packed.canvas_slices[row]
                lp = nn.log_softmax(logits[row, cs + i].astype(np.float64))
                total_nll += -float(lp[seq.tokens[i]])
                total_correct += int(np.argmax(lp) == seq.tokens[i])
                count += 1
        if max_positions is not None and count >= max_positions:
            break
    ce = total_nll / count
    if return_details:
        return ce, total_correct / count, count
    return ce


_TER_SALT = 0xC0D_7E57


def _utt_stream(seed: int, utt_id: str) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha1(utt_id.encode("utf-8")).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([_TER_SALT, seed, tag]))


def generation_ter(
    model: Model,
    utts: list,
    scfg: SamplerConfig,
    hspec: HierarchySpec,
    spec: SynthSpec,
    seed: int = 0,
    return_details: bool = False,
):
    """Token error rate of generated finest sequences against the Bayes-map oracle.

    Generation uses each utterance's ground-truth duration; the reference is
    the noise-free expansion of its ground-truth coarse chain, which is
    independent of the model's own level structure.  Each utterance decodes
    on its own rng stream derived from (seed, utt_id), so the metric does not
    depend on dataset order.
    """
    if not utts:
        raise InvalidArgument("need at least one utterance")
    sdim = model.cfg.speaker_dim
    mismatched = 0
    total = 0
    exact = 0
    for utt in utts:
        levels = generate_batch(
            model,
            [utt.phonemes],
            [speaker_vector(utt.speaker_id, sdim)],
            [utt.duration_s],
            scfg,
            hspec,
            _utt_stream(seed, utt.utt_id),
        )[0]
        ref = ter_reference(utt, spec)
        got = levels[-1].tokens
        if len(ref) != len(got):
            raise InvalidArgument(
                f"reference length {len(ref)} != generated length {len(got)}"
            )
        miss = int((ref != got).sum())
        mismatched += miss
        total += len(ref)
        exact += int(miss == 0)
    ter = mismatched / total
    if return_details:
        return ter, exact / len(utts), total
    return ter


def evaluate_model(
    model: Model,
    utts: list,
    ref_utts: list,
    scfg: SamplerConfig,
    hspec: HierarchySpec,
    spec: SynthSpec,
    seed: int = 0,
    ce_positions: int | None = None,
    fingerprint: str = "",
) -> EvalReport:
    """The full report: per-level conditional CE/accuracy plus generation TER.

    ``utts`` carry the hierarchy the model was trained on (possibly rebuilt
    or projected); ``ref_utts`` are the matching original corpus utterances
    that define the TER reference.
    """
    cond = {}
    acc = {}
    npos = {}
    for level in range(1, hspec.num_levels + 1):
        ce, a, n = conditional_ce(
            model, utts, level, max_positions=ce_positions, return_details=True
        )
        cond[level] = ce
        acc[level] = a
        npos[level] = n
    ter, exact, n_tokens = generation_ter(
        model, ref_utts, scfg, hspec, spec, seed=seed, return_details=True
    )
    return EvalReport(
        cond_ce=cond,
        masked_accuracy=acc,
        ter=ter,
        exact_match=exact,
        fingerprint=fingerprint,
        n_ter_tokens=n_tokens,
        n_ce_positions=npos,
    )
