"""Shared bidirectional transformer decoder over the unified token codebook.

One model serves every temporal level.  The input sequence is a plain
concatenation of segments:

    [phoneme prefix] ++ [previous-level token prefix, levels > 1] ++ [canvas]

Each position embeds its content (phoneme id, token id, or the dedicated
[MASK] embedding), a learned segment-relative position, and a learned level
id (0 for the phoneme segment, the temporal level otherwise).  Dropped
conditions are replaced by single learnable null embeddings.  Speaker
identity enters through adaptive layer normalization: every block normalizes
its input and applies a scale/shift projected from the speaker vector, with
the projections initialized to zero so an untrained block reduces to plain
layer normalization.

Attention is bidirectional (no causal mask); logits are produced for canvas
positions over the V real tokens only ([MASK] is never a predictable class).
The forward/backward passes are written by hand on top of :mod:`codm.nn`, so
the whole model runs in float32 for speed or float64 for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidArgument, StateError
from .masking import MaskState


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    vocab_size: int
    phoneme_vocab: int
    num_levels: int
    max_seq_len: int
    speaker_dim: int
    ffn_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise InvalidArgument(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("num_layers", "hidden_dim", "num_heads", "vocab_size",
                     "phoneme_vocab", "num_levels", "max_seq_len", "speaker_dim", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgument(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def mask_id(self) -> int:
        return self.vocab_size

    @property
    def null_prev_id(self) -> int:
        return self.vocab_size + 1

    @property
    def null_phoneme_id(self) -> int:
        return self.phoneme_vocab

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.hidden_dim


@dataclass
class ConditioningBundle:
    """Everything the decoder is conditioned on for one canvas."""

    level: int
    phonemes: np.ndarray | None = None
    speaker: np.ndarray | None = None
    prev_tokens: np.ndarray | None = None
    phoneme_null: bool = False
    prev_null: bool = False
    speaker_null: bool = False

    def __post_init__(self):
        if self.level < 1:
            raise InvalidArgument(f"level must be >= 1, got {self.level}")
        if self.phonemes is not None:
            self.phonemes = np.asarray(self.phonemes, dtype=np.int64)
        if self.prev_tokens is not None:
            self.prev_tokens = np.asarray(self.prev_tokens, dtype=np.int64)
        if self.speaker is not None:
            self.speaker = np.asarray(self.speaker, dtype=np.float64)
        if not self.phoneme_null and (self.phonemes is None or len(self.phonemes) == 0):
            raise InvalidArgument("phonemes required unless phoneme_null is set")
        if not self.speaker_null and self.speaker is None:
            raise InvalidArgument("speaker vector required unless speaker_null is set")
        has_prev = self.prev_tokens is not None
        if self.level == 1 and has_prev:
            raise InvalidArgument("level 1 takes no previous-level tokens")
        if self.level > 1 and not self.prev_null and not has_prev:
            raise InvalidArgument("levels > 1 need prev_tokens or prev_null")
        if self.prev_null:
            self.prev_tokens = None

    def as_null_condition(self) -> "ConditioningBundle":
        """The classifier-free-guidance pass: transcript and coarse prefix nulled."""
        return ConditioningBundle(
            level=self.level,
            phonemes=None,
            speaker=None if self.speaker_null else self.speaker.copy(),
            prev_tokens=None,
            phoneme_null=True,
            prev_null=True,
            speaker_null=self.speaker_null,
        )


@dataclass
class Packed:
    """A padded batch of (bundle, canvas) pairs ready for the transformer."""

    tok_idx: np.ndarray
    ph_idx: np.ndarray
    pos_idx: np.ndarray
    lvl_idx: np.ndarray
    valid: np.ndarray
    canvas_mask: np.ndarray
    speakers: np.ndarray
    speaker_null: np.ndarray
    canvas_slices: list

    @property
    def batch(self) -> int:
        return self.tok_idx.shape[0]

    @property
    def width(self) -> int:
        return self.tok_idx.shape[1]


def input_layout(canvas: MaskState, cond: ConditioningBundle, cfg: ModelConfig):
    """Segment layout (name, content ids, level id) for one sample."""
    if cond.level > cfg.num_levels:
        raise InvalidArgument(f"level {cond.level} exceeds num_levels {cfg.num_levels}")
    segments = []
    if cond.phoneme_null:
        segments.append(("phonemes", np.array([cfg.null_phoneme_id]), 0))
    else:
        if (cond.phonemes >= cfg.phoneme_vocab).any() or (cond.phonemes < 0).any():
            raise InvalidArgument("phoneme id out of range")
        segments.append(("phonemes", cond.phonemes, 0))
    if cond.level > 1:
        if cond.prev_null:
            segments.append(("prev", np.array([cfg.null_prev_id]), cond.level - 1))
        else:
            if (cond.prev_tokens >= cfg.vocab_size).any() or (cond.prev_tokens < 0).any():
                raise InvalidArgument("previous-level token id out of range")
            segments.append(("prev", cond.prev_tokens, cond.level - 1))
    canvas_ids = np.where(canvas.masked, cfg.mask_id, canvas.tokens)
    fixed = canvas.tokens[~canvas.masked]
    if len(fixed) and ((fixed < 0).any() or (fixed >= cfg.vocab_size).any()):
        raise InvalidArgument("canvas token id out of range")
    segments.append(("canvas", canvas_ids, cond.level))
    total = sum(len(ids) for _, ids, _ in segments)
    if total > cfg.max_seq_len:
        raise InvalidArgument(f"input length {total} exceeds max_seq_len {cfg.max_seq_len}")
    return segments, total


def pack_batch(items, cfg: ModelConfig) -> Packed:
    layouts = [input_layout(canvas, cond, cfg) for cond, canvas in items]
    b = len(items)
    width = max(total for _, total in layouts)
    tok_idx = np.full((b, width), -1, dtype=np.int64)
    ph_idx = np.full((b, width), -1, dtype=np.int64)
    pos_idx = np.full((b, width), -1, dtype=np.int64)
    lvl_idx = np.full((b, width), -1, dtype=np.int64)
    valid = np.zeros((b, width), dtype=bool)
    canvas_mask = np.zeros((b, width), dtype=bool)
    speakers = np.zeros((b, cfg.speaker_dim), dtype=np.float64)
    speaker_null = np.zeros(b, dtype=bool)
    canvas_slices = []
    for i, ((cond, canvas), (segments, total)) in enumerate(zip(items, layouts)):
        if cond.speaker_null:
            speaker_null[i] = True
        else:
            if cond.speaker.shape != (cfg.speaker_dim,):
                raise InvalidArgument(
                    f"speaker vector must have dim {cfg.speaker_dim}, got {cond.speaker.shape}"
                )
            speakers[i] = cond.speaker
        cursor = 0
        for name, ids, level_id in segments:
            n = len(ids)
            sl = slice(cursor, cursor + n)
            if name == "phonemes":
                ph_idx[i, sl] = ids
            else:
                tok_idx[i, sl] = ids
            pos_idx[i, sl] = np.arange(n)
            lvl_idx[i, sl] = level_id
            if name == "canvas":
                canvas_mask[i, sl] = True
                canvas_slices.append((cursor, n))
            cursor += n
        valid[i, :total] = True
    return Packed(
        tok_idx=tok_idx,
        ph_idx=ph_idx,
        pos_idx=pos_idx,
        lvl_idx=lvl_idx,
        valid=valid,
        canvas_mask=canvas_mask,
        speakers=speakers,
        speaker_null=speaker_null,
        canvas_slices=canvas_slices,
    )


def _param_shapes(cfg: ModelConfig):
    d, s, f = cfg.hidden_dim, cfg.speaker_dim, cfg.ffn_dim
    shapes = [
        ("emb.tok", (cfg.vocab_size + 2, d), "normal"),
        ("emb.ph", (cfg.phoneme_vocab + 1, d), "normal"),
        ("emb.pos", (cfg.max_seq_len, d), "normal"),
        ("emb.lvl", (cfg.num_levels + 1, d), "normal"),
        ("emb.null_spk", (s,), "normal"),
    ]
    for i in range(cfg.num_layers):
        pre = f"l{i}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes.append((pre + "attn." + w, (d, d), "normal"))
        for j in (1, 2):
            shapes.append((pre + f"adaln{j}.wg", (s, d), "zeros"))
            shapes.append((pre + f"adaln{j}.bg", (d,), "zeros"))
            shapes.append((pre + f"adaln{j}.wb", (s, d), "zeros"))
            shapes.append((pre + f"adaln{j}.bb", (d,), "zeros"))
        shapes.append((pre + "mlp.w1", (d, f), "normal"))
        shapes.append((pre + "mlp.w2", (f, d), "normal"))
    shapes.append(("final.adaln.wg", (s, d), "zeros"))
    shapes.append(("final.adaln.bg", (d,), "zeros"))
    shapes.append(("final.adaln.wb", (s, d), "zeros"))
    shapes.append(("final.adaln.bb", (d,), "zeros"))
    shapes.append(("head.w", (d, cfg.vocab_size), "normal"))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Exact learnable-parameter count for a configuration."""
    return sum(int(np.prod(shape)) for _, shape, _ in _param_shapes(cfg))


def init_params(cfg: ModelConfig, rng: np.random.Generator, init_scale: float = 0.02) -> dict:
    params = {}
    for name, shape, kind in _param_shapes(cfg):
        if kind == "zeros":
            params[name] = np.zeros(shape, dtype=cfg.np_dtype)
        else:
            params[name] = (rng.standard_normal(shape) * init_scale).astype(cfg.np_dtype)
    return params


def adaln_modulate(hidden, speaker, w_gamma, b_gamma, w_beta, b_beta):
    """Normalize a (T, d) matrix and modulate it from one speaker vector."""
    hidden = np.asarray(hidden)
    speaker = np.asarray(speaker)
    if hidden.ndim != 2:
        raise InvalidArgument("hidden must be a (T, d) matrix")
    if speaker.shape != (w_gamma.shape[0],):
        raise InvalidArgument(
            f"speaker dim {speaker.shape} does not match projection {w_gamma.shape[0]}"
        )
    xhat, _ = nn.layernorm_fwd(hidden)
    gamma = speaker @ w_gamma + b_gamma
    beta = speaker @ w_beta + b_beta
    return xhat * (1.0 + gamma) + beta


class Model:
    """The shared decoder; construct with an rng to initialize, or from params."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = {k: np.asarray(v, dtype=cfg.np_dtype) for k, v in params.items()}
        elif rng is not None:
            self.params = init_params(cfg, rng)
        else:
            self.params = None

    @property
    def initialized(self) -> bool:
        return self.params is not None

    def _require_params(self):
        if self.params is None:
            raise StateError("model has no parameters; initialize or load a checkpoint")

    def param_count(self) -> int:
        return param_count(self.cfg)

    def _split_heads(self, x):
        b, t, d = x.shape
        h = self.cfg.num_heads
        return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def _embed(self, packed: Packed):
        p = self.params
        dtype = self.cfg.np_dtype
        b, t = packed.tok_idx.shape
        x = np.zeros((b, t, self.cfg.hidden_dim), dtype=dtype)
        for table, idx in (
            (p["emb.tok"], packed.tok_idx),
            (p["emb.ph"], packed.ph_idx),
            (p["emb.pos"], packed.pos_idx),
            (p["emb.lvl"], packed.lvl_idx),
        ):
            sel = idx >= 0
            x[sel] += table[idx[sel]]
        spk = packed.speakers.astype(dtype)
        if packed.speaker_null.any():
            spk[packed.speaker_null] = p["emb.null_spk"]
        return x, spk

    def _adaln_params(self, prefix):
        p = self.params
        return p[prefix + ".wg"], p[prefix + ".bg"], p[prefix + ".wb"], p[prefix + ".bb"]

    def forward_packed(self, packed: Packed, want_cache: bool = False):
        """Logits (B, T, V) over the full padded width; callers slice canvas rows."""
        self._require_params()
        p = self.params
        cfg = self.cfg
        x, spk = self._embed(packed)
        bias = np.where(packed.valid, 0.0, nn.NEG_INF).astype(cfg.np_dtype)[:, None, None, :]
        layer_caches = []
        for i in range(cfg.num_layers):
            pre = f"l{i}."
            wg1, bg1, wb1, bb1 = self._adaln_params(pre + "adaln1")
            xhat1, ln1 = nn.layernorm_fwd(x)
            g1 = spk @ wg1 + bg1
            b1 = spk @ wb1 + bb1
            h1, mod1 = nn.modulate_fwd(xhat1, g1, b1)
            q, _ = nn.linear_fwd(h1, p[pre + "attn.wq"])
            k, _ = nn.linear_fwd(h1, p[pre + "attn.wk"])
            v, _ = nn.linear_fwd(h1, p[pre + "attn.wv"])
            ao, attnc = nn.attention_fwd(
                self._split_heads(q), self._split_heads(k), self._split_heads(v), bias
            )
            a = self._merge_heads(ao)
            o, _ = nn.linear_fwd(a, p[pre + "attn.wo"])
            x = x + o

            wg2, bg2, wb2, bb2 = self._adaln_params(pre + "adaln2")
            xhat2, ln2 = nn.layernorm_fwd(x)
            g2 = spk @ wg2 + bg2
            b2 = spk @ wb2 + bb2
            h2, mod2 = nn.modulate_fwd(xhat2, g2, b2)
            u, _ = nn.linear_fwd(h2, p[pre + "mlp.w1"])
            act, siluc = nn.silu_fwd(u)
            mo, _ = nn.linear_fwd(act, p[pre + "mlp.w2"])
            x = x + mo
            if want_cache:
                layer_caches.append((ln1, mod1, h1, attnc, a, ln2, mod2, h2, siluc, act))

        xhatf, lnf = nn.layernorm_fwd(x)
        wgf, bgf, wbf, bbf = self._adaln_params("final.adaln")
        gf = spk @ wgf + bgf
        bf = spk @ wbf + bbf
        hf, modf = nn.modulate_fwd(xhatf, gf, bf)
        logits, _ = nn.linear_fwd(hf, p["head.w"])
        if want_cache:
            return logits, (packed, spk, layer_caches, lnf, modf, hf)
        return logits

    def backward_packed(self, cache, dlogits: np.ndarray) -> dict:
        """Gradients of a scalar loss given d(loss)/d(logits)."""
        p = self.params
        cfg = self.cfg
        packed, spk, layer_caches, lnf, modf, hf = cache
        grads = {}
        for name in ("emb.tok", "emb.ph", "emb.pos", "emb.lvl"):
            grads[name] = np.zeros_like(p[name])

        dhf, grads["head.w"] = nn.linear_bwd(dlogits.astype(cfg.np_dtype), (hf, p["head.w"]))
        dxhatf, dgf, dbf = nn.modulate_bwd(dhf, modf)
        dx = nn.layernorm_bwd(dxhatf, lnf)
        dspk = self._adaln_grads(grads, "final.adaln", spk, dgf, dbf)

        for i in reversed(range(cfg.num_layers)):
            pre = f"l{i}."
            ln1, mod1, h1, attnc, a, ln2, mod2, h2, siluc, act = layer_caches[i]
            # mlp sublayer
            dact, grads[pre + "mlp.w2"] = nn.linear_bwd(dx, (act, p[pre + "mlp.w2"]))
            du = nn.silu_bwd(dact, siluc)
            dh2, grads[pre + "mlp.w1"] = nn.linear_bwd(du, (h2, p[pre + "mlp.w1"]))
            dxhat2, dg2, db2 = nn.modulate_bwd(dh2, mod2)
            dx = dx + nn.layernorm_bwd(dxhat2, ln2)
            dspk += self._adaln_grads(grads, pre + "adaln2", spk, dg2, db2)
            # attention sublayer
            da, grads[pre + "attn.wo"] = nn.linear_bwd(dx, (a, p[pre + "attn.wo"]))
            dqh, dkh, dvh = nn.attention_bwd(self._split_heads(da), attnc)
            dq, dk, dv = (self._merge_heads(z) for z in (dqh, dkh, dvh))
            dh1 = np.zeros_like(dq)
            for w, dz in (("wq", dq), ("wk", dk), ("wv", dv)):
                dpart, grads[pre + "attn." + w] = nn.linear_bwd(dz, (h1, p[pre + "attn." + w]))
                dh1 += dpart
            dxhat1, dg1, db1 = nn.modulate_bwd(dh1, mod1)
            dx = dx + nn.layernorm_bwd(dxhat1, ln1)
            dspk += self._adaln_grads(grads, pre + "adaln1", spk, dg1, db1)

        # scatter dx back into the embedding tables
        for name, idx in (
            ("emb.tok", packed.tok_idx),
            ("emb.ph", packed.ph_idx),
            ("emb.pos", packed.pos_idx),
            ("emb.lvl", packed.lvl_idx),
        ):
            sel = idx >= 0
            np.add.at(grads[name], idx[sel], dx[sel])
        grads["emb.null_spk"] = dspk[packed.speaker_null].sum(axis=0)
        return grads

    def _adaln_grads(self, grads, prefix, spk, dgamma, dbeta):
        p = self.params
        grads[prefix + ".wg"] = spk.T @ dgamma
        grads[prefix + ".bg"] = dgamma.sum(axis=0)
        grads[prefix + ".wb"] = spk.T @ dbeta
        grads[prefix + ".bb"] = dbeta.sum(axis=0)
        return dgamma @ p[prefix + ".wg"].T + dbeta @ p[prefix + ".wb"].T

    def build_input(self, canvas: MaskState, cond: ConditioningBundle) -> np.ndarray:
        """The embedded (T, d) input sequence for one sample."""
        self._require_params()
        packed = pack_batch([(cond, canvas)], self.cfg)
        x, _ = self._embed(packed)
        return x[0]

    def forward(self, canvas: MaskState, cond: ConditioningBundle) -> np.ndarray:
        """Logit grid (canvas_len, V) for one canvas under one conditioning bundle."""
        packed = pack_batch([(cond, canvas)], self.cfg)
        logits = self.forward_packed(packed)
        start, length = packed.canvas_slices[0]
        return logits[0, start : start + length, :]

    def clone_params(self) -> dict:
        self._require_params()
        return {k: v.copy() for k, v in self.params.items()}
