"""Lightweight phoneme-to-duration regressor.

A small bidirectional transformer encoder over phoneme embeddings, mean
pooled and pushed through a linear head with a softplus, so the predicted
duration is always strictly positive.  Trained with mean absolute error.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import nn
from .checkpoint import DURATION_MAGIC, read_container, write_container
from .errors import ConfigError, InvalidArgument


@dataclass(frozen=True)
class DurationModelConfig:
    phoneme_vocab: int
    num_layers: int = 6
    hidden_dim: int = 256
    num_heads: int = 4
    max_len: int = 64
    ffn_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise InvalidArgument("hidden_dim must be divisible by num_heads")
        for name in ("phoneme_vocab", "num_layers", "hidden_dim", "max_len", "ffn_mult"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class DurationTrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    steps: int = 2000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.01


def _param_shapes(cfg: DurationModelConfig):
    d, f = cfg.hidden_dim, cfg.ffn_mult * cfg.hidden_dim
    shapes = [
        ("emb.ph", (cfg.phoneme_vocab, d), "normal"),
        ("emb.pos", (cfg.max_len, d), "normal"),
    ]
    for i in range(cfg.num_layers):
        pre = f"l{i}."
        for w in ("wq", "wk", "wv", "wo"):
            shapes.append((pre + "attn." + w, (d, d), "normal"))
        shapes.append((pre + "ln1.g", (d,), "zeros"))
        shapes.append((pre + "ln1.b", (d,), "zeros"))
        shapes.append((pre + "ln2.g", (d,), "zeros"))
        shapes.append((pre + "ln2.b", (d,), "zeros"))
        shapes.append((pre + "mlp.w1", (d, f), "normal"))
        shapes.append((pre + "mlp.w2", (f, d), "normal"))
    shapes.append(("final.g", (d,), "zeros"))
    shapes.append(("final.b", (d,), "zeros"))
    shapes.append(("head.w", (d, 1), "normal"))
    shapes.append(("head.b", (1,), "zeros"))
    return shapes


class DurationModel:
    def __init__(self, cfg: DurationModelConfig, rng: np.random.Generator | None = None,
                 params: dict | None = None):
        self.cfg = cfg
        if params is not None:
            self.params = {k: np.asarray(v, dtype=cfg.np_dtype) for k, v in params.items()}
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = {}
            for name, shape, kind in _param_shapes(cfg):
                if kind == "zeros":
                    self.params[name] = np.zeros(shape, dtype=cfg.np_dtype)
                else:
                    self.params[name] = (rng.standard_normal(shape) * 0.02).astype(cfg.np_dtype)

    def _split_heads(self, x):
        b, t, d = x.shape
        h = self.cfg.num_heads
        return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, h, t, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)

    def _affine_ln(self, x, prefix, want_cache):
        xhat, lnc = nn.layernorm_fwd(x)
        g, b = self.params[prefix + ".g"], self.params[prefix + ".b"]
        y = xhat * (1.0 + g) + b
        return y, (lnc, xhat, g) if want_cache else None

    def forward_batch(self, phoneme_rows: list, want_cache: bool = False):
        """Predicted durations (seconds) for a list of phoneme id sequences."""
        cfg = self.cfg
        p = self.params
        b = len(phoneme_rows)
        lens = [len(row) for row in phoneme_rows]
        if min(lens) < 1:
            raise InvalidArgument("phoneme sequences must be non-empty")
        if max(lens) > cfg.max_len:
            raise InvalidArgument(f"sequence longer than max_len {cfg.max_len}")
        width = max(lens)
        idx = np.zeros((b, width), dtype=np.int64)
        valid = np.zeros((b, width), dtype=bool)
        for i, row in enumerate(phoneme_rows):
            row = np.asarray(row, dtype=np.int64)
            if (row < 0).any() or (row >= cfg.phoneme_vocab).any():
                raise InvalidArgument("phoneme id out of range")
            idx[i, : len(row)] = row
            valid[i, : len(row)] = True
        x = p["emb.ph"][idx] + p["emb.pos"][np.arange(width)][None, :, :]
        x = x * valid[:, :, None].astype(cfg.np_dtype)
        bias = np.where(valid, 0.0, nn.NEG_INF).astype(cfg.np_dtype)[:, None, None, :]

        caches = []
        for i in range(cfg.num_layers):
            pre = f"l{i}."
            h1, c1 = self._affine_ln(x, pre + "ln1", want_cache)
            q, k, v = (h1 @ p[pre + "attn." + w] for w in ("wq", "wk", "wv"))
            ao, attnc = nn.attention_fwd(
                self._split_heads(q), self._split_heads(k), self._split_heads(v), bias
            )
            a = self._merge_heads(ao)
            x = x + a @ p[pre + "attn.wo"]
            h2, c2 = self._affine_ln(x, pre + "ln2", want_cache)
            u = h2 @ p[pre + "mlp.w1"]
            act, siluc = nn.silu_fwd(u)
            x = x + act @ p[pre + "mlp.w2"]
            if want_cache:
                caches.append((c1, h1, attnc, a, c2, h2, siluc, act))
        hf, cf = self._affine_ln(x, "final", want_cache)
        denom = valid.sum(axis=1, keepdims=True).astype(cfg.np_dtype)
        pooled = (hf * valid[:, :, None]).sum(axis=1) / denom
        pre_act = pooled @ p["head.w"] + p["head.b"]
        pred = _softplus(pre_act)[:, 0]
        if want_cache:
            return pred, (idx, valid, caches, cf, hf, pooled, pre_act)
        return pred

    def backward_batch(self, cache, dpred: np.ndarray) -> dict:
        cfg = self.cfg
        p = self.params
        idx, valid, caches, cf, hf, pooled, pre_act = cache
        grads = {"emb.ph": np.zeros_like(p["emb.ph"]), "emb.pos": np.zeros_like(p["emb.pos"])}
        dpre = dpred[:, None] * _sigmoid(pre_act)
        grads["head.w"] = pooled.T @ dpre
        grads["head.b"] = dpre.sum(axis=0)
        dpooled = dpre @ p["head.w"].T
        denom = valid.sum(axis=1, keepdims=True).astype(cfg.np_dtype)
        dhf = (dpooled / denom)[:, None, :] * valid[:, :, None]
        dx = self._affine_ln_bwd(grads, "final", dhf, cf)
        for i in reversed(range(cfg.num_layers)):
            pre = f"l{i}."
            c1, h1, attnc, a, c2, h2, siluc, act = caches[i]
            dact, grads[pre + "mlp.w2"] = nn.linear_bwd(dx, (act, p[pre + "mlp.w2"]))
            du = nn.silu_bwd(dact, siluc)
            dh2, grads[pre + "mlp.w1"] = nn.linear_bwd(du, (h2, p[pre + "mlp.w1"]))
            dx = dx + self._affine_ln_bwd(grads, pre + "ln2", dh2, c2)
            da, grads[pre + "attn.wo"] = nn.linear_bwd(dx, (a, p[pre + "attn.wo"]))
            dqh, dkh, dvh = nn.attention_bwd(self._split_heads(da), attnc)
            dh1 = np.zeros_like(h1)
            for w, dz in (("wq", dqh), ("wk", dkh), ("wv", dvh)):
                dzm = self._merge_heads(dz)
                dpart, grads[pre + "attn." + w] = nn.linear_bwd(dzm, (h1, p[pre + "attn." + w]))
                dh1 += dpart
            dx = dx + self._affine_ln_bwd(grads, pre + "ln1", dh1, c1)
        dx = dx * valid[:, :, None]
        np.add.at(grads["emb.ph"], idx[valid], dx[valid])
        grads["emb.pos"][: dx.shape[1]] = dx.sum(axis=0)
        return grads

    def _affine_ln_bwd(self, grads, prefix, dy, cache):
        lnc, xhat, g = cache
        grads[prefix + ".g"] = (dy * xhat).sum(axis=(0, 1))
        grads[prefix + ".b"] = dy.sum(axis=(0, 1))
        return nn.layernorm_bwd(dy * (1.0 + g), lnc)

    def predict_duration(self, phonemes) -> float:
        """Predicted utterance duration in seconds; always finite and positive."""
        phonemes = np.asarray(phonemes, dtype=np.int64)
        if phonemes.ndim != 1 or len(phonemes) == 0:
            raise InvalidArgument("phonemes must be a non-empty id sequence")
        return float(self.forward_batch([phonemes])[0])


def _softplus(x):
    return np.logaddexp(np.asarray(0.0, dtype=x.dtype), x)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def train_duration(pairs: list, cfg: DurationModelConfig,
                   tcfg: DurationTrainConfig | None = None,
                   log_every: int = 0) -> DurationModel:
    """Fit the regressor with MAE loss; reproducible under the config seed."""
    if len(pairs) < 100:
        raise InvalidArgument(f"need at least 100 (phonemes, seconds) pairs, got {len(pairs)}")
    tcfg = tcfg or DurationTrainConfig()
    rng = np.random.default_rng(tcfg.seed)
    model = DurationModel(cfg, rng=rng)
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(vv) for k, vv in model.params.items()}
    for t in range(1, tcfg.steps + 1):
        take = rng.integers(0, len(pairs), size=tcfg.batch_size)
        rows = [np.asarray(pairs[j][0], dtype=np.int64) for j in take]
        targets = np.array([pairs[j][1] for j in take], dtype=np.float64)
        pred, cache = model.forward_batch(rows, want_cache=True)
        err = pred.astype(np.float64) - targets
        loss = float(np.abs(err).mean())
        dpred = (np.sign(err) / len(err)).astype(model.cfg.np_dtype)
        grads = model.backward_batch(cache, dpred)
        nn.adamw_step(model.params, grads, m, v, t, tcfg.lr,
                      tcfg.adam_beta1, tcfg.adam_beta2, 1e-8, tcfg.weight_decay)
        if log_every and t % log_every == 0:
            print(f"duration step {t:>5d}  mae {loss:.4f}")
    return model


def save_duration_model(model: DurationModel, path) -> None:
    tensors = {"param." + k: arr for k, arr in model.params.items()}
    write_container(path, DURATION_MAGIC, asdict(model.cfg), tensors, {})


def load_duration_model(path) -> DurationModel:
    config, tensors, _ = read_container(path, DURATION_MAGIC)
    try:
        cfg = DurationModelConfig(**config)
    except TypeError as exc:
        raise ConfigError(f"bad duration model config: {exc}") from exc
    params = {k[len("param.") :]: arr for k, arr in tensors.items() if k.startswith("param.")}
    return DurationModel(cfg, params=params)
