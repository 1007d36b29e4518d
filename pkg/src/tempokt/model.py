"""Encoder-decoder transformer over the encoded window streams.

Everything is plain numpy: parameters live in a flat name -> array registry,
the forward pass is written alongside an exact reverse-mode backward pass,
and both run in float32 (training) or float64 (gradient checking). Attention
is causally masked on both the encoder and decoder sides: a position may
attend only to itself and earlier non-pad positions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import IO, Any, Mapping

import numpy as np

from .featurize import VocabSpec, WindowBatch

MASKED_LOGIT = -1e9  # stands in for -inf; underflows to exactly 0 after exp
LN_EPS = 1e-5
PROB_CLAMP = 1e-7

_CKPT_MAGIC = b"TKCK0001"

# encoder/decoder token streams and the embedding table each one indexes
ENC_STREAMS = (("question", "emb/question"), ("part", "emb/part"),
               ("explanation", "emb/explanation"))
DEC_STREAMS = (("response", "emb/response"), ("elapsed", "emb/elapsed"),
               ("lag_s", "emb/lag_s"), ("lag_m", "emb/lag_m"), ("lag_d", "emb/lag_d"))


@dataclass(frozen=True)
class ModelConfig:
    vocab: VocabSpec
    d_model: int = 128
    n_heads: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 512
    max_seq: int = 100
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_seq"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "vocab"}
        out["vocab"] = self.vocab.sizes()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        vocab = kwargs.pop("vocab", None)
        if vocab is None:
            raise ValueError("model config requires a 'vocab' section")
        if isinstance(vocab, Mapping) and not isinstance(vocab, VocabSpec):
            from .featurize import _vocab_kwargs
            vocab = VocabSpec(**_vocab_kwargs(vocab))
        return cls(vocab=vocab, **kwargs)


Params = dict[str, np.ndarray]


@dataclass
class Model:
    config: ModelConfig
    params: Params


def _attn_shapes(shapes: dict[str, tuple[int, ...]], prefix: str, d: int) -> None:
    for w in ("Wq", "Wk", "Wv", "Wo"):
        shapes[f"{prefix}/{w}"] = (d, d)
    for b in ("bq", "bk", "bv", "bo"):
        shapes[f"{prefix}/{b}"] = (d,)


def _ffn_shapes(shapes: dict[str, tuple[int, ...]], prefix: str, d: int, f: int) -> None:
    shapes[f"{prefix}/W1"] = (d, f)
    shapes[f"{prefix}/b1"] = (f,)
    shapes[f"{prefix}/W2"] = (f, d)
    shapes[f"{prefix}/b2"] = (d,)


def _ln_shapes(shapes: dict[str, tuple[int, ...]], prefix: str, d: int) -> None:
    shapes[f"{prefix}/g"] = (d,)
    shapes[f"{prefix}/b"] = (d,)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """The parameter registry: names and shapes in canonical order."""
    v, d, f, L = config.vocab, config.d_model, config.d_ff, config.max_seq
    shapes: dict[str, tuple[int, ...]] = {
        "emb/question": (v.n_questions, d),
        "emb/part": (v.n_parts, d),
        "emb/explanation": (v.n_explanation, d),
        "emb/enc_pos": (L, d),
        "emb/dec_pos": (L, d),
        "emb/response": (v.n_response, d),
        "emb/elapsed": (v.n_elapsed, d),
        "emb/lag_s": (v.n_lag_s, d),
        "emb/lag_m": (v.n_lag_m, d),
        "emb/lag_d": (v.n_lag_d, d),
    }
    for i in range(config.n_enc_layers):
        _attn_shapes(shapes, f"enc{i}/attn", d)
        _ln_shapes(shapes, f"enc{i}/ln1", d)
        _ffn_shapes(shapes, f"enc{i}/ffn", d, f)
        _ln_shapes(shapes, f"enc{i}/ln2", d)
    for i in range(config.n_dec_layers):
        _attn_shapes(shapes, f"dec{i}/self", d)
        _ln_shapes(shapes, f"dec{i}/ln1", d)
        _attn_shapes(shapes, f"dec{i}/cross", d)
        _ln_shapes(shapes, f"dec{i}/ln2", d)
        _ffn_shapes(shapes, f"dec{i}/ffn", d, f)
        _ln_shapes(shapes, f"dec{i}/ln3", d)
    shapes["head/w"] = (d,)
    shapes["head/b"] = ()
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of learnable scalars (derived in docs/parameter_count.md)."""
    v, d, f, L = config.vocab, config.d_model, config.d_ff, config.max_seq
    emb_rows = (v.n_questions + v.n_parts + v.n_explanation + v.n_response
                + v.n_elapsed + v.n_lag_s + v.n_lag_m + v.n_lag_d + 2 * L)
    enc_layer = 4 * d * d + 2 * d * f + f + 9 * d
    dec_layer = 8 * d * d + 2 * d * f + f + 15 * d
    return (emb_rows * d
            + config.n_enc_layers * enc_layer
            + config.n_dec_layers * dec_layer
            + d + 1)


def init_params(config: ModelConfig) -> Params:
    """Seeded initialization: weights ~ N(0, 1/sqrt(d_model)); biases, layer-norm
    shifts and pad embedding rows zero; layer-norm scales one."""
    rng = np.random.default_rng(config.seed)
    scale = 1.0 / np.sqrt(config.d_model)
    dtype = config.np_dtype
    params: Params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit("/", 1)[1]
        if leaf == "g":
            params[name] = np.ones(shape, dtype=dtype)
        elif leaf.startswith("b") or leaf == "b":
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            params[name] = rng.normal(0.0, scale, size=shape).astype(dtype)
    for stream, table in (*ENC_STREAMS, *DEC_STREAMS):
        params[table][config.vocab.pad_id(stream)] = 0.0

    total = sum(p.size for p in params.values())
    expected = parameter_count(config)
    if total != expected:
        raise AssertionError(f"parameter registry holds {total} scalars, formula says {expected}")
    for stream, table in (*ENC_STREAMS, *DEC_STREAMS):
        rows = params[table].shape[0]
        if rows != config.vocab.sizes()[stream]:
            raise AssertionError(
                f"embedding table {table} has {rows} rows, vocab requires "
                f"{config.vocab.sizes()[stream]}"
            )
    return params


def zeros_like_params(params: Params) -> Params:
    return {name: np.zeros_like(p) for name, p in params.items()}


# ---------------------------------------------------------------------------
# primitives


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row softmax with exact zeros at disallowed positions.

    Rows with no allowed position come back all-zero instead of NaN; callers
    that require a normalizable row must validate beforehand.
    """
    masked = np.where(mask, logits, logits.dtype.type(MASKED_LOGIT))
    shifted = masked - masked.max(axis=-1, keepdims=True)
    weights = np.exp(shifted) * mask
    denom = weights.sum(axis=-1, keepdims=True)
    return weights / np.where(denom == 0.0, denom.dtype.type(1.0), denom)


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
               eps: float = LN_EPS) -> np.ndarray:
    """Normalize each row of x over its last axis to mean 0, variance 1,
    then apply the learned affine transform."""
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * scale + shift


def feed_forward(x: np.ndarray, w1: np.ndarray, b1: np.ndarray,
                 w2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Position-wise two-layer ReLU network."""
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention with a boolean keep-mask over key positions.

    Raises if any query row has no allowed key: its softmax cannot normalize.
    """
    allowed = np.broadcast_to(mask, q.shape[:-1] + (k.shape[-2],))
    if not allowed.any(axis=-1).all():
        raise ValueError("attention mask leaves at least one query row with no allowed key")
    d_k = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(np.asarray(d_k, dtype=q.dtype))
    return masked_softmax(logits, mask) @ v


def multi_head_attention(x_q: np.ndarray, x_kv: np.ndarray,
                         weights: Mapping[str, np.ndarray], mask: np.ndarray,
                         n_heads: int) -> np.ndarray:
    """Project, split into heads over disjoint feature slices, attend, merge.

    weights holds Wq/Wk/Wv/Wo ([d, d]) and bq/bk/bv/bo ([d]). Deterministic
    (no dropout); the training path lives in the cached forward below.
    """
    out, _ = _mha_fwd(x_q, x_kv, weights, mask, n_heads, drop=None)
    return out


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, length, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * dh)


def _mha_fwd(x_q, x_kv, w, mask, n_heads, drop):
    q = _split_heads(x_q @ w["Wq"] + w["bq"], n_heads)
    k = _split_heads(x_kv @ w["Wk"] + w["bk"], n_heads)
    v = _split_heads(x_kv @ w["Wv"] + w["bv"], n_heads)
    inv_scale = 1.0 / np.sqrt(np.asarray(q.shape[-1], dtype=x_q.dtype))
    logits = (q @ k.transpose(0, 1, 3, 2)) * inv_scale
    att = masked_softmax(logits, mask)
    att_kept = att if drop is None else att * drop
    context = _merge_heads(att_kept @ v)
    out = context @ w["Wo"] + w["bo"]
    cache = (x_q, x_kv, q, k, v, att, att_kept, context, inv_scale, drop)
    return out, cache


def _mha_bwd(dout, cache, w, grads, prefix, n_heads):
    x_q, x_kv, q, k, v, att, att_kept, context, inv_scale, drop = cache
    b, length, d = dout.shape

    grads[f"{prefix}/Wo"] += context.reshape(-1, d).T @ dout.reshape(-1, d)
    grads[f"{prefix}/bo"] += dout.sum(axis=(0, 1))
    dcontext = _split_heads(dout @ w["Wo"].T, n_heads)

    datt_kept = dcontext @ v.transpose(0, 1, 3, 2)
    dv = att_kept.transpose(0, 1, 3, 2) @ dcontext
    datt = datt_kept if drop is None else datt_kept * drop
    # softmax backward; att is exactly zero at masked entries, so dlogits is too
    dlogits = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
    dlogits *= inv_scale
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q

    dxq = np.zeros_like(x_q)
    dxkv = np.zeros_like(x_kv)
    for name, dproj, source, dsource in (
        ("Wq", dq, x_q, dxq), ("Wk", dk, x_kv, dxkv), ("Wv", dv, x_kv, dxkv),
    ):
        flat = _merge_heads(dproj).reshape(-1, d)
        grads[f"{prefix}/{name}"] += source.reshape(-1, d).T @ flat
        grads[f"{prefix}/b{name[1].lower()}"] += flat.sum(axis=0)
        dsource += (flat @ w[name].T).reshape(source.shape)
    return dxq, dxkv


def _ln_fwd(x, scale, shift):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    normed = centered * inv
    return normed * scale + shift, (normed, inv)


def _ln_bwd(dout, cache, scale, grads, prefix):
    normed, inv = cache
    grads[f"{prefix}/g"] += (dout * normed).sum(axis=tuple(range(dout.ndim - 1)))
    grads[f"{prefix}/b"] += dout.sum(axis=tuple(range(dout.ndim - 1)))
    dnormed = dout * scale
    mean_d = dnormed.mean(axis=-1, keepdims=True)
    mean_dn = (dnormed * normed).mean(axis=-1, keepdims=True)
    return inv * (dnormed - mean_d - normed * mean_dn)


def _ffn_fwd(x, w, prefix):
    pre = x @ w[f"{prefix}/W1"] + w[f"{prefix}/b1"]
    act = np.maximum(pre, 0.0)
    out = act @ w[f"{prefix}/W2"] + w[f"{prefix}/b2"]
    return out, (x, pre, act)


def _ffn_bwd(dout, cache, w, grads, prefix):
    x, pre, act = cache
    d = x.shape[-1]
    f = act.shape[-1]
    grads[f"{prefix}/W2"] += act.reshape(-1, f).T @ dout.reshape(-1, d)
    grads[f"{prefix}/b2"] += dout.sum(axis=(0, 1))
    dact = dout @ w[f"{prefix}/W2"].T
    dpre = dact * (pre > 0)
    grads[f"{prefix}/W1"] += x.reshape(-1, d).T @ dpre.reshape(-1, f)
    grads[f"{prefix}/b1"] += dpre.sum(axis=(0, 1))
    return dpre @ w[f"{prefix}/W1"].T


class _DropoutPlan:
    """Pre-drawn inverted-dropout factors so a forward pass can be replayed
    bit-identically (finite differences, deterministic training)."""

    def __init__(self, rate: float, rng: np.random.Generator | None, dtype: np.dtype):
        if rate > 0.0 and rng is None:
            raise ValueError("train-mode forward with dropout > 0 requires an rng")
        self.rate = rate
        self.rng = rng
        self.dtype = dtype

    def draw(self, shape: tuple[int, ...]) -> np.ndarray | None:
        if self.rate == 0.0 or self.rng is None:
            return None
        keep = (self.rng.random(shape, dtype=np.float32) >= self.rate)
        return keep.astype(self.dtype) / self.dtype.type(1.0 - self.rate)


def _apply_drop(x: np.ndarray, factor: np.ndarray | None) -> np.ndarray:
    return x if factor is None else x * factor


def _sub(params: Params, prefix: str) -> dict[str, np.ndarray]:
    skip = len(prefix) + 1
    return {name[skip:]: arr for name, arr in params.items() if name.startswith(prefix + "/")}


def _check_ids(ids: np.ndarray, table: np.ndarray, name: str) -> None:
    lo, hi = int(ids.min()), int(ids.max())
    if lo < 0 or hi >= table.shape[0]:
        raise ValueError(
            f"token id out of range for {name}: ids span [{lo}, {hi}], "
            f"table has {table.shape[0]} rows"
        )


def _embed_fwd(batch: WindowBatch, params: Params, streams, pos_table: str,
               drop: _DropoutPlan, dtype):
    first_stream, first_table = streams[0]
    ids0 = getattr(batch, first_stream)
    _check_ids(ids0, params[first_table], first_table)
    x = params[first_table][ids0].astype(dtype, copy=True)
    for stream, table in streams[1:]:
        ids = getattr(batch, stream)
        _check_ids(ids, params[table], table)
        x += params[table][ids]
    length = ids0.shape[1]
    x += params[pos_table][:length]
    factor = drop.draw(x.shape)
    return _apply_drop(x, factor), factor


def _embed_bwd(dx, batch: WindowBatch, params: Params, streams, pos_table: str,
               factor, grads: Params) -> None:
    dsum = _apply_drop(dx, factor)
    d = dsum.shape[-1]
    flat = dsum.reshape(-1, d)
    for stream, table in streams:
        ids = getattr(batch, stream).reshape(-1)
        np.add.at(grads[table], ids, flat)
    grads[pos_table][: dsum.shape[1]] += dsum.sum(axis=0)


def build_attention_mask(valid: np.ndarray) -> np.ndarray:
    """Causal keep-mask [B, 1, L, L]: query i may use key j iff j <= i and j is not pad."""
    length = valid.shape[-1]
    tri = np.tril(np.ones((length, length), dtype=bool))
    return tri[None, None, :, :] & valid[:, None, None, :]


def embed_encoder(batch: WindowBatch, params: Params, config: ModelConfig,
                  rng: np.random.Generator | None = None, train: bool = False) -> np.ndarray:
    """Sum of question, part, explanation and position embeddings (plus dropout)."""
    drop = _DropoutPlan(config.dropout if train else 0.0, rng, config.np_dtype)
    x, _ = _embed_fwd(batch, params, ENC_STREAMS, "emb/enc_pos", drop, config.np_dtype)
    return x


def embed_decoder(batch: WindowBatch, params: Params, config: ModelConfig,
                  rng: np.random.Generator | None = None, train: bool = False) -> np.ndarray:
    """Sum of position, response, elapsed-time and the three lag-time embeddings."""
    drop = _DropoutPlan(config.dropout if train else 0.0, rng, config.np_dtype)
    x, _ = _embed_fwd(batch, params, DEC_STREAMS, "emb/dec_pos", drop, config.np_dtype)
    return x


def _forward_cached(model: Model, batch: WindowBatch, train: bool,
                    rng: np.random.Generator | None):
    config, params = model.config, model.params
    if batch.max_seq != config.max_seq:
        raise ValueError(
            f"batch max_seq {batch.max_seq} does not match model max_seq {config.max_seq}"
        )
    dtype = config.np_dtype
    drop = _DropoutPlan(config.dropout if train else 0.0, rng, dtype)
    mask = build_attention_mask(batch.valid)
    att_shape = (mask.shape[0], config.n_heads, mask.shape[2], mask.shape[3])
    cache: dict[str, Any] = {"mask": mask}

    x, cache["enc_embed_drop"] = _embed_fwd(batch, params, ENC_STREAMS, "emb/enc_pos",
                                            drop, dtype)
    enc_caches = []
    for i in range(config.n_enc_layers):
        pre = f"enc{i}"
        att, att_cache = _mha_fwd(x, x, _sub(params, f"{pre}/attn"), mask,
                                  config.n_heads, drop.draw(att_shape))
        f1 = drop.draw(att.shape)
        r1 = x + _apply_drop(att, f1)
        x, ln1_cache = _ln_fwd(r1, params[f"{pre}/ln1/g"], params[f"{pre}/ln1/b"])
        ff, ff_cache = _ffn_fwd(x, params, f"{pre}/ffn")
        f2 = drop.draw(ff.shape)
        r2 = x + _apply_drop(ff, f2)
        x, ln2_cache = _ln_fwd(r2, params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"])
        enc_caches.append((att_cache, f1, ln1_cache, ff_cache, f2, ln2_cache))
    cache["enc_layers"] = enc_caches
    enc_out = x

    y, cache["dec_embed_drop"] = _embed_fwd(batch, params, DEC_STREAMS, "emb/dec_pos",
                                            drop, dtype)
    dec_caches = []
    for i in range(config.n_dec_layers):
        pre = f"dec{i}"
        att, self_cache = _mha_fwd(y, y, _sub(params, f"{pre}/self"), mask,
                                   config.n_heads, drop.draw(att_shape))
        f1 = drop.draw(att.shape)
        r1 = y + _apply_drop(att, f1)
        y, ln1_cache = _ln_fwd(r1, params[f"{pre}/ln1/g"], params[f"{pre}/ln1/b"])
        cross, cross_cache = _mha_fwd(y, enc_out, _sub(params, f"{pre}/cross"), mask,
                                      config.n_heads, drop.draw(att_shape))
        f2 = drop.draw(cross.shape)
        r2 = y + _apply_drop(cross, f2)
        y, ln2_cache = _ln_fwd(r2, params[f"{pre}/ln2/g"], params[f"{pre}/ln2/b"])
        ff, ff_cache = _ffn_fwd(y, params, f"{pre}/ffn")
        f3 = drop.draw(ff.shape)
        r3 = y + _apply_drop(ff, f3)
        y, ln3_cache = _ln_fwd(r3, params[f"{pre}/ln3/g"], params[f"{pre}/ln3/b"])
        dec_caches.append((self_cache, f1, ln1_cache, cross_cache, f2, ln2_cache,
                           ff_cache, f3, ln3_cache))
    cache["dec_layers"] = dec_caches
    cache["hidden"] = y

    z = y @ params["head/w"] + params["head/b"]
    probs = sigmoid(z)
    return probs, cache


def forward(model: Model, batch: WindowBatch, mode: str = "infer",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-position probability that the response at that position is correct.

    mode "train" applies dropout (requires rng); "infer" is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    probs, _ = _forward_cached(model, batch, train=(mode == "train"), rng=rng)
    if not np.isfinite(probs).all():
        raise FloatingPointError("non-finite model output (numerical fault)")
    return probs


def bce_loss(probs: np.ndarray, target: np.ndarray, valid: np.ndarray) -> float:
    """Mean binary cross-entropy over valid positions, probabilities clamped
    to [1e-7, 1 - 1e-7] before the logs."""
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("no valid positions in batch")
    p = np.clip(probs.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = target.astype(np.float64)
    terms = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.where(valid, terms, 0.0).sum() / n_valid)


def loss_and_grads(model: Model, batch: WindowBatch,
                   rng: np.random.Generator | None = None,
                   train: bool = True) -> tuple[float, np.ndarray, Params]:
    """Training loss, per-position probabilities, and exact gradients for
    every parameter tensor."""
    config, params = model.config, model.params
    probs, cache = _forward_cached(model, batch, train=train, rng=rng)
    loss = bce_loss(probs, batch.target, batch.valid)

    n_valid = int(batch.valid.sum())
    dtype = config.np_dtype
    grads = zeros_like_params(params)

    # d(loss)/d(logit) for sigmoid + BCE; the clamp above only guards the logs
    y = batch.target.astype(dtype)
    dz = (probs - y) * batch.valid.astype(dtype) / dtype.type(n_valid)

    hidden = cache["hidden"]
    grads["head/w"] += np.einsum("bl,bld->d", dz, hidden)
    grads["head/b"] += dz.sum()
    dy = dz[:, :, None] * params["head/w"]

    mask = cache["mask"]
    denc_total = None
    for i in reversed(range(config.n_dec_layers)):
        pre = f"dec{i}"
        (self_cache, f1, ln1_cache, cross_cache, f2, ln2_cache,
         ff_cache, f3, ln3_cache) = cache["dec_layers"][i]
        dr3 = _ln_bwd(dy, ln3_cache, params[f"{pre}/ln3/g"], grads, f"{pre}/ln3")
        dff = _apply_drop(dr3, f3)
        dy2 = dr3 + _ffn_bwd(dff, ff_cache, params, grads, f"{pre}/ffn")
        dr2 = _ln_bwd(dy2, ln2_cache, params[f"{pre}/ln2/g"], grads, f"{pre}/ln2")
        dcross = _apply_drop(dr2, f2)
        dy1_attn, denc = _mha_bwd(dcross, cross_cache, _sub(params, f"{pre}/cross"),
                                  grads, f"{pre}/cross", config.n_heads)
        denc_total = denc if denc_total is None else denc_total + denc
        dy1 = dr2 + dy1_attn
        dr1 = _ln_bwd(dy1, ln1_cache, params[f"{pre}/ln1/g"], grads, f"{pre}/ln1")
        dself = _apply_drop(dr1, f1)
        dq, dkv = _mha_bwd(dself, self_cache, _sub(params, f"{pre}/self"),
                           grads, f"{pre}/self", config.n_heads)
        dy = dr1 + dq + dkv
    _embed_bwd(dy, batch, params, DEC_STREAMS, "emb/dec_pos",
               cache["dec_embed_drop"], grads)

    dx = denc_total if denc_total is not None else np.zeros_like(cache["hidden"])
    for i in reversed(range(config.n_enc_layers)):
        pre = f"enc{i}"
        att_cache, f1, ln1_cache, ff_cache, f2, ln2_cache = cache["enc_layers"][i]
        dr2 = _ln_bwd(dx, ln2_cache, params[f"{pre}/ln2/g"], grads, f"{pre}/ln2")
        dff = _apply_drop(dr2, f2)
        dx1 = dr2 + _ffn_bwd(dff, ff_cache, params, grads, f"{pre}/ffn")
        dr1 = _ln_bwd(dx1, ln1_cache, params[f"{pre}/ln1/g"], grads, f"{pre}/ln1")
        datt = _apply_drop(dr1, f1)
        dq, dkv = _mha_bwd(datt, att_cache, _sub(params, f"{pre}/attn"),
                           grads, f"{pre}/attn", config.n_heads)
        dx = dr1 + dq + dkv
    _embed_bwd(dx, batch, params, ENC_STREAMS, "emb/enc_pos",
               cache["enc_embed_drop"], grads)

    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in tensor '{name}'")
    return loss, probs, grads


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: Model, step: int = 0,
                    history: list[dict[str, Any]] | None = None,
                    optimizer_tensors: Mapping[str, np.ndarray] | None = None) -> None:
    """Manifest (config, step, metric history, tensor index) followed by raw
    little-endian float32 tensor sections in index order."""
    tensors: list[tuple[str, np.ndarray]] = list(model.params.items())
    if optimizer_tensors:
        tensors.extend(optimizer_tensors.items())
    manifest = {
        "format": "tempokt-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "step": step,
        "history": history or [],
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in tensors],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[Model, int, list[dict[str, Any]], Params]:
    """Load a checkpoint; rejects any tensor whose shape disagrees with the
    registry implied by the stored config, naming the tensor."""
    from .featurize import _read_manifest

    with open(path, "rb") as fh:
        manifest = _read_manifest(fh, _CKPT_MAGIC, "tempokt checkpoint")
        config = ModelConfig.from_dict(manifest["config"])
        expected = param_shapes(config)
        params: Params = {}
        opt_tensors: Params = {}
        for entry in manifest["tensors"]:
            name = entry["name"]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape)
            if name.startswith("opt/"):
                opt_tensors[name] = data.astype(config.np_dtype)
                continue
            if name not in expected:
                raise ValueError(f"checkpoint tensor '{name}' is not in the parameter registry")
            if shape != expected[name]:
                raise ValueError(
                    f"checkpoint tensor '{name}' has shape {shape}, registry expects "
                    f"{expected[name]}"
                )
            params[name] = data.astype(config.np_dtype)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
    return Model(config=config, params=params), manifest["step"], manifest["history"], opt_tensors
