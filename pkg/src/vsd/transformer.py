"""Generic pre-layer-norm Transformer encoder and decoder stacks.

These stacks operate purely in embedding space: token/position embedding
and vocabulary projection belong to the task model that owns the (tied)
embedding table.  Parameters live in nested dataclasses of ``Tensor`` so
that ``collect_parameters`` yields a stable, insertion-ordered flat view
for the optimizer and for checkpoints.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from vsd import autodiff as ad
from vsd.autodiff import Tensor

__all__ = [
    "TransformerConfig",
    "EncoderOutput",
    "multi_head_attention",
    "encoder_forward",
    "decoder_forward",
    "init_encoder",
    "init_decoder",
    "collect_parameters",
]

INIT_STD = 0.02


@dataclass
class TransformerConfig:
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    max_seq_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        for field in ("d_model", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, field) <= 0:
                raise ValueError(f"TransformerConfig.{field} must be positive")
        if self.n_encoder_layers < 0 or self.n_decoder_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate {self.dropout_rate} outside [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncoderOutput:
    """Joint high-level states, one row per input position."""

    states: Tensor

    @property
    def seq_len(self) -> int:
        return self.states.shape[0]


@dataclass
class AttentionParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderLayerParams:
    attn_ln: LayerNormParams
    attn: AttentionParams
    ff_ln: LayerNormParams
    ff: FeedForwardParams


@dataclass
class DecoderLayerParams:
    self_ln: LayerNormParams
    self_attn: AttentionParams
    cross_ln: LayerNormParams
    cross_attn: AttentionParams
    ff_ln: LayerNormParams
    ff: FeedForwardParams


@dataclass
class EncoderStackParams:
    layers: list
    out_ln: LayerNormParams | None


@dataclass
class DecoderStackParams:
    layers: list
    out_ln: LayerNormParams | None


def _weight(rng, fan_in, fan_out) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(n) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ln(d) -> LayerNormParams:
    return LayerNormParams(gain=Tensor(np.ones(d), requires_grad=True), bias=_zeros(d))


def _attention_params(rng, d) -> AttentionParams:
    return AttentionParams(
        wq=_weight(rng, d, d), bq=_zeros(d),
        wk=_weight(rng, d, d), bk=_zeros(d),
        wv=_weight(rng, d, d), bv=_zeros(d),
        wo=_weight(rng, d, d), bo=_zeros(d),
    )


def _ff_params(rng, d, d_ff) -> FeedForwardParams:
    return FeedForwardParams(
        w1=_weight(rng, d, d_ff), b1=_zeros(d_ff),
        w2=_weight(rng, d_ff, d), b2=_zeros(d),
    )


def init_encoder(cfg: TransformerConfig, rng: np.random.Generator) -> EncoderStackParams:
    layers = [
        EncoderLayerParams(
            attn_ln=_ln(cfg.d_model),
            attn=_attention_params(rng, cfg.d_model),
            ff_ln=_ln(cfg.d_model),
            ff=_ff_params(rng, cfg.d_model, cfg.d_ff),
        )
        for _ in range(cfg.n_encoder_layers)
    ]
    return EncoderStackParams(layers=layers, out_ln=_ln(cfg.d_model) if layers else None)


def init_decoder(cfg: TransformerConfig, rng: np.random.Generator) -> DecoderStackParams:
    layers = [
        DecoderLayerParams(
            self_ln=_ln(cfg.d_model),
            self_attn=_attention_params(rng, cfg.d_model),
            cross_ln=_ln(cfg.d_model),
            cross_attn=_attention_params(rng, cfg.d_model),
            ff_ln=_ln(cfg.d_model),
            ff=_ff_params(rng, cfg.d_model, cfg.d_ff),
        )
        for _ in range(cfg.n_decoder_layers)
    ]
    return DecoderStackParams(layers=layers, out_ln=_ln(cfg.d_model) if layers else None)


def collect_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested dataclasses/lists of tensors into (name, tensor) pairs."""
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if obj is None:
        return []
    if dataclasses.is_dataclass(obj):
        out = []
        for f in dataclasses.fields(obj):
            sub = prefix + "." + f.name if prefix else f.name
            out.extend(collect_parameters(getattr(obj, f.name), sub))
        return out
    if isinstance(obj, (list, tuple)):
        out = []
        for i, item in enumerate(obj):
            out.extend(collect_parameters(item, f"{prefix}.{i}"))
        return out
    return []


def multi_head_attention(
    p: AttentionParams,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    mask: np.ndarray,
    n_heads: int,
    *,
    dropout_rate: float = 0.0,
    dropout_rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Projected scaled dot-product attention over all heads at once.

    ``mask`` is boolean [len_q, len_k] with True marking allowed key
    positions; masked positions receive exactly zero attention weight.
    """
    d_model = p.wq.shape[0]
    for name, t in (("queries", queries), ("keys", keys), ("values", values)):
        if t.ndim != 2 or t.shape[1] != d_model:
            raise ValueError(
                f"multi_head_attention: {name} shape {t.shape} does not match d_model {d_model}"
            )
    if d_model % n_heads != 0:
        raise ValueError(f"multi_head_attention: d_model {d_model} not divisible by {n_heads} heads")
    lq, lk = queries.shape[0], keys.shape[0]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (lq, lk):
        raise ValueError(f"multi_head_attention: mask shape {mask.shape} != ({lq}, {lk})")
    head_dim = d_model // n_heads

    def split_heads(t, length):
        # [L, d_model] -> [H, L, head_dim]
        return ad.transpose(ad.reshape(t, (length, n_heads, head_dim)), (1, 0, 2))

    q = split_heads(ad.linear(queries, p.wq, p.bq), lq)
    k = split_heads(ad.linear(keys, p.wk, p.bk), lk)
    v = split_heads(ad.linear(values, p.wv, p.bv), lk)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(head_dim))
    weights = ad.masked_softmax(scores, mask[np.newaxis, :, :])
    weights = ad.dropout(weights, dropout_rate, dropout_rng)
    ctx = ad.matmul(weights, v)  # [H, Lq, head_dim]
    merged = ad.reshape(ad.transpose(ctx, (1, 0, 2)), (lq, d_model))
    out = ad.linear(merged, p.wo, p.bo)
    if return_weights:
        return out, weights
    return out


def _feed_forward(p: FeedForwardParams, x, dropout_rate, rng):
    h = ad.relu(ad.linear(x, p.w1, p.b1))
    h = ad.dropout(h, dropout_rate, rng)
    return ad.linear(h, p.w2, p.b2)


def encoder_forward(
    params: EncoderStackParams,
    cfg: TransformerConfig,
    embeddings: Tensor,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> EncoderOutput:
    """Bidirectional encoding; a zero-layer stack is the identity."""
    length = embeddings.shape[0]
    if length > cfg.max_seq_len:
        raise ValueError(
            f"encoder_forward: sequence length {length} exceeds max_seq_len {cfg.max_seq_len}"
        )
    rate = cfg.dropout_rate if dropout_rng is not None else 0.0
    mask = np.ones((length, length), dtype=bool)
    x = embeddings
    for layer in params.layers:
        h = ad.layer_norm(x, layer.attn_ln.gain, layer.attn_ln.bias)
        attn = multi_head_attention(
            layer.attn, h, h, h, mask, cfg.n_heads, dropout_rate=rate, dropout_rng=dropout_rng
        )
        x = ad.add(x, ad.dropout(attn, rate, dropout_rng))
        h = ad.layer_norm(x, layer.ff_ln.gain, layer.ff_ln.bias)
        x = ad.add(x, ad.dropout(_feed_forward(layer.ff, h, rate, dropout_rng), rate, dropout_rng))
    if params.out_ln is not None:
        x = ad.layer_norm(x, params.out_ln.gain, params.out_ln.bias)
    return EncoderOutput(states=x)


def decoder_forward(
    params: DecoderStackParams,
    cfg: TransformerConfig,
    embeddings: Tensor,
    encoder_output: EncoderOutput,
    *,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Causally-masked decoding cross-attending to the encoder states.

    Row j of the result depends only on embedding rows <= j and on the
    encoder output, so extending the prefix leaves earlier rows unchanged.
    """
    length = embeddings.shape[0]
    if length > cfg.max_seq_len:
        raise ValueError(
            f"decoder_forward: sequence length {length} exceeds max_seq_len {cfg.max_seq_len}"
        )
    rate = cfg.dropout_rate if dropout_rng is not None else 0.0
    causal = np.tril(np.ones((length, length), dtype=bool))
    cross = np.ones((length, encoder_output.seq_len), dtype=bool)
    x = embeddings
    for layer in params.layers:
        h = ad.layer_norm(x, layer.self_ln.gain, layer.self_ln.bias)
        attn = multi_head_attention(
            layer.self_attn, h, h, h, causal, cfg.n_heads, dropout_rate=rate, dropout_rng=dropout_rng
        )
        x = ad.add(x, ad.dropout(attn, rate, dropout_rng))
        h = ad.layer_norm(x, layer.cross_ln.gain, layer.cross_ln.bias)
        attn = multi_head_attention(
            layer.cross_attn,
            h,
            encoder_output.states,
            encoder_output.states,
            cross,
            cfg.n_heads,
            dropout_rate=rate,
            dropout_rng=dropout_rng,
        )
        x = ad.add(x, ad.dropout(attn, rate, dropout_rng))
        h = ad.layer_norm(x, layer.ff_ln.gain, layer.ff_ln.bias)
        x = ad.add(x, ad.dropout(_feed_forward(layer.ff, h, rate, dropout_rng), rate, dropout_rng))
    if params.out_ln is not None:
        x = ad.layer_norm(x, params.out_ln.gain, params.out_ln.bias)
    return x
