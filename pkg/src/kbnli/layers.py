"""Attention and encoder building blocks.

Multi-head attention follows the per-head projection form
head_i = softmax((x_q L_i)(x_kv R_i)^T / sqrt(d_k) + b * B_i) (x_kv W_i),
where B_i is the 0/1 relation matrix assigned to head i. Residuals use the
post-norm order norm(x + sublayer(x)); nothing here applies a causal mask.
"""

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    additive_mask,
    concat,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    transpose_last,
)


@dataclass
class NormParams:
    gain: Tensor
    shift: Tensor

    def named(self, prefix=""):
        yield f"{prefix}gain", self.gain
        yield f"{prefix}shift", self.shift


@dataclass
class AttentionParams:
    """Per-head projection lists L (query), R (key), W (value), each entry
    (d_model, d_k), plus the output projection w_o of (heads*d_k, d_model)."""

    L: list
    R: list
    W: list
    w_o: Tensor

    def __post_init__(self):
        h = len(self.L)
        if h == 0 or len(self.R) != h or len(self.W) != h:
            raise ValueError("L, R, W must be non-empty lists of equal length")
        d_model, d_k = self.L[0].shape
        for t in (*self.L, *self.R, *self.W):
            if t.shape != (d_model, d_k):
                raise ValueError(
                    f"every head projection must be {(d_model, d_k)}, got {t.shape}"
                )
        if h * d_k != d_model:
            raise ValueError(
                f"d_k ({d_k}) must equal d_model ({d_model}) / heads ({h}) exactly"
            )
        if self.w_o.shape != (h * d_k, d_model):
            raise ValueError(
                f"w_o must be {(h * d_k, d_model)}, got {self.w_o.shape}"
            )

    @property
    def heads(self):
        return len(self.L)

    @property
    def d_model(self):
        return self.L[0].shape[0]

    @property
    def d_k(self):
        return self.L[0].shape[1]

    def named(self, prefix=""):
        for i in range(self.heads):
            yield f"{prefix}L{i}", self.L[i]
            yield f"{prefix}R{i}", self.R[i]
            yield f"{prefix}W{i}", self.W[i]
        yield f"{prefix}w_o", self.w_o


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        d_model, d_ff = self.w1.shape
        if self.b1.shape != (d_ff,) or self.w2.shape != (d_ff, d_model) \
                or self.b2.shape != (d_model,):
            raise ValueError(
                "inconsistent FFN shapes: "
                f"w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )

    def named(self, prefix=""):
        yield f"{prefix}w1", self.w1
        yield f"{prefix}b1", self.b1
        yield f"{prefix}w2", self.w2
        yield f"{prefix}b2", self.b2


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ffn: FFNParams
    norm1: NormParams
    norm2: NormParams

    def named(self, prefix=""):
        yield from self.attn.named(prefix + "attn.")
        yield from self.ffn.named(prefix + "ffn.")
        yield from self.norm1.named(prefix + "norm1.")
        yield from self.norm2.named(prefix + "norm2.")


@dataclass
class CrossEncoderLayerParams:
    """Decoder-style layer: self-attention, then cross-attention onto the
    other sentence (the only place a bias stack applies), then the FFN."""

    self_attn: AttentionParams
    cross_attn: AttentionParams
    ffn: FFNParams
    norm1: NormParams
    norm2: NormParams
    norm3: NormParams

    def named(self, prefix=""):
        yield from self.self_attn.named(prefix + "self.")
        yield from self.cross_attn.named(prefix + "cross.")
        yield from self.ffn.named(prefix + "ffn.")
        yield from self.norm1.named(prefix + "norm1.")
        yield from self.norm2.named(prefix + "norm2.")
        yield from self.norm3.named(prefix + "norm3.")


# -- initialization -----------------------------------------------------------


def init_weight(rng, shape, scale=0.02):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def init_attention(rng, d_model, heads, scale=0.02):
    if d_model % heads != 0:
        raise ValueError(f"d_model ({d_model}) must be divisible by heads ({heads})")
    d_k = d_model // heads
    return AttentionParams(
        L=[init_weight(rng, (d_model, d_k), scale) for _ in range(heads)],
        R=[init_weight(rng, (d_model, d_k), scale) for _ in range(heads)],
        W=[init_weight(rng, (d_model, d_k), scale) for _ in range(heads)],
        w_o=init_weight(rng, (heads * d_k, d_model), scale),
    )


def init_ffn(rng, d_model, d_ff, scale=0.02):
    return FFNParams(
        w1=init_weight(rng, (d_model, d_ff), scale),
        b1=Tensor(np.zeros(d_ff), requires_grad=True),
        w2=init_weight(rng, (d_ff, d_model), scale),
        b2=Tensor(np.zeros(d_model), requires_grad=True),
    )


def init_norm(d_model):
    return NormParams(
        gain=Tensor(np.ones(d_model), requires_grad=True),
        shift=Tensor(np.zeros(d_model), requires_grad=True),
    )


def init_encoder_layer(rng, d_model, heads, d_ff, scale=0.02):
    return EncoderLayerParams(
        attn=init_attention(rng, d_model, heads, scale),
        ffn=init_ffn(rng, d_model, d_ff, scale),
        norm1=init_norm(d_model),
        norm2=init_norm(d_model),
    )


def init_cross_encoder_layer(rng, d_model, heads, d_ff, scale=0.02):
    return CrossEncoderLayerParams(
        self_attn=init_attention(rng, d_model, heads, scale),
        cross_attn=init_attention(rng, d_model, heads, scale),
        ffn=init_ffn(rng, d_model, d_ff, scale),
        norm1=init_norm(d_model),
        norm2=init_norm(d_model),
        norm3=init_norm(d_model),
    )


# -- forward ops --------------------------------------------------------------


def scaled_dot_attention(q, k, v, key_mask=None, bias=None, b=10.0,
                         return_weights=False):
    """softmax(q k^T / sqrt(d_k) + b*bias + mask) v.

    key_mask is a 0/1 keep vector over key positions (or None); bias, when
    given, is a 0/1 matrix of shape (lq, lk).
    """
    d_k = q.shape[-1]
    logits = matmul(q, transpose_last(k)) * (1.0 / math.sqrt(d_k))
    if bias is not None:
        bias_data = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=np.float64)
        if bias_data.shape != logits.shape:
            raise ShapeError(
                f"bias shape {bias_data.shape} does not match logits {logits.shape}"
            )
        logits = logits + Tensor(b * bias_data)
    mask = additive_mask(key_mask) if key_mask is not None else None
    weights = masked_softmax(logits, mask)
    out = matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def multi_head_attention(x_q, x_kv, params, key_mask=None, bias_stack=None,
                         return_weights=False):
    """Per-head biased attention, heads concatenated and projected by w_o.

    bias_stack, when given, must carry exactly one matrix per head; head i
    receives bias_stack.matrices[i] with offset bias_stack.b.
    """
    if bias_stack is not None and bias_stack.matrices.shape[0] != params.heads:
        raise ShapeError(
            f"bias stack has {bias_stack.matrices.shape[0]} matrices "
            f"for {params.heads} heads"
        )
    heads = []
    all_weights = []
    for i in range(params.heads):
        bias = bias_stack.matrices[i] if bias_stack is not None else None
        b = bias_stack.b if bias_stack is not None else 0.0
        head, weights = scaled_dot_attention(
            matmul(x_q, params.L[i]),
            matmul(x_kv, params.R[i]),
            matmul(x_kv, params.W[i]),
            key_mask=key_mask,
            bias=bias,
            b=b,
            return_weights=True,
        )
        heads.append(head)
        all_weights.append(weights.data)
    out = matmul(concat(heads, axis=-1), params.w_o)
    if return_weights:
        return out, np.stack(all_weights)
    return out


def ffn(x, params):
    """gelu(x w1 + b1) w2 + b2, applied position-wise."""
    return matmul(gelu(matmul(x, params.w1) + params.b1), params.w2) + params.b2


def encoder_layer(x, params, pad_mask=None, bias_stack=None):
    """norm(x + self_attn(x)) then norm(y + ffn(y))."""
    attended = multi_head_attention(x, x, params.attn, key_mask=pad_mask,
                                    bias_stack=bias_stack)
    y = layer_norm(x + attended, params.norm1.gain, params.norm1.shift)
    return layer_norm(y + ffn(y, params.ffn), params.norm2.gain, params.norm2.shift)


def cross_encoder_layer(x, memory, params, x_mask=None, mem_mask=None,
                        bias_stack=None):
    """Self-attention over x, biased cross-attention onto memory, then FFN.

    The bias stack touches only the cross-attention sub-layer.
    """
    selfed = multi_head_attention(x, x, params.self_attn, key_mask=x_mask)
    y = layer_norm(x + selfed, params.norm1.gain, params.norm1.shift)
    crossed = multi_head_attention(y, memory, params.cross_attn,
                                   key_mask=mem_mask, bias_stack=bias_stack)
    z = layer_norm(y + crossed, params.norm2.gain, params.norm2.shift)
    return layer_norm(z + ffn(z, params.ffn), params.norm3.gain, params.norm3.shift)
