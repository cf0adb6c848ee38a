"""Scaled dot-product attention and the residual Att(.) block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class AttentionParams:
    """Projections for one multi-head attention block plus its layer norm.

    Q/K/V projections are stored as full (d, d) matrices; head ``i`` uses
    columns ``i*d_h:(i+1)*d_h``, which is the same as keeping h separate
    (d, d_h) matrices.
    """

    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln_gain: Tensor
    ln_bias: Tensor
    heads: int
    dropout_rate: float = 0.0

    def __post_init__(self):
        d = self.model_dim
        if d % self.heads:
            raise ValueError(f"model_dim {d} not divisible by head count {self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {getattr(self, name).shape}")

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def tensors(self) -> dict[str, Tensor]:
        return {
            k: getattr(self, k)
            for k in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln_gain", "ln_bias")
        }

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, dropout_rate: float = 0.0) -> "AttentionParams":
        bound = 1.0 / math.sqrt(d)

        def w():
            return nx.parameter(rng.uniform(-bound, bound, size=(d, d)))

        def b():
            return nx.parameter(np.zeros(d))

        return cls(w(), b(), w(), b(), w(), b(), w(), b(), nx.parameter(np.ones(d)), nx.parameter(np.zeros(d)), heads, dropout_rate)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes.

    Accepts 2-D inputs or 3-D inputs with a leading head axis.
    Returns ``(out, weights)``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    kt = nx.transpose(k, (1, 0) if k.data.ndim == 2 else (0, 2, 1))
    scores = nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(d_k))
    weights = nx.softmax(scores, axis=-1)
    return nx.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return nx.transpose(nx.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def multi_head_attention(
    queries_in: Tensor, key_input: Tensor, value_input: Tensor, params: AttentionParams
) -> tuple[Tensor, Tensor]:
    """Project, attend per head, concatenate, project out.

    Returns the (n_q, d) output and the (n_q, n_k) head-mean attention map.
    """
    d = params.model_dim
    for name, t in (("queries", queries_in), ("keys", key_input), ("values", value_input)):
        if t.data.ndim != 2 or t.shape[1] != d:
            raise ShapeError(f"attention {name} must be (n, {d}), got {t.shape}")
    if key_input.shape[0] != value_input.shape[0]:
        raise ShapeError(f"attention: {key_input.shape[0]} keys but {value_input.shape[0]} values")
    h = params.heads
    q = _split_heads(nx.linear(queries_in, params.w_q, params.b_q), h)
    k = _split_heads(nx.linear(key_input, params.w_k, params.b_k), h)
    v = _split_heads(nx.linear(value_input, params.w_v, params.b_v), h)
    heads_out, weights = scaled_dot_attention(q, k, v)
    merged = nx.reshape(nx.transpose(heads_out, (1, 0, 2)), (queries_in.shape[0], d))
    return nx.linear(merged, params.w_o, params.b_o), nx.mean(weights, axis=0)


def att_block(
    queries_in: Tensor,
    key_input: Tensor,
    value_input: Tensor,
    residual_source: Tensor,
    params: AttentionParams,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """layer_norm(residual + dropout(MHA(q, k, v))).

    Returns the block output and the head-mean attention weights.
    """
    if residual_source.shape != queries_in.shape:
        raise ShapeError(f"residual {residual_source.shape} must match queries {queries_in.shape}")
    attended, weights = multi_head_attention(queries_in, key_input, value_input, params)
    attended = nx.dropout(attended, params.dropout_rate, rng, training)
    out = nx.layer_norm(nx.add(residual_source, attended), params.ln_gain, params.ln_bias)
    return out, weights
