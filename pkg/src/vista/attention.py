"""Multi-head attention with explicit, exportable attention matrices."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .params import ParamStore, glorot_uniform
from .tensor import add, matmul, scale, softmax, transpose

MHA_WEIGHTS = ("wq", "wk", "wv", "wo")
# No key bias: a constant added to every key contributes the same term to each
# query's logits, which the row softmax cancels, so it could never train.
MHA_BIASES = ("bq", "bv", "bo")


def init_mha_params(store: ParamStore, prefix: str, dim: int, rng: np.random.Generator):
    for w in MHA_WEIGHTS:
        store.add(f"{prefix}.{w}", glorot_uniform(rng, dim, dim, (dim, dim)))
    for b in MHA_BIASES:
        store.add(f"{prefix}.{b}", np.zeros(dim))


def multi_head_attention(q, k, v, n_heads: int, params: ParamStore, prefix: str):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``q``/``k``/``v`` are tensors of shape (..., L, d) with matching leading
    dims; ``k`` and ``v`` must share their row count. Logits are scaled by
    1/sqrt(head_dim). Heads are computed in one stacked matmul by folding the
    head axis into the batch dims. Returns ``(output, attn)`` where ``attn``
    is a detached array of shape (n_heads, ..., Lq, Lk) whose rows each sum
    to 1.
    """
    dim = q.shape[-1]
    if dim % n_heads != 0:
        raise ConfigError(f"model dim {dim} not divisible by {n_heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise ConfigError(f"key rows {k.shape[-2]} != value rows {v.shape[-2]}")
    head_dim = dim // n_heads

    def split_heads(x):
        # (..., L, d) -> (..., h, L, head_dim)
        batch = x.shape[:-2]
        length = x.shape[-2]
        x = x.reshape(batch + (length, n_heads, head_dim))
        axes = tuple(range(len(batch))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
        return transpose(x, axes)

    qh = split_heads(add(matmul(q, params[f"{prefix}.wq"]), params[f"{prefix}.bq"]))
    kh = split_heads(matmul(k, params[f"{prefix}.wk"]))
    vh = split_heads(add(matmul(v, params[f"{prefix}.wv"]), params[f"{prefix}.bv"]))

    swap = tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)
    logits = scale(matmul(qh, transpose(kh, swap)), 1.0 / math.sqrt(head_dim))
    weights = softmax(logits, axis=-1)
    mixed = matmul(weights, vh)  # (..., h, Lq, head_dim)

    batch = q.shape[:-2]
    lq = q.shape[-2]
    back = tuple(range(len(batch))) + (mixed.ndim - 2, mixed.ndim - 3, mixed.ndim - 1)
    merged = transpose(mixed, back).reshape(batch + (lq, dim))
    out = add(matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])

    attn = np.moveaxis(weights.data.copy(), -3, 0)  # heads leading
    return out, attn
