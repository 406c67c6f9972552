"""Small pre-norm Transformer pieces built on :mod:`dropsearch.tensor`.

Shared by the attention controller and the toy language model. Parameters are
plain ``dict[str, Tensor]``; layers look them up by prefix. ``hook`` lets the
caller rewrite intermediate activations at named sites (used to apply dropout
masks) and receives ``(site, tensor)``.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

Hook = Callable[[str, Tensor], Tensor]

NEG_INF = -1e9


def _identity(site: str, t: Tensor) -> Tensor:
    return t


def init_transformer(rng: np.random.Generator, prefix: str, d_model: int, n_heads: int,
                     d_head: int, d_ff: int, std: float) -> dict[str, np.ndarray]:
    inner = n_heads * d_head
    return {
        f"{prefix}ln1_g": np.ones(d_model), f"{prefix}ln1_b": np.zeros(d_model),
        f"{prefix}wq": rng.normal(0.0, std, (d_model, inner)),
        f"{prefix}wk": rng.normal(0.0, std, (d_model, inner)),
        f"{prefix}wv": rng.normal(0.0, std, (d_model, inner)),
        f"{prefix}wo": rng.normal(0.0, std, (inner, d_model)),
        f"{prefix}ln2_g": np.ones(d_model), f"{prefix}ln2_b": np.zeros(d_model),
        f"{prefix}w1": rng.normal(0.0, std, (d_model, d_ff)), f"{prefix}b1": np.zeros(d_ff),
        f"{prefix}w2": rng.normal(0.0, std, (d_ff, d_model)), f"{prefix}b2": np.zeros(d_model),
    }


def causal_bias(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), NEG_INF), k=1)


def attention(x: Tensor, p: dict, prefix: str, n_heads: int, causal: bool = True,
              hook: Hook = _identity) -> Tensor:
    b, length, _ = x.shape
    inner = p[f"{prefix}wq"].shape[1]
    d_head = inner // n_heads

    def heads(t):
        return T.transpose(T.reshape(t, (b, length, n_heads, d_head)), (0, 2, 1, 3))

    q = hook("query", heads(x @ p[f"{prefix}wq"]))
    k = hook("key", heads(x @ p[f"{prefix}wk"]))
    v = hook("value", heads(x @ p[f"{prefix}wv"]))
    scores = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(d_head))
    if causal:
        scores = T.add(scores, causal_bias(length))
    probs = hook("attn_probs", T.softmax(scores))
    ctx = T.reshape(T.transpose(probs @ v, (0, 2, 1, 3)), (b, length, inner))
    ctx = hook("out_proj", ctx)
    return hook("attn_residual", ctx @ p[f"{prefix}wo"])


def feed_forward(x: Tensor, p: dict, prefix: str, hook: Hook = _identity) -> Tensor:
    h = hook("ffn_inner", T.relu(x @ p[f"{prefix}w1"] + p[f"{prefix}b1"]))
    return hook("ffn_output", h @ p[f"{prefix}w2"] + p[f"{prefix}b2"])


def transformer_block(x: Tensor, p: dict, prefix: str, n_heads: int, causal: bool = True,
                      hook: Hook = _identity) -> Tensor:
    h = T.layer_norm(x, p[f"{prefix}ln1_g"], p[f"{prefix}ln1_b"])
    x = x + attention(h, p, prefix, n_heads, causal, hook)
    h = T.layer_norm(x, p[f"{prefix}ln2_g"], p[f"{prefix}ln2_b"])
    return x + feed_forward(h, p, prefix, hook)
