"""Scaled dot-product attention, multi-head attention, and masking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .params import ParameterStore
from .tensor import Tensor, add, concat, matmul, mul, softmax, transpose

# Additive pre-softmax fill for forbidden positions; at float64 this is
# indistinguishable from -inf after exponentiation but never produces nan.
MASKED_LOGIT = -1e30


@dataclass(frozen=True)
class MultiHeadConfig:
    """Head count and per-head widths for multi-head attention.

    ``key_dim``/``value_dim`` default to ``model_dim // num_heads``. The
    output projection maps ``num_heads * value_dim`` back to ``model_dim``,
    so the head width does not have to divide the model width: 512 with 3
    heads gives 170 per head and a 510 -> 512 output projection.
    """

    num_heads: int = 3
    model_dim: int = 512
    key_dim: Optional[int] = None
    value_dim: Optional[int] = None

    def __post_init__(self):
        if self.num_heads < 1:
            raise ConfigurationError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.model_dim < 1:
            raise ConfigurationError(f"model_dim must be >= 1, got {self.model_dim}")
        if self.key_dim is None and self.model_dim // self.num_heads < 1:
            raise ConfigurationError(
                f"model_dim {self.model_dim} too small for {self.num_heads} heads; pass key_dim")
        for name in ("key_dim", "value_dim"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {v}")

    @property
    def head_key_dim(self) -> int:
        return self.key_dim if self.key_dim is not None else self.model_dim // self.num_heads

    @property
    def head_value_dim(self) -> int:
        return self.value_dim if self.value_dim is not None else self.head_key_dim

    @property
    def concat_dim(self) -> int:
        return self.num_heads * self.head_value_dim


class AttentionResult(NamedTuple):
    output: Tensor
    weights: Tensor


class MultiHeadResult(NamedTuple):
    output: Tensor
    head_weights: tuple[Tensor, ...]


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 mask: Optional[np.ndarray] = None) -> AttentionResult:
    """softmax(q kT / sqrt(d_k)) v for 2-d q, k, v.

    ``mask`` is a boolean [n_q, n_k] array where True marks a permitted
    position; forbidden logits get an additive -1e30 before the softmax so
    their weights underflow to exactly zero. A query row with every key
    forbidden is rejected.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(
            f"attention expects 2-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query width {q.shape} does not match key width {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"key count {k.shape} does not match value count {v.shape}")
    n_q, d_k = q.shape
    n_k = k.shape[0]
    logits = mul(matmul(q, transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (n_q, n_k):
            raise DimensionError(f"mask shape {m.shape} does not match logits shape {(n_q, n_k)}")
        if not m.any(axis=1).all():
            raise ContractError("attention mask leaves a query row with no permitted keys")
        logits = add(logits, Tensor(np.where(m, 0.0, MASKED_LOGIT)))
    weights = softmax(logits, axis=1)
    return AttentionResult(matmul(weights, v), weights)


class AttentionProjections:
    """Per-head W_q/W_k/W_v projections plus the shared output projection."""

    def __init__(self, w_q: Sequence[Tensor], w_k: Sequence[Tensor],
                 w_v: Sequence[Tensor], w_o: Tensor, config: MultiHeadConfig):
        h = config.num_heads
        if not (len(w_q) == len(w_k) == len(w_v) == h):
            raise ConfigurationError(
                f"expected {h} per-head projections, got {len(w_q)}/{len(w_k)}/{len(w_v)}")
        d, dk, dv = config.model_dim, config.head_key_dim, config.head_value_dim
        for mats, width, name in ((w_q, dk, "w_q"), (w_k, dk, "w_k"), (w_v, dv, "w_v")):
            for i, m in enumerate(mats):
                if m.shape != (d, width):
                    raise DimensionError(
                        f"{name}[{i}] shape {m.shape}, expected {(d, width)}")
        if w_o.shape != (config.concat_dim, d):
            raise DimensionError(f"w_o shape {w_o.shape}, expected {(config.concat_dim, d)}")
        for t in (*w_q, *w_k, *w_v, w_o):
            if not np.isfinite(t.data).all():
                raise ContractError("attention projections must be finite")
        self.w_q = tuple(w_q)
        self.w_k = tuple(w_k)
        self.w_v = tuple(w_v)
        self.w_o = w_o
        self.config = config

    @classmethod
    def create(cls, store: ParameterStore, prefix: str,
               config: MultiHeadConfig) -> "AttentionProjections":
        d, dk, dv = config.model_dim, config.head_key_dim, config.head_value_dim
        w_q = [store.dense(f"{prefix}.head{i}.wq", (d, dk)) for i in range(config.num_heads)]
        w_k = [store.dense(f"{prefix}.head{i}.wk", (d, dk)) for i in range(config.num_heads)]
        w_v = [store.dense(f"{prefix}.head{i}.wv", (d, dv)) for i in range(config.num_heads)]
        w_o = store.dense(f"{prefix}.wo", (config.concat_dim, d))
        return cls(w_q, w_k, w_v, w_o, config)


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor,
                         projections: AttentionProjections,
                         mask: Optional[np.ndarray] = None) -> MultiHeadResult:
    """Concat(head_1..head_h) W_o where head_i attends over projected q/k/v."""
    d = projections.config.model_dim
    for t, name in ((q_in, "queries"), (k_in, "keys"), (v_in, "values")):
        if t.ndim != 2 or t.shape[1] != d:
            raise DimensionError(f"{name} shape {t.shape} does not match model width {d}")
    outputs = []
    weights = []
    for wq, wk, wv in zip(projections.w_q, projections.w_k, projections.w_v):
        head = scaled_dot_product_attention(
            matmul(q_in, wq), matmul(k_in, wk), matmul(v_in, wv), mask)
        outputs.append(head.output)
        weights.append(head.weights)
    combined = outputs[0] if len(outputs) == 1 else concat(outputs, axis=1)
    return MultiHeadResult(matmul(combined, projections.w_o), tuple(weights))


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n] lower-triangular mask: position i may see j <= i."""
    if n < 1:
        raise ContractError(f"causal_mask needs n >= 1, got {n}")
    return np.tril(np.ones((n, n), dtype=bool))
