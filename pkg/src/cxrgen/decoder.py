"""Autoregressive transformer decoder over report tokens.

Post-layer-norm blocks: masked self-attention, cross-attention over the
encoder rows, then a position-wise feed-forward, each wrapped in a residual
add followed by layer norm. Token embeddings are scaled by sqrt(d_model)
and summed with fixed sinusoidal position encodings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .attention import AttentionProjections, MultiHeadConfig, causal_mask, multi_head_attention
from .errors import ConfigurationError, ContractError, DimensionError
from .params import ParameterStore
from .tensor import (Tensor, add, dense, embedding_lookup, layer_norm, log_softmax,
                     matmul, mul, neg, reduce_sum, sqrt_scale, take_per_row)
from .vocab import END_ID, PAD_ID, START_ID


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sin/cos position table of shape [length, dim]."""
    if length < 1 or dim < 1:
        raise ConfigurationError(f"positions need length, dim >= 1; got {length}, {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / dim)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    model_dim: int = 512
    num_heads: int = 3
    ffn_dim: int = 512
    max_len: int = 43
    num_layers: int = 1
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab_size", "model_dim", "num_heads", "ffn_dim",
                     "max_len", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size <= END_ID:
            raise ConfigurationError(f"vocab_size must cover the reserved ids, "
                                     f"got {self.vocab_size}")


class _DecoderLayer:
    def __init__(self, store: ParameterStore, cfg: DecoderConfig, prefix: str):
        d = cfg.model_dim
        mha = MultiHeadConfig(num_heads=cfg.num_heads, model_dim=d)
        self.self_attn = AttentionProjections.create(store, f"{prefix}.self_attn", mha)
        self.ln1_gamma = store.ones(f"{prefix}.ln1.gamma", (d,))
        self.ln1_beta = store.zeros(f"{prefix}.ln1.beta", (d,))
        self.cross_attn = AttentionProjections.create(store, f"{prefix}.cross_attn", mha)
        self.ln2_gamma = store.ones(f"{prefix}.ln2.gamma", (d,))
        self.ln2_beta = store.zeros(f"{prefix}.ln2.beta", (d,))
        self.ffn_w1 = store.dense(f"{prefix}.ffn.w1", (d, cfg.ffn_dim))
        self.ffn_b1 = store.zeros(f"{prefix}.ffn.b1", (cfg.ffn_dim,))
        self.ffn_w2 = store.dense(f"{prefix}.ffn.w2", (cfg.ffn_dim, d))
        self.ffn_b2 = store.zeros(f"{prefix}.ffn.b2", (d,))
        self.ln3_gamma = store.ones(f"{prefix}.ln3.gamma", (d,))
        self.ln3_beta = store.zeros(f"{prefix}.ln3.beta", (d,))
        self._eps = cfg.layer_norm_eps

    def forward(self, x: Tensor, encoder_rows: Tensor, mask: np.ndarray) -> Tensor:
        attended = multi_head_attention(x, x, x, self.self_attn, mask).output
        x = layer_norm(add(x, attended), self.ln1_gamma, self.ln1_beta, self._eps)
        crossed = multi_head_attention(x, encoder_rows, encoder_rows, self.cross_attn).output
        x = layer_norm(add(x, crossed), self.ln2_gamma, self.ln2_beta, self._eps)
        ffn = dense(dense(x, self.ffn_w1, self.ffn_b1, activation="relu"),
                    self.ffn_w2, self.ffn_b2)
        return layer_norm(add(x, ffn), self.ln3_gamma, self.ln3_beta, self._eps)


class ReportDecoder:
    """Token embedding, decoder layers, and the output projection."""

    def __init__(self, store: ParameterStore, config: DecoderConfig, prefix: str = "decoder"):
        self.config = config
        d = config.model_dim
        self.token_embedding = store.embedding(f"{prefix}.token_embedding",
                                               (config.vocab_size, d))
        self.positions = sinusoidal_positions(config.max_len, d)
        self.layers = [_DecoderLayer(store, config, f"{prefix}.layer{i}")
                       for i in range(config.num_layers)]
        self.output_w = store.dense(f"{prefix}.output.w", (d, config.vocab_size))
        self.output_b = store.zeros(f"{prefix}.output.b", (config.vocab_size,))

    def teacher_forced_forward(self, encoder_rows: Tensor, target_ids: Sequence[int]) -> Tensor:
        """Per-position logits [T, V] for a START-led target prefix."""
        ids = np.asarray(target_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ContractError(f"target ids must be a non-empty 1-d sequence, got {ids.shape}")
        if ids.size > self.config.max_len:
            raise ContractError(f"target length {ids.size} exceeds the maximum "
                                f"{self.config.max_len}")
        if ids[0] != START_ID:
            raise ContractError(f"target must begin with the START id, got {int(ids[0])}")
        if encoder_rows.ndim != 2 or encoder_rows.shape[1] != self.config.model_dim:
            raise DimensionError(f"encoder rows shape {encoder_rows.shape} does not match "
                                 f"model width {self.config.model_dim}")
        length = ids.size
        x = add(sqrt_scale(embedding_lookup(self.token_embedding, ids), self.config.model_dim),
                Tensor(self.positions[:length]))
        mask = causal_mask(length)
        for layer in self.layers:
            x = layer.forward(x, encoder_rows, mask)
        return add(matmul(x, self.output_w), self.output_b)

    def generate_greedy(self, encoder_rows: Tensor, max_len: Optional[int] = None) -> list[int]:
        """Argmax decoding from START until END or the length cap."""
        cap = self.config.max_len if max_len is None else max_len
        if not 1 <= cap <= self.config.max_len:
            raise ContractError(f"max_len must be in 1..{self.config.max_len}, got {cap}")
        ids = [START_ID]
        while len(ids) < cap:
            logits = self.teacher_forced_forward(encoder_rows, ids)
            nxt = int(np.argmax(logits.data[-1]))
            ids.append(nxt)
            if nxt == END_ID:
                break
        return ids


def sparse_ce_loss(logits: Tensor, true_ids: Sequence[int], pad_mask) -> Tensor:
    """Unreduced per-position cross-entropy; PAD positions contribute 0.

    ``pad_mask`` is boolean with True marking real (counted) positions.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [T, V], got shape {logits.shape}")
    ids = np.asarray(true_ids, dtype=np.int64)
    mask = np.asarray(pad_mask, dtype=bool)
    n, v = logits.shape
    if ids.shape != (n,) or mask.shape != (n,):
        raise DimensionError(f"expected {n} labels and mask entries, got "
                             f"{ids.shape} / {mask.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ContractError(f"label id out of range [0, {v})")
    nll = neg(take_per_row(log_softmax(logits, axis=1), ids))
    return mul(nll, Tensor(mask.astype(np.float64)))


def masked_mean(losses: Tensor, pad_mask) -> Tensor:
    """Mean of the unmasked entries (the training objective for one sample)."""
    mask = np.asarray(pad_mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ContractError("masked_mean needs at least one unmasked position")
    return mul(reduce_sum(losses), 1.0 / count)


def token_accuracy(logits: Tensor, true_ids: Sequence[int], pad_mask) -> tuple[int, int]:
    """(correct, total) greedy-argmax agreement over unmasked positions."""
    ids = np.asarray(true_ids, dtype=np.int64)
    mask = np.asarray(pad_mask, dtype=bool)
    pred = np.argmax(logits.data, axis=1)
    return int(((pred == ids) & mask).sum()), int(mask.sum())
