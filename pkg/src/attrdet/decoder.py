"""Masked-attention query decoder plus the mask and class heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import Encoded, TextEmbedding
from .nn import FFN, MLP3, LayerNorm, Linear, Module
from .ops import resize_bilinear
from .pyramid import ConfigError
from .tensor import Tensor

BLOCKED = -1e9


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim, bias=False)  # a key bias only shifts each softmax row
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, blocked: np.ndarray | None = None) -> Tensor:
        n, c = q_in.shape
        s = k_in.shape[0]
        h = self.heads
        d = c // h
        q = self.q_proj(q_in).reshape(n, h, d).transpose(1, 0, 2)
        k = self.k_proj(k_in).reshape(s, h, d).transpose(1, 2, 0)
        v = self.v_proj(v_in).reshape(s, h, d).transpose(1, 0, 2)
        logits = (q @ k) * (1.0 / np.sqrt(d))
        if blocked is not None:
            logits = logits + np.where(blocked, BLOCKED, 0.0).astype(logits.dtype)
        out = (T.softmax(logits, axis=-1) @ v).transpose(1, 0, 2).reshape(n, c)
        return self.out_proj(out)


def attention_mask(mask_logits: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Blocked positions (N, h * w) for cross-attention into a level.

    The previous mask prediction (N, hE, wE) is resized to the level grid;
    positions with probability below 0.5 are blocked. A query whose mask is
    empty everywhere attends to the full level instead.
    """
    probs = 1.0 / (1.0 + np.exp(-np.asarray(mask_logits, dtype=np.float64)))
    resized = resize_bilinear(probs, grid[0], grid[1]).reshape(len(probs), -1)
    blocked = resized < 0.5
    blocked[blocked.all(axis=1)] = False
    return blocked


def masked_attention(attn: MultiHeadAttention, queries: Tensor, query_pos: Tensor, level_tokens: Tensor,
                     level_pos: Tensor, mask_logits: np.ndarray, grid: tuple[int, int]) -> Tensor:
    """Cross-attention output (no residual) restricted to the predicted foreground."""
    blocked = attention_mask(mask_logits, grid)
    return attn(queries + query_pos, level_tokens + level_pos, level_tokens, blocked)


class DecoderLayer(Module):
    def __init__(self, rng, dim: int, heads: int, ffn_mult: int = 4):
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.norm3 = LayerNorm(dim)
        self.ffn = FFN(rng, dim, ffn_mult * dim)

    def __call__(self, q: Tensor, qpos: Tensor, tokens: Tensor, pos: Tensor, mask_logits: np.ndarray,
                 grid: tuple[int, int]) -> Tensor:
        q = q + masked_attention(self.cross_attn, self.norm1(q), qpos, tokens, pos, mask_logits, grid)
        h = self.norm2(q) + qpos
        q = q + self.self_attn(h, h, self.norm2(q))
        return q + self.ffn(self.norm3(q))


@dataclass
class StageOutput:
    mask_logits: Tensor  # (N, hE * wE)
    class_logits: Tensor  # (N,)


@dataclass
class TextInstanceSet:
    """Final-stage predictions plus every intermediate stage (auxiliary)."""

    stages: list[StageOutput]
    grid: tuple[int, int]
    levels: list[int] = field(default_factory=list)  # level attended by each decoder layer
    meta: dict = field(default_factory=dict)

    @property
    def mask_logits(self) -> Tensor:
        return self.stages[-1].mask_logits

    @property
    def class_logits(self) -> Tensor:
        return self.stages[-1].class_logits

    def mask_probs(self) -> np.ndarray:
        h, w = self.grid
        x = self.mask_logits.data.astype(np.float64)
        return (1.0 / (1.0 + np.exp(-x))).reshape(-1, h, w)

    def class_probs(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.class_logits.data.astype(np.float64)))


class Decoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_queries: int = 20, num_layers: int = 9,
                 heads: int = 8, ffn_mult: int = 4):
        self.query_feat = T.parameter(rng.normal(size=(num_queries, dim)))
        self.query_pos = T.parameter(rng.normal(size=(num_queries, dim)))
        self.layers = [DecoderLayer(rng, dim, heads, ffn_mult) for _ in range(num_layers)]
        self.norm = LayerNorm(dim)
        self.mask_embed = MLP3(rng, dim)
        self.class_head = Linear(rng, dim, 1)

    def heads(self, q: Tensor, emb: TextEmbedding) -> StageOutput:
        qn = self.norm(q)
        return StageOutput(predict_masks(emb.tokens, qn, self.mask_embed), classify(qn, self.class_head))

    def __call__(self, enc: Encoded, emb: TextEmbedding, level_pos: list[Tensor]) -> TextInstanceSet:
        return decode(self, enc, emb, level_pos)


def predict_masks(embedding: Tensor, queries: Tensor, mlp: MLP3) -> Tensor:
    """Dot product of every query's mask embedding with every embedding cell."""
    return mlp(queries) @ embedding.transpose()


def classify(queries: Tensor, head: Linear) -> Tensor:
    return head(queries).reshape(queries.shape[0])


def decode(decoder: Decoder, enc: Encoded, emb: TextEmbedding, level_pos: list[Tensor]) -> TextInstanceSet:
    """Stage 0 predicts from the learned queries; layer s attends to level
    (s - 1) mod L, masked by the stage s - 1 prediction."""
    q = decoder.query_feat
    qpos = decoder.query_pos
    h, w = emb.grid
    stages = [decoder.heads(q, emb)]
    n_levels = len(enc.shapes)
    levels = []
    for s, layer in enumerate(decoder.layers):
        lvl = s % n_levels
        levels.append(lvl)
        prev = stages[-1].mask_logits.data.reshape(-1, h, w)
        q = layer(q, qpos, enc.level(lvl), level_pos[lvl], prev, enc.shapes[lvl])
        stages.append(decoder.heads(q, emb))
    return TextInstanceSet(stages, (h, w), levels)

