"""Deformable multi-scale encoder and the stride-4 text embedding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import FFN, Conv2d, LayerNorm, Linear, Module, zeros
from .ops import avg_pool2d, ms_deform_sample
from .pyramid import ConfigError, ScaleFeatures
from .tensor import Tensor


def sine_pos_embed(h: int, w: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """(h * w, dim) fixed embedding: first half encodes the row index, second
    half the column, each with interleaved sin/cos."""
    if dim % 4:
        raise ValueError(f"embedding dim must be divisible by 4, got {dim}")
    half = dim // 2
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    def enc(coord):
        v = coord.reshape(-1, 1) / dim_t
        out = np.empty_like(v)
        out[:, 0::2] = np.sin(v[:, 0::2])
        out[:, 1::2] = np.cos(v[:, 1::2])
        return out

    return np.concatenate([enc(ys), enc(xs)], axis=1)


def reference_points(h: int, w: int) -> np.ndarray:
    """Normalised (x, y) cell centres of an h x w grid, row-major."""
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class MSDeformAttn(Module):
    """Each query samples K points per level per head around its reference
    point; offsets and weights are predicted from the query."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, levels: int, points: int):
        if dim % heads:
            raise ConfigError(f"embed dim {dim} not divisible by {heads} heads")
        self.heads, self.levels, self.points = heads, levels, points
        self.sampling_offsets = Linear(rng, dim, heads * levels * points * 2)
        self.sampling_offsets.weight = zeros(self.sampling_offsets.weight.shape)
        theta = np.arange(heads) * (2 * np.pi / heads)
        grid = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        grid = grid / np.abs(grid).max(axis=1, keepdims=True)
        bias = np.tile(grid[:, None, None, :], (1, levels, points, 1))
        bias *= np.arange(1, points + 1)[None, None, :, None]
        self.sampling_offsets.bias = T.parameter(bias.ravel())
        self.attention_weights = Linear(rng, dim, heads * levels * points)
        self.attention_weights.weight = zeros(self.attention_weights.weight.shape)
        self.value_proj = Linear(rng, dim, dim)
        self.output_proj = Linear(rng, dim, dim)

    def __call__(self, query: Tensor, ref: np.ndarray, value: Tensor, shapes) -> Tensor:
        q = query.shape[0]
        m, n_lvl, k = self.heads, self.levels, self.points
        if len(shapes) != n_lvl:
            raise ValueError(f"expected {n_lvl} levels, got {len(shapes)}")
        v = self.value_proj(value).reshape(value.shape[0], m, -1)
        off = self.sampling_offsets(query).reshape(q, m, n_lvl, k, 2)
        norm = np.array([[w, h] for h, w in shapes], dtype=off.dtype)[None, None, :, None, :]
        loc = off * (1.0 / norm) + ref[:, None, None, None, :].astype(off.dtype)
        aw = T.softmax(self.attention_weights(query).reshape(q, m, n_lvl * k), axis=-1)
        out = ms_deform_sample(v, shapes, loc, aw.reshape(q, m, n_lvl, k))
        return self.output_proj(out)


class EncoderUnit(Module):
    """Pre-norm deformable self-attention followed by a pre-norm FFN."""

    def __init__(self, rng, dim: int, heads: int, levels: int, points: int, ffn_mult: int = 4):
        self.norm1 = LayerNorm(dim)
        self.attn = MSDeformAttn(rng, dim, heads, levels, points)
        self.norm2 = LayerNorm(dim)
        self.ffn = FFN(rng, dim, ffn_mult * dim)

    def __call__(self, x: Tensor, pos: np.ndarray, ref: np.ndarray, shapes) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h + pos, ref, h, shapes)
        return x + self.ffn(self.norm2(x))


@dataclass
class Encoded:
    tokens: Tensor  # (S, c) all levels concatenated
    shapes: list[tuple[int, int]]

    def level(self, i: int) -> Tensor:
        sizes = [h * w for h, w in self.shapes]
        start = sum(sizes[:i])
        return self.tokens[start:start + sizes[i]]


@dataclass
class TextEmbedding:
    tokens: Tensor  # (h * w, c)
    grid: tuple[int, int]


class Encoder(Module):
    def __init__(self, rng: np.random.Generator, dim: int, levels: int, units: int = 6, heads: int = 8,
                 points: int = 4, ffn_mult: int = 4, early_channels: int | None = None):
        self.dim = dim
        self.level_embed = T.parameter(rng.normal(size=(levels, dim)))
        self.units = [EncoderUnit(rng, dim, heads, levels, points, ffn_mult) for _ in range(units)]
        if early_channels is not None:
            self.text_proj = Conv2d(rng, early_channels, dim, 1)
            self.text_norm = LayerNorm(dim)
            self.text_attn = MSDeformAttn(rng, dim, heads, levels, points)
        else:
            self.text_proj = None

    def level_positions(self, shapes) -> list[Tensor]:
        return [Tensor(sine_pos_embed(h, w, self.dim)) + self.level_embed[i] for i, (h, w) in enumerate(shapes)]

    def position(self, shapes) -> Tensor:
        return T.concat(self.level_positions(shapes), axis=0)

    def __call__(self, feats: ScaleFeatures) -> Encoded:
        return encode(self, feats)


def encode(encoder: Encoder, feats: ScaleFeatures) -> Encoded:
    """Run every unit over the concatenated tokens of all levels."""
    shapes = feats.shapes
    x = T.concat([lv.tokens for lv in feats.levels], axis=0)
    pos = encoder.position(shapes)
    ref = np.concatenate([reference_points(h, w) for h, w in shapes])
    for unit in encoder.units:
        x = unit(x, pos, ref, shapes)
    return Encoded(x, list(shapes))


def init_text_embedding(encoder: Encoder, feats: ScaleFeatures) -> TextEmbedding:
    """1x1 conv plus 2x2 average pool on the stride-2 map of the last level."""
    early = feats.levels[-1].early_map
    if early is None or encoder.text_proj is None:
        raise ConfigError("projection has no early feature map to build the text embedding from")
    fmap = avg_pool2d(encoder.text_proj(early), 2)
    c, h, w = fmap.shape
    return TextEmbedding(fmap.reshape(c, h * w).transpose(), (h, w))


def update_text_embedding(encoder: Encoder, emb: TextEmbedding, enc: Encoded) -> TextEmbedding:
    """Each embedding cell attends over the encoded pyramid around its own position.

    The sampled values carry the level position embedding, so the update
    can tell apart cells whose content looks alike.
    """
    h, w = emb.grid
    q = encoder.text_norm(emb.tokens) + sine_pos_embed(h, w, encoder.dim)
    value = enc.tokens + encoder.position(enc.shapes)
    delta = encoder.text_attn(q, reference_points(h, w), value, enc.shapes)
    return TextEmbedding(emb.tokens + delta, emb.grid)
