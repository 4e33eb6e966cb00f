"""Image pyramid and the shared-weight projection variants (linear patches,
conv blocks, residual blocks) that turn every level into a token grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ChannelNorm, Conv2d, Linear, Module, ones
from .ops import resize_bilinear
from .tensor import Tensor


MIN_SIDE = 16


class ConfigError(ValueError):
    pass


@dataclass
class PyramidLevel:
    scale: float
    image: np.ndarray  # (3, H_k, W_k), zero padded to the projection stride
    content: tuple[int, int]  # un-padded (h, w) = round(scale * (H, W))

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass
class ImagePyramid:
    levels: list[PyramidLevel]
    source_size: tuple[int, int]

    @property
    def scales(self) -> list[float]:
        return [lv.scale for lv in self.levels]


def _round_up(n: int, m: int) -> int:
    return -(-n // m) * m


def build_pyramid(image: np.ndarray, scales=(0.5, 1.0, 2.0), stride: int = 16) -> ImagePyramid:
    """Bilinear resize per scale factor, then zero-pad each level up to a
    multiple of ``stride``."""
    image = np.asarray(image)
    _, h, w = image.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    levels = []
    for s in scales:
        hk, wk = max(1, int(round(s * h))), max(1, int(round(s * w)))
        img = resize_bilinear(image, hk, wk)
        ph, pw = _round_up(hk, stride), _round_up(wk, stride)
        if (ph, pw) != (hk, wk):
            img = np.pad(img, ((0, 0), (0, ph - hk), (0, pw - wk)))
        levels.append(PyramidLevel(float(s), img, (hk, wk)))
    return ImagePyramid(levels, (h, w))


@dataclass
class LevelFeatures:
    tokens: Tensor  # (h * w, c)
    grid: tuple[int, int]
    early_map: Tensor | None  # (c0, H/2, W/2) activations after the first conv layer


@dataclass
class ScaleFeatures:
    levels: list[LevelFeatures]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lv.grid for lv in self.levels]

    @property
    def num_tokens(self) -> int:
        return sum(h * w for h, w in self.shapes)


def _map_to_tokens(fmap: Tensor) -> Tensor:
    c, h, w = fmap.shape
    return fmap.reshape(c, h * w).transpose()


def stage_widths(dim: int, n_blocks: int) -> list[int]:
    """Channel widths [stem, block_1, ..., block_n]: c/4, c/2, then c."""
    widths = [dim // 4]
    for i in range(n_blocks):
        widths.append(dim // 2 if i == 0 else dim)
    return widths


class LinearProjection(Module):
    """Flattened P x P patches mapped to ``dim`` by one linear layer."""

    kind = "lp"

    def __init__(self, rng: np.random.Generator, dim: int, patch: int = 16):
        self.patch = patch
        self.proj = Linear(rng, 3 * patch * patch, dim)

    @property
    def stride(self) -> int:
        return self.patch

    def patches(self, image: Tensor) -> Tensor:
        c, h, w = image.shape
        p = self.patch
        if h % p or w % p:
            raise ValueError(f"level {h}x{w} is not divisible by patch size {p}")
        x = image.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
        return x.reshape((h // p) * (w // p), c * p * p)

    def __call__(self, image: Tensor) -> LevelFeatures:
        _, h, w = image.shape
        return LevelFeatures(self.proj(self.patches(image)), (h // self.patch, w // self.patch), None)


class ConvBlock(Module):
    def __init__(self, rng, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, 3, stride=2)
        self.norm = ChannelNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class ResBlock(Module):
    """Two 3x3 convs with a strided 1x1 skip; ``scale`` multiplies the branch."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride=2)
        self.norm1 = ChannelNorm(c_out)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, stride=1)
        self.norm2 = ChannelNorm(c_out)
        self.skip = Conv2d(rng, c_in, c_out, 1, stride=2)
        self.scale = ones((c_out, 1, 1))

    def __call__(self, x: Tensor) -> Tensor:
        branch = T.relu(self.norm1(self.conv1(x)))
        branch = self.norm2(self.conv2(branch))
        return self.skip(x) + branch * self.scale


class Stem(Module):
    def __init__(self, rng, c_out: int):
        self.conv = Conv2d(rng, 3, c_out, 3, stride=2)
        self.norm = ChannelNorm(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class ConvProjection(Module):
    """Stem conv plus stride-2 conv blocks (conv3x3, layer norm, relu)."""

    kind = "conv"
    block_cls = ConvBlock

    def __init__(self, rng: np.random.Generator, dim: int, n_blocks: int = 3):
        widths = stage_widths(dim, n_blocks)
        self.stem = Stem(rng, widths[0])
        self.blocks = [self.block_cls(rng, widths[i], widths[i + 1]) for i in range(n_blocks)]

    @property
    def stride(self) -> int:
        return 2 ** (1 + len(self.blocks))

    def __call__(self, image: Tensor) -> LevelFeatures:
        early = self.stem(image)
        x = early
        for blk in self.blocks:
            x = blk(x)
        return LevelFeatures(_map_to_tokens(x), (x.shape[1], x.shape[2]), early)


class ResProjection(ConvProjection):
    """Stem conv plus stride-2 residual blocks (the default projection)."""

    kind = "res"
    block_cls = ResBlock


def make_projection(kind: str, rng: np.random.Generator, dim: int, res_blocks: int = 3, patch: int = 16):
    if kind == "lp":
        return LinearProjection(rng, dim, patch)
    if kind == "conv":
        return ConvProjection(rng, dim, 3)
    if kind == "res":
        if not 2 <= res_blocks <= 4:
            raise ConfigError(f"res_blocks must be in 2..4, got {res_blocks}")
        return ResProjection(rng, dim, res_blocks)
    raise ConfigError(f"unknown projection {kind!r} (expected lp, conv or res)")


def project_pyramid(pyr: ImagePyramid, projection) -> ScaleFeatures:
    """Run the same projection (same parameter objects) over every level."""
    return ScaleFeatures([projection(Tensor(lv.image)) for lv in pyr.levels])
