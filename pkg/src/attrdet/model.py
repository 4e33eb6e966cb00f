"""The full detector: pyramid -> shared projection -> encoder -> text
embedding -> decoders."""
from __future__ import annotations

import numpy as np

from .config import Config
from .decoder import Decoder, TextInstanceSet
from .encoder import Encoder, encode, init_text_embedding, update_text_embedding
from .geometry import Polygon, rasterize
from .nn import Module
from .pyramid import ImagePyramid, build_pyramid, make_projection, project_pyramid, stage_widths

BACKBONE_PREFIXES = ("projection.", "encoder.")
TEXT_STRIDE = 4


class ATTR(Module):
    def __init__(self, cfg: Config, seed: int | None = None):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dim = cfg.embed_dim
        self.projection = make_projection(cfg.projection, rng, dim, cfg.res_blocks, cfg.patch_size)
        early = None if cfg.projection == "lp" else stage_widths(dim, self.projection_blocks)[0]
        self.encoder = Encoder(rng, dim, len(cfg.scales), cfg.encoder_units, cfg.heads, cfg.msda_points,
                               cfg.ffn_mult, early_channels=early)
        self.decoder = Decoder(rng, dim, cfg.num_queries, cfg.num_decoders, cfg.heads, cfg.ffn_mult)

    @property
    def projection_blocks(self) -> int:
        return 3 if self.cfg.projection == "conv" else self.cfg.res_blocks

    @property
    def stride(self) -> int:
        return self.projection.stride

    def pyramid(self, image: np.ndarray) -> ImagePyramid:
        return build_pyramid(image, self.cfg.scales, self.stride)

    def __call__(self, image: np.ndarray) -> TextInstanceSet:
        return self.forward(self.pyramid(image))

    def forward(self, pyr: ImagePyramid) -> TextInstanceSet:
        feats = project_pyramid(pyr, self.projection)
        emb = init_text_embedding(self.encoder, feats)
        enc = encode(self.encoder, feats)
        emb = update_text_embedding(self.encoder, emb, enc)
        level_pos = self.encoder.level_positions(enc.shapes)
        out = self.decoder(enc, emb, level_pos)
        out.meta = grid_meta(pyr, emb.grid)
        return out

    def param_groups(self) -> dict[str, float]:
        """Learning-rate multiplier per parameter name."""
        return {name: (self.cfg.backbone_lr_mult if name.startswith(BACKBONE_PREFIXES) else 1.0)
                for name, _ in self.named_parameters()}


def grid_meta(pyr: ImagePyramid, grid: tuple[int, int]) -> dict:
    """Size of one embedding cell in source-image pixels, per axis."""
    last = pyr.levels[-1]
    h, w = pyr.source_size
    ch, cw = last.content
    return {
        "grid": grid,
        "source_size": (h, w),
        "cell": (TEXT_STRIDE * w / cw, TEXT_STRIDE * h / ch),
    }


def rasterize_targets(polygons: list[Polygon], meta: dict) -> np.ndarray:
    """Ground-truth masks (G, hE * wE) sampled at embedding cell centres."""
    gh, gw = meta["grid"]
    dx, dy = meta["cell"]
    if not polygons:
        return np.zeros((0, gh * gw), dtype=bool)
    return np.stack([rasterize(p, 0.0, 0.0, dx, dy, gw, gh).ravel() for p in polygons])

