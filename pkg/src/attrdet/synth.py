"""Synthetic scene-text-like images with polygon ground truth, plus PPM and
annotation file I/O.

A "word" is a row of glyph-like stroke patterns laid along a straight or
quadratic Bezier baseline. Its ground truth is the ribbon polygon around the
baseline, ``height`` pixels thick. Everything is a pure function of the seed
and the config.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import GeometryError, Polygon, clip_to_rect, is_simple, polygon_iou, rasterize_on_grid
from .ops import resize_bilinear
from .rng import Xoshiro256, derive_seed, hash_uniform


class DataError(ValueError):
    """Malformed image or annotation input."""


@dataclass(frozen=True)
class SynthConfig:
    height: int = 96
    width: int = 96
    min_instances: int = 1
    max_instances: int = 5
    curve_prob: float = 0.3
    small_text_prob: float = 0.3
    clutter: int = 2

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("synthetic images must be at least 32 x 32")
        if not 1 <= self.min_instances <= self.max_instances <= 8:
            raise ValueError("need 1 <= min_instances <= max_instances <= 8")


@dataclass
class SceneSample:
    image: np.ndarray  # (3, H, W) float in [0, 1]
    instances: list[Polygon]
    seed: int
    heights: list[float] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


# -- rendering helpers ---------------------------------------------------------

def _value_noise(seed: int, h: int, w: int, cells: int) -> np.ndarray:
    coarse = hash_uniform(seed, cells * cells).reshape(1, cells, cells)
    return resize_bilinear(coarse, h, w)[0]


def _background(rng: Xoshiro256, h: int, w: int) -> np.ndarray:
    base = np.array([rng.uniform(0.15, 0.85) for _ in range(3)])
    tint = np.array([rng.uniform(-0.25, 0.25) for _ in range(3)])
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * math.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)[None]
    low = _value_noise(rng.next_u64(), h, w, 5)[None] - 0.5
    fine = hash_uniform(rng.next_u64(), h * w).reshape(1, h, w) - 0.5
    img = base[:, None, None] + tint[:, None, None] * ramp + 0.25 * low + 0.06 * fine
    return np.clip(img, 0.0, 1.0)


def _bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _bezier_tangent(p0, p1, p2, t):
    t = t[:, None]
    d = 2 * (1 - t) * (p1 - p0) + 2 * t * (p2 - p1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class _Word:
    center: np.ndarray
    angle: float
    length: float
    height: float
    bend: float  # control-point offset as a fraction of length (0 = straight)

    def control(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        tang = np.array([c, s])
        norm = np.array([-s, c])
        p0 = self.center - tang * self.length / 2
        p2 = self.center + tang * self.length / 2
        p1 = self.center + norm * self.bend * self.length * 2
        return p0, p1, p2

    def polygon(self, n_side: int) -> np.ndarray:
        p0, p1, p2 = self.control()
        t = np.linspace(0.0, 1.0, n_side)
        pts = _bezier(p0, p1, p2, t)
        tg = _bezier_tangent(p0, p1, p2, t)
        nrm = np.stack([-tg[:, 1], tg[:, 0]], axis=1)
        # keep the ribbon ends perpendicular to the first/last tangent
        half = self.height / 2
        top = pts - nrm * half
        bot = pts + nrm * half
        return np.vstack([top, bot[::-1]])


def _glyph_strokes(rng: Xoshiro256) -> int:
    while True:
        bits = rng.integers(1, 127)
        if bin(bits).count("1") >= 2:
            return bits


def _render_word(img: np.ndarray, word: _Word, rng: Xoshiro256, color: np.ndarray):
    """Alpha-composite the word's glyph strokes into ``img`` (in place)."""
    _, h, w = img.shape
    p0, p1, p2 = word.control()
    t = np.linspace(0.0, 1.0, 96)
    curve = _bezier(p0, p1, p2, t)
    tang = _bezier_tangent(p0, p1, p2, t)
    seglen = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arc[-1]

    pad = word.height
    x0 = int(max(0, math.floor(curve[:, 0].min() - pad)))
    x1 = int(min(w, math.ceil(curve[:, 0].max() + pad)))
    y0 = int(max(0, math.floor(curve[:, 1].min() - pad)))
    y1 = int(min(h, math.ceil(curve[:, 1].max() + pad)))
    if x1 <= x0 or y1 <= y0:
        return
    sub = (np.arange(3) + 0.5) / 3
    ys, xs = np.mgrid[y0:y1, x0:x1]
    shape = ys.shape + (3, 3)
    py = np.broadcast_to(ys[..., None, None] + sub[:, None], shape).reshape(-1)
    px = np.broadcast_to(xs[..., None, None] + sub[None, :], shape).reshape(-1)
    pts = np.stack([px, py], axis=1)
    _, k = cKDTree(curve).query(pts)
    rel = pts - curve[k]
    s = arc[k] + (rel * tang[k]).sum(axis=1)
    d = rel[:, 0] * -tang[k, 1] + rel[:, 1] * tang[k, 0]

    hh = 0.4 * word.height
    sw = max(0.9, 0.16 * word.height)
    gw = 0.6 * word.height
    gap = 0.2 * word.height
    margin = 0.1 * word.height
    ink = np.zeros(len(pts), dtype=bool)
    pos = margin
    while pos + gw <= total - margin + 1e-9:
        bits = _glyph_strokes(rng)
        u = s - pos
        inside = (u >= 0) & (u <= gw) & (np.abs(d) <= hh)
        strokes = [
            u <= sw,
            u >= gw - sw,
            d <= -hh + sw,
            np.abs(d) <= sw / 2,
            d >= hh - sw,
            np.abs(np.hypot((u - gw / 2) / (gw / 2), d / hh) - 1) <= sw / min(gw, 2 * hh),
            np.abs(d - (u / gw - 0.5) * 2 * hh) <= sw * 0.7,
        ]
        glyph = np.zeros(len(pts), dtype=bool)
        for bit, stroke in enumerate(strokes):
            if bits >> bit & 1:
                glyph |= stroke
        ink |= inside & glyph
        pos += gw + gap
    alpha = ink.reshape(y1 - y0, x1 - x0, 9).mean(axis=2)
    region = img[:, y0:y1, x0:x1]
    img[:, y0:y1, x0:x1] = region * (1 - alpha) + color[:, None, None] * alpha


def _text_color(rng: Xoshiro256, bg: np.ndarray) -> np.ndarray:
    lum = float(bg.mean())
    target = rng.uniform(0.0, 0.2) if lum > 0.5 else rng.uniform(0.8, 1.0)
    jitter = np.array([rng.uniform(-0.12, 0.12) for _ in range(3)])
    return np.clip(target + jitter, 0.0, 1.0)


def _render_clutter(img: np.ndarray, rng: Xoshiro256):
    """Non-text distractors: thick blobs and thin long lines."""
    _, h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    color = np.array([rng.uniform(0, 1) for _ in range(3)])
    if rng.bernoulli(0.5):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(0.08, 0.2) * min(h, w)
        alpha = np.clip(r - np.hypot(xx - cx, yy - cy), 0, 1) * 0.6
    else:
        ang = rng.uniform(0, math.pi)
        off = rng.uniform(-0.4, 0.4) * min(h, w)
        dist = (xx - w / 2) * math.sin(ang) - (yy - h / 2) * math.cos(ang) - off
        alpha = np.clip(1.2 - np.abs(dist), 0, 1) * 0.7
    img[:] = img * (1 - alpha) + color[:, None, None] * alpha


def _draw_word(rng: Xoshiro256, cfg: SynthConfig, small: bool) -> _Word:
    h, w = cfg.height, cfg.width
    if small:
        height = rng.uniform(0.035 * h, h / 16 - 1e-3)
    else:
        height = rng.uniform(h / 16, h / 5)
    length = min(height * rng.uniform(2.5, 6.0), 0.85 * w)
    length = max(length, 1.6 * height)
    bend = rng.uniform(0.08, 0.18) * (1 if rng.bernoulli(0.5) else -1) if rng.bernoulli(cfg.curve_prob) else 0.0
    angle = rng.uniform(-math.pi / 6, math.pi / 6)
    cx = rng.uniform(0.1 * w, 0.9 * w)
    cy = rng.uniform(0.1 * h, 0.9 * h)
    return _Word(np.array([cx, cy]), angle, length, height, bend)


def generate_sample(seed: int, cfg: SynthConfig = SynthConfig()) -> SceneSample:
    rng = Xoshiro256(seed)
    h, w = cfg.height, cfg.width
    img = _background(rng, h, w)
    for _ in range(rng.integers(0, cfg.clutter) if cfg.clutter else 0):
        _render_clutter(img, rng)

    n_target = rng.integers(cfg.min_instances, cfg.max_instances)
    polys: list[Polygon] = []
    heights: list[float] = []
    occupied = np.zeros((h, w), dtype=bool)
    for _ in range(n_target):
        small = rng.bernoulli(cfg.small_text_prob)
        for _attempt in range(60):
            word = _draw_word(rng, cfg, small)
            n_side = 2 if word.bend == 0 else (5 if small else 7)
            pts = np.round(word.polygon(n_side))
            if pts[:, 0].min() < 1 or pts[:, 1].min() < 1 or pts[:, 0].max() > w - 1 or pts[:, 1].max() > h - 1:
                continue
            if not is_simple(pts):
                continue
            try:
                poly = Polygon(pts)
            except GeometryError:
                continue
            if not np.array_equal(np.sort(poly.vertices, axis=0), np.sort(pts, axis=0)):
                continue
            # keep a one-pixel moat between instances
            grown = rasterize_on_grid(poly, (h, w))
            grown = grown | np.roll(grown, 1, 0) | np.roll(grown, -1, 0) | np.roll(grown, 1, 1) | np.roll(grown, -1, 1)
            if (grown & occupied).any() or not grown.any():
                continue
            if any(polygon_iou(poly, q, 128) >= 0.05 for q in polys):
                continue
            occupied |= grown
            region = img[:, grown].mean(axis=1)
            _render_word(img, word, rng, _text_color(rng, region))
            polys.append(poly)
            heights.append(word.height)
            break
    return SceneSample(image=img.astype(np.float32), instances=polys, seed=seed, heights=heights)


# -- augmentation -----------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    angle_deg: float = 0.0
    flip: bool = False
    offset: tuple[float, float] | None = None  # crop origin on the transformed canvas

    @property
    def neutral(self) -> bool:
        return self.scale == 1.0 and self.angle_deg == 0.0 and not self.flip and self.offset in (None, (0.0, 0.0))


def _canvas_transform(h: int, w: int, p: AugmentParams) -> np.ndarray:
    """3x3 map from source pixels to the scaled/rotated/flipped canvas (before cropping)."""
    cx, cy = w / 2, h / 2
    a = math.radians(p.angle_deg)
    c, s = math.cos(a), math.sin(a)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]])
    flip = np.array([[-1 if p.flip else 1, 0, 0], [0, 1, 0], [0, 0, 1]])
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    scale = np.diag([p.scale, p.scale, 1.0])
    back = np.array([[1, 0, cx * p.scale], [0, 1, cy * p.scale], [0, 0, 1]])
    return back @ scale @ rot @ flip @ to_origin


def draw_augment_params(sample: SceneSample, seed: int, scale_range=(0.5, 2.0), max_angle=10.0,
                        flip_prob=0.5) -> AugmentParams:
    rng = Xoshiro256(seed)
    h, w = sample.size
    # log-uniform so shrinking and enlarging are equally likely
    scale = math.exp(rng.uniform(math.log(scale_range[0]), math.log(scale_range[1])))
    angle = rng.uniform(-max_angle, max_angle)
    flip = rng.bernoulli(flip_prob)
    p = AugmentParams(scale, angle, flip, (0.0, 0.0))
    m = _canvas_transform(h, w, p)
    cw, ch = w * scale, h * scale
    lo_x, hi_x = min(0.0, cw - w), max(0.0, cw - w)
    lo_y, hi_y = min(0.0, ch - h), max(0.0, ch - h)
    if sample.instances:
        # keep one instance fully in view when it fits
        poly = sample.instances[rng.integers(0, len(sample.instances) - 1)]
        pts = poly.vertices @ m[:2, :2].T + m[:2, 2]
        bx0, by0 = pts.min(axis=0)
        bx1, by1 = pts.max(axis=0)
        if bx1 - bx0 <= w and by1 - by0 <= h:
            lo_x, hi_x = max(lo_x, bx1 - w), min(hi_x, bx0)
            lo_y, hi_y = max(lo_y, by1 - h), min(hi_y, by0)
            if lo_x > hi_x:
                lo_x = hi_x = min(max(bx1 - w, 0.0), bx0)
            if lo_y > hi_y:
                lo_y = hi_y = min(max(by1 - h, 0.0), by0)
    ox = rng.uniform(lo_x, hi_x) if hi_x > lo_x else lo_x
    oy = rng.uniform(lo_y, hi_y) if hi_y > lo_y else lo_y
    return replace(p, offset=(float(ox), float(oy)))


def apply_augment(sample: SceneSample, p: AugmentParams, min_visible: float = 0.5) -> SceneSample:
    from scipy.ndimage import affine_transform

    if p.neutral:
        return SceneSample(sample.image.copy(), list(sample.instances), sample.seed, list(sample.heights))
    h, w = sample.size
    ox, oy = p.offset or (0.0, 0.0)
    m = np.array([[1, 0, -ox], [0, 1, -oy], [0, 0, 1]]) @ _canvas_transform(h, w, p)
    inv = np.linalg.inv(m)
    # affine_transform works in (row, col) = (y, x) order
    mat = np.array([[inv[1, 1], inv[1, 0]], [inv[0, 1], inv[0, 0]]])
    off = np.array([inv[1, 2], inv[0, 2]])
    # pixel centres sit at +0.5; shift so the map acts on centres
    centre_off = off + mat @ np.array([0.5, 0.5]) - np.array([0.5, 0.5])
    fill = sample.image.mean(axis=(1, 2))
    out = np.stack([
        affine_transform(sample.image[c].astype(np.float64), mat, offset=centre_off, order=1,
                         mode="constant", cval=float(fill[c]))
        for c in range(3)
    ]).astype(np.float32)
    polys, heights = [], []
    for poly, ht in zip(sample.instances, sample.heights or [0.0] * len(sample.instances)):
        moved = poly.vertices @ m[:2, :2].T + m[:2, 2]
        full = Polygon(moved)
        clipped = clip_to_rect(moved, 0.0, 0.0, float(w), float(h))
        if len(clipped) < 3:
            continue
        try:
            cp = Polygon(clipped)
        except GeometryError:
            continue
        if cp.area < min_visible * full.area:
            continue
        polys.append(cp)
        heights.append(ht * p.scale)
    return SceneSample(out, polys, sample.seed, heights)


def augment(sample: SceneSample, seed: int, params: AugmentParams | None = None) -> SceneSample:
    """Random scale, rotation, crop and horizontal flip; ``params`` overrides the draws."""
    if params is None:
        params = draw_augment_params(sample, seed)
    return apply_augment(sample, params)


# -- file formats -------------------------------------------------------------------

def write_image_ppm(path, image: np.ndarray):
    """Binary P6, maxval 255, from a (3, H, W) float image in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes())


def read_image_ppm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens: list[tuple[str, int]] = []
    pos, line = 0, 1
    while len(tokens) < 4:
        if pos >= len(blob):
            raise DataError(f"{path}: line {line}: truncated PPM header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end
            continue
        if ch.isspace():
            line += ch == b"\n"
            pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append((blob[start:pos].decode("ascii", "replace"), line))
    magic, (ws, lw), (hs, lh), (ms, lm) = tokens[0][0], tokens[1], tokens[2], tokens[3]
    if magic != "P6":
        raise DataError(f"{path}: line {tokens[0][1]}: expected P6 magic, got {magic!r}")
    try:
        w, h, maxval = int(ws), int(hs), int(ms)
    except ValueError as exc:
        raise DataError(f"{path}: line {lw}: malformed PPM dimensions") from exc
    if maxval != 255:
        raise DataError(f"{path}: line {lm}: only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    payload = blob[pos : pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise DataError(f"{path}: pixel payload truncated ({len(payload)} of {3 * w * h} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def format_polygon(poly: Polygon, score: float | None = None) -> str:
    coords = ",".join(str(int(round(v))) for v in poly.flat())
    return coords if score is None else f"{coords},{score:.6f}"


def write_annotations(path, polys: list[Polygon]):
    Path(path).write_text("".join(format_polygon(p) + "\n" for p in polys))


def parse_annotation_line(text: str, lineno: int, source: str = "<annotations>", with_score: bool = False):
    parts = [p.strip() for p in text.strip().split(",")]
    score = None
    if with_score:
        if len(parts) < 7:
            raise DataError(f"{source}: line {lineno}: expected coordinates plus a score")
        try:
            score = float(parts[-1])
        except ValueError as exc:
            raise DataError(f"{source}: line {lineno}: bad score {parts[-1]!r}") from exc
        parts = parts[:-1]
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise DataError(f"{source}: line {lineno}: non-integer coordinate") from exc
    if len(vals) % 2:
        raise DataError(f"{source}: line {lineno}: odd number of coordinates ({len(vals)})")
    if len(vals) < 6:
        raise DataError(f"{source}: line {lineno}: need at least 3 points")
    try:
        poly = Polygon(np.array(vals, dtype=np.float64).reshape(-1, 2))
    except GeometryError as exc:
        raise DataError(f"{source}: line {lineno}: {exc}") from exc
    return poly, score


def read_annotations(path) -> list[Polygon]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            out.append(parse_annotation_line(line, n, str(path))[0])
    return out


def read_detections(path) -> list[tuple[Polygon, float]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if line.strip():
            out.append(parse_annotation_line(line, n, str(path), with_score=True))
    return out


# -- dataset directories ------------------------------------------------------------

def sample_id(index: int) -> str:
    return f"{index:06d}"


def write_dataset(root, samples: list[tuple[str, SceneSample]]):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gts").mkdir(parents=True, exist_ok=True)
    for sid, s in samples:
        write_image_ppm(root / "images" / f"{sid}.ppm", s.image)
        write_annotations(root / "gts" / f"{sid}.txt", s.instances)
    (root / "manifest.txt").write_text("".join(f"{sid}\n" for sid, _ in samples))


def read_manifest(root) -> list[str]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise DataError(f"{root}: no manifest.txt")
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]


def load_dataset(root) -> list[tuple[str, SceneSample]]:
    root = Path(root)
    out = []
    for sid in read_manifest(root):
        img_path = root / "images" / f"{sid}.ppm"
        gt_path = root / "gts" / f"{sid}.txt"
        if not img_path.exists() or not gt_path.exists():
            raise DataError(f"{root}: missing files for id {sid}")
        out.append((sid, SceneSample(read_image_ppm(img_path), read_annotations(gt_path), seed=0)))
    return out


def generate_split(seed: int, count: int, cfg: SynthConfig, start: int = 0) -> list[tuple[str, SceneSample]]:
    return [(sample_id(i), generate_sample(derive_seed(seed, i), cfg)) for i in range(start, start + count)]
