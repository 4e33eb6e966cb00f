"""Polygon arithmetic: areas, rasterised IoU, and mask-to-polygon tracing.

Coordinates are (x, y) in pixels with y pointing down. Pixel (i, j) covers
the square [j, j + 1] x [i, i + 1]. Polygons are stored with a positive
shoelace area.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError


class GeometryError(ValueError):
    pass


def signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _dedupe(pts: np.ndarray) -> np.ndarray:
    keep = np.any(pts != np.roll(pts, 1, axis=0), axis=1)
    if not keep.any():
        return pts[:1]
    return pts[keep]


def _segments_cross(p1, p2, q1, q2) -> np.ndarray:
    """Vectorised test of whether segments p1p2 and q1q2 intersect (touching counts)."""
    def orient(a, b, c):
        return np.sign((b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1])
                       - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0]))

    def on_seg(a, b, c):
        return ((np.minimum(a[..., 0], b[..., 0]) <= c[..., 0]) & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
                & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1]) & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1])))

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    touch = ((o1 == 0) & on_seg(p1, p2, q1)) | ((o2 == 0) & on_seg(p1, p2, q2)) \
        | ((o3 == 0) & on_seg(q1, q2, p1)) | ((o4 == 0) & on_seg(q1, q2, p2))
    return proper | touch


def is_simple(pts: np.ndarray) -> bool:
    """True when no two non-adjacent edges of the closed ring meet."""
    n = len(pts)
    if n < 3:
        return False
    a = pts
    b = np.roll(pts, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    # the first and last edges share a vertex
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return True
    return not bool(_segments_cross(a[i], b[i], a[j], b[j]).any())


@dataclass(frozen=True, eq=False)
class Polygon:
    """Simple polygon with >= 3 vertices and positive shoelace area.

    Construction repairs input: consecutive duplicate vertices are dropped,
    and a self-intersecting ring is replaced by its convex hull.
    """

    vertices: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        pts = _dedupe(pts)
        if len(np.unique(pts, axis=0)) < 3:
            raise GeometryError("polygon needs at least 3 distinct points")
        if not is_simple(pts):
            try:
                hull = ConvexHull(pts)
            except QhullError as exc:
                raise GeometryError("degenerate polygon (collinear points)") from exc
            pts = pts[hull.vertices]
        area = signed_area(pts)
        if area == 0:
            raise GeometryError("polygon has zero area")
        if area < 0:
            pts = pts[::-1]
        pts.setflags(write=False)
        object.__setattr__(self, "vertices", pts)

    def __len__(self):
        return len(self.vertices)

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def transformed(self, matrix: np.ndarray) -> "Polygon":
        """Apply a 2x3 affine map to every vertex."""
        m = np.asarray(matrix, dtype=np.float64)
        pts = self.vertices @ m[:, :2].T + m[:, 2]
        return Polygon(pts)

    def scaled(self, sx: float, sy: float | None = None) -> "Polygon":
        sy = sx if sy is None else sy
        return Polygon(self.vertices * np.array([sx, sy]))

    def flat(self) -> list[float]:
        return self.vertices.reshape(-1).tolist()

    def __eq__(self, other):
        return isinstance(other, Polygon) and np.array_equal(self.vertices, other.vertices)

    def __hash__(self):
        return hash(self.vertices.tobytes())


def polygon_area(p: Polygon) -> float:
    return p.area


# -- rasterisation -----------------------------------------------------------

def rasterize(poly: Polygon, x0: float, y0: float, dx: float, dy: float, nx: int, ny: int) -> np.ndarray:
    """Boolean (ny, nx) mask of cells whose centre lies inside ``poly``.

    Cell (r, c) has its centre at (x0 + (c + .5) dx, y0 + (r + .5) dy).
    Even-odd scanline fill, exact for the sampled centres.
    """
    pts = poly.vertices
    a, b = pts, np.roll(pts, -1, axis=0)
    yc = y0 + (np.arange(ny) + 0.5) * dy
    ya, yb = a[:, 1][:, None], b[:, 1][:, None]
    lo, hi = np.minimum(ya, yb), np.maximum(ya, yb)
    hit = (lo <= yc[None, :]) & (yc[None, :] < hi)
    e_idx, r_idx = np.nonzero(hit)
    if len(e_idx) == 0:
        return np.zeros((ny, nx), dtype=bool)
    xa, xb = a[e_idx, 0], b[e_idx, 0]
    ya1, yb1 = a[e_idx, 1], b[e_idx, 1]
    t = (yc[r_idx] - ya1) / (yb1 - ya1)
    xs = xa + t * (xb - xa)
    col = np.floor((xs - x0) / dx - 0.5).astype(np.int64) + 1
    col = np.clip(col, 0, nx)
    toggles = np.zeros((ny, nx + 1), dtype=np.int32)
    np.add.at(toggles, (r_idx, col), 1)
    return (np.cumsum(toggles[:, :nx], axis=1) % 2).astype(bool)


def rasterize_on_grid(poly: Polygon, shape: tuple[int, int], cell: float = 1.0) -> np.ndarray:
    """Rasterise onto an image-aligned grid of ``shape`` cells of size ``cell`` px."""
    return rasterize(poly, 0.0, 0.0, cell, cell, shape[1], shape[0])


def _joint_masks(a: Polygon, b: Polygon, raster_res: int):
    ax0, ay0, ax1, ay1 = a.bounds
    bx0, by0, bx1, by1 = b.bounds
    if ax1 <= bx0 or bx1 <= ax0 or ay1 <= by0 or by1 <= ay0:
        return None
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    dx = (max(ax1, bx1) - x0) / raster_res
    dy = (max(ay1, by1) - y0) / raster_res
    ma = rasterize(a, x0, y0, dx, dy, raster_res, raster_res)
    mb = rasterize(b, x0, y0, dx, dy, raster_res, raster_res)
    return ma, mb


def polygon_iou(a: Polygon, b: Polygon, raster_res: int = 512) -> float:
    masks = _joint_masks(a, b, raster_res)
    if masks is None:
        return 0.0
    ma, mb = masks
    union = np.count_nonzero(ma | mb)
    return np.count_nonzero(ma & mb) / union if union else 0.0


def intersection_fractions(a: Polygon, b: Polygon, raster_res: int = 512) -> tuple[float, float]:
    """(|A & B| / |A|, |A & B| / |B|) by cell counting on the joint grid."""
    masks = _joint_masks(a, b, raster_res)
    if masks is None:
        return 0.0, 0.0
    ma, mb = masks
    inter = np.count_nonzero(ma & mb)
    na, nb = np.count_nonzero(ma), np.count_nonzero(mb)
    return (inter / na if na else 0.0), (inter / nb if nb else 0.0)


def iou_and_fractions(a: Polygon, b: Polygon, raster_res: int = 512) -> tuple[float, float, float]:
    """IoU plus both coverage fractions from a single rasterisation."""
    masks = _joint_masks(a, b, raster_res)
    if masks is None:
        return 0.0, 0.0, 0.0
    ma, mb = masks
    inter = np.count_nonzero(ma & mb)
    union = np.count_nonzero(ma | mb)
    na, nb = np.count_nonzero(ma), np.count_nonzero(mb)
    return (inter / union if union else 0.0, inter / na if na else 0.0, inter / nb if nb else 0.0)


def clip_to_rect(pts: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a ring against an axis-aligned rectangle."""
    def clip(poly, inside, cross):
        out = []
        n = len(poly)
        for k in range(n):
            cur, prev = poly[k], poly[k - 1]
            if inside(cur):
                if not inside(prev):
                    out.append(cross(prev, cur))
                out.append(cur)
            elif inside(prev):
                out.append(cross(prev, cur))
        return out

    def x_cross(xv):
        return lambda p, q: (xv, p[1] + (q[1] - p[1]) * (xv - p[0]) / (q[0] - p[0]))

    def y_cross(yv):
        return lambda p, q: (p[0] + (q[0] - p[0]) * (yv - p[1]) / (q[1] - p[1]), yv)

    poly = [tuple(p) for p in np.asarray(pts, dtype=np.float64)]
    for inside, cross in ((lambda p: p[0] >= x0, x_cross(x0)), (lambda p: p[0] <= x1, x_cross(x1)),
                          (lambda p: p[1] >= y0, y_cross(y0)), (lambda p: p[1] <= y1, y_cross(y1))):
        if not poly:
            break
        poly = clip(poly, inside, cross)
    return np.array(poly, dtype=np.float64).reshape(-1, 2)


# -- contour tracing -----------------------------------------------------------

# Directed boundary edges around a foreground pixel, interior on the right
# when walking in the y-down frame: (neighbour offset, start corner, end corner)
_SIDES = (
    ((-1, 0), (0, 0), (1, 0)),  # top: left -> right
    ((0, 1), (1, 0), (1, 1)),   # right: top -> bottom
    ((1, 0), (1, 1), (0, 1)),   # bottom: right -> left
    ((0, -1), (0, 1), (0, 0)),  # left: bottom -> top
)


def _boundary_loops(comp: np.ndarray) -> list[np.ndarray]:
    """Walk the pixel-edge boundary of a binary component into closed loops."""
    h, w = comp.shape
    padded = np.pad(comp, 1)
    out_edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for (di, dj), (sx, sy), (ex, ey) in _SIDES:
        nb = padded[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]
        ii, jj = np.nonzero(comp & ~nb)
        for i, j in zip(ii.tolist(), jj.tolist()):
            out_edges.setdefault((j + sx, i + sy), []).append((j + ex, i + ey))
    loops = []
    while out_edges:
        start = min(out_edges)
        loop = [start]
        prev, cur = None, start
        while True:
            cands = out_edges[cur]
            if len(cands) == 1 or prev is None:
                nxt = cands[0]
            else:
                # pinch vertex: take the right turn so diagonal neighbours stay apart
                din = (cur[0] - prev[0], cur[1] - prev[1])
                right = (-din[1], din[0])
                nxt = next((c for c in cands if (c[0] - cur[0], c[1] - cur[1]) == right), cands[0])
            cands.remove(nxt)
            if not cands:
                del out_edges[cur]
            prev, cur = cur, nxt
            if cur == start:
                break
            loop.append(cur)
        loops.append(np.array(loop, dtype=np.float64))
    return loops


def douglas_peucker(pts: np.ndarray, tol: float) -> np.ndarray:
    """Simplify an open polyline, keeping both endpoints."""
    if len(pts) < 3:
        return pts
    keep = np.zeros(len(pts), dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, len(pts) - 1)]
    while stack:
        s, e = stack.pop()
        if e - s < 2:
            continue
        seg = pts[e] - pts[s]
        rel = pts[s + 1 : e] - pts[s]
        norm = np.hypot(*seg)
        if norm == 0:
            d = np.hypot(rel[:, 0], rel[:, 1])
        else:
            d = np.abs(seg[0] * rel[:, 1] - seg[1] * rel[:, 0]) / norm
        k = int(np.argmax(d))
        if d[k] > tol:
            m = s + 1 + k
            keep[m] = True
            stack.append((s, m))
            stack.append((m, e))
    return pts[keep]


def simplify_ring(pts: np.ndarray, tol: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring, split at the two mutually far points."""
    if len(pts) <= 4:
        return pts
    a = 0
    b = int(np.argmax(((pts - pts[a]) ** 2).sum(axis=1)))
    a = int(np.argmax(((pts - pts[b]) ** 2).sum(axis=1)))
    ring = np.roll(pts, -a, axis=0)
    b = (b - a) % len(pts)
    first = douglas_peucker(ring[: b + 1], tol)
    second = douglas_peucker(np.vstack([ring[b:], ring[:1]]), tol)
    out = np.vstack([first[:-1], second[:-1]])
    return out


def trace_contours(mask: np.ndarray, min_pixels: int = 9, tolerance: float = 1.0) -> list[Polygon]:
    """One polygon per 4-connected foreground component of ``mask``.

    The outer pixel-edge boundary is followed (holes are filled first), then
    simplified with Douglas-Peucker. Components under ``min_pixels`` pixels
    are discarded. Polygons come out in mask pixel units.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask)
    polys = []
    if n == 0:
        return polys
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    boxes = ndimage.find_objects(labels)
    for lab in range(1, n + 1):
        if sizes[lab] < min_pixels:
            continue
        sl = boxes[lab - 1]
        comp = ndimage.binary_fill_holes(labels[sl] == lab)
        loops = _boundary_loops(comp)
        loop = max(loops, key=signed_area)
        loop = simplify_ring(loop, tolerance)
        loop = loop + np.array([sl[1].start, sl[0].start], dtype=np.float64)
        try:
            polys.append(Polygon(loop))
        except GeometryError:
            continue
    return polys
