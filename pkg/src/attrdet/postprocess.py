"""Predicted instance masks to scored polygons in source-image coordinates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .decoder import TextInstanceSet
from .geometry import GeometryError, Polygon, clip_to_rect, trace_contours


@dataclass(frozen=True)
class Detection:
    polygon: Polygon
    confidence: float
    query: int = -1


def score_instance(mask_logits_t, p_t: float) -> float:
    """Class probability times the mean foreground mask probability (0 if empty)."""
    probs = 1.0 / (1.0 + np.exp(-np.asarray(mask_logits_t, dtype=np.float64)))
    fg = probs[probs > 0.5]
    return float(p_t * fg.mean()) if fg.size else 0.0


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def extract_detections(instances: TextInstanceSet, conf_thresh: float = 0.5, meta: dict | None = None,
                       keep_largest_component: bool = False, min_pixels: int = 9,
                       tolerance_px: float = 1.0) -> list[Detection]:
    """Threshold, trace and rescale every confident query; sorted by confidence.

    ``tolerance_px`` is the simplification tolerance in source pixels.
    Each connected component of a query's mask becomes its own detection.
    """
    meta = meta if meta is not None else instances.meta
    h, w = instances.grid
    cx, cy = meta["cell"]
    src_h, src_w = meta["source_size"]
    logits = instances.mask_logits.data.reshape(-1, h, w)
    probs = instances.class_probs()
    tol = tolerance_px / max(cx, cy)
    dets = []
    for t in range(len(logits)):
        conf = score_instance(logits[t], probs[t])
        if conf < conf_thresh or conf == 0.0:
            continue
        mask = logits[t] > 0.0
        if keep_largest_component:
            mask = _largest_component(mask)
        for poly in trace_contours(mask, min_pixels=min_pixels, tolerance=tol):
            pts = clip_to_rect(poly.vertices * np.array([cx, cy]), 0.0, 0.0, float(src_w), float(src_h))
            if len(pts) < 3:
                continue
            try:
                dets.append(Detection(Polygon(pts), conf, t))
            except GeometryError:
                continue
    dets.sort(key=lambda d: -d.confidence)
    return dets


def rescale_detections(dets: list[Detection], sx: float, sy: float) -> list[Detection]:
    return [Detection(d.polygon.scaled(sx, sy), d.confidence, d.query) for d in dets]
