"""Single-image inference at a fixed shorter side."""
from __future__ import annotations

import numpy as np

from .geometry import polygon_iou
from .model import ATTR
from .ops import resize_bilinear
from .postprocess import Detection, extract_detections, rescale_detections
from .tensor import no_grad


def resize_short_side(image: np.ndarray, short_side: int) -> np.ndarray:
    _, h, w = image.shape
    s = short_side / min(h, w)
    return resize_bilinear(image, max(32, int(round(h * s))), max(32, int(round(w * s))))


def detect(model: ATTR, image: np.ndarray, short_side: int | None = None, conf_thresh: float | None = None,
           keep_largest_component: bool | None = None) -> list[Detection]:
    """Detections in the coordinates of ``image``."""
    cfg = model.cfg
    short_side = cfg.infer_short_side if short_side is None else short_side
    conf_thresh = cfg.conf_thresh if conf_thresh is None else conf_thresh
    keep = cfg.keep_largest_component if keep_largest_component is None else keep_largest_component
    _, h, w = image.shape
    resized = resize_short_side(image, short_side) if short_side else image
    with no_grad():
        out = model(resized)
    dets = extract_detections(out, conf_thresh, keep_largest_component=keep)
    rh, rw = resized.shape[1:]
    if (rh, rw) != (h, w):
        dets = rescale_detections(dets, w / rw, h / rh)
    return dets


def polygon_nms(dets: list[Detection], iou_thresh: float = 0.5) -> list[Detection]:
    """Greedy suppression: keep the most confident of any overlapping group."""
    kept: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.confidence):
        if all(polygon_iou(d.polygon, k.polygon) < iou_thresh for k in kept):
            kept.append(d)
    return kept


def detect_late_fusion(model: ATTR, image: np.ndarray, scales=(0.5, 1.0, 2.0), short_side: int | None = None,
                       conf_thresh: float | None = None, iou_thresh: float = 0.5) -> list[Detection]:
    """Run ``model`` once per image scale and merge the results with polygon NMS."""
    short_side = model.cfg.infer_short_side if short_side is None else short_side
    short_side = short_side or min(image.shape[1:])
    merged = []
    for s in scales:
        merged += detect(model, image, short_side=int(round(short_side * s)), conf_thresh=conf_thresh)
    return polygon_nms(merged, iou_thresh)
