import numpy as np
import pytest

from attrdet.decoder import StageOutput, TextInstanceSet
from attrdet.geometry import Polygon, polygon_iou
from attrdet.postprocess import extract_detections, rescale_detections, score_instance
from attrdet.tensor import Tensor


def logit(p):
    return np.log(p / (1 - p))


def instance_set(masks, class_logits, cell=(4.0, 4.0), source=None):
    masks = np.asarray(masks, dtype=np.float64)
    n, h, w = masks.shape
    source = source or (h * cell[1], w * cell[0])
    meta = {"grid": (h, w), "cell": cell, "source_size": source}
    stage = StageOutput(Tensor(masks.reshape(n, -1)), Tensor(np.asarray(class_logits, dtype=np.float64)))
    return TextInstanceSet([stage], (h, w), meta=meta)


def rect(x0, y0, x1, y1):
    return Polygon(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float))


def test_score_rules():
    assert score_instance(np.full(5, 60.0), 1.0) == pytest.approx(1.0)
    assert score_instance(logit(np.array([0.6, 1 - 1e-12, 0.2])), 0.8) == pytest.approx(0.64, abs=1e-6)
    assert score_instance(np.full(4, -1.0), 0.99) == 0.0


def test_score_monotone_in_class_probability():
    m = np.array([2.0, -1.0, 0.5, 3.0])
    scores = [score_instance(m, p) for p in np.linspace(0, 1, 11)]
    assert scores == sorted(scores)


def test_zero_logits_give_nothing():
    inst = instance_set(np.zeros((4, 12, 12)), np.zeros(4))
    assert extract_detections(inst) == []


def test_rectangle_mask_round_trip():
    h, w = 24, 32
    masks = np.full((1, h, w), -8.0)
    masks[0, 6:14, 4:26] = 8.0
    dets = extract_detections(instance_set(masks, [6.0]))
    assert len(dets) == 1
    # cell centre (i + 0.5) * 4 inside the box means the box spans [16, 104] x [24, 56]
    assert polygon_iou(dets[0].polygon, rect(16, 24, 104, 56)) >= 0.95


def test_two_blobs_share_confidence():
    masks = np.full((1, 20, 20), -8.0)
    masks[0, 2:6, 2:8] = 8.0
    masks[0, 12:18, 10:18] = 8.0
    dets = extract_detections(instance_set(masks, [5.0]))
    assert len(dets) == 2
    assert dets[0].confidence == dets[1].confidence
    largest = extract_detections(instance_set(masks, [5.0]), keep_largest_component=True)
    assert len(largest) == 1
    assert largest[0].polygon.area == max(d.polygon.area for d in dets) > min(d.polygon.area for d in dets)


def test_below_threshold_dropped_and_sorted():
    masks = np.full((3, 16, 16), -8.0)
    for t, (a, b) in enumerate([(1, 5), (6, 10), (11, 15)]):
        masks[t, a:b, 2:12] = 8.0
    dets = extract_detections(instance_set(masks, [logit(0.3), logit(0.9), logit(0.7)]))
    assert [d.query for d in dets] == [1, 2]
    assert dets[0].confidence > dets[1].confidence


def test_polygons_inside_source_image():
    masks = np.full((1, 10, 10), -8.0)
    masks[0, :, 5:] = 8.0
    # source smaller than the padded grid: content stops at 30 x 30 pixels
    dets = extract_detections(instance_set(masks, [5.0], cell=(4.0, 4.0), source=(30, 30)))
    for d in dets:
        x0, y0, x1, y1 = d.polygon.bounds
        assert x0 >= 0 and y0 >= 0 and x1 <= 30 and y1 <= 30


def test_rescale_detections():
    masks = np.full((1, 16, 16), -8.0)
    masks[0, 4:12, 4:12] = 8.0
    (det,) = extract_detections(instance_set(masks, [5.0]))
    (half,) = rescale_detections([det], 0.5, 0.5)
    assert half.polygon.area == pytest.approx(det.polygon.area / 4)
